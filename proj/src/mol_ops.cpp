#include "retroflow/mol_ops.hpp"

#include <algorithm>
#include <cstdint>

namespace retroflow {

MolGraph scaffold(const MolGraph& g) {
    MolGraph work = g;
    std::vector<bool> dead(work.num_atoms(), false);
    while (true) {
        // Degrees over live atoms only.
        std::vector<int> degree(work.num_atoms(), 0);
        for (const Bond& b : work.bonds) {
            if (!dead[b.a] && !dead[b.b]) {
                ++degree[b.a];
                ++degree[b.b];
            }
        }
        std::vector<int> prune;
        for (int i = 0; i < work.num_atoms(); ++i) {
            if (!dead[i] && degree[i] <= 1) prune.push_back(i);
        }
        if (prune.empty()) break;
        for (int i : prune) dead[i] = true;
        // Surviving neighbors absorb the cut bond as implicit hydrogens.
        for (const Bond& b : work.bonds) {
            if (dead[b.a] != dead[b.b]) {
                int survivor = dead[b.a] ? b.b : b.a;
                int gone = dead[b.a] ? b.a : b.b;
                bool gone_now =
                    std::find(prune.begin(), prune.end(), gone) != prune.end();
                if (gone_now) work.atoms[survivor].implicit_h += bond_order_int(b.order);
            }
        }
    }
    std::vector<int> keep;
    for (int i = 0; i < work.num_atoms(); ++i)
        if (!dead[i]) keep.push_back(i);
    return work.induced_subgraph(keep);
}

std::vector<std::vector<double>> random_walk_pe(const MolGraph& g, int steps) {
    if (steps < 1) throw std::invalid_argument("random_walk_pe: steps must be >= 1");
    int n = g.num_atoms();
    std::vector<std::vector<double>> out(n, std::vector<double>(steps, 0.0));
    // One probability vector per start atom; step = multiply by D^-1 A.
    for (int start = 0; start < n; ++start) {
        if (g.degree(start) == 0) continue;  // isolated atom: all-zero row
        std::vector<double> p(n, 0.0), q(n, 0.0);
        p[start] = 1.0;
        for (int k = 0; k < steps; ++k) {
            std::fill(q.begin(), q.end(), 0.0);
            for (int i = 0; i < n; ++i) {
                if (p[i] == 0.0) continue;
                int d = g.degree(i);
                if (d == 0) continue;  // walk is stuck; mass stays put? it cannot reach 'start' anyway
                double share = p[i] / d;
                for (const auto& [nbr, bidx] : g.neighbors(i)) {
                    (void)bidx;
                    q[nbr] += share;
                }
            }
            std::swap(p, q);
            out[start][k] = p[start];
        }
    }
    return out;
}

Features featurize(const MolGraph& g) {
    Features f;
    f.nodes.rows = g.num_atoms();
    f.nodes.cols = kNodeFeatureDim;
    f.nodes.data.assign(static_cast<std::size_t>(f.nodes.rows) * kNodeFeatureDim, 0.0);
    auto rwpe = random_walk_pe(g, kRandomWalkSteps);
    for (int i = 0; i < g.num_atoms(); ++i) {
        const Atom& a = g.atoms[i];
        double* row = f.nodes.data.data() + static_cast<std::size_t>(i) * kNodeFeatureDim;
        int col = 0;
        int elem = element_index(a.symbol);
        if (elem < 0) throw std::invalid_argument("featurize: unsupported element " + a.symbol);
        row[col + elem] = 1.0;
        col += 10;
        row[col + std::min(g.degree(i), 6)] = 1.0;
        col += 7;
        row[col] = a.aromatic ? 1.0 : 0.0;
        col += 1;
        row[col + std::clamp(a.formal_charge, -2, 2) + 2] = 1.0;
        col += 5;
        row[col + std::min(a.implicit_h, 4)] = 1.0;
        col += 5;
        for (int k = 0; k < kRandomWalkSteps; ++k) row[col + k] = rwpe[i][k];
    }
    f.edges.rows = g.num_bonds();
    f.edges.cols = kEdgeFeatureDim;
    f.edges.data.assign(static_cast<std::size_t>(f.edges.rows) * kEdgeFeatureDim, 0.0);
    for (int b = 0; b < g.num_bonds(); ++b) {
        int order = static_cast<int>(g.bonds[b].order);  // 1..4
        f.edges.data[static_cast<std::size_t>(b) * kEdgeFeatureDim + (order - 1)] = 1.0;
    }
    return f;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

char bond_token(BondOrder o) {
    switch (o) {
        case BondOrder::Single: return '-';
        case BondOrder::Double: return '=';
        case BondOrder::Triple: return '#';
        case BondOrder::Aromatic: return ':';
    }
    return '?';
}

std::string atom_path_token(const Atom& a) {
    std::string t = a.aromatic ? "a" : "A";
    t += a.symbol;
    if (a.formal_charge != 0) t += std::to_string(a.formal_charge);
    return t;
}

void extend_paths(const MolGraph& g, std::vector<int>& path, std::vector<bool>& on_path,
                  std::string& fwd, std::vector<std::string>& out) {
    // Record the direction-normalized string for the current path.
    {
        std::string rev;
        for (int i = static_cast<int>(path.size()) - 1; i >= 0; --i) {
            rev += atom_path_token(g.atoms[path[i]]);
            if (i > 0) rev += bond_token(g.bonds[g.find_bond(path[i], path[i - 1])].order);
        }
        out.push_back(std::min(fwd, rev));
    }
    if (static_cast<int>(path.size()) > 4) return;  // 4 bonds = 5 atoms
    int tail = path.back();
    for (const auto& [nbr, bidx] : g.neighbors(tail)) {
        if (on_path[nbr]) continue;
        std::size_t mark = fwd.size();
        fwd += bond_token(g.bonds[bidx].order);
        fwd += atom_path_token(g.atoms[nbr]);
        path.push_back(nbr);
        on_path[nbr] = true;
        extend_paths(g, path, on_path, fwd, out);
        on_path[nbr] = false;
        path.pop_back();
        fwd.resize(mark);
    }
}

}  // namespace

std::bitset<kFingerprintBits> path_fingerprint(const MolGraph& g) {
    std::vector<std::string> paths;
    std::vector<int> path;
    std::vector<bool> on_path(g.num_atoms(), false);
    for (int start = 0; start < g.num_atoms(); ++start) {
        path = {start};
        on_path[start] = true;
        std::string fwd = atom_path_token(g.atoms[start]);
        extend_paths(g, path, on_path, fwd, paths);
        on_path[start] = false;
    }
    std::bitset<kFingerprintBits> bits;
    for (const std::string& p : paths) bits.set(fnv1a(p) % kFingerprintBits);
    return bits;
}

double tanimoto(const MolGraph& a, const MolGraph& b) {
    auto fa = path_fingerprint(a);
    auto fb = path_fingerprint(b);
    std::size_t inter = (fa & fb).count();
    std::size_t uni = (fa | fb).count();
    if (uni == 0) return 1.0;  // two empty graphs
    return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace retroflow
