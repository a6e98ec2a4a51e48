#include "retroflow/canonical.hpp"

#include <algorithm>
#include <array>
#include <tuple>

#include "retroflow/smiles.hpp"

namespace retroflow {

namespace {

/// Rank atoms by their standalone attributes (maps excluded; annotation
/// strings included so callers can fold extra state into the certificate).
std::vector<int> initial_ranks(const MolGraph& g, const std::vector<std::string>* ann) {
    int n = g.num_atoms();
    std::vector<std::string> inv(n);
    for (int i = 0; i < n; ++i) {
        const Atom& a = g.atoms[i];
        inv[i] = a.symbol + "," + std::to_string(a.formal_charge) + "," +
                 (a.aromatic ? "1" : "0") + "," + std::to_string(a.implicit_h);
        if (ann) inv[i] += "," + (*ann)[i];
    }
    std::vector<std::string> sorted = inv;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    std::vector<int> ranks(n);
    for (int i = 0; i < n; ++i)
        ranks[i] = static_cast<int>(std::lower_bound(sorted.begin(), sorted.end(), inv[i]) -
                                    sorted.begin());
    return ranks;
}

int count_distinct(const std::vector<int>& ranks) {
    std::vector<int> s = ranks;
    std::sort(s.begin(), s.end());
    return static_cast<int>(std::unique(s.begin(), s.end()) - s.begin());
}

/// One sweep of neighborhood refinement until the partition stops splitting.
std::vector<int> refine(const MolGraph& g, std::vector<int> ranks) {
    int n = g.num_atoms();
    if (n == 0) return ranks;
    int distinct = count_distinct(ranks);
    while (true) {
        std::vector<std::vector<long long>> sig(n);
        for (int i = 0; i < n; ++i) {
            sig[i].push_back(ranks[i]);
            std::vector<long long> nbrs;
            for (const auto& [nbr, bidx] : g.neighbors(i)) {
                long long order = static_cast<long long>(g.bonds[bidx].order);
                nbrs.push_back(order * (2LL * n + 1) + ranks[nbr]);
            }
            std::sort(nbrs.begin(), nbrs.end());
            sig[i].insert(sig[i].end(), nbrs.begin(), nbrs.end());
        }
        std::vector<std::vector<long long>> sorted = sig;
        std::sort(sorted.begin(), sorted.end());
        sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
        for (int i = 0; i < n; ++i)
            ranks[i] = static_cast<int>(
                std::lower_bound(sorted.begin(), sorted.end(), sig[i]) - sorted.begin());
        int now = static_cast<int>(sorted.size());
        if (now == distinct) return ranks;  // refinement can only split; fixpoint
        distinct = now;
    }
}

std::string build_key(const MolGraph& g, const std::vector<int>& ranks,
                      const std::vector<std::string>* ann) {
    int n = g.num_atoms();
    std::vector<int> atom_at(n);  // canonical position -> atom index
    for (int i = 0; i < n; ++i) atom_at[ranks[i]] = i;
    std::string key = "n" + std::to_string(n) + "m" + std::to_string(g.num_bonds()) + ";";
    for (int pos = 0; pos < n; ++pos) {
        const Atom& a = g.atoms[atom_at[pos]];
        key += a.symbol + "," + std::to_string(a.formal_charge) + "," + (a.aromatic ? "1" : "0") +
               "," + std::to_string(a.implicit_h);
        if (ann) key += "," + (*ann)[atom_at[pos]];
        key += ";";
    }
    std::vector<std::array<int, 3>> edges;
    edges.reserve(g.num_bonds());
    for (const Bond& b : g.bonds) {
        int ra = ranks[b.a], rb = ranks[b.b];
        edges.push_back({std::min(ra, rb), std::max(ra, rb), static_cast<int>(b.order)});
    }
    std::sort(edges.begin(), edges.end());
    for (const auto& e : edges)
        key += std::to_string(e[0]) + "-" + std::to_string(e[1]) + ":" + std::to_string(e[2]) + ";";
    return key;
}

struct Search {
    const MolGraph& g;
    const std::vector<std::string>* ann;
    bool have_best = false;
    std::string best_key;
    std::vector<int> best_ranks;

    void run(std::vector<int> ranks) {
        ranks = refine(g, ranks);
        int n = g.num_atoms();
        // First tied class (smallest rank value shared by >= 2 atoms).
        std::vector<int> class_size(2 * n + 1, 0);
        for (int r : ranks) ++class_size[r];
        int tied_rank = -1;
        for (int r = 0; r < static_cast<int>(class_size.size()); ++r) {
            if (class_size[r] > 1) {
                tied_rank = r;
                break;
            }
        }
        if (tied_rank < 0) {
            std::string key = build_key(g, ranks, ann);
            if (!have_best || key < best_key) {
                have_best = true;
                best_key = std::move(key);
                best_ranks = std::move(ranks);
            }
            return;
        }
        // Individualize each member in turn; the smallest certificate wins.
        for (int a = 0; a < n; ++a) {
            if (ranks[a] != tied_rank) continue;
            std::vector<int> child(n);
            for (int i = 0; i < n; ++i) child[i] = ranks[i] * 2;
            child[a] -= 1;
            run(std::move(child));
        }
    }
};

}  // namespace

CanonicalResult canonicalize(const MolGraph& g, const std::vector<std::string>* annotations) {
    if (annotations && static_cast<int>(annotations->size()) != g.num_atoms())
        throw std::invalid_argument("canonicalize: annotation size mismatch");
    Search s{g, annotations, false, std::string(), std::vector<int>()};
    s.run(initial_ranks(g, annotations));
    if (!s.have_best) {  // empty graph
        return {std::vector<int>{}, build_key(g, {}, annotations)};
    }
    return {std::move(s.best_ranks), std::move(s.best_key)};
}

std::vector<int> canonical_ranks(const MolGraph& g, const std::vector<std::string>* annotations) {
    return canonicalize(g, annotations).ranks;
}

std::string canonical_key(const MolGraph& g, const std::vector<std::string>* annotations) {
    return canonicalize(g, annotations).key;
}

std::string canonical_smiles(const MolGraph& g) {
    if (g.num_atoms() == 0) return "";
    MolGraph p = g.permuted(canonical_ranks(g));
    // Bond insertion order must also be canonical or adjacency (and thus the
    // writer's branch order) would leak the input ordering.
    for (Bond& b : p.bonds) {
        if (b.a > b.b) std::swap(b.a, b.b);
    }
    std::sort(p.bonds.begin(), p.bonds.end(), [](const Bond& x, const Bond& y) {
        return std::tie(x.a, x.b) < std::tie(y.a, y.b);
    });
    p.rebuild_adjacency();
    return write_smiles(p);
}

std::string canonical_multiset_key(const std::vector<MolGraph>& mols) {
    std::vector<std::string> keys;
    keys.reserve(mols.size());
    for (const MolGraph& m : mols) keys.push_back(canonical_key(m));
    std::sort(keys.begin(), keys.end());
    std::string out;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (i) out += "|";
        out += keys[i];
    }
    return out;
}

}  // namespace retroflow
