#include "retroflow/molgraph.hpp"

#include <algorithm>
#include <cstdlib>
#include <deque>

namespace retroflow {

const std::vector<std::string>& supported_elements() {
    static const std::vector<std::string> kElements = {"B", "C", "N",  "O",  "P", "S",
                                                       "F", "Cl", "Br", "I"};
    return kElements;
}

bool is_supported_element(const std::string& symbol) { return element_index(symbol) >= 0; }

int element_index(const std::string& symbol) {
    const auto& elems = supported_elements();
    for (int i = 0; i < static_cast<int>(elems.size()); ++i) {
        if (elems[i] == symbol) return i;
    }
    return -1;
}

const std::vector<int>& default_valences(const std::string& symbol) {
    static const std::vector<int> kB = {3};
    static const std::vector<int> kC = {4};
    static const std::vector<int> kN = {3};
    static const std::vector<int> kO = {2};
    static const std::vector<int> kP = {3, 5};
    static const std::vector<int> kS = {2, 4, 6};
    static const std::vector<int> kHalogen = {1};
    static const std::vector<int> kNone = {};
    if (symbol == "B") return kB;
    if (symbol == "C") return kC;
    if (symbol == "N") return kN;
    if (symbol == "O") return kO;
    if (symbol == "P") return kP;
    if (symbol == "S") return kS;
    if (symbol == "F" || symbol == "Cl" || symbol == "Br" || symbol == "I") return kHalogen;
    return kNone;
}

int max_valence(const std::string& symbol, int formal_charge) {
    // Carbon loses capacity in either charge direction; boron gains it when
    // negative (borate); other elements trade lone pairs for bonds.
    if (symbol == "C") return 4 - std::abs(formal_charge);
    if (symbol == "B") return 3 - formal_charge;
    const auto& vals = default_valences(symbol);
    if (vals.empty()) throw std::invalid_argument("max_valence: unsupported element " + symbol);
    return vals.back() + formal_charge;
}

int bond_order_int(BondOrder order) {
    switch (order) {
        case BondOrder::Single: return 1;
        case BondOrder::Double: return 2;
        case BondOrder::Triple: return 3;
        case BondOrder::Aromatic: return 1;
    }
    throw std::invalid_argument("bond_order_int: bad order");
}

int MolGraph::add_atom(Atom a) {
    atoms.push_back(std::move(a));
    adj_.emplace_back();
    return static_cast<int>(atoms.size()) - 1;
}

int MolGraph::add_bond(int a, int b, BondOrder order) {
    if (a == b) throw std::invalid_argument("add_bond: self bond");
    if (a < 0 || b < 0 || a >= num_atoms() || b >= num_atoms())
        throw std::invalid_argument("add_bond: atom index out of range");
    if (find_bond(a, b) >= 0) throw std::invalid_argument("add_bond: duplicate bond");
    bonds.push_back({a, b, order});
    int idx = static_cast<int>(bonds.size()) - 1;
    adj_[a].emplace_back(b, idx);
    adj_[b].emplace_back(a, idx);
    return idx;
}

int MolGraph::find_bond(int a, int b) const {
    if (a < 0 || a >= num_atoms()) return -1;
    for (const auto& [nbr, bidx] : adj_[a]) {
        if (nbr == b) return bidx;
    }
    return -1;
}

int MolGraph::valence_used(int i) const {
    int total = 0;
    for (const auto& [nbr, bidx] : adj_[i]) {
        (void)nbr;
        total += bond_order_int(bonds[bidx].order);
    }
    return total;
}

bool MolGraph::valence_ok() const { return first_valence_violation() < 0; }

int MolGraph::first_valence_violation() const {
    for (int i = 0; i < num_atoms(); ++i) {
        const Atom& a = atoms[i];
        if (!is_supported_element(a.symbol)) return i;
        int total = valence_used(i) + a.implicit_h;
        if (total > max_valence(a.symbol, a.formal_charge)) return i;
        if (a.implicit_h < 0) return i;
    }
    return -1;
}

std::vector<int> MolGraph::component_ids() const {
    std::vector<int> comp(num_atoms(), -1);
    int next = 0;
    for (int start = 0; start < num_atoms(); ++start) {
        if (comp[start] >= 0) continue;
        std::deque<int> queue = {start};
        comp[start] = next;
        while (!queue.empty()) {
            int cur = queue.front();
            queue.pop_front();
            for (const auto& [nbr, bidx] : adj_[cur]) {
                (void)bidx;
                if (comp[nbr] < 0) {
                    comp[nbr] = next;
                    queue.push_back(nbr);
                }
            }
        }
        ++next;
    }
    return comp;
}

int MolGraph::num_components() const {
    auto comp = component_ids();
    int best = -1;
    for (int c : comp) best = std::max(best, c);
    return best + 1;
}

MolGraph MolGraph::induced_subgraph(const std::vector<int>& keep) const {
    std::vector<int> remap(num_atoms(), -1);
    MolGraph out;
    for (int idx : keep) {
        if (idx < 0 || idx >= num_atoms()) throw std::invalid_argument("induced_subgraph: bad index");
        if (remap[idx] >= 0) throw std::invalid_argument("induced_subgraph: duplicate index");
        remap[idx] = out.add_atom(atoms[idx]);
    }
    for (const Bond& b : bonds) {
        if (remap[b.a] >= 0 && remap[b.b] >= 0) out.add_bond(remap[b.a], remap[b.b], b.order);
    }
    return out;
}

MolGraph MolGraph::permuted(const std::vector<int>& perm) const {
    if (static_cast<int>(perm.size()) != num_atoms())
        throw std::invalid_argument("permuted: size mismatch");
    MolGraph out;
    out.atoms.resize(num_atoms());
    std::vector<bool> seen(num_atoms(), false);
    for (int i = 0; i < num_atoms(); ++i) {
        int p = perm[i];
        if (p < 0 || p >= num_atoms() || seen[p]) throw std::invalid_argument("permuted: not a permutation");
        seen[p] = true;
        out.atoms[p] = atoms[i];
    }
    out.adj_.resize(num_atoms());
    for (const Bond& b : bonds) out.add_bond(perm[b.a], perm[b.b], b.order);
    return out;
}

MolGraph MolGraph::without_maps() const {
    MolGraph out = *this;
    for (Atom& a : out.atoms) a.map_number = 0;
    return out;
}

void MolGraph::rebuild_adjacency() {
    adj_.assign(atoms.size(), {});
    for (int i = 0; i < num_bonds(); ++i) {
        adj_[bonds[i].a].emplace_back(bonds[i].b, i);
        adj_[bonds[i].b].emplace_back(bonds[i].a, i);
    }
}

std::vector<MolGraph> split_components(const MolGraph& g) {
    auto comp = g.component_ids();
    int n = g.num_components();
    std::vector<std::vector<int>> members(n);
    for (int i = 0; i < g.num_atoms(); ++i) members[comp[i]].push_back(i);
    std::vector<MolGraph> out;
    out.reserve(n);
    for (const auto& m : members) out.push_back(g.induced_subgraph(m));
    return out;
}

MolGraph merge_graphs(const std::vector<MolGraph>& parts) {
    MolGraph out;
    for (const MolGraph& part : parts) {
        int base = out.num_atoms();
        for (const Atom& a : part.atoms) out.add_atom(a);
        for (const Bond& b : part.bonds) out.add_bond(base + b.a, base + b.b, b.order);
    }
    return out;
}

}  // namespace retroflow
