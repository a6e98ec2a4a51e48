#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace retroflow {

enum class BondOrder : std::uint8_t { Single = 1, Double = 2, Triple = 3, Aromatic = 4 };

/// Supported element symbols, in feature one-hot order.
const std::vector<std::string>& supported_elements();
bool is_supported_element(const std::string& symbol);
int element_index(const std::string& symbol);  // -1 if unsupported

/// Default valence list used to fill implicit hydrogens on neutral
/// organic-subset atoms (smallest valence >= bond sum wins).
const std::vector<int>& default_valences(const std::string& symbol);

/// Largest total valence (bond orders + aromatic bonus + implicit H)
/// tolerated for an atom of the given symbol and formal charge.
int max_valence(const std::string& symbol, int formal_charge);

struct Atom {
    std::string symbol;
    int formal_charge = 0;
    bool aromatic = false;
    int implicit_h = 0;
    int map_number = 0;  // 0 = unmapped
};

struct Bond {
    int a = -1;
    int b = -1;
    BondOrder order = BondOrder::Single;
};

/// Integer bond order used in valence arithmetic; aromatic counts as 1.
/// The delocalized-system slot is handled at implicit-H fill time (bare
/// aromatic atoms reserve one valence unit), not in the cap check, so
/// pi-donor heteroaromatics (furan O, pyrrole N-H) stay legal.
int bond_order_int(BondOrder order);

class MolGraph {
public:
    std::vector<Atom> atoms;
    std::vector<Bond> bonds;

    int add_atom(Atom a);
    /// Adds a bond and keeps adjacency in sync. Throws std::invalid_argument
    /// on self-bonds or duplicate pairs.
    int add_bond(int a, int b, BondOrder order);

    int num_atoms() const { return static_cast<int>(atoms.size()); }
    int num_bonds() const { return static_cast<int>(bonds.size()); }

    /// Neighbors of atom i as (neighbor index, bond index) pairs.
    const std::vector<std::pair<int, int>>& neighbors(int i) const { return adj_[i]; }
    int degree(int i) const { return static_cast<int>(adj_[i].size()); }

    /// Bond index between a and b, or -1.
    int find_bond(int a, int b) const;

    /// Sum of integer bond orders incident to atom i (aromatic bonds count 1).
    int valence_used(int i) const;

    /// True when every atom satisfies its valence cap.
    bool valence_ok() const;
    /// Index of the first atom violating its valence cap, or -1.
    int first_valence_violation() const;

    /// Connected component id per atom (0-based, in order of first atom seen).
    std::vector<int> component_ids() const;
    int num_components() const;

    /// Extracts the induced subgraph on `keep` (graph-order preserved).
    MolGraph induced_subgraph(const std::vector<int>& keep) const;

    /// Relabels atoms: atom i moves to position perm[i].
    MolGraph permuted(const std::vector<int>& perm) const;

    /// Copy with all atom map numbers cleared.
    MolGraph without_maps() const;

    void rebuild_adjacency();

private:
    std::vector<std::vector<std::pair<int, int>>> adj_;
};

/// Splits a possibly disconnected graph into one MolGraph per component.
std::vector<MolGraph> split_components(const MolGraph& g);

/// Merges fragments into one disconnected graph.
MolGraph merge_graphs(const std::vector<MolGraph>& parts);

}  // namespace retroflow
