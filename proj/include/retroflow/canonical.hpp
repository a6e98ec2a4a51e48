#pragma once

#include <string>
#include <vector>

#include "retroflow/molgraph.hpp"

namespace retroflow {

/// Canonical atom ranks (a permutation: atom i gets position ranks[i] in the
/// canonical order). Isomorphic graphs — respecting symbol, charge,
/// aromaticity, bond order, and the optional per-atom annotation strings —
/// yield orderings that produce identical certificates. Map numbers are
/// ignored. Implemented as iterative neighborhood refinement with
/// individualization branching on ties (smallest certificate wins).
std::vector<int> canonical_ranks(const MolGraph& g,
                                 const std::vector<std::string>* annotations = nullptr);

/// Complete isomorphism certificate: equal strings iff the graphs are
/// isomorphic under the same attribute set as canonical_ranks.
std::string canonical_key(const MolGraph& g,
                          const std::vector<std::string>* annotations = nullptr);

/// Both at once (the key is a byproduct of ranking; callers needing both
/// should not pay twice).
struct CanonicalResult {
    std::vector<int> ranks;
    std::string key;
};
CanonicalResult canonicalize(const MolGraph& g,
                             const std::vector<std::string>* annotations = nullptr);

/// Deterministic SMILES: atoms permuted into canonical order, then written.
/// Two isomorphic graphs (ignoring maps) serialize identically when their
/// atom attributes match; map numbers survive into the output.
std::string canonical_smiles(const MolGraph& g);

/// Order-independent key for a multiset of molecules (e.g. a reactant set):
/// the sorted member keys joined with "|".
std::string canonical_multiset_key(const std::vector<MolGraph>& mols);

}  // namespace retroflow
