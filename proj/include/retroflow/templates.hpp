#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "retroflow/molgraph.hpp"
#include "retroflow/smiles.hpp"

namespace retroflow {

/// Where a pattern atom came from in its source reaction: whether it carried
/// an atom map, and how its charge / implicit-H count change when moving from
/// the product side to the reactant side (reactant minus product).
struct OriginFeatures {
    bool was_mapped = false;
    int charge_delta = 0;
    int implicit_h_delta = 0;

    bool operator==(const OriginFeatures&) const = default;
};

/// A molecular fragment with per-atom origin records and the subset of atoms
/// that may participate in cross-pattern atom mappings.
struct PatternGraph {
    MolGraph graph;
    std::vector<int> mappable;           // sorted pattern-atom indices
    std::vector<OriginFeatures> origin;  // one per atom

    bool is_mappable(int atom) const;
};

/// Identity string for dedup and save/load stability: a canonical certificate
/// over (graph, mappable flags, origin features). Map numbers ignored.
std::string pattern_key(const PatternGraph& p);

// Full identity of a template: product pattern, reactant patterns, mapping.
struct Template;
std::string template_key(const Template& t);

/// Rewrites the pattern into canonical atom order so equal patterns are
/// bytewise-identical structures (mapping triples stay meaningful across
/// duplicates extracted from differently-ordered inputs).
PatternGraph normalize_pattern(const PatternGraph& p, std::vector<int>* perm_out = nullptr);

/// Atom mapping: product-pattern atom j == reactant pattern k's atom l.
struct MappingTriple {
    int j = -1;
    int k = -1;
    int l = -1;
    auto operator<=>(const MappingTriple&) const = default;
};

struct Template {
    PatternGraph product_pattern;
    std::vector<PatternGraph> reactant_patterns;
    std::vector<MappingTriple> mapping;  // sorted by j
};

enum class ExtractErrorKind { NoChange, Unmapped };

class ExtractError : public std::runtime_error {
public:
    ExtractError(ExtractErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind(kind) {}
    ExtractErrorKind kind;
};

struct Match;

/// Extracts the backward template of an atom-mapped reaction: the reaction
/// center (atoms whose bonding, charge, or implicit-H count change across the
/// map, plus attachment points of unmapped atoms) grown by `radius` bond
/// hops, with whole unmapped fragments adjacent to the covered area included
/// on both sides. Throws ExtractError for unmapped or no-change reactions.
/// When origin_match is given it receives the embedding of the extracted
/// product pattern at its source location in r.product.
Template extract_template(const ReactionRecord& r, int radius = 1, Match* origin_match = nullptr);

/// Indexed, deduplicated product-pattern and reactant-pattern sets.
struct PatternLibrary {
    std::vector<PatternGraph> pps;
    std::vector<PatternGraph> rps;
    std::unordered_map<std::string, int> pp_index;  // pattern_key -> index
    std::unordered_map<std::string, int> rp_index;

    int intern_pp(const PatternGraph& p);  // returns stable index
    int intern_rp(const PatternGraph& p);
    int find_pp(const PatternGraph& p) const;  // -1 when absent
    int find_rp(const PatternGraph& p) const;

    void save(const std::string& path) const;
    static PatternLibrary load(const std::string& path);
};

PatternLibrary build_library(const std::vector<Template>& templates);

/// An embedding of a product pattern into a product: atom_indices[p] is the
/// product atom matched to pattern atom p.
struct Match {
    int pattern_index = -1;
    std::vector<int> atom_indices;

    bool operator==(const Match&) const = default;
};

/// All embeddings of p.graph into g respecting symbol, charge, aromaticity,
/// and bond order (pattern bonds must exist in g with equal order; extra g
/// bonds between matched atoms are allowed). Lexicographic by atom_indices;
/// automorphic images are distinct matches.
std::vector<Match> find_matches(const PatternGraph& p, const MolGraph& g);

/// Brute-force oracle over all injective assignments; exponential, for
/// verification on small graphs only.
std::vector<Match> find_matches_reference(const PatternGraph& p, const MolGraph& g);

/// Outcome of a template application; rejections (valence violations,
/// dangling attachments, rewrite conflicts) are recoverable so callers can
/// mask the offending action.
struct ApplyResult {
    bool ok = false;
    std::string error;
    std::vector<MolGraph> reactants;  // sorted by canonical key
};

/// Rewrites product g at match m backwards through t: unmapped pattern-atom
/// images are deleted, mapped images keep their product identity adjusted by
/// the reactant atom's origin deltas, fresh reactant-pattern atoms appear,
/// and reactant-pattern bonds replace the pattern-bond images. Every mappable
/// product-pattern atom must carry a mapping triple.
ApplyResult apply_template(const Template& t, const MolGraph& g, const Match& m);

/// Runs t in the reactants -> product direction: disjoint embeddings of all
/// reactant patterns, reverse rewrite, one product per embedding combination
/// whose rewritten pattern area lands in a single component. Distinct valid
/// products, sorted by canonical key.
std::vector<MolGraph> forward_apply(const Template& t, const std::vector<MolGraph>& reactants);

}  // namespace retroflow
