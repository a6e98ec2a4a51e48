#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "retroflow/molgraph.hpp"

namespace retroflow {

enum class ParseErrorKind { Syntax, UnsupportedElement, ValenceOverflow };

class ParseError : public std::runtime_error {
public:
    ParseError(ParseErrorKind kind, std::size_t offset, const std::string& message)
        : std::runtime_error(message + " (at offset " + std::to_string(offset) + ")"),
          kind(kind),
          offset(offset),
          message(message) {}
    ParseErrorKind kind;
    std::size_t offset;
    std::string message;  // without the offset suffix
};

/// Parses the organic-subset SMILES dialect: elements B C N O P S F Cl Br I,
/// aromatic lowercase forms, ring closures (digits and %nn), branches, dots,
/// and bracket atoms carrying explicit H counts, charges, and atom maps.
/// Stereochemistry and isotopes are rejected as syntax errors.
MolGraph parse_smiles(const std::string& text);

/// Serializes a graph back to SMILES. Atoms whose implicit-H count and
/// charge match what a bare symbol would reparse to are written bare;
/// anything else gets brackets. Map numbers are emitted when nonzero.
std::string write_smiles(const MolGraph& g);

struct ReactionRecord {
    std::vector<MolGraph> reactants;  // one graph per "."-separated fragment
    MolGraph product;                 // single connected molecule

    MolGraph merged_reactants() const;  // all fragments in one graph

    /// Pairs (product atom index, merged-reactant atom index) sharing a map
    /// number. Parsing guarantees paired atoms have equal element symbols.
    std::vector<std::pair<int, int>> atom_map_pairs() const;
};

/// Parses "reactants>>product". Validates that the product is one connected
/// molecule and map numbers are unique per side. A mapped product atom whose
/// number is absent from the reactants is an error; one whose partner has a
/// different element symbol is demoted to unmapped (numbers carry atom
/// identity, so a cross-element pair is meaningless). Reactant-only maps are
/// permitted — they mark atoms lost retrosynthetically.
ReactionRecord parse_reaction(const std::string& text);

std::string write_reaction(const ReactionRecord& rxn);

}  // namespace retroflow
