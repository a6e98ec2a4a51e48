#pragma once

#include <bitset>
#include <string>
#include <vector>

#include "retroflow/molgraph.hpp"

namespace retroflow {

/// Bemis–Murcko-style framework: iteratively deletes atoms of degree <= 1
/// until fixpoint (ring systems plus linkers survive; acyclic input empties).
/// A surviving neighbor of a deleted atom gains implicit hydrogens equal to
/// the removed bond's integer order, keeping its valence account intact.
MolGraph scaffold(const MolGraph& g);

/// Per-atom random-walk return probabilities: entry k (1-based) is the
/// probability a k-step uniform walk from the atom returns to it. Isolated
/// atoms get all-zero rows.
std::vector<std::vector<double>> random_walk_pe(const MolGraph& g, int steps);

/// Fixed-width feature schema shared by every molecule.
inline constexpr int kRandomWalkSteps = 16;
inline constexpr int kNodeFeatureDim = 10 /*element*/ + 7 /*degree 0..6*/ + 1 /*aromatic*/ +
                                       5 /*charge -2..2*/ + 5 /*implicit_h 0..4*/ +
                                       kRandomWalkSteps;
inline constexpr int kEdgeFeatureDim = 4;  // one-hot bond order

struct FeatureMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;  // row-major
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

struct Features {
    FeatureMatrix nodes;  // num_atoms x kNodeFeatureDim
    FeatureMatrix edges;  // num_bonds x kEdgeFeatureDim
};

Features featurize(const MolGraph& g);

/// Jaccard similarity of hashed linear-path fingerprints (simple paths of up
/// to 4 bonds, direction-normalized, FNV-1a hashed into 1024 bits).
inline constexpr int kFingerprintBits = 1024;
std::bitset<kFingerprintBits> path_fingerprint(const MolGraph& g);
double tanimoto(const MolGraph& a, const MolGraph& b);

}  // namespace retroflow
