#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "retroflow/templates.hpp"

namespace retroflow {

// The template-composition MDP walks three phases: pick a product-pattern
// match (the reaction center), collect reactant patterns until every
// mappable center atom can be mapped, then map atoms one pair at a time.
// The final mapping action applies the composed template and terminates.
enum class Phase { Phase1, Phase2, Phase3, Terminal };

enum class ActionKind { Match, Reactant, Advance, Map };

struct Action {
    ActionKind kind = ActionKind::Match;
    Match match;           // Match: pattern_index is the pp library index
    int rp = -1;           // Reactant: rp library index
    MappingTriple triple;  // Map: j in pp, (k,l) in the collected list

    bool operator==(const Action&) const = default;
};

struct State {
    Phase phase = Phase::Phase1;
    MolGraph product;
    std::string product_key;

    // Phase 2 onward.
    Match match;                        // the chosen center embedding
    std::vector<int> collected;         // rp library indices, sorted (multiset)
    std::vector<MappingTriple> mapping; // sorted; k indexes `collected`

    // Terminal payload.
    Template composed;
    std::vector<MolGraph> reactants;
    std::string reaction;  // reaction_key of (reactants, product)
};

struct EnvConfig {
    int max_reactants = 3;
    int max_matches = 10000;  // phase-1 enumeration cap per product
    int radius = 1;           // template radius used for backward sampling
};

struct EnvCounters {
    long long match_cap_hits = 0;         // phase-1 lists truncated
    long long masked_final_actions = 0;   // final mappings dropped by test-apply
};

struct StepResult {
    bool ok = false;
    State state;
    std::string error;  // set when the terminal application failed
};

struct Trajectory {
    std::vector<State> states;    // s1 .. sk, terminal last
    std::vector<Action> actions;  // one per transition
    std::vector<double> log_pf;   // forward log-probs, filled by the sampler
    std::vector<double> log_pb;   // -log parent_count(next state)
};

State initial_state(const MolGraph& product);

// Legal actions, deterministically ordered. Phase 1: every match of every
// product pattern (capped). Phase 2: reactant patterns that keep full
// mappability achievable within the remaining budget, then ADVANCE once the
// per-symbol supply covers the demand. Phase 3: symbol-equal unmapped pairs;
// when one mapping remains, candidates whose application fails are masked.
// Throws on terminal states.
std::vector<Action> enumerate_actions(const State& s, const PatternLibrary& lib,
                                      const EnvConfig& cfg,
                                      EnvCounters* counters = nullptr);

// Applies one action. Illegal actions (wrong phase, bad indices, symbol
// mismatch, premature ADVANCE) throw; a failed terminal application returns
// ok = false so the caller can resample.
StepResult step(const State& s, const Action& a, const PatternLibrary& lib,
                const EnvConfig& cfg);

// Number of (parent state, action) pairs leading to s. Phase-2 entry and
// phase-3 entry have one; later phase-2 states count distinct collected
// indices; phase-3 states count |mapping|; terminals count the mappings of
// their composed template (any of them could have been applied last).
int parent_count(const State& s);

// Everything needed to replay a known reaction backward: the center match,
// the collected reactant-pattern multiset, and the full mapping with k
// re-pointed at the sorted collected list. Extraction and library lookups
// happen once here; sampling then only shuffles orders.
struct PreparedBackward {
    MolGraph product;
    Match match;                         // pattern_index is the pp library index
    std::vector<int> collected;          // sorted rp library indices
    std::vector<MappingTriple> triples;  // complete mapping, k indexes `collected`
};

// Returns nullopt when the reaction's template cannot be extracted, its
// patterns are missing from the library, or it needs more than max_reactants
// fragments.
std::optional<PreparedBackward> prepare_backward(const ReactionRecord& reaction,
                                                 const PatternLibrary& lib,
                                                 const EnvConfig& cfg);

// A terminal state already carries its composed template; no extraction.
PreparedBackward prepare_backward(const State& terminal);

// Uniform-backward trajectory: shuffle the mapping order uniformly, pick the
// reactant add-order by repeatedly removing a uniformly chosen distinct
// pattern, then replay forward. log_pb is exact; log_pf is zero-filled.
Trajectory sample_backward(const PreparedBackward& prep, const PatternLibrary& lib,
                           const EnvConfig& cfg, std::mt19937_64& rng);

// prepare_backward + sample_backward in one call.
std::optional<Trajectory> backward_sample(const ReactionRecord& reaction,
                                          const PatternLibrary& lib, const EnvConfig& cfg,
                                          std::mt19937_64& rng);

// Stable identity for visited-state bookkeeping and test oracles.
std::string state_key(const State& s);

// Exhaustive depth-first rollout of every trajectory from the product; for
// enumerable toy libraries only. Throws when more than `limit` trajectories
// exist. log_pb is filled, log_pf is zero.
std::vector<Trajectory> enumerate_all_trajectories(const MolGraph& product,
                                                   const PatternLibrary& lib,
                                                   const EnvConfig& cfg,
                                                   std::size_t limit = 100000);

// One action per line, for failure triage.
std::string trajectory_debug_text(const Trajectory& t);

}  // namespace retroflow
