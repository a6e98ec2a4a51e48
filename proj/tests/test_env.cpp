#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "retroflow/canonical.hpp"
#include "retroflow/corpus.hpp"
#include "retroflow/env.hpp"
#include "retroflow/smiles.hpp"
#include "retroflow/templates.hpp"

using namespace retroflow;

namespace {

constexpr const char* kEster = "[CH3:1][OH:2].[Cl:3][C:4](=O)C>>[CH3:1][O:2][C:4](=O)C";

struct Fixture {
    ReactionRecord rec;
    Template tmpl;
    Match origin;
    PatternLibrary lib;
};

// Single-template library from the esterification reaction: one product
// pattern (5 atoms, 3 mappable), an alcohol pattern and an acid chloride
// pattern, three mapping triples.
Fixture ester_fixture() {
    Fixture f;
    f.rec = parse_reaction(kEster);
    f.tmpl = extract_template(f.rec, 1, &f.origin);
    f.origin.pattern_index = f.lib.intern_pp(f.tmpl.product_pattern);
    for (const PatternGraph& rp : f.tmpl.reactant_patterns) f.lib.intern_rp(rp);
    return f;
}

Action match_action(const Match& m) {
    Action a;
    a.kind = ActionKind::Match;
    a.match = m;
    return a;
}

Action reactant_action(int rp) {
    Action a;
    a.kind = ActionKind::Reactant;
    a.rp = rp;
    return a;
}

Action advance_action() {
    Action a;
    a.kind = ActionKind::Advance;
    return a;
}

Action map_action(int j, int k, int l) {
    Action a;
    a.kind = ActionKind::Map;
    a.triple = {j, k, l};
    return a;
}

State must_step(const State& s, const Action& a, const PatternLibrary& lib,
                const EnvConfig& cfg) {
    StepResult r = step(s, a, lib, cfg);
    REQUIRE(r.ok);
    return r.state;
}

int count_kind(const std::vector<Action>& actions, ActionKind kind) {
    int n = 0;
    for (const Action& a : actions)
        if (a.kind == kind) ++n;
    return n;
}

bool has_reactant(const std::vector<Action>& actions, int rp) {
    for (const Action& a : actions)
        if (a.kind == ActionKind::Reactant && a.rp == rp) return true;
    return false;
}

// Library with one single-carbon identity-style product pattern; used to
// exercise the match enumeration cap on a multi-carbon product.
PatternLibrary one_carbon_library() {
    PatternGraph pp;
    Atom c;
    c.symbol = "C";
    c.implicit_h = 4;
    pp.graph.add_atom(c);
    pp.mappable = {0};
    pp.origin = {OriginFeatures{true, 0, 0}};
    PatternLibrary lib;
    lib.intern_pp(normalize_pattern(pp));
    lib.intern_rp(normalize_pattern(pp));
    return lib;
}

std::string action_seq_key(const Trajectory& t) { return trajectory_debug_text(t); }

}  // namespace

TEST_CASE("scripted esterification trajectory reaches the ground-truth terminal") {
    Fixture f = ester_fixture();
    EnvConfig cfg;
    REQUIRE(f.lib.pps.size() == 1);
    REQUIRE(f.lib.rps.size() == 2);
    REQUIRE(f.tmpl.product_pattern.mappable.size() == 3);
    REQUIRE(f.tmpl.mapping.size() == 3);

    // Identify the two reactant patterns by size: alcohol has 2 atoms. The
    // acid chloride keeps its reactant-only-mapped chlorine mappable.
    int alc = f.lib.rps[0].graph.num_atoms() == 2 ? 0 : 1;
    int acid = 1 - alc;
    REQUIRE(f.lib.rps[alc].graph.num_atoms() == 2);
    REQUIRE(f.lib.rps[alc].mappable.size() == 2);
    REQUIRE(f.lib.rps[acid].mappable.size() == 2);

    State s1 = initial_state(f.rec.product);
    CHECK(s1.phase == Phase::Phase1);
    CHECK(s1.product_key == canonical_key(f.rec.product));

    // Phase 1: the product pattern embeds exactly once, at its origin.
    std::vector<Action> a1 = enumerate_actions(s1, f.lib, cfg);
    REQUIRE(a1.size() == 1);
    CHECK(a1[0].kind == ActionKind::Match);
    CHECK(a1[0].match == f.origin);

    State s2 = must_step(s1, a1[0], f.lib, cfg);
    CHECK(s2.phase == Phase::Phase2);
    CHECK(s2.match == f.origin);

    // Phase 2, nothing collected: both patterns keep completion reachable,
    // no advance yet (demand C2 O1 is uncovered).
    std::vector<Action> a2 = enumerate_actions(s2, f.lib, cfg);
    CHECK(a2.size() == 2);
    CHECK(has_reactant(a2, alc));
    CHECK(has_reactant(a2, acid));
    CHECK(count_kind(a2, ActionKind::Advance) == 0);

    State s3 = must_step(s2, reactant_action(acid), f.lib, cfg);
    std::vector<Action> a3 = enumerate_actions(s3, f.lib, cfg);
    CHECK(a3.size() == 2);  // still incomplete: alcohol or another acid
    CHECK(count_kind(a3, ActionKind::Advance) == 0);

    State s4 = must_step(s3, reactant_action(alc), f.lib, cfg);
    CHECK(s4.collected == std::vector<int>{std::min(alc, acid), std::max(alc, acid)});
    std::vector<Action> a4 = enumerate_actions(s4, f.lib, cfg);
    CHECK(a4.size() == 3);  // both adds stay legal plus advance
    CHECK(count_kind(a4, ActionKind::Advance) == 1);

    State s5 = must_step(s4, advance_action(), f.lib, cfg);
    CHECK(s5.phase == Phase::Phase3);

    // Phase 3 candidates: two product carbons with two carbon targets each,
    // one product oxygen with the single alcohol oxygen.
    std::vector<Action> a5 = enumerate_actions(s5, f.lib, cfg);
    CHECK(a5.size() == 5);
    for (const Action& a : a5) {
        const PatternGraph& pp = f.lib.pps[0];
        const PatternGraph& rp = f.lib.rps[s5.collected[a.triple.k]];
        CHECK(pp.graph.atoms[a.triple.j].symbol == rp.graph.atoms[a.triple.l].symbol);
    }

    // Replay the extraction's own mapping, remapping template reactant
    // positions onto the sorted collected list.
    State cur = s5;
    std::vector<double> expected_pb;
    for (std::size_t i = 0; i < f.tmpl.mapping.size(); ++i) {
        MappingTriple t = f.tmpl.mapping[i];
        int lib_idx = f.lib.find_rp(f.tmpl.reactant_patterns[t.k]);
        REQUIRE(lib_idx >= 0);
        int slot = static_cast<int>(
            std::find(cur.collected.begin(), cur.collected.end(), lib_idx) -
            cur.collected.begin());
        cur = must_step(cur, map_action(t.j, slot, t.l), f.lib, cfg);
    }
    REQUIRE(cur.phase == Phase::Terminal);
    CHECK(cur.composed.mapping.size() == 3);
    CHECK(cur.reaction == reaction_key(f.rec.reactants, f.rec.product));
    CHECK(cur.reactants.size() == 2);

    // Parent counts along the walk: fresh phase-2 state has one parent, two
    // distinct collected patterns give two, mapping states count triples.
    CHECK(parent_count(s2) == 1);
    CHECK(parent_count(s3) == 1);
    CHECK(parent_count(s4) == 2);
    CHECK(parent_count(s5) == 1);
    CHECK(parent_count(cur) == 3);
}

TEST_CASE("reachability pruning blocks hopeless pattern sets") {
    Fixture f = ester_fixture();
    EnvConfig cfg;
    int alc = f.lib.rps[0].graph.num_atoms() == 2 ? 0 : 1;
    int acid = 1 - alc;

    State s2 = must_step(initial_state(f.rec.product), match_action(f.origin), f.lib, cfg);
    State one_acid = must_step(s2, reactant_action(acid), f.lib, cfg);
    State two_acid = must_step(one_acid, reactant_action(acid), f.lib, cfg);

    // Two acid chlorides cover both carbons but no oxygen; with one slot
    // left only the alcohol keeps the oxygen demand satisfiable.
    std::vector<Action> acts = enumerate_actions(two_acid, f.lib, cfg);
    CHECK(acts.size() == 1);
    CHECK(has_reactant(acts, alc));
    CHECK_FALSE(has_reactant(acts, acid));
    CHECK(count_kind(acts, ActionKind::Advance) == 0);

    // At the reactant budget no further additions are offered at all.
    State full = must_step(two_acid, reactant_action(alc), f.lib, cfg);
    std::vector<Action> full_acts = enumerate_actions(full, f.lib, cfg);
    CHECK(count_kind(full_acts, ActionKind::Reactant) == 0);
    CHECK(count_kind(full_acts, ActionKind::Advance) == 1);
}

TEST_CASE("match enumeration cap trips the counter") {
    PatternLibrary lib = one_carbon_library();
    MolGraph propane = parse_smiles("CCC");
    EnvConfig cfg;
    cfg.max_matches = 2;
    EnvCounters counters;
    std::vector<Action> acts =
        enumerate_actions(initial_state(propane), lib, cfg, &counters);
    CHECK(acts.size() == 2);
    CHECK(counters.match_cap_hits == 1);

    cfg.max_matches = 10000;
    counters = EnvCounters{};
    acts = enumerate_actions(initial_state(propane), lib, cfg, &counters);
    CHECK(acts.size() == 3);
    CHECK(counters.match_cap_hits == 0);
}

TEST_CASE("illegal actions and misuse throw") {
    Fixture f = ester_fixture();
    EnvConfig cfg;
    int alc = f.lib.rps[0].graph.num_atoms() == 2 ? 0 : 1;
    int acid = 1 - alc;

    State s1 = initial_state(f.rec.product);
    CHECK_THROWS_AS(step(s1, advance_action(), f.lib, cfg), std::invalid_argument);
    CHECK_THROWS_AS(step(s1, match_action(Match{7, {0}}), f.lib, cfg),
                    std::invalid_argument);
    Match wrong_size = f.origin;
    wrong_size.atom_indices.pop_back();
    CHECK_THROWS_AS(step(s1, match_action(wrong_size), f.lib, cfg), std::invalid_argument);
    CHECK_THROWS_AS(parent_count(s1), std::invalid_argument);

    State s2 = must_step(s1, match_action(f.origin), f.lib, cfg);
    CHECK_THROWS_AS(step(s2, match_action(f.origin), f.lib, cfg), std::invalid_argument);
    CHECK_THROWS_AS(step(s2, reactant_action(99), f.lib, cfg), std::invalid_argument);
    CHECK_THROWS_AS(step(s2, advance_action(), f.lib, cfg), std::invalid_argument);

    State s3 = must_step(s2, reactant_action(alc), f.lib, cfg);
    State s4 = must_step(s3, reactant_action(acid), f.lib, cfg);
    State s5 = must_step(s4, reactant_action(acid), f.lib, cfg);
    CHECK_THROWS_AS(step(s5, reactant_action(alc), f.lib, cfg), std::invalid_argument);

    State p3 = must_step(s4, advance_action(), f.lib, cfg);
    CHECK_THROWS_AS(step(p3, reactant_action(alc), f.lib, cfg), std::invalid_argument);
    std::vector<Action> acts = enumerate_actions(p3, f.lib, cfg);
    REQUIRE(!acts.empty());
    // Pair a product carbon with the alcohol oxygen: symbols differ.
    const PatternGraph& pp = f.lib.pps[0];
    int jc = -1, jo = -1;
    for (int j : pp.mappable)
        (pp.graph.atoms[j].symbol == "C" ? jc : jo) = j;
    int alc_slot = static_cast<int>(
        std::find(p3.collected.begin(), p3.collected.end(), alc) - p3.collected.begin());
    int lo = -1, lc = -1;
    for (int l : f.lib.rps[alc].mappable)
        (f.lib.rps[alc].graph.atoms[l].symbol == "O" ? lo : lc) = l;
    CHECK_THROWS_AS(step(p3, map_action(jc, alc_slot, lo), f.lib, cfg),
                    std::invalid_argument);
    CHECK_THROWS_AS(step(p3, map_action(jo, 5, lo), f.lib, cfg), std::invalid_argument);

    State m1 = must_step(p3, map_action(jo, alc_slot, lo), f.lib, cfg);
    // Same product atom or same reactant atom twice.
    CHECK_THROWS_AS(step(m1, map_action(jo, alc_slot, lc), f.lib, cfg),
                    std::invalid_argument);
    CHECK_THROWS_AS(step(m1, map_action(jc, alc_slot, lo), f.lib, cfg),
                    std::invalid_argument);

    // Reach a terminal by replaying the template's own mapping, then check
    // that terminal states reject further use.
    State term = p3;
    for (const MappingTriple& t : f.tmpl.mapping) {
        int lib_idx = f.lib.find_rp(f.tmpl.reactant_patterns[t.k]);
        int slot = static_cast<int>(
            std::find(term.collected.begin(), term.collected.end(), lib_idx) -
            term.collected.begin());
        term = must_step(term, map_action(t.j, slot, t.l), f.lib, cfg);
    }
    REQUIRE(term.phase == Phase::Terminal);
    CHECK_THROWS_AS(step(term, advance_action(), f.lib, cfg), std::invalid_argument);
    CHECK_THROWS_AS(enumerate_actions(term, f.lib, cfg), std::invalid_argument);
}

TEST_CASE("state keys separate phases, matches, collections, and mappings") {
    Fixture f = ester_fixture();
    EnvConfig cfg;
    int alc = f.lib.rps[0].graph.num_atoms() == 2 ? 0 : 1;
    int acid = 1 - alc;

    State s1 = initial_state(f.rec.product);
    State s2 = must_step(s1, match_action(f.origin), f.lib, cfg);
    State s3a = must_step(s2, reactant_action(alc), f.lib, cfg);
    State s3b = must_step(s2, reactant_action(acid), f.lib, cfg);

    std::set<std::string> keys{state_key(s1), state_key(s2), state_key(s3a),
                               state_key(s3b)};
    CHECK(keys.size() == 4);

    // Same multiset reached along different orders collapses to one key.
    State ab = must_step(s3a, reactant_action(acid), f.lib, cfg);
    State ba = must_step(s3b, reactant_action(alc), f.lib, cfg);
    CHECK(state_key(ab) == state_key(ba));
}

// Exhaustive BFS over the reachable state graph. Verifies parent_count
// against true in-degrees, the trajectory count against an independent
// path-count DP, and that the uniform backward policy normalizes: for every
// terminal the probabilities of all trajectories reaching it sum to one.
TEST_CASE("brute-force state graph agrees with parent_count and backward mass") {
    Fixture f = ester_fixture();
    EnvConfig cfg;

    std::map<std::string, State> states;
    std::map<std::string, int> in_degree;
    std::map<std::string, std::vector<std::string>> children;
    std::vector<std::string> frontier;

    State s0 = initial_state(f.rec.product);
    states[state_key(s0)] = s0;
    frontier.push_back(state_key(s0));
    while (!frontier.empty()) {
        std::string key = frontier.back();
        frontier.pop_back();
        const State& s = states[key];
        if (s.phase == Phase::Terminal) continue;
        std::vector<Action> actions = enumerate_actions(s, f.lib, cfg);
        if (actions.empty()) {
            // Dead ends can only arise from masking at the final mapping step.
            CHECK(s.phase == Phase::Phase3);
            continue;
        }
        for (const Action& a : actions) {
            StepResult r = step(s, a, f.lib, cfg);
            REQUIRE(r.ok);
            std::string ck = state_key(r.state);
            in_degree[ck] += 1;
            children[key].push_back(ck);
            if (!states.count(ck)) {
                states[ck] = r.state;
                frontier.push_back(ck);
            }
        }
    }

    int terminals = 0;
    for (const auto& [key, s] : states) {
        if (s.phase == Phase::Phase1) continue;
        CHECK(parent_count(s) == in_degree[key]);
        if (s.phase == Phase::Terminal) ++terminals;
    }
    CHECK(terminals > 1);

    // Path-count DP over the recorded edges (memoized; the graph is a DAG).
    std::map<std::string, long long> paths;
    auto count_paths = [&](auto&& self, const std::string& key) -> long long {
        const State& s = states[key];
        if (s.phase == Phase::Terminal) return 1;
        auto it = paths.find(key);
        if (it != paths.end()) return it->second;
        long long total = 0;
        for (const std::string& ck : children[key]) total += self(self, ck);
        paths[key] = total;
        return total;
    };
    long long expected_paths = count_paths(count_paths, state_key(s0));

    std::vector<Trajectory> all =
        enumerate_all_trajectories(f.rec.product, f.lib, cfg, 100000);
    CHECK(static_cast<long long>(all.size()) == expected_paths);
    CHECK(all.size() > 10);

    // Backward-probability normalization per terminal state.
    std::map<std::string, double> mass;
    for (const Trajectory& t : all) {
        REQUIRE(t.states.back().phase == Phase::Terminal);
        REQUIRE(t.actions.size() == t.log_pb.size());
        CHECK(t.actions.size() ==
              2 + t.states.back().collected.size() + t.states.back().mapping.size());
        double logp = 0;
        for (double lp : t.log_pb) logp += lp;
        mass[state_key(t.states.back())] += std::exp(logp);
    }
    for (const auto& [key, m] : mass) CHECK(m == doctest::Approx(1.0).epsilon(1e-9));

    // The trajectory limit is enforced.
    CHECK_THROWS_AS(enumerate_all_trajectories(f.rec.product, f.lib, cfg, 3),
                    std::runtime_error);
}

TEST_CASE("backward sampling replays corpus reactions through the live library") {
    CorpusSplits splits = generate_corpus(11);
    std::vector<ReactionRecord> train;
    for (const std::string& line : splits.train) train.push_back(parse_reaction(line));
    PatternLibrary lib;
    EnvConfig cfg;
    for (const ReactionRecord& rec : train) {
        Template t = extract_template(rec, cfg.radius);
        lib.intern_pp(t.product_pattern);
        for (const PatternGraph& rp : t.reactant_patterns) lib.intern_rp(rp);
    }

    std::mt19937_64 rng(99);
    int checked = 0;
    for (const ReactionRecord& rec : train) {
        if (checked >= 60) break;
        ++checked;
        std::optional<Trajectory> t = backward_sample(rec, lib, cfg, rng);
        REQUIRE(t.has_value());
        REQUIRE(t->states.back().phase == Phase::Terminal);
        CHECK(t->states.front().phase == Phase::Phase1);
        CHECK(t->states.back().reaction == reaction_key(rec.reactants, rec.product));
        CHECK(t->actions.size() == t->log_pb.size());
        CHECK(t->actions.size() == t->log_pf.size());
        CHECK(t->actions[0].kind == ActionKind::Match);
        CHECK(count_kind(t->actions, ActionKind::Advance) == 1);
        CHECK(t->actions.size() == 2 + t->states.back().collected.size() +
                                       t->states.back().mapping.size());
        // Cached backward log-probabilities match parent counts state by state.
        for (std::size_t i = 0; i < t->actions.size(); ++i)
            CHECK(t->log_pb[i] ==
                  doctest::Approx(-std::log(parent_count(t->states[i + 1]))));
        // Every cached action must have been legal where it was taken.
        for (std::size_t i = 0; i < t->actions.size(); ++i) {
            std::vector<Action> legal = enumerate_actions(t->states[i], lib, cfg);
            CHECK(std::find(legal.begin(), legal.end(), t->actions[i]) != legal.end());
        }
    }
    CHECK(checked == 60);

    // A library that lacks the reaction's patterns yields no trajectory.
    PatternLibrary empty;
    std::optional<Trajectory> none = backward_sample(train[0], empty, cfg, rng);
    CHECK(!none.has_value());
}

TEST_CASE("backward sampling draws orderings uniformly") {
    // Two distinct reactant patterns, three mapped atoms: 2! * 3! = 12
    // equally likely trajectory orderings.
    Fixture f = ester_fixture();
    EnvConfig cfg;

    std::mt19937_64 rng(2024);
    const int n = 1200;
    std::map<std::string, int> freq;
    for (int i = 0; i < n; ++i) {
        std::optional<Trajectory> t = backward_sample(f.rec, f.lib, cfg, rng);
        REQUIRE(t.has_value());
        freq[action_seq_key(*t)] += 1;
    }
    CHECK(freq.size() == 12);
    // Binomial 5-sigma band around n/12 = 100: sigma ~ 9.6.
    for (const auto& [key, count] : freq) {
        CHECK(count > 100 - 48);
        CHECK(count < 100 + 48);
    }
}

TEST_CASE("backward sampling picks uniformly among distinct patterns, not slots") {
    // Diol + two identical acid chlorides: collected is {diol, acid, acid}.
    // Walking backward, each removal is uniform over the *distinct* remaining
    // indices, so the three forward add-orders are not equally likely:
    //   (acid, acid, diol) 1/2, (acid, diol, acid) 1/4, (diol, acid, acid) 1/4.
    ReactionRecord rec = parse_reaction(
        "[Cl:90][C:3]([CH3:5])=[O:4].[Cl:91][C:13]([CH3:15])=[O:14]."
        "[OH:2][CH2:1][CH2:8][OH:9]>>"
        "[CH3:5][C:3](=[O:4])[O:2][CH2:1][CH2:8][O:9][C:13](=[O:14])[CH3:15]");
    EnvConfig cfg;
    Template t = extract_template(rec, cfg.radius);
    REQUIRE(t.reactant_patterns.size() == 3);
    PatternLibrary lib;
    lib.intern_pp(t.product_pattern);
    for (const PatternGraph& rp : t.reactant_patterns) lib.intern_rp(rp);
    REQUIRE(lib.rps.size() == 2);  // the two acid chloride patterns collapse
    int diol = lib.rps[0].graph.num_atoms() > lib.rps[1].graph.num_atoms() ? 0 : 1;
    int acid = 1 - diol;

    std::mt19937_64 rng(5);
    const int n = 1200;
    std::map<std::vector<int>, int> add_freq;
    std::map<int, int> first_map_freq;
    int mapped_atoms = 0;
    for (int i = 0; i < n; ++i) {
        std::optional<Trajectory> traj = backward_sample(rec, lib, cfg, rng);
        REQUIRE(traj.has_value());
        std::vector<int> adds;
        int first_map = -1;
        int maps = 0;
        for (const Action& a : traj->actions) {
            if (a.kind == ActionKind::Reactant) adds.push_back(a.rp);
            if (a.kind == ActionKind::Map) {
                if (first_map < 0) first_map = a.triple.j;
                ++maps;
            }
        }
        mapped_atoms = maps;
        add_freq[adds] += 1;
        first_map_freq[first_map] += 1;
    }

    REQUIRE(add_freq.size() == 3);
    // 5-sigma bands: n/2 = 600 +- 87, n/4 = 300 +- 72.
    CHECK(add_freq[{acid, acid, diol}] > 600 - 87);
    CHECK(add_freq[{acid, acid, diol}] < 600 + 87);
    CHECK(add_freq[{acid, diol, acid}] > 300 - 72);
    CHECK(add_freq[{acid, diol, acid}] < 300 + 72);
    CHECK(add_freq[{diol, acid, acid}] > 300 - 72);
    CHECK(add_freq[{diol, acid, acid}] < 300 + 72);

    // The first mapping action is uniform over the template's triples.
    REQUIRE(mapped_atoms > 1);
    CHECK(static_cast<int>(first_map_freq.size()) == mapped_atoms);
    double expected = static_cast<double>(n) / mapped_atoms;
    double sigma = std::sqrt(expected * (1.0 - 1.0 / mapped_atoms));
    for (const auto& [j, count] : first_map_freq) {
        CHECK(count > expected - 5 * sigma);
        CHECK(count < expected + 5 * sigma);
    }
}
