#include "retroflow/env.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "retroflow/canonical.hpp"
#include "retroflow/corpus.hpp"

namespace retroflow {

namespace {

constexpr int kSymbols = 10;  // supported element count
using SymbolCounts = std::array<int, kSymbols>;

SymbolCounts mappable_symbol_counts(const PatternGraph& p) {
    SymbolCounts counts{};
    for (int atom : p.mappable) counts[element_index(p.graph.atoms[atom].symbol)] += 1;
    return counts;
}

// Per-symbol shortfall of supply against demand, clamped at zero.
SymbolCounts deficit_of(const SymbolCounts& demand, const SymbolCounts& supply) {
    SymbolCounts d{};
    for (int i = 0; i < kSymbols; ++i) d[i] = std::max(0, demand[i] - supply[i]);
    return d;
}

bool all_zero(const SymbolCounts& c) {
    for (int x : c)
        if (x != 0) return false;
    return true;
}

// Can `slots` more patterns (drawn freely from the distinct supply vectors)
// cover the deficit? Exhaustive search; slots is at most max_reactants.
bool coverable(const SymbolCounts& deficit, int slots,
               const std::vector<SymbolCounts>& supplies) {
    if (all_zero(deficit)) return true;
    if (slots <= 0) return false;
    for (const SymbolCounts& s : supplies) {
        bool useful = false;
        for (int i = 0; i < kSymbols; ++i)
            if (deficit[i] > 0 && s[i] > 0) useful = true;
        if (!useful) continue;
        SymbolCounts next{};
        for (int i = 0; i < kSymbols; ++i) next[i] = std::max(0, deficit[i] - s[i]);
        if (coverable(next, slots - 1, supplies)) return true;
    }
    return false;
}

std::vector<SymbolCounts> distinct_supplies(const PatternLibrary& lib) {
    std::vector<SymbolCounts> out;
    for (const PatternGraph& rp : lib.rps) {
        SymbolCounts s = mappable_symbol_counts(rp);
        if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
    }
    return out;
}

SymbolCounts collected_supply(const State& s, const PatternLibrary& lib) {
    SymbolCounts total{};
    for (int rp : s.collected) {
        SymbolCounts c = mappable_symbol_counts(lib.rps[rp]);
        for (int i = 0; i < kSymbols; ++i) total[i] += c[i];
    }
    return total;
}

bool is_complete(const State& s, const PatternLibrary& lib) {
    SymbolCounts demand = mappable_symbol_counts(lib.pps[s.match.pattern_index]);
    return all_zero(deficit_of(demand, collected_supply(s, lib)));
}

bool triple_mapped_j(const State& s, int j) {
    for (const MappingTriple& m : s.mapping)
        if (m.j == j) return true;
    return false;
}

bool triple_mapped_kl(const State& s, int k, int l) {
    for (const MappingTriple& m : s.mapping)
        if (m.k == k && m.l == l) return true;
    return false;
}

Template compose_template(const State& s, const PatternLibrary& lib) {
    Template t;
    t.product_pattern = lib.pps[s.match.pattern_index];
    for (int rp : s.collected) t.reactant_patterns.push_back(lib.rps[rp]);
    t.mapping = s.mapping;
    return t;
}

int pp_mappable_count(const State& s, const PatternLibrary& lib) {
    return static_cast<int>(lib.pps[s.match.pattern_index].mappable.size());
}

void dfs_trajectories(const State& s, const PatternLibrary& lib, const EnvConfig& cfg,
                      std::size_t limit, Trajectory& partial,
                      std::vector<Trajectory>& out) {
    std::vector<Action> actions = enumerate_actions(s, lib, cfg);
    for (const Action& a : actions) {
        StepResult r = step(s, a, lib, cfg);
        if (!r.ok) throw std::runtime_error("enumerate_all_trajectories: step failed");
        partial.states.push_back(s);
        partial.actions.push_back(a);
        partial.log_pb.push_back(-std::log(static_cast<double>(parent_count(r.state))));
        if (r.state.phase == Phase::Terminal) {
            Trajectory full = partial;
            full.states.push_back(r.state);
            full.log_pf.assign(full.actions.size(), 0.0);
            if (out.size() >= limit)
                throw std::runtime_error("enumerate_all_trajectories: limit exceeded");
            out.push_back(std::move(full));
        } else {
            dfs_trajectories(r.state, lib, cfg, limit, partial, out);
        }
        partial.states.pop_back();
        partial.actions.pop_back();
        partial.log_pb.pop_back();
    }
}

}  // namespace

State initial_state(const MolGraph& product) {
    State s;
    s.phase = Phase::Phase1;
    s.product = product;
    s.product_key = canonical_key(product);
    return s;
}

std::vector<Action> enumerate_actions(const State& s, const PatternLibrary& lib,
                                      const EnvConfig& cfg, EnvCounters* counters) {
    std::vector<Action> actions;
    switch (s.phase) {
        case Phase::Terminal:
            throw std::invalid_argument("terminal states have no actions");
        case Phase::Phase1: {
            bool capped = false;
            for (int pp = 0; pp < static_cast<int>(lib.pps.size()) && !capped; ++pp) {
                for (const Match& m : find_matches(lib.pps[pp], s.product)) {
                    if (static_cast<int>(actions.size()) >= cfg.max_matches) {
                        capped = true;
                        if (counters) counters->match_cap_hits += 1;
                        break;
                    }
                    Action a;
                    a.kind = ActionKind::Match;
                    a.match.pattern_index = pp;
                    a.match.atom_indices = m.atom_indices;
                    actions.push_back(std::move(a));
                }
            }
            break;
        }
        case Phase::Phase2: {
            SymbolCounts demand = mappable_symbol_counts(lib.pps[s.match.pattern_index]);
            SymbolCounts have = collected_supply(s, lib);
            std::vector<SymbolCounts> supplies = distinct_supplies(lib);
            int used = static_cast<int>(s.collected.size());
            if (used < cfg.max_reactants) {
                for (int rp = 0; rp < static_cast<int>(lib.rps.size()); ++rp) {
                    SymbolCounts with = have;
                    SymbolCounts add = mappable_symbol_counts(lib.rps[rp]);
                    for (int i = 0; i < kSymbols; ++i) with[i] += add[i];
                    if (!coverable(deficit_of(demand, with), cfg.max_reactants - used - 1,
                                   supplies))
                        continue;
                    Action a;
                    a.kind = ActionKind::Reactant;
                    a.rp = rp;
                    actions.push_back(a);
                }
            }
            if (all_zero(deficit_of(demand, have))) {
                Action a;
                a.kind = ActionKind::Advance;
                actions.push_back(a);
            }
            break;
        }
        case Phase::Phase3: {
            const PatternGraph& pp = lib.pps[s.match.pattern_index];
            bool final_step =
                static_cast<int>(s.mapping.size()) + 1 == pp_mappable_count(s, lib);
            for (int j : pp.mappable) {
                if (triple_mapped_j(s, j)) continue;
                const std::string& symbol = pp.graph.atoms[j].symbol;
                for (int k = 0; k < static_cast<int>(s.collected.size()); ++k) {
                    const PatternGraph& rp = lib.rps[s.collected[k]];
                    for (int l : rp.mappable) {
                        if (triple_mapped_kl(s, k, l)) continue;
                        if (rp.graph.atoms[l].symbol != symbol) continue;
                        Action a;
                        a.kind = ActionKind::Map;
                        a.triple = {j, k, l};
                        if (final_step) {
                            StepResult r = step(s, a, lib, cfg);
                            if (!r.ok) {
                                if (counters) counters->masked_final_actions += 1;
                                continue;
                            }
                        }
                        actions.push_back(a);
                    }
                }
            }
            break;
        }
    }
    return actions;
}

StepResult step(const State& s, const Action& a, const PatternLibrary& lib,
                const EnvConfig& cfg) {
    StepResult out;
    switch (s.phase) {
        case Phase::Terminal:
            throw std::invalid_argument("cannot step a terminal state");
        case Phase::Phase1: {
            if (a.kind != ActionKind::Match)
                throw std::invalid_argument("phase 1 expects a match action");
            if (a.match.pattern_index < 0 ||
                a.match.pattern_index >= static_cast<int>(lib.pps.size()))
                throw std::invalid_argument("match action: pattern index out of range");
            const PatternGraph& pp = lib.pps[a.match.pattern_index];
            if (a.match.atom_indices.size() != static_cast<std::size_t>(pp.graph.num_atoms()))
                throw std::invalid_argument("match action: wrong embedding size");
            out.state = s;
            out.state.phase = Phase::Phase2;
            out.state.match = a.match;
            out.ok = true;
            return out;
        }
        case Phase::Phase2: {
            if (a.kind == ActionKind::Reactant) {
                if (a.rp < 0 || a.rp >= static_cast<int>(lib.rps.size()))
                    throw std::invalid_argument("reactant action: index out of range");
                if (static_cast<int>(s.collected.size()) >= cfg.max_reactants)
                    throw std::invalid_argument("reactant action: budget exhausted");
                out.state = s;
                out.state.collected.insert(
                    std::upper_bound(out.state.collected.begin(),
                                     out.state.collected.end(), a.rp),
                    a.rp);
                out.ok = true;
                return out;
            }
            if (a.kind == ActionKind::Advance) {
                if (!is_complete(s, lib))
                    throw std::invalid_argument("advance before mappability is satisfied");
                out.state = s;
                out.state.phase = Phase::Phase3;
                out.ok = true;
                return out;
            }
            throw std::invalid_argument("phase 2 expects a reactant or advance action");
        }
        case Phase::Phase3: {
            if (a.kind != ActionKind::Map)
                throw std::invalid_argument("phase 3 expects a map action");
            const PatternGraph& pp = lib.pps[s.match.pattern_index];
            const MappingTriple& t = a.triple;
            if (!pp.is_mappable(t.j) || triple_mapped_j(s, t.j))
                throw std::invalid_argument("map action: product atom not available");
            if (t.k < 0 || t.k >= static_cast<int>(s.collected.size()))
                throw std::invalid_argument("map action: reactant list index out of range");
            const PatternGraph& rp = lib.rps[s.collected[t.k]];
            if (!rp.is_mappable(t.l) || triple_mapped_kl(s, t.k, t.l))
                throw std::invalid_argument("map action: reactant atom not available");
            if (pp.graph.atoms[t.j].symbol != rp.graph.atoms[t.l].symbol)
                throw std::invalid_argument("map action: atom symbols differ");
            out.state = s;
            out.state.mapping.insert(
                std::upper_bound(out.state.mapping.begin(), out.state.mapping.end(), t), t);
            if (static_cast<int>(out.state.mapping.size()) < pp_mappable_count(s, lib)) {
                out.ok = true;
                return out;
            }
            // Composed template complete: apply it to finish the trajectory.
            Template composed = compose_template(out.state, lib);
            ApplyResult res = apply_template(composed, s.product, s.match);
            if (!res.ok) {
                out.ok = false;
                out.error = res.error;
                return out;
            }
            out.state.phase = Phase::Terminal;
            out.state.composed = std::move(composed);
            out.state.reactants = std::move(res.reactants);
            out.state.reaction = reaction_key(out.state.reactants, s.product);
            out.ok = true;
            return out;
        }
    }
    throw std::logic_error("unreachable");
}

int parent_count(const State& s) {
    switch (s.phase) {
        case Phase::Phase1:
            throw std::invalid_argument("initial states have no parents");
        case Phase::Phase2: {
            if (s.collected.empty()) return 1;  // only the phase-1 match leads here
            int distinct = 1;
            for (std::size_t i = 1; i < s.collected.size(); ++i)
                if (s.collected[i] != s.collected[i - 1]) ++distinct;
            return distinct;
        }
        case Phase::Phase3:
            // Entry state comes only from ADVANCE; otherwise any mapping
            // could have been added last (triples are pairwise distinct).
            return s.mapping.empty() ? 1 : static_cast<int>(s.mapping.size());
        case Phase::Terminal:
            return static_cast<int>(s.composed.mapping.size());
    }
    throw std::logic_error("unreachable");
}

std::optional<PreparedBackward> prepare_backward(const ReactionRecord& reaction,
                                                 const PatternLibrary& lib,
                                                 const EnvConfig& cfg) {
    Match origin;
    Template t;
    try {
        t = extract_template(reaction, cfg.radius, &origin);
    } catch (const ExtractError&) {
        return std::nullopt;
    }
    int pp_idx = lib.find_pp(t.product_pattern);
    if (pp_idx < 0) return std::nullopt;
    if (static_cast<int>(t.reactant_patterns.size()) > cfg.max_reactants)
        return std::nullopt;
    std::vector<int> rp_idx;
    for (const PatternGraph& rp : t.reactant_patterns) {
        int idx = lib.find_rp(rp);
        if (idx < 0) return std::nullopt;
        rp_idx.push_back(idx);
    }

    // The state keeps collected indices sorted, so remap each extraction
    // position k to a distinct slot of the sorted multiset.
    std::vector<int> collected = rp_idx;
    std::sort(collected.begin(), collected.end());
    std::vector<bool> taken(collected.size(), false);
    std::vector<MappingTriple> full = t.mapping;
    std::vector<int> slot_of(rp_idx.size(), -1);
    for (std::size_t k = 0; k < rp_idx.size(); ++k) {
        for (std::size_t p = 0; p < collected.size(); ++p) {
            if (!taken[p] && collected[p] == rp_idx[k]) {
                taken[p] = true;
                slot_of[k] = static_cast<int>(p);
                break;
            }
        }
    }
    for (MappingTriple& m : full) m.k = slot_of[m.k];

    PreparedBackward prep;
    prep.product = reaction.product;
    prep.match.pattern_index = pp_idx;
    prep.match.atom_indices = origin.atom_indices;
    prep.collected = std::move(collected);
    prep.triples = std::move(full);
    return prep;
}

PreparedBackward prepare_backward(const State& terminal) {
    if (terminal.phase != Phase::Terminal)
        throw std::invalid_argument("prepare_backward: state is not terminal");
    PreparedBackward prep;
    prep.product = terminal.product;
    prep.match = terminal.match;
    prep.collected = terminal.collected;
    prep.triples = terminal.mapping;  // k already indexes the sorted collected list
    return prep;
}

Trajectory sample_backward(const PreparedBackward& prep, const PatternLibrary& lib,
                           const EnvConfig& cfg, std::mt19937_64& rng) {
    // Uniform backward choices: mappings un-done in a uniformly random
    // order; pattern removals pick uniformly among the distinct indices of
    // the remaining multiset at each step.
    std::vector<MappingTriple> map_order = prep.triples;
    for (std::size_t i = map_order.size(); i > 1; --i)
        std::swap(map_order[i - 1], map_order[rng() % i]);
    std::reverse(map_order.begin(), map_order.end());  // forward order

    std::vector<int> remaining = prep.collected;
    std::vector<int> add_order;
    while (!remaining.empty()) {
        std::vector<int> distinct;
        for (std::size_t i = 0; i < remaining.size(); ++i)
            if (i == 0 || remaining[i] != remaining[i - 1]) distinct.push_back(remaining[i]);
        int pick = distinct[rng() % distinct.size()];
        remaining.erase(std::find(remaining.begin(), remaining.end(), pick));
        add_order.push_back(pick);
    }
    std::reverse(add_order.begin(), add_order.end());  // forward order

    // Replay forward through step() so every cached state is authentic.
    Trajectory traj;
    State s = initial_state(prep.product);
    Action match_action;
    match_action.kind = ActionKind::Match;
    match_action.match = prep.match;
    std::vector<Action> actions;
    actions.push_back(match_action);
    for (int rp : add_order) {
        Action a;
        a.kind = ActionKind::Reactant;
        a.rp = rp;
        actions.push_back(a);
    }
    Action adv;
    adv.kind = ActionKind::Advance;
    actions.push_back(adv);
    for (const MappingTriple& m : map_order) {
        Action a;
        a.kind = ActionKind::Map;
        a.triple = m;
        actions.push_back(a);
    }
    for (const Action& a : actions) {
        StepResult r = step(s, a, lib, cfg);
        if (!r.ok)
            throw std::runtime_error("sample_backward: forward replay failed: " + r.error);
        traj.states.push_back(s);
        traj.actions.push_back(a);
        traj.log_pb.push_back(-std::log(static_cast<double>(parent_count(r.state))));
        s = std::move(r.state);
    }
    traj.states.push_back(s);
    traj.log_pf.assign(traj.actions.size(), 0.0);
    return traj;
}

std::optional<Trajectory> backward_sample(const ReactionRecord& reaction,
                                          const PatternLibrary& lib, const EnvConfig& cfg,
                                          std::mt19937_64& rng) {
    std::optional<PreparedBackward> prep = prepare_backward(reaction, lib, cfg);
    if (!prep) return std::nullopt;
    return sample_backward(*prep, lib, cfg, rng);
}

std::string state_key(const State& s) {
    std::string key;
    switch (s.phase) {
        case Phase::Phase1: key = "P1|"; break;
        case Phase::Phase2: key = "P2|"; break;
        case Phase::Phase3: key = "P3|"; break;
        case Phase::Terminal: key = "T|"; break;
    }
    key += s.product_key;
    if (s.phase == Phase::Phase1) return key;
    key += "|m" + std::to_string(s.match.pattern_index) + ":";
    for (int i : s.match.atom_indices) key += std::to_string(i) + ",";
    key += "|R";
    for (int rp : s.collected) key += std::to_string(rp) + ",";
    if (s.phase == Phase::Phase2) return key;
    key += "|M";
    for (const MappingTriple& m : s.mapping)
        key += std::to_string(m.j) + "." + std::to_string(m.k) + "." +
               std::to_string(m.l) + ",";
    if (s.phase == Phase::Terminal) key += "|" + s.reaction;
    return key;
}

std::vector<Trajectory> enumerate_all_trajectories(const MolGraph& product,
                                                   const PatternLibrary& lib,
                                                   const EnvConfig& cfg, std::size_t limit) {
    std::vector<Trajectory> out;
    Trajectory partial;
    dfs_trajectories(initial_state(product), lib, cfg, limit, partial, out);
    return out;
}

std::string trajectory_debug_text(const Trajectory& t) {
    std::string out;
    for (const Action& a : t.actions) {
        switch (a.kind) {
            case ActionKind::Match: {
                out += "match pp=" + std::to_string(a.match.pattern_index) + " atoms=";
                for (int i : a.match.atom_indices) out += std::to_string(i) + ",";
                break;
            }
            case ActionKind::Reactant:
                out += "reactant rp=" + std::to_string(a.rp);
                break;
            case ActionKind::Advance:
                out += "advance";
                break;
            case ActionKind::Map:
                out += "map j=" + std::to_string(a.triple.j) +
                       " k=" + std::to_string(a.triple.k) +
                       " l=" + std::to_string(a.triple.l);
                break;
        }
        out += "\n";
    }
    if (!t.states.empty() && t.states.back().phase == Phase::Terminal)
        out += "terminal " + t.states.back().reaction + "\n";
    return out;
}

}  // namespace retroflow
