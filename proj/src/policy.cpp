#include "retroflow/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace retroflow {

namespace {

// Pattern features: molecule featurization plus mappable flag and the
// extraction-time charge / implicit-H deltas.
Tensor pattern_feature_tensor(const PatternGraph& p) {
    Features base = featurize(p.graph);
    int n = base.nodes.rows;
    Tensor t(n, kPatternFeatureDim);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < kNodeFeatureDim; ++c) t.at(i, c) = base.nodes.at(i, c);
        t.at(i, kNodeFeatureDim) = p.is_mappable(i) ? 1.0 : 0.0;
        t.at(i, kNodeFeatureDim + 1) = p.origin[i].charge_delta;
        t.at(i, kNodeFeatureDim + 2) = p.origin[i].implicit_h_delta;
    }
    return t;
}

}  // namespace

Policy::Policy(const EncoderConfig& cfg, int num_pps, int num_rps, std::uint64_t seed)
    : cfg_(cfg), num_pps_(num_pps), num_rps_(num_rps) {
    if (cfg.hidden_dim <= 0 || cfg.attention_heads <= 0 ||
        cfg.hidden_dim % cfg.attention_heads != 0)
        throw std::invalid_argument("hidden_dim must be a positive multiple of attention_heads");
    if (cfg.gnn1_layers < 0 || cfg.gnn2_layers < 0)
        throw std::invalid_argument("encoder layer counts must be non-negative");
    if (cfg.rw_pe_steps != kRandomWalkSteps)
        throw std::invalid_argument("featurization schema is fixed at " +
                                    std::to_string(kRandomWalkSteps) + " random-walk steps");
    if (num_pps < 0 || num_rps < 0)
        throw std::invalid_argument("library sizes must be non-negative");

    std::mt19937_64 rng(seed);
    int d = cfg.hidden_dim;
    gnn1_ = make_encoder("gnn1", d, cfg.attention_heads, kNodeFeatureDim, cfg.gnn1_layers, rng);
    gnn2_ = make_encoder("gnn2", d, cfg.attention_heads, kPatternFeatureDim, cfg.gnn2_layers, rng);
    mlp1_ = make_mlp("mlp1", d, d, 1, rng);
    mlp2_ = make_mlp("mlp2", 3 * d, d, num_rps + 1, rng);
    mlp3_ = make_mlp("mlp3", 2 * d, d, 1, rng);
    double bound = 1.0 / std::sqrt(static_cast<double>(d));
    e_pps_ = Param("E_PPS", uniform_scaled(num_pps, d, bound, rng));
    e_rps_ = Param("E_RPS", uniform_scaled(num_rps, d, bound, rng));
}

std::vector<Param*> Policy::params() {
    std::vector<Param*> out;
    collect_params(gnn1_, out);
    collect_params(gnn2_, out);
    collect_params(mlp1_, out);
    collect_params(mlp2_, out);
    collect_params(mlp3_, out);
    out.push_back(&e_pps_);
    out.push_back(&e_rps_);
    for (auto& [key, p] : flow_) out.push_back(&p);
    return out;
}

Param& Policy::flow_param(const std::string& product_key) {
    auto it = flow_.find(product_key);
    if (it == flow_.end())
        it = flow_.emplace(product_key, Param("E_P:" + product_key, Tensor(1, 1))).first;
    return it->second;
}

Var Policy::encode_product(Tape& t, const MolGraph& g) {
    Features f = featurize(g);
    return encode_graph(t, cfg_.hidden_dim, cfg_.attention_heads, gnn1_,
                        feature_tensor(f.nodes), g.bonds);
}

Var Policy::encode_pattern(Tape& t, const PatternGraph& p) {
    return encode_graph(t, cfg_.hidden_dim, cfg_.attention_heads, gnn2_,
                        pattern_feature_tensor(p), p.graph.bonds);
}

Var Policy::matched_sum(Tape& t, Var product_nodes, const std::vector<int>& atom_indices) {
    if (atom_indices.empty()) throw std::invalid_argument("empty atom index set");
    int n = t.rows(product_nodes);
    for (int i : atom_indices)
        if (i < 0 || i >= n) throw std::out_of_range("matched atom index out of range");
    // Sorting makes the sum bytewise identical for any ordering of the match.
    std::vector<int> sorted = atom_indices;
    std::sort(sorted.begin(), sorted.end());
    Var rows = t.gather_rows(product_nodes, sorted);
    return t.segment_sum(rows, std::vector<int>(sorted.size(), 0), 1);
}

Var Policy::score_phase1(Tape& t, Var product_nodes, const Match& m) {
    Var summed = matched_sum(t, product_nodes, m.atom_indices);
    return t.pick(run_mlp(t, mlp1_, summed), 0, 0);
}

Var Policy::score_phase2_row(Tape& t, Var product_nodes, const State& s) {
    if (s.match.pattern_index < 0 || s.match.pattern_index >= num_pps_)
        throw std::out_of_range("product pattern index out of range");
    Var summed = matched_sum(t, product_nodes, s.match.atom_indices);
    Var pp_embed = t.gather_rows(t.use(e_pps_), {s.match.pattern_index});
    Var collected_sum;
    if (s.collected.empty()) {
        collected_sum = t.input(Tensor(1, cfg_.hidden_dim));
    } else {
        for (int rp : s.collected)
            if (rp < 0 || rp >= num_rps_)
                throw std::out_of_range("reactant pattern index out of range");
        Var rows = t.gather_rows(t.use(e_rps_), s.collected);
        collected_sum = t.segment_sum(rows, std::vector<int>(s.collected.size(), 0), 1);
    }
    Var joint = t.concat_cols(t.concat_cols(summed, pp_embed), collected_sum);
    return run_mlp(t, mlp2_, joint);
}

Var Policy::score_phase3(Tape& t, Var product_nodes, Var pattern_nodes, int i_j, int l) {
    if (i_j < 0 || i_j >= t.rows(product_nodes))
        throw std::out_of_range("product atom index out of range");
    if (l < 0 || l >= t.rows(pattern_nodes))
        throw std::out_of_range("pattern atom index out of range");
    Var pair = t.concat_cols(t.gather_rows(product_nodes, {i_j}),
                             t.gather_rows(pattern_nodes, {l}));
    return t.pick(run_mlp(t, mlp3_, pair), 0, 0);
}

Var Policy::product_embedding(Context& ctx, const MolGraph& g, const std::string& key) {
    auto it = ctx.products.find(key);
    if (it != ctx.products.end()) return it->second;
    Var v = encode_product(*ctx.tape, g);
    ctx.products.emplace(key, v);
    return v;
}

Var Policy::pattern_embedding(Context& ctx, const PatternLibrary& lib, int rp_index) {
    auto it = ctx.patterns.find(rp_index);
    if (it != ctx.patterns.end()) return it->second;
    Var v = encode_pattern(*ctx.tape, lib.rps[rp_index]);
    ctx.patterns.emplace(rp_index, v);
    return v;
}

std::vector<Var> Policy::action_scores(Context& ctx, const State& s,
                                       const std::vector<Action>& actions,
                                       const PatternLibrary& lib) {
    if (actions.empty())
        throw std::invalid_argument("no actions to score: dead-end state");
    Tape& t = *ctx.tape;
    Var product = product_embedding(ctx, s.product, s.product_key);
    std::vector<Var> scores;
    scores.reserve(actions.size());
    switch (s.phase) {
        case Phase::Phase1:
            for (const Action& a : actions) {
                if (a.kind != ActionKind::Match)
                    throw std::invalid_argument("phase 1 scores expect match actions");
                scores.push_back(score_phase1(t, product, a.match));
            }
            break;
        case Phase::Phase2: {
            Var row = score_phase2_row(t, product, s);
            for (const Action& a : actions) {
                if (a.kind == ActionKind::Reactant) {
                    if (a.rp < 0 || a.rp >= num_rps_)
                        throw std::out_of_range("reactant pattern index out of range");
                    scores.push_back(t.pick(row, 0, a.rp));
                } else if (a.kind == ActionKind::Advance) {
                    scores.push_back(t.pick(row, 0, num_rps_));
                } else {
                    throw std::invalid_argument("phase 2 scores expect reactant/advance");
                }
            }
            break;
        }
        case Phase::Phase3:
            for (const Action& a : actions) {
                if (a.kind != ActionKind::Map)
                    throw std::invalid_argument("phase 3 scores expect map actions");
                Var pattern = pattern_embedding(ctx, lib, s.collected[a.triple.k]);
                int i_j = s.match.atom_indices[a.triple.j];
                scores.push_back(score_phase3(t, product, pattern, i_j, a.triple.l));
            }
            break;
        case Phase::Terminal:
            throw std::invalid_argument("terminal states have no action scores");
    }
    return scores;
}

Var Policy::concat_scores(Tape& t, const std::vector<Var>& scores) {
    Var row = scores[0];
    for (std::size_t i = 1; i < scores.size(); ++i) row = t.concat_cols(row, scores[i]);
    return row;
}

Var Policy::action_score_row(Context& ctx, const State& s,
                             const std::vector<Action>& actions, const PatternLibrary& lib) {
    return concat_scores(*ctx.tape, action_scores(ctx, s, actions, lib));
}

Var Policy::action_log_prob(Context& ctx, const State& s,
                            const std::vector<Action>& actions, int chosen,
                            const PatternLibrary& lib, double alpha) {
    if (chosen < 0 || chosen >= static_cast<int>(actions.size()))
        throw std::out_of_range("chosen action index out of range");
    Tape& t = *ctx.tape;
    Var row = action_score_row(ctx, s, actions, lib);
    return t.pick(t.log_softmax_rows(row, alpha), 0, chosen);
}

std::vector<double> Policy::action_distribution(Context& ctx, const State& s,
                                                const std::vector<Action>& actions,
                                                const PatternLibrary& lib, double alpha) {
    Tape& t = *ctx.tape;
    Var row = action_score_row(ctx, s, actions, lib);
    const Tensor& probs = t.value(t.softmax_rows(row, alpha));
    return probs.v;
}

void Policy::save(const std::string& path) { save_checkpoint(path, params()); }

void Policy::load(const std::string& path) {
    // Create flow entries named in the file so the strict name check passes.
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    nlohmann::json j;
    in >> j;
    if (j.contains("params"))
        for (const auto& [name, entry] : j.at("params").items())
            if (name.rfind("E_P:", 0) == 0) flow_param(name.substr(4));
    load_checkpoint(path, params());
}

}  // namespace retroflow
