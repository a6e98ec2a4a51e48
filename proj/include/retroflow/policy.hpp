#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "retroflow/autodiff.hpp"
#include "retroflow/encoder.hpp"
#include "retroflow/env.hpp"
#include "retroflow/mol_ops.hpp"
#include "retroflow/templates.hpp"

namespace retroflow {

struct EncoderConfig {
    int hidden_dim = 200;
    int gnn1_layers = 4;
    int gnn2_layers = 3;
    int attention_heads = 8;
    int rw_pe_steps = 16;  // must equal the fixed featurization schema width
};

/// Pattern nodes carry the molecule features plus the mappable flag and the
/// per-atom charge / implicit-H deltas recorded at extraction time.
inline constexpr int kPatternFeatureDim = kNodeFeatureDim + 3;

/// The learnable forward policy: two graph encoders, one score head per
/// phase, index embedding tables for the pattern libraries, and the
/// per-product log-flow table used by trajectory-balance training.
class Policy {
public:
    /// Sizes the embedding tables and the phase-2 output layer (one row per
    /// reactant pattern plus the advance row) for a fixed library.
    Policy(const EncoderConfig& cfg, int num_pps, int num_rps, std::uint64_t seed);

    const EncoderConfig& config() const { return cfg_; }
    int num_pps() const { return num_pps_; }
    int num_rps() const { return num_rps_; }

    /// Every trainable tensor in a stable order, including all log-flow
    /// entries created so far. Create flow entries before building an
    /// optimizer over this list.
    std::vector<Param*> params();

    /// Per-product log-flow scalar, created zero-initialized on first use.
    Param& flow_param(const std::string& product_key);

    /// Node embeddings (num_atoms x d) on a caller-owned tape.
    Var encode_product(Tape& t, const MolGraph& g);
    Var encode_pattern(Tape& t, const PatternGraph& p);

    /// Phase-1 score: MLP over the summed embeddings of the matched atoms.
    /// Invariant under permutation of the match (indices are sorted first).
    Var score_phase1(Tape& t, Var product_nodes, const Match& m);

    /// Phase-2 scores for every reactant pattern plus the trailing advance
    /// column, from [matched-atom sum | pp embedding | sum of collected rp
    /// embeddings]. 1 x (num_rps + 1).
    Var score_phase2_row(Tape& t, Var product_nodes, const State& s);

    /// Phase-3 score for pairing matched product atom i_j with pattern atom l.
    Var score_phase3(Tape& t, Var product_nodes, Var pattern_nodes, int i_j, int l);

    /// Encoding cache for one tape: each product / pattern is encoded once
    /// per context and the embedding Vars are shared by later scores.
    struct Context {
        Tape* tape = nullptr;
        std::unordered_map<std::string, Var> products;  // product_key -> n x d
        std::unordered_map<int, Var> patterns;          // rp library index -> n x d
    };
    Var product_embedding(Context& ctx, const MolGraph& g, const std::string& key);
    Var pattern_embedding(Context& ctx, const PatternLibrary& lib, int rp_index);

    /// 1x1 score Vars aligned with the enumerated actions of s.
    std::vector<Var> action_scores(Context& ctx, const State& s,
                                   const std::vector<Action>& actions,
                                   const PatternLibrary& lib);

    /// Scores concatenated into one 1xN row, aligned with `actions`. Callers
    /// that need both the sampling distribution and a chosen action's
    /// log-probability build them from this single row.
    Var action_score_row(Context& ctx, const State& s, const std::vector<Action>& actions,
                         const PatternLibrary& lib);

    /// log P_F(actions[chosen] | s): tempered log-softmax over action scores.
    Var action_log_prob(Context& ctx, const State& s, const std::vector<Action>& actions,
                        int chosen, const PatternLibrary& lib, double alpha);

    /// Forward-only action probabilities (sum to 1).
    std::vector<double> action_distribution(Context& ctx, const State& s,
                                            const std::vector<Action>& actions,
                                            const PatternLibrary& lib, double alpha);

    void save(const std::string& path);
    /// Restores a checkpoint written by save(); log-flow entries present in
    /// the file are created before loading, and shapes are validated.
    void load(const std::string& path);

private:
    EncoderConfig cfg_;
    int num_pps_ = 0;
    int num_rps_ = 0;
    EncoderParams gnn1_, gnn2_;
    Mlp mlp1_, mlp2_, mlp3_;
    Param e_pps_, e_rps_;
    std::map<std::string, Param> flow_;  // ordered for stable params()

    Var matched_sum(Tape& t, Var product_nodes, const std::vector<int>& atom_indices);
    Var concat_scores(Tape& t, const std::vector<Var>& scores);
};

}  // namespace retroflow
