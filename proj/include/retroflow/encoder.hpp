#pragma once

#include <random>
#include <string>
#include <vector>

#include "retroflow/autodiff.hpp"
#include "retroflow/mol_ops.hpp"
#include "retroflow/molgraph.hpp"

namespace retroflow {

struct MpnnLayer {
    Param w;  // (d + edge features) x d
    Param b;  // 1 x d
};

/// One encoder stack: input projection, message-passing layers, then a
/// single pre-norm multi-head self-attention layer with a two-layer
/// feed-forward block (hidden width 2d). Residual connections throughout.
struct EncoderParams {
    Param w_in, b_in;
    std::vector<MpnnLayer> layers;
    std::vector<Param> wq, wk, wv;  // one d x (d/heads) matrix per head
    Param wo, bo;
    Param ln1_g, ln1_b, ln2_g, ln2_b;
    Param ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct Mlp {
    Param w1, b1, w2, b2;  // in x hidden, GeLU, hidden x out
};

/// Uniform init in [-bound, bound] (for tables whose row count is not a
/// fan-in, where uniform_init's scaling would be wrong).
Tensor uniform_scaled(int rows, int cols, double bound, std::mt19937_64& rng);

Mlp make_mlp(const std::string& name, int in, int hidden, int out, std::mt19937_64& rng);

EncoderParams make_encoder(const std::string& name, int hidden_dim, int attention_heads,
                           int feature_dim, int num_layers, std::mt19937_64& rng);

void collect_params(EncoderParams& e, std::vector<Param*>& out);
void collect_params(Mlp& m, std::vector<Param*>& out);

/// Runs one encoder over a (possibly disconnected) graph: messages pass along
/// bonds only; the attention layer sees every node. num_atoms x d.
Var encode_graph(Tape& t, int hidden_dim, int attention_heads, EncoderParams& e,
                 const Tensor& node_features, const std::vector<Bond>& bonds);

Var run_mlp(Tape& t, Mlp& m, Var x);

Tensor feature_tensor(const FeatureMatrix& f);

}  // namespace retroflow
