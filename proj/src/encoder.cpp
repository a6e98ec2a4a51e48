#include "retroflow/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace retroflow {

namespace {

Tensor ones_row(int cols) {
    Tensor t(1, cols);
    t.fill(1.0);
    return t;
}

}  // namespace

Tensor uniform_scaled(int rows, int cols, double bound, std::mt19937_64& rng) {
    Tensor t(rows, cols);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& x : t.v) x = dist(rng);
    return t;
}

Mlp make_mlp(const std::string& name, int in, int hidden, int out, std::mt19937_64& rng) {
    Mlp m;
    m.w1 = Param(name + ".w1", uniform_init(in, hidden, rng));
    m.b1 = Param(name + ".b1", Tensor(1, hidden));
    m.w2 = Param(name + ".w2", uniform_init(hidden, out, rng));
    m.b2 = Param(name + ".b2", Tensor(1, out));
    return m;
}

EncoderParams make_encoder(const std::string& name, int hidden_dim, int attention_heads,
                           int feature_dim, int num_layers, std::mt19937_64& rng) {
    int d = hidden_dim;
    int dh = d / attention_heads;
    EncoderParams e;
    e.w_in = Param(name + ".w_in", uniform_init(feature_dim, d, rng));
    e.b_in = Param(name + ".b_in", Tensor(1, d));
    for (int l = 0; l < num_layers; ++l) {
        MpnnLayer layer;
        layer.w = Param(name + ".layer" + std::to_string(l) + ".w",
                        uniform_init(d + kEdgeFeatureDim, d, rng));
        layer.b = Param(name + ".layer" + std::to_string(l) + ".b", Tensor(1, d));
        e.layers.push_back(std::move(layer));
    }
    for (int h = 0; h < attention_heads; ++h) {
        std::string suffix = std::to_string(h);
        e.wq.emplace_back(name + ".attn.q" + suffix, uniform_init(d, dh, rng));
        e.wk.emplace_back(name + ".attn.k" + suffix, uniform_init(d, dh, rng));
        e.wv.emplace_back(name + ".attn.v" + suffix, uniform_init(d, dh, rng));
    }
    e.wo = Param(name + ".attn.out", uniform_init(d, d, rng));
    e.bo = Param(name + ".attn.out_b", Tensor(1, d));
    e.ln1_g = Param(name + ".ln1.g", ones_row(d));
    e.ln1_b = Param(name + ".ln1.b", Tensor(1, d));
    e.ln2_g = Param(name + ".ln2.g", ones_row(d));
    e.ln2_b = Param(name + ".ln2.b", Tensor(1, d));
    e.ffn_w1 = Param(name + ".ffn.w1", uniform_init(d, 2 * d, rng));
    e.ffn_b1 = Param(name + ".ffn.b1", Tensor(1, 2 * d));
    e.ffn_w2 = Param(name + ".ffn.w2", uniform_init(2 * d, d, rng));
    e.ffn_b2 = Param(name + ".ffn.b2", Tensor(1, d));
    return e;
}

void collect_params(EncoderParams& e, std::vector<Param*>& out) {
    out.push_back(&e.w_in);
    out.push_back(&e.b_in);
    for (MpnnLayer& l : e.layers) {
        out.push_back(&l.w);
        out.push_back(&l.b);
    }
    for (std::size_t h = 0; h < e.wq.size(); ++h) {
        out.push_back(&e.wq[h]);
        out.push_back(&e.wk[h]);
        out.push_back(&e.wv[h]);
    }
    out.push_back(&e.wo);
    out.push_back(&e.bo);
    out.push_back(&e.ln1_g);
    out.push_back(&e.ln1_b);
    out.push_back(&e.ln2_g);
    out.push_back(&e.ln2_b);
    out.push_back(&e.ffn_w1);
    out.push_back(&e.ffn_b1);
    out.push_back(&e.ffn_w2);
    out.push_back(&e.ffn_b2);
}

void collect_params(Mlp& m, std::vector<Param*>& out) {
    out.push_back(&m.w1);
    out.push_back(&m.b1);
    out.push_back(&m.w2);
    out.push_back(&m.b2);
}

Var encode_graph(Tape& t, int hidden_dim, int attention_heads, EncoderParams& e,
                 const Tensor& node_features, const std::vector<Bond>& bonds) {
    int n = node_features.rows;
    if (n == 0) throw std::invalid_argument("cannot encode an empty graph");
    Var h = t.add(t.matmul(t.input(node_features), t.use(e.w_in)), t.use(e.b_in));

    // Each bond acts in both directions with the same edge features.
    std::vector<int> src, dst;
    Tensor edge_features(static_cast<int>(bonds.size()) * 2, kEdgeFeatureDim);
    for (std::size_t i = 0; i < bonds.size(); ++i) {
        int order = static_cast<int>(bonds[i].order) - 1;
        src.push_back(bonds[i].a);
        dst.push_back(bonds[i].b);
        edge_features.at(static_cast<int>(2 * i), order) = 1.0;
        src.push_back(bonds[i].b);
        dst.push_back(bonds[i].a);
        edge_features.at(static_cast<int>(2 * i + 1), order) = 1.0;
    }

    Var edges = t.input(std::move(edge_features));
    for (MpnnLayer& layer : e.layers) {
        if (bonds.empty()) break;  // no messages: GeLU(0) leaves h unchanged
        Var messages = t.concat_cols(t.gather_rows(h, src), edges);
        messages = t.add(t.matmul(messages, t.use(layer.w)), t.use(layer.b));
        h = t.add(h, t.gelu(t.segment_sum(messages, dst, n)));
    }

    int dh = hidden_dim / attention_heads;
    Var x1 = t.layer_norm(h, t.use(e.ln1_g), t.use(e.ln1_b));
    Var heads;
    for (int head = 0; head < attention_heads; ++head) {
        Var q = t.matmul(x1, t.use(e.wq[head]));
        Var k = t.matmul(x1, t.use(e.wk[head]));
        Var v = t.matmul(x1, t.use(e.wv[head]));
        Var scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(dh));
        Var out = t.matmul(t.softmax_rows(scores), v);
        heads = head == 0 ? out : t.concat_cols(heads, out);
    }
    h = t.add(h, t.add(t.matmul(heads, t.use(e.wo)), t.use(e.bo)));
    Var x2 = t.layer_norm(h, t.use(e.ln2_g), t.use(e.ln2_b));
    Var ffn = t.gelu(t.add(t.matmul(x2, t.use(e.ffn_w1)), t.use(e.ffn_b1)));
    return t.add(h, t.add(t.matmul(ffn, t.use(e.ffn_w2)), t.use(e.ffn_b2)));
}

Var run_mlp(Tape& t, Mlp& m, Var x) {
    Var hidden = t.gelu(t.add(t.matmul(x, t.use(m.w1)), t.use(m.b1)));
    return t.add(t.matmul(hidden, t.use(m.w2)), t.use(m.b2));
}

Tensor feature_tensor(const FeatureMatrix& f) {
    Tensor t(f.rows, f.cols);
    t.v = f.data;
    return t;
}

}  // namespace retroflow
