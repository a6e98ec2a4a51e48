#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

namespace retroflow {

// Dense row-major matrix of doubles. Vectors are 1xC or Rx1 tensors.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}

    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
    std::size_t size() const { return v.size(); }
    void fill(double x) { std::fill(v.begin(), v.end(), x); }
};

// Weight initialization: uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] where
// fan_in is the row count (inputs are row vectors multiplied on the left).
Tensor uniform_init(int rows, int cols, std::mt19937_64& rng);

// A named trainable tensor with its gradient accumulator.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, Tensor t) : name(std::move(n)), value(std::move(t)) {
        grad = Tensor(value.rows, value.cols);
    }
    void zero_grad() { grad.fill(0.0); }
};

struct Var {
    int id = -1;
};

// Reverse-mode tape. Build a computation with the op methods, then call
// backward(loss) on a 1x1 node; gradients of bound Params accumulate into
// their .grad tensors. A Tape is single-use per forward pass.
class Tape {
public:
    Var input(Tensor t);   // constant leaf
    Var use(Param& p);     // differentiable leaf bound to p

    // Elementwise ops. b may broadcast: 1x1 scalar, 1xC over rows, Rx1 over cols.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);

    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var concat_cols(Var a, Var b);
    Var gather_rows(Var a, std::vector<int> idx);
    Var segment_sum(Var a, std::vector<int> seg, int num_segments);

    Var sum(Var a);        // 1x1
    Var mean_rows(Var a);  // 1xC, mean over rows
    Var pick(Var a, int r, int c);  // 1x1 element selection

    Var gelu(Var a);     // exact erf form
    Var sigmoid(Var a);
    // softmax(temperature * x) per row; log variant is numerically stable.
    Var softmax_rows(Var a, double temperature = 1.0);
    Var log_softmax_rows(Var a, double temperature = 1.0);
    Var logsumexp_rows(Var a);  // Rx1
    // Per-row layer norm with learned 1xC gamma/beta, eps 1e-5.
    Var layer_norm(Var a, Var gamma, Var beta);
    // Mean binary cross entropy from logits; targets same shape as logits.
    Var bce_with_logits(Var logits, Var targets);

    const Tensor& value(Var a) const { return nodes_[a.id].value; }
    int rows(Var a) const { return nodes_[a.id].value.rows; }
    int cols(Var a) const { return nodes_[a.id].value.cols; }

    void backward(Var loss);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void()> back;
        Param* bound = nullptr;
    };
    std::vector<Node> nodes_;

    Var emit(Tensor value);
    Tensor& grad(Var a) { return nodes_[a.id].grad; }
    const Tensor& val(Var a) const { return nodes_[a.id].value; }
};

// Adam optimizer over a fixed parameter list.
class Adam {
public:
    explicit Adam(std::vector<Param*> params, double lr = 5e-4, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8);

    // Scales all gradients so their global L2 norm is at most max_norm.
    // Returns the pre-clip norm.
    double clip_gradients(double max_norm);
    void step();
    void zero_grad();

private:
    std::vector<Param*> params_;
    std::vector<Tensor> m_, v_;
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
};

// Text checkpoints keyed by parameter name; doubles round-trip exactly.
void save_checkpoint(const std::string& path, const std::vector<Param*>& params);
void load_checkpoint(const std::string& path, const std::vector<Param*>& params);

}  // namespace retroflow
