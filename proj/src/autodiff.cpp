#include "retroflow/autodiff.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace retroflow {

namespace {

constexpr double kLayerNormEps = 1e-5;
const double kInvSqrt2 = 1.0 / std::sqrt(2.0);
const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * M_PI);

// Broadcast classification for the elementwise ops: b must be same-shape,
// 1x1, a row vector matching a's cols, or a column vector matching a's rows.
enum class Bcast { Same, Scalar, Row, Col };

Bcast classify(const Tensor& a, const Tensor& b) {
    if (a.rows == b.rows && a.cols == b.cols) return Bcast::Same;
    if (b.rows == 1 && b.cols == 1) return Bcast::Scalar;
    if (b.rows == 1 && b.cols == a.cols) return Bcast::Row;
    if (b.cols == 1 && b.rows == a.rows) return Bcast::Col;
    throw std::invalid_argument("incompatible shapes for elementwise op");
}

double bval(const Tensor& b, Bcast m, int r, int c) {
    switch (m) {
        case Bcast::Same: return b.at(r, c);
        case Bcast::Scalar: return b.at(0, 0);
        case Bcast::Row: return b.at(0, c);
        case Bcast::Col: return b.at(r, 0);
    }
    return 0.0;
}

void baccum(Tensor& bg, Bcast m, int r, int c, double g) {
    switch (m) {
        case Bcast::Same: bg.at(r, c) += g; break;
        case Bcast::Scalar: bg.at(0, 0) += g; break;
        case Bcast::Row: bg.at(0, c) += g; break;
        case Bcast::Col: bg.at(r, 0) += g; break;
    }
}

}  // namespace

Tensor uniform_init(int rows, int cols, std::mt19937_64& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(rows));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(rows, cols);
    for (double& x : t.v) x = dist(rng);
    return t;
}

Var Tape::emit(Tensor value) {
    Node n;
    n.grad = Tensor(value.rows, value.cols);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Tensor t) { return emit(std::move(t)); }

Var Tape::use(Param& p) {
    Var v = emit(p.value);
    nodes_[v.id].bound = &p;
    return v;
}

Var Tape::add(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    Bcast m = classify(ta, tb);
    Tensor out(ta.rows, ta.cols);
    for (int r = 0; r < ta.rows; ++r)
        for (int c = 0; c < ta.cols; ++c) out.at(r, c) = ta.at(r, c) + bval(tb, m, r, c);
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, b, o, m] {
        const Tensor& g = grad(o);
        Tensor& ga = grad(a);
        Tensor& gb = grad(b);
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) {
                ga.at(r, c) += g.at(r, c);
                baccum(gb, m, r, c, g.at(r, c));
            }
    };
    return o;
}

Var Tape::sub(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    Bcast m = classify(ta, tb);
    Tensor out(ta.rows, ta.cols);
    for (int r = 0; r < ta.rows; ++r)
        for (int c = 0; c < ta.cols; ++c) out.at(r, c) = ta.at(r, c) - bval(tb, m, r, c);
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, b, o, m] {
        const Tensor& g = grad(o);
        Tensor& ga = grad(a);
        Tensor& gb = grad(b);
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) {
                ga.at(r, c) += g.at(r, c);
                baccum(gb, m, r, c, -g.at(r, c));
            }
    };
    return o;
}

Var Tape::mul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    Bcast m = classify(ta, tb);
    Tensor out(ta.rows, ta.cols);
    for (int r = 0; r < ta.rows; ++r)
        for (int c = 0; c < ta.cols; ++c) out.at(r, c) = ta.at(r, c) * bval(tb, m, r, c);
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, b, o, m] {
        const Tensor& g = grad(o);
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        Tensor& ga = grad(a);
        Tensor& gb = grad(b);
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) {
                ga.at(r, c) += g.at(r, c) * bval(tb, m, r, c);
                baccum(gb, m, r, c, g.at(r, c) * ta.at(r, c));
            }
    };
    return o;
}

Var Tape::scale(Var a, double s) {
    Tensor out = val(a);
    for (double& x : out.v) x *= s;
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o, s] {
        const Tensor& g = grad(o);
        Tensor& ga = grad(a);
        for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += s * g.v[i];
    };
    return o;
}

Var Tape::matmul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.cols != tb.rows) throw std::invalid_argument("matmul shape mismatch");
    Tensor out(ta.rows, tb.cols);
    for (int i = 0; i < ta.rows; ++i)
        for (int k = 0; k < ta.cols; ++k) {
            double av = ta.at(i, k);
            if (av == 0.0) continue;
            for (int j = 0; j < tb.cols; ++j) out.at(i, j) += av * tb.at(k, j);
        }
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, b, o] {
        const Tensor& g = grad(o);
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        Tensor& ga = grad(a);
        Tensor& gb = grad(b);
        // dA += g . B^T
        for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) {
                double gv = g.at(i, j);
                if (gv == 0.0) continue;
                for (int k = 0; k < ta.cols; ++k) ga.at(i, k) += gv * tb.at(k, j);
            }
        // dB += A^T . g
        for (int i = 0; i < ta.rows; ++i)
            for (int k = 0; k < ta.cols; ++k) {
                double av = ta.at(i, k);
                if (av == 0.0) continue;
                for (int j = 0; j < g.cols; ++j) gb.at(k, j) += av * g.at(i, j);
            }
    };
    return o;
}

Var Tape::transpose(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.cols, ta.rows);
    for (int r = 0; r < ta.rows; ++r)
        for (int c = 0; c < ta.cols; ++c) out.at(c, r) = ta.at(r, c);
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o] {
        const Tensor& g = grad(o);
        Tensor& ga = grad(a);
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) ga.at(c, r) += g.at(r, c);
    };
    return o;
}

Var Tape::concat_cols(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rows != tb.rows) throw std::invalid_argument("concat_cols row mismatch");
    Tensor out(ta.rows, ta.cols + tb.cols);
    for (int r = 0; r < ta.rows; ++r) {
        for (int c = 0; c < ta.cols; ++c) out.at(r, c) = ta.at(r, c);
        for (int c = 0; c < tb.cols; ++c) out.at(r, ta.cols + c) = tb.at(r, c);
    }
    int acols = ta.cols;  // emit() may reallocate the node pool behind ta
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, b, o, acols] {
        const Tensor& g = grad(o);
        Tensor& ga = grad(a);
        Tensor& gb = grad(b);
        for (int r = 0; r < g.rows; ++r) {
            for (int c = 0; c < acols; ++c) ga.at(r, c) += g.at(r, c);
            for (int c = acols; c < g.cols; ++c) gb.at(r, c - acols) += g.at(r, c);
        }
    };
    return o;
}

Var Tape::gather_rows(Var a, std::vector<int> idx) {
    const Tensor& ta = val(a);
    Tensor out(static_cast<int>(idx.size()), ta.cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= ta.rows) throw std::out_of_range("gather_rows index");
        for (int c = 0; c < ta.cols; ++c) out.at(static_cast<int>(r), c) = ta.at(idx[r], c);
    }
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o, idx = std::move(idx)] {
        const Tensor& g = grad(o);
        Tensor& ga = grad(a);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (int c = 0; c < g.cols; ++c) ga.at(idx[r], c) += g.at(static_cast<int>(r), c);
    };
    return o;
}

Var Tape::segment_sum(Var a, std::vector<int> seg, int num_segments) {
    const Tensor& ta = val(a);
    if (static_cast<int>(seg.size()) != ta.rows)
        throw std::invalid_argument("segment_sum needs one segment id per row");
    Tensor out(num_segments, ta.cols);
    for (int r = 0; r < ta.rows; ++r) {
        if (seg[r] < 0 || seg[r] >= num_segments) throw std::out_of_range("segment id");
        for (int c = 0; c < ta.cols; ++c) out.at(seg[r], c) += ta.at(r, c);
    }
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o, seg = std::move(seg)] {
        const Tensor& g = grad(o);
        Tensor& ga = grad(a);
        for (std::size_t r = 0; r < seg.size(); ++r)
            for (int c = 0; c < g.cols; ++c) ga.at(static_cast<int>(r), c) += g.at(seg[r], c);
    };
    return o;
}

Var Tape::sum(Var a) {
    const Tensor& ta = val(a);
    Tensor out(1, 1);
    for (double x : ta.v) out.at(0, 0) += x;
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o] {
        double g = grad(o).at(0, 0);
        for (double& x : grad(a).v) x += g;
    };
    return o;
}

Var Tape::mean_rows(Var a) {
    const Tensor& ta = val(a);
    if (ta.rows == 0) throw std::invalid_argument("mean_rows of empty tensor");
    Tensor out(1, ta.cols);
    for (int r = 0; r < ta.rows; ++r)
        for (int c = 0; c < ta.cols; ++c) out.at(0, c) += ta.at(r, c) / ta.rows;
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o] {
        const Tensor& g = grad(o);
        Tensor& ga = grad(a);
        for (int r = 0; r < ga.rows; ++r)
            for (int c = 0; c < ga.cols; ++c) ga.at(r, c) += g.at(0, c) / ga.rows;
    };
    return o;
}

Var Tape::pick(Var a, int r, int c) {
    const Tensor& ta = val(a);
    if (r < 0 || r >= ta.rows || c < 0 || c >= ta.cols)
        throw std::out_of_range("pick index");
    Tensor out(1, 1);
    out.at(0, 0) = ta.at(r, c);
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o, r, c] { grad(a).at(r, c) += grad(o).at(0, 0); };
    return o;
}

Var Tape::gelu(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.rows, ta.cols);
    for (std::size_t i = 0; i < ta.v.size(); ++i) {
        double x = ta.v[i];
        out.v[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o] {
        const Tensor& g = grad(o);
        const Tensor& ta = val(a);
        Tensor& ga = grad(a);
        for (std::size_t i = 0; i < ta.v.size(); ++i) {
            double x = ta.v[i];
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            ga.v[i] += g.v[i] * (cdf + x * pdf);
        }
    };
    return o;
}

Var Tape::sigmoid(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.rows, ta.cols);
    for (std::size_t i = 0; i < ta.v.size(); ++i) out.v[i] = 1.0 / (1.0 + std::exp(-ta.v[i]));
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o] {
        const Tensor& g = grad(o);
        const Tensor& s = val(o);
        Tensor& ga = grad(a);
        for (std::size_t i = 0; i < s.v.size(); ++i) ga.v[i] += g.v[i] * s.v[i] * (1.0 - s.v[i]);
    };
    return o;
}

Var Tape::softmax_rows(Var a, double temperature) {
    const Tensor& ta = val(a);
    Tensor out(ta.rows, ta.cols);
    for (int r = 0; r < ta.rows; ++r) {
        double mx = -1e300;
        for (int c = 0; c < ta.cols; ++c) mx = std::max(mx, temperature * ta.at(r, c));
        double z = 0.0;
        for (int c = 0; c < ta.cols; ++c) {
            out.at(r, c) = std::exp(temperature * ta.at(r, c) - mx);
            z += out.at(r, c);
        }
        for (int c = 0; c < ta.cols; ++c) out.at(r, c) /= z;
    }
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o, temperature] {
        const Tensor& g = grad(o);
        const Tensor& s = val(o);
        Tensor& ga = grad(a);
        for (int r = 0; r < s.rows; ++r) {
            double dot = 0.0;
            for (int c = 0; c < s.cols; ++c) dot += g.at(r, c) * s.at(r, c);
            for (int c = 0; c < s.cols; ++c)
                ga.at(r, c) += temperature * s.at(r, c) * (g.at(r, c) - dot);
        }
    };
    return o;
}

Var Tape::log_softmax_rows(Var a, double temperature) {
    const Tensor& ta = val(a);
    Tensor out(ta.rows, ta.cols);
    for (int r = 0; r < ta.rows; ++r) {
        double mx = -1e300;
        for (int c = 0; c < ta.cols; ++c) mx = std::max(mx, temperature * ta.at(r, c));
        double z = 0.0;
        for (int c = 0; c < ta.cols; ++c) z += std::exp(temperature * ta.at(r, c) - mx);
        double lse = mx + std::log(z);
        for (int c = 0; c < ta.cols; ++c) out.at(r, c) = temperature * ta.at(r, c) - lse;
    }
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o, temperature] {
        const Tensor& g = grad(o);
        const Tensor& lp = val(o);
        Tensor& ga = grad(a);
        for (int r = 0; r < lp.rows; ++r) {
            double gsum = 0.0;
            for (int c = 0; c < lp.cols; ++c) gsum += g.at(r, c);
            for (int c = 0; c < lp.cols; ++c)
                ga.at(r, c) += temperature * (g.at(r, c) - std::exp(lp.at(r, c)) * gsum);
        }
    };
    return o;
}

Var Tape::logsumexp_rows(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.rows, 1);
    for (int r = 0; r < ta.rows; ++r) {
        double mx = -1e300;
        for (int c = 0; c < ta.cols; ++c) mx = std::max(mx, ta.at(r, c));
        double z = 0.0;
        for (int c = 0; c < ta.cols; ++c) z += std::exp(ta.at(r, c) - mx);
        out.at(r, 0) = mx + std::log(z);
    }
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, o] {
        const Tensor& g = grad(o);
        const Tensor& ta = val(a);
        const Tensor& lse = val(o);
        Tensor& ga = grad(a);
        for (int r = 0; r < ta.rows; ++r)
            for (int c = 0; c < ta.cols; ++c)
                ga.at(r, c) += g.at(r, 0) * std::exp(ta.at(r, c) - lse.at(r, 0));
    };
    return o;
}

Var Tape::layer_norm(Var a, Var gamma, Var beta) {
    const Tensor& ta = val(a);
    const Tensor& tg = val(gamma);
    const Tensor& tb = val(beta);
    if (tg.rows != 1 || tg.cols != ta.cols || tb.rows != 1 || tb.cols != ta.cols)
        throw std::invalid_argument("layer_norm gamma/beta must be 1xC");
    Tensor out(ta.rows, ta.cols);
    Tensor xhat(ta.rows, ta.cols);
    Tensor inv_sigma(ta.rows, 1);
    for (int r = 0; r < ta.rows; ++r) {
        double mu = 0.0;
        for (int c = 0; c < ta.cols; ++c) mu += ta.at(r, c);
        mu /= ta.cols;
        double var = 0.0;
        for (int c = 0; c < ta.cols; ++c) {
            double d = ta.at(r, c) - mu;
            var += d * d;
        }
        var /= ta.cols;
        double is = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_sigma.at(r, 0) = is;
        for (int c = 0; c < ta.cols; ++c) {
            xhat.at(r, c) = (ta.at(r, c) - mu) * is;
            out.at(r, c) = xhat.at(r, c) * tg.at(0, c) + tb.at(0, c);
        }
    }
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, a, gamma, beta, o, xhat = std::move(xhat),
                         inv_sigma = std::move(inv_sigma)] {
        const Tensor& g = grad(o);
        const Tensor& tg = val(gamma);
        Tensor& ga = grad(a);
        Tensor& gg = grad(gamma);
        Tensor& gb = grad(beta);
        int C = g.cols;
        for (int r = 0; r < g.rows; ++r) {
            double m1 = 0.0, m2 = 0.0;  // means of dxhat and dxhat*xhat over cols
            for (int c = 0; c < C; ++c) {
                double dxh = g.at(r, c) * tg.at(0, c);
                m1 += dxh;
                m2 += dxh * xhat.at(r, c);
                gg.at(0, c) += g.at(r, c) * xhat.at(r, c);
                gb.at(0, c) += g.at(r, c);
            }
            m1 /= C;
            m2 /= C;
            for (int c = 0; c < C; ++c) {
                double dxh = g.at(r, c) * tg.at(0, c);
                ga.at(r, c) += inv_sigma.at(r, 0) * (dxh - m1 - xhat.at(r, c) * m2);
            }
        }
    };
    return o;
}

Var Tape::bce_with_logits(Var logits, Var targets) {
    const Tensor& z = val(logits);
    const Tensor& y = val(targets);
    if (z.rows != y.rows || z.cols != y.cols)
        throw std::invalid_argument("bce_with_logits shape mismatch");
    if (z.v.empty()) throw std::invalid_argument("bce_with_logits of empty tensor");
    Tensor out(1, 1);
    for (std::size_t i = 0; i < z.v.size(); ++i) {
        double zi = z.v[i];
        out.at(0, 0) += std::max(zi, 0.0) - zi * y.v[i] + std::log1p(std::exp(-std::abs(zi)));
    }
    out.at(0, 0) /= static_cast<double>(z.v.size());
    Var o = emit(std::move(out));
    nodes_[o.id].back = [this, logits, targets, o] {
        double g = grad(o).at(0, 0);
        const Tensor& z = val(logits);
        const Tensor& y = val(targets);
        Tensor& gz = grad(logits);
        double n = static_cast<double>(z.v.size());
        for (std::size_t i = 0; i < z.v.size(); ++i) {
            double s = 1.0 / (1.0 + std::exp(-z.v[i]));
            gz.v[i] += g * (s - y.v[i]) / n;
        }
    };
    return o;
}

void Tape::backward(Var loss) {
    const Tensor& lv = val(loss);
    if (lv.rows != 1 || lv.cols != 1) throw std::invalid_argument("backward needs 1x1 loss");
    nodes_[loss.id].grad.at(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        if (nodes_[i].back) nodes_[i].back();
        if (nodes_[i].bound) {
            Param& p = *nodes_[i].bound;
            const Tensor& g = nodes_[i].grad;
            for (std::size_t k = 0; k < g.v.size(); ++k) p.grad.v[k] += g.v[k];
        }
    }
}

Adam::Adam(std::vector<Param*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (Param* p : params_) {
        m_.emplace_back(p->value.rows, p->value.cols);
        v_.emplace_back(p->value.rows, p->value.cols);
    }
}

double Adam::clip_gradients(double max_norm) {
    double sq = 0.0;
    for (Param* p : params_)
        for (double g : p->grad.v) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double s = max_norm / norm;
        for (Param* p : params_)
            for (double& g : p->grad.v) g *= s;
    }
    return norm;
}

void Adam::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Param& p = *params_[i];
        for (std::size_t k = 0; k < p.value.v.size(); ++k) {
            double g = p.grad.v[k];
            m_[i].v[k] = b1_ * m_[i].v[k] + (1.0 - b1_) * g;
            v_[i].v[k] = b2_ * v_[i].v[k] + (1.0 - b2_) * g * g;
            double mhat = m_[i].v[k] / bc1;
            double vhat = v_[i].v[k] / bc2;
            p.value.v[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (Param* p : params_) p->zero_grad();
}

void save_checkpoint(const std::string& path, const std::vector<Param*>& params) {
    nlohmann::json j;
    j["format"] = "retroflow-checkpoint-v1";
    nlohmann::json entries = nlohmann::json::object();
    for (const Param* p : params) {
        if (entries.contains(p->name))
            throw std::invalid_argument("duplicate parameter name: " + p->name);
        entries[p->name] = {{"rows", p->value.rows}, {"cols", p->value.cols},
                            {"data", p->value.v}};
    }
    j["params"] = std::move(entries);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out << j.dump() << "\n";
}

void load_checkpoint(const std::string& path, const std::vector<Param*>& params) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != std::string("retroflow-checkpoint-v1"))
        throw std::runtime_error("unrecognized checkpoint format in " + path);
    const nlohmann::json& entries = j.at("params");
    for (Param* p : params) {
        if (!entries.contains(p->name))
            throw std::runtime_error("checkpoint missing parameter: " + p->name);
        const nlohmann::json& e = entries.at(p->name);
        int rows = e.at("rows").get<int>();
        int cols = e.at("cols").get<int>();
        if (rows != p->value.rows || cols != p->value.cols)
            throw std::runtime_error("checkpoint shape mismatch for " + p->name);
        p->value.v = e.at("data").get<std::vector<double>>();
        if (p->value.v.size() != static_cast<std::size_t>(rows) * cols)
            throw std::runtime_error("checkpoint data length mismatch for " + p->name);
    }
}

}  // namespace retroflow
