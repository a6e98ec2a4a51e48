#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <functional>
#include <random>

#include "retroflow/autodiff.hpp"

using namespace retroflow;

namespace {

Tensor random_tensor(int rows, int cols, std::mt19937_64& rng, double lo = -1.0,
                     double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(rows, cols);
    for (double& x : t.v) x = d(rng);
    return t;
}

using LossBuilder = std::function<Var(Tape&, std::vector<Param>&)>;

double eval_loss(const LossBuilder& build, std::vector<Param>& ps) {
    Tape tape;
    Var loss = build(tape, ps);
    return tape.value(loss).at(0, 0);
}

// Central-difference gradient check for every element of every parameter.
void check_gradients(const LossBuilder& build, std::vector<Param>& ps) {
    for (Param& p : ps) p.zero_grad();
    Tape tape;
    Var loss = build(tape, ps);
    tape.backward(loss);

    const double h = 1e-5;
    for (Param& p : ps) {
        for (std::size_t i = 0; i < p.value.v.size(); ++i) {
            double saved = p.value.v[i];
            p.value.v[i] = saved + h;
            double fp = eval_loss(build, ps);
            p.value.v[i] = saved - h;
            double fm = eval_loss(build, ps);
            p.value.v[i] = saved;
            double numeric = (fp - fm) / (2.0 * h);
            double analytic = p.grad.v[i];
            double tol = 1e-4 * std::max({1.0, std::abs(numeric), std::abs(analytic)});
            INFO(p.name << "[" << i << "] analytic=" << analytic << " numeric=" << numeric);
            CHECK(std::abs(analytic - numeric) <= tol);
        }
    }
}

// Weighted sum so upstream gradients are non-uniform.
Var weighted(Tape& t, Var x, const Tensor& w) { return t.sum(t.mul(x, t.input(w))); }

}  // namespace

TEST_CASE("gradients of elementwise ops under all broadcast modes") {
    std::mt19937_64 rng(7);
    Tensor w = random_tensor(3, 4, rng);
    std::vector<std::pair<int, int>> bshapes = {{3, 4}, {1, 1}, {1, 4}, {3, 1}};
    for (auto [br, bc] : bshapes) {
        CAPTURE(br);
        CAPTURE(bc);
        std::vector<Param> ps;
        ps.emplace_back("a", random_tensor(3, 4, rng));
        ps.emplace_back("b", random_tensor(br, bc, rng));
        check_gradients(
            [&](Tape& t, std::vector<Param>& p) {
                Var a = t.use(p[0]), b = t.use(p[1]);
                Var x = t.add(a, b);
                Var y = t.mul(t.sub(a, b), x);
                return weighted(t, t.add(y, t.mul(a, b)), w);
            },
            ps);
    }
}

TEST_CASE("gradients of matmul, transpose, concat, scale") {
    std::mt19937_64 rng(11);
    Tensor w = random_tensor(3, 5, rng);
    std::vector<Param> ps;
    ps.emplace_back("a", random_tensor(3, 4, rng));
    ps.emplace_back("b", random_tensor(4, 5, rng));
    ps.emplace_back("c", random_tensor(3, 2, rng));
    check_gradients(
        [&](Tape& t, std::vector<Param>& p) {
            Var mm = t.matmul(t.use(p[0]), t.use(p[1]));  // 3x5
            Var tt = t.transpose(t.matmul(t.transpose(t.use(p[2])), t.use(p[0])));  // 4x2 -> 2x4
            Var cat = t.concat_cols(t.use(p[2]), t.scale(t.use(p[0]), 1.7));  // 3x6
            return t.add(t.add(weighted(t, mm, w), t.sum(tt)), t.sum(cat));
        },
        ps);
}

TEST_CASE("gradients of gather (with repeats), segment_sum, reductions, pick") {
    std::mt19937_64 rng(13);
    std::vector<Param> ps;
    ps.emplace_back("a", random_tensor(4, 3, rng));
    check_gradients(
        [&](Tape& t, std::vector<Param>& p) {
            Var a = t.use(p[0]);
            Var g = t.gather_rows(a, {2, 0, 2, 3, 1, 2});        // repeated rows
            Var s = t.segment_sum(g, {0, 1, 0, 2, 1, 2}, 3);     // 3x3
            Var m = t.mean_rows(s);                              // 1x3
            return t.add(t.add(t.sum(m), t.pick(s, 1, 2)), t.pick(a, 0, 0));
        },
        ps);
}

TEST_CASE("gradients of nonlinearities and normalizers") {
    std::mt19937_64 rng(17);
    Tensor w = random_tensor(3, 4, rng);
    std::vector<Param> ps;
    ps.emplace_back("a", random_tensor(3, 4, rng, -2.0, 2.0));
    ps.emplace_back("gamma", random_tensor(1, 4, rng, 0.5, 1.5));
    ps.emplace_back("beta", random_tensor(1, 4, rng));
    check_gradients(
        [&](Tape& t, std::vector<Param>& p) {
            Var a = t.use(p[0]);
            Var ln = t.layer_norm(a, t.use(p[1]), t.use(p[2]));
            Var x = t.gelu(ln);
            Var sm = t.softmax_rows(x, 0.7);
            Var lsm = t.log_softmax_rows(x, 0.7);
            Var lse = t.logsumexp_rows(x);
            Var sg = t.sigmoid(x);
            return t.add(t.add(weighted(t, sm, w), t.sum(t.mul(lsm, t.input(w)))),
                         t.add(t.sum(lse), weighted(t, sg, w)));
        },
        ps);
}

TEST_CASE("gradients of binary cross entropy from logits") {
    std::mt19937_64 rng(19);
    std::vector<Param> ps;
    ps.emplace_back("z", random_tensor(6, 1, rng, -3.0, 3.0));
    Tensor y(6, 1);
    for (int i = 0; i < 6; ++i) y.at(i, 0) = (i % 2 == 0) ? 1.0 : 0.0;
    check_gradients(
        [&](Tape& t, std::vector<Param>& p) {
            return t.bce_with_logits(t.use(p[0]), t.input(y));
        },
        ps);
    // Value check: z = 0, y = 1 gives log 2.
    Tape t;
    Tensor z0(1, 1);
    Tensor y1(1, 1);
    y1.at(0, 0) = 1.0;
    Var l = t.bce_with_logits(t.input(z0), t.input(y1));
    CHECK(t.value(l).at(0, 0) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("gradient of a composed two-layer network survives the check") {
    std::mt19937_64 rng(23);
    std::vector<Param> ps;
    ps.emplace_back("W1", random_tensor(5, 4, rng));
    ps.emplace_back("b1", random_tensor(1, 4, rng));
    ps.emplace_back("W2", random_tensor(4, 3, rng));
    ps.emplace_back("b2", random_tensor(1, 3, rng));
    Tensor x = random_tensor(2, 5, rng);
    check_gradients(
        [&](Tape& t, std::vector<Param>& p) {
            Var h = t.gelu(t.add(t.matmul(t.input(x), t.use(p[0])), t.use(p[1])));
            Var logits = t.add(t.matmul(h, t.use(p[2])), t.use(p[3]));
            Var lp = t.log_softmax_rows(logits);
            return t.scale(t.add(t.pick(lp, 0, 1), t.pick(lp, 1, 2)), -1.0);
        },
        ps);
}

TEST_CASE("forward values of the nonlinearities are correct") {
    Tape t;
    Tensor x(1, 4);
    x.at(0, 0) = 0.0;
    x.at(0, 1) = 10.0;
    x.at(0, 2) = -10.0;
    x.at(0, 3) = 1.0;
    Var g = t.gelu(t.input(x));
    CHECK(t.value(g).at(0, 0) == doctest::Approx(0.0));
    CHECK(t.value(g).at(0, 1) == doctest::Approx(10.0));
    CHECK(t.value(g).at(0, 2) == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(t.value(g).at(0, 3) == doctest::Approx(0.8413447460685429));

    Var s = t.sigmoid(t.input(x));
    CHECK(t.value(s).at(0, 0) == doctest::Approx(0.5));

    Tensor r(2, 3);
    for (int c = 0; c < 3; ++c) {
        r.at(0, c) = c;
        r.at(1, c) = -c * 2.0;
    }
    Var sm = t.softmax_rows(t.input(r), 0.7);
    for (int row = 0; row < 2; ++row) {
        double total = 0.0;
        for (int c = 0; c < 3; ++c) total += t.value(sm).at(row, c);
        CHECK(total == doctest::Approx(1.0));
    }
    Var lsm = t.log_softmax_rows(t.input(r), 0.7);
    for (int row = 0; row < 2; ++row)
        for (int c = 0; c < 3; ++c)
            CHECK(std::exp(t.value(lsm).at(row, c)) ==
                  doctest::Approx(t.value(sm).at(row, c)));

    Var lse = t.logsumexp_rows(t.input(r));
    double direct = std::log(std::exp(0.0) + std::exp(1.0) + std::exp(2.0));
    CHECK(t.value(lse).at(0, 0) == doctest::Approx(direct));

    // Layer norm with unit gamma and zero beta standardizes each row.
    Tensor gamma(1, 3);
    gamma.fill(1.0);
    Tensor beta(1, 3);
    Var ln = t.layer_norm(t.input(r), t.input(gamma), t.input(beta));
    for (int row = 0; row < 2; ++row) {
        double mu = 0.0, var = 0.0;
        for (int c = 0; c < 3; ++c) mu += t.value(ln).at(row, c);
        CHECK(mu == doctest::Approx(0.0).epsilon(1e-9));
        for (int c = 0; c < 3; ++c) var += t.value(ln).at(row, c) * t.value(ln).at(row, c);
        CHECK(var / 3.0 == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("adam first step moves by about lr in the gradient sign direction") {
    Param p("x", Tensor(1, 2));
    p.value.at(0, 0) = 5.0;
    p.value.at(0, 1) = -3.0;
    Adam opt({&p}, 0.01);
    p.grad.at(0, 0) = 2.0;
    p.grad.at(0, 1) = -0.5;
    opt.step();
    CHECK(p.value.at(0, 0) == doctest::Approx(5.0 - 0.01).epsilon(1e-6));
    CHECK(p.value.at(0, 1) == doctest::Approx(-3.0 + 0.01).epsilon(1e-6));
}

TEST_CASE("adam minimizes a quadratic bowl") {
    std::mt19937_64 rng(29);
    Param p("x", random_tensor(1, 5, rng, -2.0, 2.0));
    Tensor target = random_tensor(1, 5, rng, -1.0, 1.0);
    Adam opt({&p}, 0.05);
    double loss = 0.0;
    for (int it = 0; it < 2000; ++it) {
        opt.zero_grad();
        Tape t;
        Var d = t.sub(t.use(p), t.input(target));
        Var l = t.sum(t.mul(d, d));
        loss = t.value(l).at(0, 0);
        t.backward(l);
        opt.step();
    }
    CHECK(loss < 1e-6);
    for (int c = 0; c < 5; ++c)
        CHECK(p.value.at(0, c) == doctest::Approx(target.at(0, c)).epsilon(1e-3));
}

TEST_CASE("gradient clipping rescales to the requested global norm") {
    Param a("a", Tensor(1, 2)), b("b", Tensor(1, 1));
    a.grad.at(0, 0) = 3.0;
    a.grad.at(0, 1) = 0.0;
    b.grad.at(0, 0) = 4.0;
    Adam opt({&a, &b});
    double norm = opt.clip_gradients(1.0);
    CHECK(norm == doctest::Approx(5.0));
    CHECK(a.grad.at(0, 0) == doctest::Approx(0.6));
    CHECK(b.grad.at(0, 0) == doctest::Approx(0.8));
    // Under the cap nothing changes.
    double norm2 = opt.clip_gradients(10.0);
    CHECK(norm2 == doctest::Approx(1.0));
    CHECK(a.grad.at(0, 0) == doctest::Approx(0.6));
}

TEST_CASE("checkpoint round trip is bit exact") {
    Param a("w", Tensor(2, 2)), b("bias", Tensor(1, 3));
    a.value.at(0, 0) = M_PI;
    a.value.at(0, 1) = 1.0 / 3.0;
    a.value.at(1, 0) = 1e-15;
    a.value.at(1, 1) = -1e300;
    b.value.at(0, 0) = 0.1 + 0.2;
    b.value.at(0, 1) = -0.0;
    b.value.at(0, 2) = 42.0;
    std::string path = "test_checkpoint_roundtrip.json";
    save_checkpoint(path, {&a, &b});

    Param a2("w", Tensor(2, 2)), b2("bias", Tensor(1, 3));
    load_checkpoint(path, {&a2, &b2});
    for (std::size_t i = 0; i < a.value.v.size(); ++i) CHECK(a2.value.v[i] == a.value.v[i]);
    for (std::size_t i = 0; i < b.value.v.size(); ++i) CHECK(b2.value.v[i] == b.value.v[i]);

    // Shape and name mismatches are hard errors.
    Param wrong("w", Tensor(2, 3));
    CHECK_THROWS_AS(load_checkpoint(path, {&wrong}), std::runtime_error);
    Param missing("nope", Tensor(1, 1));
    CHECK_THROWS_AS(load_checkpoint(path, {&missing}), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("uniform init stays inside the fan-in bound") {
    std::mt19937_64 rng(31);
    Tensor t = uniform_init(16, 8, rng);
    double bound = 1.0 / 4.0;
    double lo = 1e9, hi = -1e9;
    for (double x : t.v) {
        CHECK(std::abs(x) <= bound);
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    CHECK(hi > 0.1);  // actually spreads over the range
    CHECK(lo < -0.1);
}
