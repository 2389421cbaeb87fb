#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "stereoinr/autodiff.hpp"
#include "stereoinr/rng.hpp"
#include "stereoinr/tensor.hpp"

using namespace stereoinr;

namespace {

Tensor randn(Rng& rng, std::vector<int> shape, double sd = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * sd;
    return t;
}

// Scalar loss used by the finite-difference checks: sum of out * weights,
// built from differentiable primitives so it is smooth everywhere.
Var weighted_sum(Tape& t, const Var& out, const Tensor& weights) {
    Var w = t.constant(weights);
    Var prod = ad::mul(t, out, w);
    // |x + 1e3| is linear as long as every element stays above -1e3.
    return ad::mean_abs_diff(t, prod, Tensor(prod->value.shape, -1e3));
}

using BuildFn = std::function<Var(Tape&, std::vector<Var>&)>;

// Central finite differences on every element of every input tensor.
void check_grads(std::vector<Tensor> inputs, const BuildFn& build, double h = 1e-5,
                 double tol = 1e-6) {
    Tape tape;
    std::vector<Var> vars;
    for (auto& in : inputs) vars.push_back(tape.leaf(in, true));
    Var loss = build(tape, vars);
    tape.backward(loss);
    std::vector<Tensor> analytic;
    for (auto& v : vars) analytic.push_back(v->grad);

    for (std::size_t p = 0; p < inputs.size(); ++p) {
        for (std::size_t i = 0; i < inputs[p].size(); ++i) {
            auto eval = [&](double delta) {
                Tape t2;
                std::vector<Var> vs;
                for (std::size_t q = 0; q < inputs.size(); ++q) {
                    Tensor c = inputs[q];
                    if (q == p) c.data[i] += delta;
                    vs.push_back(t2.leaf(std::move(c), false));
                }
                return build(t2, vs)->value.data[0];
            };
            const double fd = (eval(h) - eval(-h)) / (2 * h);
            const double an = analytic[p].data[i];
            const double err =
                std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            INFO("input ", p, " element ", i, " fd ", fd, " analytic ", an);
            CHECK(err < tol);
        }
    }
}

}  // namespace

TEST_CASE("tensor shape and access") {
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    t.at(1, 2) = 5.0;
    CHECK(t.data[5] == 5.0);
    Tensor u({2, 2, 3});
    u.at(1, 1, 2) = 7.0;
    CHECK(u.data[11] == 7.0);
    CHECK(Tensor::full({2}, 3.0).data[1] == 3.0);
    CHECK_THROWS_AS(Tensor({-1, 2}), ShapeError);
    CHECK_THROWS_AS(require_same_shape(Tensor({2, 3}), Tensor({3, 2}), "x"), ShapeError);
}

TEST_CASE("rng determinism and stream derivation") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c(42);
    for (int i = 0; i < 100; ++i) {
        double u = c.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }

    auto st = c.state();
    double next = Rng(0).uniform();  // unrelated
    Rng d(0);
    d.set_state(st);
    CHECK(d.uniform() == c.uniform());
    (void)next;

    CHECK(Rng::derive(1, 0) != Rng::derive(1, 1));
    CHECK(Rng::derive(1, 5) == Rng::derive(1, 5));
    CHECK(Rng::derive(1, 5) != Rng::derive(2, 5));

    // Box-Muller sanity: mean near 0, variance near 1.
    Rng e(7);
    double sum = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double x = e.normal();
        sum += x;
        sq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.03);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("elementwise op values") {
    Tape t;
    Var a = t.constant(Tensor::full({2, 2}, 2.0));
    Var b = t.constant(Tensor::full({2, 2}, 3.0));
    CHECK(ad::add(t, a, b)->value.data[0] == 5.0);
    CHECK(ad::sub(t, a, b)->value.data[0] == -1.0);
    CHECK(ad::mul(t, a, b)->value.data[0] == 6.0);
    CHECK(ad::scale(t, a, 0.5)->value.data[0] == 1.0);
    Var s = t.constant(Tensor::full({1}, 0.0));
    CHECK(ad::sigmoid(t, s)->value.data[0] == doctest::Approx(0.5).epsilon(1e-12));

    // GELU(x) = 0.5 x (1 + erf(x / sqrt(2)))
    Var g = t.constant(Tensor::full({1}, 0.7));
    const double want = 0.5 * 0.7 * (1.0 + std::erf(0.7 / std::sqrt(2.0)));
    CHECK(ad::gelu(t, g)->value.data[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("linear matches explicit loop and gradients") {
    Rng rng(1);
    Tensor x = randn(rng, {4, 3}), w = randn(rng, {5, 3}), b = randn(rng, {5});
    {
        Tape t;
        Var y = ad::linear(t, t.constant(x), t.constant(w), t.constant(b));
        for (int i = 0; i < 4; ++i)
            for (int o = 0; o < 5; ++o) {
                double want = b.data[o];
                for (int k = 0; k < 3; ++k) want += x.at(i, k) * w.at(o, k);
                CHECK(y->value.at(i, o) == doctest::Approx(want).epsilon(1e-12));
            }
    }
    Tensor lw = randn(rng, {4, 5});
    check_grads({x, w, b}, [&](Tape& t, std::vector<Var>& v) {
        return weighted_sum(t, ad::linear(t, v[0], v[1], v[2]), lw);
    });
    check_grads({x, w}, [&](Tape& t, std::vector<Var>& v) {
        return weighted_sum(t, ad::linear(t, v[0], v[1], nullptr), lw);
    });
}

TEST_CASE("conv3x3 matches direct convolution oracle") {
    Rng rng(2);
    const int h = 4, w = 3, ci = 2, co = 3;
    Tensor x = randn(rng, {h, w, ci}), wt = randn(rng, {co, 9 * ci}), b = randn(rng, {co});
    Tape t;
    Var y = ad::conv3x3(t, t.constant(x), t.constant(wt), t.constant(b));
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx)
            for (int o = 0; o < co; ++o) {
                double want = b.data[o];
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx)
                        for (int k = 0; k < ci; ++k) {
                            int sy = yy + dy, sx = xx + dx;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                            int tap = ((dy + 1) * 3 + (dx + 1)) * ci + k;
                            want += x.at(sy, sx, k) * wt.at(o, tap);
                        }
                CHECK(y->value.at(yy, xx, o) == doctest::Approx(want).epsilon(1e-10));
            }

    Tensor lw = randn(rng, {h, w, co});
    check_grads({x, wt, b}, [&](Tape& t2, std::vector<Var>& v) {
        return weighted_sum(t2, ad::conv3x3(t2, v[0], v[1], v[2]), lw);
    });
}

TEST_CASE("layernorm_channels matches oracle and gradients") {
    Rng rng(3);
    const int h = 3, w = 2, c = 5;
    Tensor x = randn(rng, {h, w, c}), gamma = randn(rng, {c}), beta = randn(rng, {c});
    Tape t;
    Var y = ad::layernorm_channels(t, t.constant(x), t.constant(gamma), t.constant(beta));
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
            double mu = 0;
            for (int k = 0; k < c; ++k) mu += x.at(yy, xx, k);
            mu /= c;
            double var = 0;
            for (int k = 0; k < c; ++k) var += (x.at(yy, xx, k) - mu) * (x.at(yy, xx, k) - mu);
            var /= c;
            for (int k = 0; k < c; ++k) {
                double want =
                    gamma.data[k] * (x.at(yy, xx, k) - mu) / std::sqrt(var + 1e-6) +
                    beta.data[k];
                CHECK(y->value.at(yy, xx, k) == doctest::Approx(want).epsilon(1e-9));
            }
        }
    Tensor lw = randn(rng, {h, w, c});
    check_grads({x, gamma, beta}, [&](Tape& t2, std::vector<Var>& v) {
        return weighted_sum(t2, ad::layernorm_channels(t2, v[0], v[1], v[2]), lw);
    });
}

TEST_CASE("epipolar attention matches full-row oracle") {
    Rng rng(4);
    const int h = 2, w = 4, c = 3;
    Tensor q = randn(rng, {h, w, c}), kv = randn(rng, {h, w, c});
    Tensor wq = randn(rng, {c, c}), wk = randn(rng, {c, c}), wv = randn(rng, {c, c});
    Tape t;
    Var out = ad::epipolar_attention(t, t.constant(q), t.constant(kv), t.constant(wq),
                                     t.constant(wk), t.constant(wv));
    auto proj = [&](const Tensor& src, const Tensor& m, int y, int x, int o) {
        double v = 0;
        for (int k = 0; k < c; ++k) v += src.at(y, x, k) * m.at(o, k);
        return v;
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            std::vector<double> logits(w);
            for (int j = 0; j < w; ++j) {
                double dot = 0;
                for (int o = 0; o < c; ++o) dot += proj(q, wq, y, x, o) * proj(kv, wk, y, j, o);
                logits[j] = dot / std::sqrt(static_cast<double>(c));
            }
            double mx = *std::max_element(logits.begin(), logits.end());
            double sum = 0;
            for (auto& l : logits) {
                l = std::exp(l - mx);
                sum += l;
            }
            for (int o = 0; o < c; ++o) {
                double want = 0;
                for (int j = 0; j < w; ++j) want += logits[j] / sum * proj(kv, wv, y, j, o);
                CHECK(out->value.at(y, x, o) == doctest::Approx(want).epsilon(1e-9));
            }
        }

    Tensor lw = randn(rng, {h, w, c});
    check_grads({q, kv, wq, wk, wv}, [&](Tape& t2, std::vector<Var>& v) {
        return weighted_sum(
            t2, ad::epipolar_attention(t2, v[0], v[1], v[2], v[3], v[4]), lw);
    }, 1e-5, 1e-5);
}

TEST_CASE("window attention gradients") {
    Rng rng(5);
    const int h = 3, w = 4, c = 2;
    Tensor q = randn(rng, {h, w, c}), kv = randn(rng, {h, w, c});
    Tensor wq = randn(rng, {c, c}), wk = randn(rng, {c, c}), wv = randn(rng, {c, c});
    Tensor lw = randn(rng, {h, w, c});
    check_grads({q, kv, wq, wk, wv}, [&](Tape& t, std::vector<Var>& v) {
        return weighted_sum(t, ad::window_attention_grid(t, v[0], v[1], v[2], v[3], v[4], 1),
                            lw);
    }, 1e-5, 1e-5);
}

TEST_CASE("query window attention gradients") {
    Rng rng(6);
    const int h = 3, w = 4, c = 2, n = 5;
    Tensor tok = randn(rng, {n, c}), grid = randn(rng, {h, w, c});
    Tensor wq = randn(rng, {c, c}), wk = randn(rng, {c, c}), wv = randn(rng, {c, c}),
           wo = randn(rng, {c, c});
    std::vector<int> centers{0, 5, 11, 6, 3};
    Tensor lw = randn(rng, {n, c});
    check_grads({tok, grid, wq, wk, wv, wo}, [&](Tape& t, std::vector<Var>& v) {
        return weighted_sum(t,
                            ad::query_window_attention(t, v[0], v[1], centers, v[2], v[3],
                                                       v[4], v[5], 1),
                            lw);
    }, 1e-5, 1e-5);
}

TEST_CASE("bilinear_shift_x values and gradients") {
    Rng rng(7);
    const int h = 2, w = 5, c = 2;
    Tensor g = randn(rng, {h, w, c});
    Tensor disp({h, w});
    for (auto& v : disp.data) v = rng.uniform(-1.5, 1.5);

    Tape t;
    Var out = ad::bilinear_shift_x(t, t.constant(g), disp);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double xs = std::clamp(x - disp.at(y, x), 0.0, double(w - 1));
            int x0 = static_cast<int>(std::floor(xs));
            int x1 = std::min(x0 + 1, w - 1);
            double f = xs - x0;
            for (int k = 0; k < c; ++k)
                CHECK(out->value.at(y, x, k) ==
                      doctest::Approx((1 - f) * g.at(y, x0, k) + f * g.at(y, x1, k))
                          .epsilon(1e-12));
        }

    Tensor lw = randn(rng, {h, w, c});
    check_grads({g}, [&](Tape& t2, std::vector<Var>& v) {
        return weighted_sum(t2, ad::bilinear_shift_x(t2, v[0], disp), lw);
    });
}

TEST_CASE("structural ops: select_rows, gather_sites, concat, reshape") {
    Rng rng(8);
    Tensor a = randn(rng, {3, 2, 2}), b = randn(rng, {3, 2, 2});
    Tape t;
    Var sel = ad::select_rows(t, t.constant(a), t.constant(b), {0, 1, 0});
    CHECK(sel->value.at(0, 1, 1) == a.at(0, 1, 1));
    CHECK(sel->value.at(1, 0, 0) == b.at(1, 0, 0));
    CHECK(sel->value.at(2, 1, 0) == a.at(2, 1, 0));

    Var gat = ad::gather_sites(t, t.constant(a), {5, 0});
    CHECK(gat->value.at(0, 0) == a.data[10]);
    CHECK(gat->value.at(1, 1) == a.data[1]);

    Tensor m1 = randn(rng, {2, 3}), m2 = randn(rng, {2, 2});
    Var cc = ad::concat_cols(t, t.constant(m1), t.constant(m2));
    CHECK(cc->value.shape == std::vector<int>{2, 5});
    CHECK(cc->value.at(1, 4) == m2.at(1, 1));
    CHECK(cc->value.at(0, 2) == m1.at(0, 2));

    Var rs = ad::reshape(t, t.constant(m1), {3, 2});
    CHECK(rs->value.shape == std::vector<int>{3, 2});
    CHECK(rs->value.data == m1.data);

    Tensor lw1 = randn(rng, {3, 2, 2});
    check_grads({a, b}, [&](Tape& t2, std::vector<Var>& v) {
        return weighted_sum(t2, ad::select_rows(t2, v[0], v[1], {1, 0, 1}), lw1);
    });
    Tensor lw2 = randn(rng, {4, 2});
    check_grads({a}, [&](Tape& t2, std::vector<Var>& v) {
        return weighted_sum(t2, ad::gather_sites(t2, v[0], {1, 1, 4, 2}), lw2);
    });
    Tensor lw3 = randn(rng, {2, 5});
    check_grads({m1, m2}, [&](Tape& t2, std::vector<Var>& v) {
        return weighted_sum(t2, ad::concat_cols(t2, v[0], v[1]), lw3);
    });
}

TEST_CASE("mean_abs_diff value and gradient") {
    Rng rng(9);
    Tensor x = randn(rng, {3, 2});
    Tensor tgt = randn(rng, {3, 2});
    // keep |x - tgt| away from the kink
    for (std::size_t i = 0; i < x.size(); ++i)
        if (std::abs(x.data[i] - tgt.data[i]) < 0.2) x.data[i] += 0.5;
    Tape t;
    Var l = ad::mean_abs_diff(t, t.constant(x), tgt);
    double want = 0;
    for (std::size_t i = 0; i < x.size(); ++i) want += std::abs(x.data[i] - tgt.data[i]);
    CHECK(l->value.data[0] == doctest::Approx(want / x.size()).epsilon(1e-12));

    check_grads({x}, [&](Tape& t2, std::vector<Var>& v) {
        return ad::mean_abs_diff(t2, v[0], tgt);
    });
}

TEST_CASE("composite graph gradients: sigmoid/gelu/mul_channels chains") {
    Rng rng(10);
    Tensor x = randn(rng, {2, 3, 4}), g = randn(rng, {4});
    Tensor lw = randn(rng, {2, 3, 4});
    check_grads({x, g}, [&](Tape& t, std::vector<Var>& v) {
        Var y = ad::mul_channels(t, ad::gelu(t, v[0]), ad::sigmoid(t, v[1]));
        return weighted_sum(t, y, lw);
    });
}
