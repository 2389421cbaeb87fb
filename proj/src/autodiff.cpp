#include "stereoinr/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace stereoinr {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace {

MapMat as_mat(Tensor& t, int rows, int cols) { return MapMat(t.data.data(), rows, cols); }
CMapMat as_mat(const Tensor& t, int rows, int cols) {
    return CMapMat(t.data.data(), rows, cols);
}

// [h, w, C] grid viewed as [h*w, C].
int grid_sites(const Tensor& t) { return t.shape[0] * t.shape[1]; }

bool any_rg(std::initializer_list<const Var*> vs) {
    for (const Var* v : vs)
        if (*v && (*v)->requires_grad) return true;
    return false;
}

}  // namespace

void Tape::backward(const Var& loss) {
    if (loss->value.size() != 1) throw ArgumentError("backward: loss must be a scalar");
    if (!loss->requires_grad) throw ArgumentError("backward: loss does not require grad");
    loss->grad.data[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = it->get();
        if (n->requires_grad && n->backprop) n->backprop();
    }
}

namespace ad {

Var add(Tape& t, const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    bool rg = any_rg({&a, &b});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [a, b, rn] {
            if (a->requires_grad)
                for (std::size_t i = 0; i < rn->grad.size(); ++i) a->grad[i] += rn->grad[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < rn->grad.size(); ++i) b->grad[i] += rn->grad[i];
        };
    }
    return r;
}

Var sub(Tape& t, const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "sub");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
    bool rg = any_rg({&a, &b});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [a, b, rn] {
            if (a->requires_grad)
                for (std::size_t i = 0; i < rn->grad.size(); ++i) a->grad[i] += rn->grad[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < rn->grad.size(); ++i) b->grad[i] -= rn->grad[i];
        };
    }
    return r;
}

Var mul(Tape& t, const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
    bool rg = any_rg({&a, &b});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [a, b, rn] {
            if (a->requires_grad)
                for (std::size_t i = 0; i < rn->grad.size(); ++i)
                    a->grad[i] += rn->grad[i] * b->value[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < rn->grad.size(); ++i)
                    b->grad[i] += rn->grad[i] * a->value[i];
        };
    }
    return r;
}

Var scale(Tape& t, const Var& a, double c) {
    Tensor out = a->value;
    for (auto& v : out.data) v *= c;
    bool rg = a->requires_grad;
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [a, c, rn] {
            for (std::size_t i = 0; i < rn->grad.size(); ++i) a->grad[i] += c * rn->grad[i];
        };
    }
    return r;
}

Var sigmoid(Tape& t, const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    bool rg = a->requires_grad;
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [a, rn] {
            for (std::size_t i = 0; i < rn->grad.size(); ++i) {
                double y = rn->value[i];
                a->grad[i] += rn->grad[i] * y * (1.0 - y);
            }
        };
    }
    return r;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Var gelu(Tape& t, const Var& a) {
    // Exact erf form; smooth everywhere, which matters for the finite
    // difference harness.
    Tensor out = a->value;
    for (auto& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    bool rg = a->requires_grad;
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [a, rn] {
            for (std::size_t i = 0; i < rn->grad.size(); ++i) {
                double x = a->value[i];
                double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                a->grad[i] += rn->grad[i] * (cdf + x * pdf);
            }
        };
    }
    return r;
}

Var linear(Tape& t, const Var& x, const Var& w, const Var& b) {
    const int n = x->value.shape[0];
    const int in = x->value.shape[1];
    const int out_dim = w->value.shape[0];
    if (w->value.shape[1] != in) throw ShapeError("linear: weight/input mismatch");
    Tensor out({n, out_dim});
    as_mat(out, n, out_dim).noalias() =
        as_mat(x->value, n, in) * as_mat(w->value, out_dim, in).transpose();
    if (b) {
        auto bm = as_mat(out, n, out_dim);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < out_dim; ++j) bm(i, j) += b->value[j];
    }
    bool rg = b ? any_rg({&x, &w, &b}) : any_rg({&x, &w});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [x, w, b, rn, n, in, out_dim] {
            auto dy = as_mat(rn->grad, n, out_dim);
            if (x->requires_grad)
                as_mat(x->grad, n, in).noalias() += dy * as_mat(w->value, out_dim, in);
            if (w->requires_grad)
                as_mat(w->grad, out_dim, in).noalias() +=
                    dy.transpose() * as_mat(x->value, n, in);
            if (b && b->requires_grad)
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < out_dim; ++j) b->grad[j] += dy(i, j);
        };
    }
    return r;
}

namespace {

// im2col with zero padding: result [h*w, 9*Ci], patch layout (dy, dx, ci).
RowMat im2col3x3(const Tensor& x) {
    const int h = x.shape[0], w = x.shape[1], ci = x.shape[2];
    RowMat k = RowMat::Zero(h * w, 9 * ci);
    for (int y = 0; y < h; ++y) {
        for (int dy = -1; dy <= 1; ++dy) {
            int yy = y + dy;
            if (yy < 0 || yy >= h) continue;
            for (int dx = -1; dx <= 1; ++dx) {
                int col0 = ((dy + 1) * 3 + (dx + 1)) * ci;
                int x_lo = std::max(0, -dx), x_hi = std::min(w, w - dx);
                for (int xx = x_lo; xx < x_hi; ++xx) {
                    const double* src = &x.data[(static_cast<std::size_t>(yy) * w + xx + dx) * ci];
                    double* dst = k.row(y * w + xx).data() + col0;
                    std::copy(src, src + ci, dst);
                }
            }
        }
    }
    return k;
}

}  // namespace

Var conv3x3(Tape& t, const Var& x, const Var& w, const Var& b) {
    const int h = x->value.shape[0], wd = x->value.shape[1], ci = x->value.shape[2];
    const int co = w->value.shape[0];
    if (w->value.shape[1] != 9 * ci) throw ShapeError("conv3x3: weight/input mismatch");
    RowMat k = im2col3x3(x->value);
    Tensor out({h, wd, co});
    as_mat(out, h * wd, co).noalias() = k * as_mat(w->value, co, 9 * ci).transpose();
    if (b) {
        auto om = as_mat(out, h * wd, co);
        for (int s = 0; s < h * wd; ++s)
            for (int c = 0; c < co; ++c) om(s, c) += b->value[c];
    }
    bool rg = b ? any_rg({&x, &w, &b}) : any_rg({&x, &w});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [x, w, b, rn, h, wd, ci, co] {
            auto dy = as_mat(rn->grad, h * wd, co);
            if (w->requires_grad || x->requires_grad) {
                if (w->requires_grad) {
                    RowMat k = im2col3x3(x->value);  // recomputed, not stored
                    as_mat(w->grad, co, 9 * ci).noalias() += dy.transpose() * k;
                }
                if (x->requires_grad) {
                    RowMat dk = dy * as_mat(w->value, co, 9 * ci);
                    // col2im scatter
                    for (int y = 0; y < h; ++y) {
                        for (int xx = 0; xx < wd; ++xx) {
                            const double* row = dk.row(y * wd + xx).data();
                            for (int dy2 = -1; dy2 <= 1; ++dy2) {
                                int yy = y + dy2;
                                if (yy < 0 || yy >= h) continue;
                                for (int dx = -1; dx <= 1; ++dx) {
                                    int xs = xx + dx;
                                    if (xs < 0 || xs >= wd) continue;
                                    const double* src =
                                        row + ((dy2 + 1) * 3 + (dx + 1)) * ci;
                                    double* dst =
                                        &x->grad.data[(static_cast<std::size_t>(yy) * wd + xs) * ci];
                                    for (int c = 0; c < ci; ++c) dst[c] += src[c];
                                }
                            }
                        }
                    }
                }
            }
            if (b && b->requires_grad)
                for (int s = 0; s < h * wd; ++s)
                    for (int c = 0; c < co; ++c) b->grad[c] += dy(s, c);
        };
    }
    return r;
}

Var layernorm_channels(Tape& t, const Var& x, const Var& gamma, const Var& beta) {
    const int s = grid_sites(x->value);
    const int c = x->value.shape[2];
    constexpr double eps = 1e-6;
    Tensor out(x->value.shape);
    auto xhat = std::make_shared<Tensor>(x->value.shape);
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(s));
    for (int i = 0; i < s; ++i) {
        const double* xr = &x->value.data[static_cast<std::size_t>(i) * c];
        double mu = 0;
        for (int j = 0; j < c; ++j) mu += xr[j];
        mu /= c;
        double var = 0;
        for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= c;
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        double* xh = &xhat->data[static_cast<std::size_t>(i) * c];
        double* o = &out.data[static_cast<std::size_t>(i) * c];
        for (int j = 0; j < c; ++j) {
            xh[j] = (xr[j] - mu) * is;
            o[j] = gamma->value[j] * xh[j] + beta->value[j];
        }
    }
    bool rg = any_rg({&x, &gamma, &beta});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [x, gamma, beta, rn, xhat, inv_std, s, c] {
            for (int i = 0; i < s; ++i) {
                const double* dy = &rn->grad.data[static_cast<std::size_t>(i) * c];
                const double* xh = &xhat->data[static_cast<std::size_t>(i) * c];
                if (gamma->requires_grad)
                    for (int j = 0; j < c; ++j) gamma->grad[j] += dy[j] * xh[j];
                if (beta->requires_grad)
                    for (int j = 0; j < c; ++j) beta->grad[j] += dy[j];
                if (x->requires_grad) {
                    double m1 = 0, m2 = 0;
                    for (int j = 0; j < c; ++j) {
                        double dxh = dy[j] * gamma->value[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= c;
                    m2 /= c;
                    double* dx = &x->grad.data[static_cast<std::size_t>(i) * c];
                    for (int j = 0; j < c; ++j) {
                        double dxh = dy[j] * gamma->value[j];
                        dx[j] += (dxh - m1 - xh[j] * m2) * (*inv_std)[i];
                    }
                }
            }
        };
    }
    return r;
}

Var mul_channels(Tape& t, const Var& x, const Var& g) {
    const int s = grid_sites(x->value);
    const int c = x->value.shape[2];
    if (static_cast<int>(g->value.size()) != c) throw ShapeError("mul_channels: gate size");
    Tensor out(x->value.shape);
    for (int i = 0; i < s; ++i)
        for (int j = 0; j < c; ++j)
            out.data[static_cast<std::size_t>(i) * c + j] =
                x->value.data[static_cast<std::size_t>(i) * c + j] * g->value[j];
    bool rg = any_rg({&x, &g});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [x, g, rn, s, c] {
            for (int i = 0; i < s; ++i)
                for (int j = 0; j < c; ++j) {
                    std::size_t k = static_cast<std::size_t>(i) * c + j;
                    if (x->requires_grad) x->grad[k] += rn->grad[k] * g->value[j];
                    if (g->requires_grad) g->grad[j] += rn->grad[k] * x->value[k];
                }
        };
    }
    return r;
}

namespace {

void softmax_inplace(double* v, int n) {
    double mx = v[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        v[i] = std::exp(v[i] - mx);
        sum += v[i];
    }
    for (int i = 0; i < n; ++i) v[i] /= sum;
}

}  // namespace

Var epipolar_attention(Tape& t, const Var& q, const Var& kv, const Var& wq, const Var& wk,
                       const Var& wv) {
    require_same_shape(q->value, kv->value, "epipolar_attention");
    const int h = q->value.shape[0], w = q->value.shape[1], c = q->value.shape[2];
    const double inv_sc = 1.0 / std::sqrt(static_cast<double>(c));
    auto wqm = as_mat(wq->value, c, c), wkm = as_mat(wk->value, c, c),
         wvm = as_mat(wv->value, c, c);

    Tensor out({h, w, c});
    for (int y = 0; y < h; ++y) {
        CMapMat xq(&q->value.data[static_cast<std::size_t>(y) * w * c], w, c);
        CMapMat xk(&kv->value.data[static_cast<std::size_t>(y) * w * c], w, c);
        RowMat qm = xq * wqm.transpose();
        RowMat km = xk * wkm.transpose();
        RowMat vm = xk * wvm.transpose();
        RowMat logits = (qm * km.transpose()) * inv_sc;
        for (int i = 0; i < w; ++i) softmax_inplace(logits.row(i).data(), w);
        MapMat(&out.data[static_cast<std::size_t>(y) * w * c], w, c).noalias() = logits * vm;
    }
    bool rg = any_rg({&q, &kv, &wq, &wk, &wv});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [q, kv, wq, wk, wv, rn, h, w, c, inv_sc] {
            auto wqm = as_mat(wq->value, c, c), wkm = as_mat(wk->value, c, c),
                 wvm = as_mat(wv->value, c, c);
            for (int y = 0; y < h; ++y) {
                CMapMat xq(&q->value.data[static_cast<std::size_t>(y) * w * c], w, c);
                CMapMat xk(&kv->value.data[static_cast<std::size_t>(y) * w * c], w, c);
                RowMat qm = xq * wqm.transpose();
                RowMat km = xk * wkm.transpose();
                RowMat vm = xk * wvm.transpose();
                RowMat a = (qm * km.transpose()) * inv_sc;
                for (int i = 0; i < w; ++i) softmax_inplace(a.row(i).data(), w);
                CMapMat dout(&rn->grad.data[static_cast<std::size_t>(y) * w * c], w, c);
                RowMat dv = a.transpose() * dout;
                RowMat da = dout * vm.transpose();
                RowMat dl(w, w);
                for (int i = 0; i < w; ++i) {
                    double dot = a.row(i).dot(da.row(i));
                    dl.row(i) = a.row(i).cwiseProduct((da.row(i).array() - dot).matrix());
                }
                RowMat dqm = dl * km * inv_sc;
                RowMat dkm = dl.transpose() * qm * inv_sc;
                if (q->requires_grad)
                    MapMat(&q->grad.data[static_cast<std::size_t>(y) * w * c], w, c).noalias() +=
                        dqm * wqm;
                if (kv->requires_grad)
                    MapMat(&kv->grad.data[static_cast<std::size_t>(y) * w * c], w, c).noalias() +=
                        dkm * wkm + dv * wvm;
                if (wq->requires_grad)
                    as_mat(wq->grad, c, c).noalias() += dqm.transpose() * xq;
                if (wk->requires_grad)
                    as_mat(wk->grad, c, c).noalias() += dkm.transpose() * xk;
                if (wv->requires_grad)
                    as_mat(wv->grad, c, c).noalias() += dv.transpose() * xk;
            }
        };
    }
    return r;
}

namespace {

// In-image window site indices around (y, x).
inline int collect_window(int y, int x, int h, int w, int radius, int* out) {
    int n = 0;
    for (int dy = -radius; dy <= radius; ++dy) {
        int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -radius; dx <= radius; ++dx) {
            int xx = x + dx;
            if (xx < 0 || xx >= w) continue;
            out[n++] = yy * w + xx;
        }
    }
    return n;
}

}  // namespace

Var window_attention_grid(Tape& t, const Var& qgrid, const Var& kvgrid, const Var& wq,
                          const Var& wk, const Var& wv, int radius) {
    require_same_shape(qgrid->value, kvgrid->value, "window_attention_grid");
    const int h = qgrid->value.shape[0], w = qgrid->value.shape[1], c = qgrid->value.shape[2];
    const int s = h * w;
    const double inv_sc = 1.0 / std::sqrt(static_cast<double>(c));
    const int wmax = (2 * radius + 1) * (2 * radius + 1);

    RowMat qg = as_mat(qgrid->value, s, c) * as_mat(wq->value, c, c).transpose();
    RowMat kg = as_mat(kvgrid->value, s, c) * as_mat(wk->value, c, c).transpose();
    RowMat vg = as_mat(kvgrid->value, s, c) * as_mat(wv->value, c, c).transpose();

    Tensor out({h, w, c});
    std::vector<int> win(wmax);
    std::vector<double> logits(wmax);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int i = y * w + x;
            int n = collect_window(y, x, h, w, radius, win.data());
            for (int j = 0; j < n; ++j) logits[j] = qg.row(i).dot(kg.row(win[j])) * inv_sc;
            softmax_inplace(logits.data(), n);
            double* o = &out.data[static_cast<std::size_t>(i) * c];
            for (int j = 0; j < n; ++j) {
                const double* vr = vg.row(win[j]).data();
                for (int k = 0; k < c; ++k) o[k] += logits[j] * vr[k];
            }
        }
    bool rg = any_rg({&qgrid, &kvgrid, &wq, &wk, &wv});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [qgrid, kvgrid, wq, wk, wv, rn, h, w, c, radius, inv_sc, wmax] {
            const int s = h * w;
            RowMat qg = as_mat(qgrid->value, s, c) * as_mat(wq->value, c, c).transpose();
            RowMat kg = as_mat(kvgrid->value, s, c) * as_mat(wk->value, c, c).transpose();
            RowMat vg = as_mat(kvgrid->value, s, c) * as_mat(wv->value, c, c).transpose();
            RowMat dqg = RowMat::Zero(s, c), dkg = RowMat::Zero(s, c), dvg = RowMat::Zero(s, c);
            std::vector<int> win(wmax);
            std::vector<double> a(wmax), da(wmax);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    int i = y * w + x;
                    int n = collect_window(y, x, h, w, radius, win.data());
                    for (int j = 0; j < n; ++j) a[j] = qg.row(i).dot(kg.row(win[j])) * inv_sc;
                    softmax_inplace(a.data(), n);
                    const double* dout = &rn->grad.data[static_cast<std::size_t>(i) * c];
                    double dot = 0;
                    for (int j = 0; j < n; ++j) {
                        const double* vr = vg.row(win[j]).data();
                        double d = 0;
                        for (int k = 0; k < c; ++k) {
                            dvg(win[j], k) += a[j] * dout[k];
                            d += dout[k] * vr[k];
                        }
                        da[j] = d;
                        dot += a[j] * d;
                    }
                    for (int j = 0; j < n; ++j) {
                        double dl = a[j] * (da[j] - dot);
                        dqg.row(i) += dl * inv_sc * kg.row(win[j]);
                        dkg.row(win[j]) += dl * inv_sc * qg.row(i);
                    }
                }
            if (qgrid->requires_grad)
                as_mat(qgrid->grad, s, c).noalias() += dqg * as_mat(wq->value, c, c);
            if (kvgrid->requires_grad)
                as_mat(kvgrid->grad, s, c).noalias() +=
                    dkg * as_mat(wk->value, c, c) + dvg * as_mat(wv->value, c, c);
            if (wq->requires_grad)
                as_mat(wq->grad, c, c).noalias() += dqg.transpose() * as_mat(qgrid->value, s, c);
            if (wk->requires_grad)
                as_mat(wk->grad, c, c).noalias() += dkg.transpose() * as_mat(kvgrid->value, s, c);
            if (wv->requires_grad)
                as_mat(wv->grad, c, c).noalias() += dvg.transpose() * as_mat(kvgrid->value, s, c);
        };
    }
    return r;
}

Var query_window_attention(Tape& t, const Var& tokens, const Var& grid,
                           const std::vector<int>& centers, const Var& wq, const Var& wk,
                           const Var& wv, const Var& wo, int radius) {
    const int n = tokens->value.shape[0];
    const int c = tokens->value.shape[1];
    const int h = grid->value.shape[0], w = grid->value.shape[1];
    if (grid->value.shape[2] != c) throw ShapeError("query_window_attention: channel mismatch");
    if (static_cast<int>(centers.size()) != n)
        throw ShapeError("query_window_attention: centers size");
    const int s = h * w;
    const double inv_sc = 1.0 / std::sqrt(static_cast<double>(c));
    const int wmax = (2 * radius + 1) * (2 * radius + 1);

    RowMat qt = as_mat(tokens->value, n, c) * as_mat(wq->value, c, c).transpose();
    RowMat kg = as_mat(grid->value, s, c) * as_mat(wk->value, c, c).transpose();
    RowMat vg = as_mat(grid->value, s, c) * as_mat(wv->value, c, c).transpose();

    RowMat att = RowMat::Zero(n, c);
    std::vector<int> win(wmax);
    std::vector<double> logits(wmax);
    for (int i = 0; i < n; ++i) {
        int cy = centers[i] / w, cx = centers[i] % w;
        int m = collect_window(cy, cx, h, w, radius, win.data());
        for (int j = 0; j < m; ++j) logits[j] = qt.row(i).dot(kg.row(win[j])) * inv_sc;
        softmax_inplace(logits.data(), m);
        for (int j = 0; j < m; ++j) att.row(i) += logits[j] * vg.row(win[j]);
    }
    Tensor out({n, c});
    as_mat(out, n, c).noalias() = att * as_mat(wo->value, c, c).transpose();

    bool rg = any_rg({&tokens, &grid, &wq, &wk, &wv, &wo});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        auto att_store = std::make_shared<RowMat>(std::move(att));
        std::vector<int> cen = centers;
        r->backprop = [tokens, grid, wq, wk, wv, wo, rn, cen, att_store, n, c, h, w, radius,
                       inv_sc, wmax] {
            const int s = h * w;
            RowMat qt = as_mat(tokens->value, n, c) * as_mat(wq->value, c, c).transpose();
            RowMat kg = as_mat(grid->value, s, c) * as_mat(wk->value, c, c).transpose();
            RowMat vg = as_mat(grid->value, s, c) * as_mat(wv->value, c, c).transpose();
            auto dy = as_mat(rn->grad, n, c);
            RowMat datt = dy * as_mat(wo->value, c, c);
            if (wo->requires_grad)
                as_mat(wo->grad, c, c).noalias() += dy.transpose() * (*att_store);
            RowMat dqt = RowMat::Zero(n, c), dkg = RowMat::Zero(s, c), dvg = RowMat::Zero(s, c);
            std::vector<int> win(wmax);
            std::vector<double> a(wmax), da(wmax);
            for (int i = 0; i < n; ++i) {
                int cy = cen[i] / w, cx = cen[i] % w;
                int m = collect_window(cy, cx, h, w, radius, win.data());
                for (int j = 0; j < m; ++j) a[j] = qt.row(i).dot(kg.row(win[j])) * inv_sc;
                softmax_inplace(a.data(), m);
                double dot = 0;
                for (int j = 0; j < m; ++j) {
                    da[j] = datt.row(i).dot(vg.row(win[j]));
                    dvg.row(win[j]) += a[j] * datt.row(i);
                    dot += a[j] * da[j];
                }
                for (int j = 0; j < m; ++j) {
                    double dl = a[j] * (da[j] - dot);
                    dqt.row(i) += dl * inv_sc * kg.row(win[j]);
                    dkg.row(win[j]) += dl * inv_sc * qt.row(i);
                }
            }
            if (tokens->requires_grad)
                as_mat(tokens->grad, n, c).noalias() += dqt * as_mat(wq->value, c, c);
            if (grid->requires_grad)
                as_mat(grid->grad, s, c).noalias() +=
                    dkg * as_mat(wk->value, c, c) + dvg * as_mat(wv->value, c, c);
            if (wq->requires_grad)
                as_mat(wq->grad, c, c).noalias() += dqt.transpose() * as_mat(tokens->value, n, c);
            if (wk->requires_grad)
                as_mat(wk->grad, c, c).noalias() += dkg.transpose() * as_mat(grid->value, s, c);
            if (wv->requires_grad)
                as_mat(wv->grad, c, c).noalias() += dvg.transpose() * as_mat(grid->value, s, c);
        };
    }
    return r;
}

Var bilinear_shift_x(Tape& t, const Var& grid, const Tensor& disp) {
    const int h = grid->value.shape[0], w = grid->value.shape[1], c = grid->value.shape[2];
    if (disp.shape[0] != h || disp.shape[1] != w)
        throw ShapeError("bilinear_shift_x: disparity shape mismatch");
    Tensor out({h, w, c});
    auto sample = [&](auto&& fn) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double xs = static_cast<double>(x) - disp.at(y, x);
                xs = std::clamp(xs, 0.0, static_cast<double>(w - 1));
                int x0 = static_cast<int>(std::floor(xs));
                int x1 = std::min(x0 + 1, w - 1);
                double frac = xs - x0;
                fn(y, x, x0, x1, frac);
            }
    };
    sample([&](int y, int x, int x0, int x1, double f) {
        const double* g0 = &grid->value.data[(static_cast<std::size_t>(y) * w + x0) * c];
        const double* g1 = &grid->value.data[(static_cast<std::size_t>(y) * w + x1) * c];
        double* o = &out.data[(static_cast<std::size_t>(y) * w + x) * c];
        for (int k = 0; k < c; ++k) o[k] = (1.0 - f) * g0[k] + f * g1[k];
    });
    bool rg = grid->requires_grad;
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        Tensor d = disp;
        r->backprop = [grid, rn, d, h, w, c] {
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double xs = static_cast<double>(x) - d.at(y, x);
                    xs = std::clamp(xs, 0.0, static_cast<double>(w - 1));
                    int x0 = static_cast<int>(std::floor(xs));
                    int x1 = std::min(x0 + 1, w - 1);
                    double f = xs - x0;
                    const double* dy = &rn->grad.data[(static_cast<std::size_t>(y) * w + x) * c];
                    double* g0 = &grid->grad.data[(static_cast<std::size_t>(y) * w + x0) * c];
                    double* g1 = &grid->grad.data[(static_cast<std::size_t>(y) * w + x1) * c];
                    for (int k = 0; k < c; ++k) {
                        g0[k] += (1.0 - f) * dy[k];
                        g1[k] += f * dy[k];
                    }
                }
        };
    }
    return r;
}

Var select_rows(Tape& t, const Var& a, const Var& b, const std::vector<std::uint8_t>& use_b) {
    require_same_shape(a->value, b->value, "select_rows");
    const int h = a->value.shape[0];
    if (static_cast<int>(use_b.size()) != h) throw ShapeError("select_rows: mask size");
    const std::size_t row_elems = a->value.size() / h;
    Tensor out(a->value.shape);
    for (int y = 0; y < h; ++y) {
        const Tensor& src = use_b[y] ? b->value : a->value;
        std::copy(src.data.begin() + y * row_elems, src.data.begin() + (y + 1) * row_elems,
                  out.data.begin() + y * row_elems);
    }
    bool rg = any_rg({&a, &b});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        auto mask = use_b;
        r->backprop = [a, b, rn, mask, h, row_elems] {
            for (int y = 0; y < h; ++y) {
                const Var& dst = mask[y] ? b : a;
                if (!dst->requires_grad) continue;
                for (std::size_t i = y * row_elems; i < (y + 1) * row_elems; ++i)
                    dst->grad[i] += rn->grad[i];
            }
        };
    }
    return r;
}

Var gather_sites(Tape& t, const Var& grid, const std::vector<int>& sites) {
    const int c = grid->value.shape.back();
    const int n = static_cast<int>(sites.size());
    Tensor out({n, c});
    for (int i = 0; i < n; ++i) {
        const double* src = &grid->value.data[static_cast<std::size_t>(sites[i]) * c];
        std::copy(src, src + c, &out.data[static_cast<std::size_t>(i) * c]);
    }
    bool rg = grid->requires_grad;
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        auto idx = sites;
        r->backprop = [grid, rn, idx, n, c] {
            for (int i = 0; i < n; ++i) {
                double* dst = &grid->grad.data[static_cast<std::size_t>(idx[i]) * c];
                const double* src = &rn->grad.data[static_cast<std::size_t>(i) * c];
                for (int k = 0; k < c; ++k) dst[k] += src[k];
            }
        };
    }
    return r;
}

Var concat_cols(Tape& t, const Var& a, const Var& b) {
    const int n = a->value.shape[0];
    if (b->value.shape[0] != n) throw ShapeError("concat_cols: row mismatch");
    const int ca = a->value.shape[1], cb = b->value.shape[1];
    Tensor out({n, ca + cb});
    for (int i = 0; i < n; ++i) {
        std::copy(&a->value.data[static_cast<std::size_t>(i) * ca],
                  &a->value.data[static_cast<std::size_t>(i) * ca] + ca,
                  &out.data[static_cast<std::size_t>(i) * (ca + cb)]);
        std::copy(&b->value.data[static_cast<std::size_t>(i) * cb],
                  &b->value.data[static_cast<std::size_t>(i) * cb] + cb,
                  &out.data[static_cast<std::size_t>(i) * (ca + cb) + ca]);
    }
    bool rg = any_rg({&a, &b});
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [a, b, rn, n, ca, cb] {
            for (int i = 0; i < n; ++i) {
                const double* dy = &rn->grad.data[static_cast<std::size_t>(i) * (ca + cb)];
                if (a->requires_grad) {
                    double* da = &a->grad.data[static_cast<std::size_t>(i) * ca];
                    for (int k = 0; k < ca; ++k) da[k] += dy[k];
                }
                if (b->requires_grad) {
                    double* db = &b->grad.data[static_cast<std::size_t>(i) * cb];
                    for (int k = 0; k < cb; ++k) db[k] += dy[ca + k];
                }
            }
        };
    }
    return r;
}

Var reshape(Tape& t, const Var& a, std::vector<int> shape) {
    if (Tensor::numel(shape) != a->value.size()) throw ShapeError("reshape: element count");
    Tensor out(shape);
    out.data = a->value.data;
    bool rg = a->requires_grad;
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        r->backprop = [a, rn] {
            for (std::size_t i = 0; i < rn->grad.size(); ++i) a->grad[i] += rn->grad[i];
        };
    }
    return r;
}

Var mean_abs_diff(Tape& t, const Var& pred, const Tensor& target) {
    require_same_shape(pred->value, target, "mean_abs_diff");
    const std::size_t n = pred->value.size();
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(pred->value[i] - target[i]);
    Tensor out({1});
    out[0] = acc / static_cast<double>(n);
    bool rg = pred->requires_grad;
    Var r = t.make(std::move(out), rg, nullptr);
    if (rg) {
        Node* rn = r.get();
        Tensor tgt = target;
        r->backprop = [pred, rn, tgt, n] {
            double g = rn->grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                double d = pred->value[i] - tgt[i];
                pred->grad[i] += d > 0 ? g : (d < 0 ? -g : 0.0);
            }
        };
    }
    return r;
}

}  // namespace ad
}  // namespace stereoinr
