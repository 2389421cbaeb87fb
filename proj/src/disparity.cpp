#include "stereoinr/disparity.hpp"

#include <algorithm>
#include <cmath>

namespace stereoinr {

namespace {

// Summed-area table with one row/column of zero padding: S[y][x] holds the
// sum over [0, y) x [0, x).
std::vector<double> integral(const Tensor& img) {
    const int h = img.shape[0], w = img.shape[1];
    std::vector<double> s(static_cast<std::size_t>(h + 1) * (w + 1), 0.0);
    for (int y = 0; y < h; ++y) {
        double row = 0;
        for (int x = 0; x < w; ++x) {
            row += img.at(y, x);
            s[static_cast<std::size_t>(y + 1) * (w + 1) + x + 1] =
                s[static_cast<std::size_t>(y) * (w + 1) + x + 1] + row;
        }
    }
    return s;
}

double box_sum(const std::vector<double>& s, int stride, int y0, int y1, int x0, int x1) {
    // inclusive box [y0, y1] x [x0, x1]
    return s[static_cast<std::size_t>(y1 + 1) * stride + x1 + 1] -
           s[static_cast<std::size_t>(y0) * stride + x1 + 1] -
           s[static_cast<std::size_t>(y1 + 1) * stride + x0] +
           s[static_cast<std::size_t>(y0) * stride + x0];
}

}  // namespace

DisparityField NccBlockMatcher::estimate(const Tensor& ref, const Tensor& tgt,
                                         const DisparityConfig& cfg) const {
    require_same_shape(ref, tgt, "estimate_disparity");
    const int h = ref.shape[0], w = ref.shape[1];
    const int half = cfg.window / 2;
    const int dmax = cfg.d_max;
    const int n_shift = 2 * dmax + 1;
    const double n_px = static_cast<double>(cfg.window) * cfg.window;
    constexpr double var_eps = 1e-12;

    DisparityField out;
    out.d = Tensor({h, w});
    out.valid.assign(static_cast<std::size_t>(h) * w, 0);

    // Fully searchable region: the reference window and every shifted target
    // window must stay inside the image.
    const int x_lo = half + dmax, x_hi = w - 1 - half - dmax;
    const int y_lo = half, y_hi = h - 1 - half;
    if (x_lo > x_hi || y_lo > y_hi) return out;

    auto ref_sum = integral(ref);
    auto tgt_sum = integral(tgt);
    Tensor ref_sq({h, w}), tgt_sq({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            ref_sq.at(y, x) = ref.at(y, x) * ref.at(y, x);
            tgt_sq.at(y, x) = tgt.at(y, x) * tgt.at(y, x);
        }
    auto ref_sq_sum = integral(ref_sq);
    auto tgt_sq_sum = integral(tgt_sq);
    const int stride = w + 1;

    // score[(y*w + x) * n_shift + (delta + dmax)]
    std::vector<double> score(static_cast<std::size_t>(h) * w * n_shift, 0.0);

    Tensor prod({h, w});
    for (int delta = -dmax; delta <= dmax; ++delta) {
        prod.fill(0.0);
        for (int y = 0; y < h; ++y)
            for (int x = std::max(0, delta); x < std::min(w, w + delta); ++x)
                prod.at(y, x) = ref.at(y, x) * tgt.at(y, x - delta);
        auto prod_sum = integral(prod);
        for (int y = y_lo; y <= y_hi; ++y)
            for (int x = x_lo; x <= x_hi; ++x) {
                double sr = box_sum(ref_sum, stride, y - half, y + half, x - half, x + half);
                double sr2 = box_sum(ref_sq_sum, stride, y - half, y + half, x - half, x + half);
                int xt = x - delta;
                double st = box_sum(tgt_sum, stride, y - half, y + half, xt - half, xt + half);
                double st2 =
                    box_sum(tgt_sq_sum, stride, y - half, y + half, xt - half, xt + half);
                double sp = box_sum(prod_sum, stride, y - half, y + half, x - half, x + half);
                double cov = sp / n_px - (sr / n_px) * (st / n_px);
                double var_r = sr2 / n_px - (sr / n_px) * (sr / n_px);
                double var_t = st2 / n_px - (st / n_px) * (st / n_px);
                double ncc = 0.0;
                if (var_r > var_eps && var_t > var_eps) ncc = cov / std::sqrt(var_r * var_t);
                score[(static_cast<std::size_t>(y) * w + x) * n_shift + delta + dmax] = ncc;
            }
    }

    for (int y = y_lo; y <= y_hi; ++y)
        for (int x = x_lo; x <= x_hi; ++x) {
            const double* s = &score[(static_cast<std::size_t>(y) * w + x) * n_shift];
            // Visit shifts by increasing |delta| so ties resolve toward the
            // smaller magnitude.
            int best = 0;
            double best_score = s[dmax];
            for (int m = 1; m <= dmax; ++m)
                for (int delta : {-m, m})
                    if (s[delta + dmax] > best_score) {
                        best_score = s[delta + dmax];
                        best = delta;
                    }
            double d = best;
            if (best > -dmax && best < dmax) {
                double sm = s[best - 1 + dmax], s0 = s[best + dmax], sp = s[best + 1 + dmax];
                double denom = sm - 2.0 * s0 + sp;
                if (denom < -1e-12) {
                    double off = 0.5 * (sm - sp) / denom;
                    if (std::abs(off) <= 1.0) d = best + off;
                }
            }
            out.d.at(y, x) = std::clamp(d, static_cast<double>(-dmax), static_cast<double>(dmax));
            out.valid[static_cast<std::size_t>(y) * w + x] = 1;
        }
    return out;
}

DisparityField estimate_disparity(const Image& reference, const Image& target,
                                  const DisparityConfig& cfg, const DisparityEstimator& est) {
    require_same_shape(reference, target, "estimate_disparity");
    return est.estimate(luminance(reference), luminance(target), cfg);
}

WarpResult warp(Tape& tape, const Var& grid, const DisparityField& disp) {
    const int h = grid->value.shape[0], w = grid->value.shape[1];
    if (disp.d.shape[0] != h || disp.d.shape[1] != w)
        throw ShapeError("warp: disparity/grid shape mismatch");
    WarpResult r;
    r.grid = ad::bilinear_shift_x(tape, grid, disp.d);
    r.valid.assign(static_cast<std::size_t>(h) * w, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double xs = static_cast<double>(x) - disp.d.at(y, x);
            bool clamped = xs < 0.0 || xs > static_cast<double>(w - 1);
            r.valid[static_cast<std::size_t>(y) * w + x] = (!clamped && disp.is_valid(y, x)) ? 1 : 0;
        }
    return r;
}

Tensor warp_tensor(const Tensor& grid, const DisparityField& disp,
                   std::vector<std::uint8_t>* valid_out) {
    Tape tape;
    Var g = tape.constant(grid);
    WarpResult r = warp(tape, g, disp);
    if (valid_out) *valid_out = r.valid;
    return r.grid->value;
}

void save_disparity(const DisparityField& f, const std::string& path_d,
                    const std::string& path_valid) {
    save_png_u16(f.d, path_d, 256.0, 32.0 * 256.0);
    Tensor mask({f.height(), f.width()});
    for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x) mask.at(y, x) = f.is_valid(y, x) ? 1.0 : 0.0;
    save_png_mask(mask, path_valid);
}

}  // namespace stereoinr
