#include "stereoinr/dgasu.hpp"

#include <algorithm>
#include <cmath>

namespace stereoinr {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

Tensor positional_encode(const Tensor& rel, int n_freqs) {
    if (rel.shape.size() != 2 || rel.shape[1] != 2)
        throw ShapeError("positional_encode: expected [N, 2], got " + rel.shape_str());
    if (n_freqs < 0) throw ArgumentError("positional_encode: n_freqs must be >= 0");
    const int n = rel.shape[0];
    const int per_axis = 1 + 2 * n_freqs;
    Tensor out({n, 2 * per_axis});
    for (int i = 0; i < n; ++i) {
        for (int axis = 0; axis < 2; ++axis) {
            const double u = rel.at(i, axis);
            double* dst = &out.data[static_cast<std::size_t>(i) * 2 * per_axis +
                                    static_cast<std::size_t>(axis) * per_axis];
            dst[0] = u;
            for (int k = 1; k <= n_freqs; ++k) {
                dst[2 * k - 1] = std::cos(k * kPi * u);
                dst[2 * k] = std::sin(k * kPi * u);
            }
        }
    }
    return out;
}

WarpedCodes warp_codes(Tape& t, const Var& other, const DisparityField& disp) {
    WarpResult wr = warp(t, other, disp);
    const int h = disp.height(), w = disp.width();
    std::vector<std::uint8_t> row_dead(h, 0);
    for (int y = 0; y < h; ++y) {
        bool any = false;
        for (int x = 0; x < w && !any; ++x) any = wr.valid[static_cast<std::size_t>(y) * w + x];
        row_dead[y] = any ? 0 : 1;
    }
    Var grid = ad::select_rows(t, wr.grid, other, row_dead);
    return {grid, std::move(wr.valid)};
}

Var cross_view_fuse(Tape& t, ParamBinder& bind, const ModelConfig& cfg, const Var& own,
                    const Var& warped, const std::string& suffix) {
    Var f = ad::window_attention_grid(t, own, warped, bind("upsampler.fuse.wq" + suffix),
                                      bind("upsampler.fuse.wk" + suffix),
                                      bind("upsampler.fuse.wv" + suffix),
                                      cfg.upsampler.window_radius);
    Var lin = ad::conv3x3(t, f, bind("upsampler.se.conv1.weight" + suffix), nullptr);
    Var gate = ad::sigmoid(t, ad::conv3x3(t, f, bind("upsampler.se.conv2.weight" + suffix),
                                          nullptr));
    return ad::add(t, ad::add(t, own, lin), ad::mul(t, f, gate));
}

ViewContext build_view_context(Tape& t, ParamBinder& bind, const ModelConfig& cfg,
                               const Var& own, const Var& other, const DisparityField& disp,
                               bool left) {
    const std::string sfx = view_suffix(cfg.encoder, left);
    WarpedCodes wc = warp_codes(t, other, disp);
    Var refined = cross_view_fuse(t, bind, cfg, own, wc.grid, sfx);
    return {refined, wc.grid};
}

void nearest_cells(const QueryGrid& queries, int h, int w, std::vector<int>& centers,
                   Tensor& rel) {
    const int n = queries.count();
    centers.resize(n);
    rel = Tensor({n, 2});
    for (int i = 0; i < n; ++i) {
        const double qy = queries.coords.at(i, 0), qx = queries.coords.at(i, 1);
        if (qy < -1.0 || qy > 1.0 || qx < -1.0 || qx > 1.0)
            throw ArgumentError("query coordinate outside [-1, 1]^2");
        int iy = static_cast<int>(std::floor((qy + 1.0) * 0.5 * h));
        int ix = static_cast<int>(std::floor((qx + 1.0) * 0.5 * w));
        iy = std::clamp(iy, 0, h - 1);
        ix = std::clamp(ix, 0, w - 1);
        const double cy = -1.0 + (2.0 * iy + 1.0) / h;
        const double cx = -1.0 + (2.0 * ix + 1.0) / w;
        centers[i] = iy * w + ix;
        rel.at(i, 0) = (qy - cy) * h;
        rel.at(i, 1) = (qx - cx) * w;
    }
}

Tensor lr_skip(const Image& lr_image, const QueryGrid& queries) {
    const int h = lr_image.shape[0], w = lr_image.shape[1];
    const int n = queries.count();
    Tensor out({n, 3});
    for (int i = 0; i < n; ++i) {
        const double py = (queries.coords.at(i, 0) + 1.0) * 0.5 * h - 0.5;
        const double px = (queries.coords.at(i, 1) + 1.0) * 0.5 * w - 0.5;
        sample_bilinear(lr_image, py, px, &out.data[static_cast<std::size_t>(i) * 3]);
    }
    return out;
}

Var decode_queries(Tape& t, ParamBinder& bind, const ModelConfig& cfg, const ViewContext& ctx,
                   const QueryGrid& queries, const Image& lr_image, bool left) {
    const std::string sfx = view_suffix(cfg.encoder, left);
    const int h = ctx.z_refined->value.shape[0], w = ctx.z_refined->value.shape[1];

    std::vector<int> centers;
    Tensor rel;
    nearest_cells(queries, h, w, centers, rel);
    Var pe = t.constant(positional_encode(rel, cfg.posenc.n_freqs));

    Var z_star = ad::gather_sites(t, ctx.z_refined, centers);
    Var warped_star = ad::gather_sites(t, ctx.warped, centers);

    Var token = ad::linear(t, ad::concat_cols(t, z_star, pe),
                           bind("upsampler.token.weight" + sfx),
                           bind("upsampler.token.bias" + sfx));

    for (int i = 0; i < 2 * cfg.upsampler.n_rounds; ++i) {
        const Var& grid = (i % 2 == 0) ? ctx.z_refined : ctx.warped;
        const std::string blk = "upsampler.block" + std::to_string(i);
        Var attn = ad::query_window_attention(
            t, token, grid, centers, bind(blk + ".wq" + sfx), bind(blk + ".wk" + sfx),
            bind(blk + ".wv" + sfx), bind(blk + ".wo" + sfx), cfg.upsampler.window_radius);
        token = ad::add(t, token, attn);
    }

    Var x = ad::concat_cols(t, ad::concat_cols(t, token, warped_star), pe);
    for (int l = 0; l < cfg.upsampler.mlp_layers; ++l) {
        const std::string lay = "upsampler.mlp.layer" + std::to_string(l);
        x = ad::linear(t, x, bind(lay + ".weight" + sfx), bind(lay + ".bias" + sfx));
        if (l + 1 < cfg.upsampler.mlp_layers) x = ad::gelu(t, x);
    }

    return ad::add(t, x, t.constant(lr_skip(lr_image, queries)));
}

StereoPair super_resolve(ModelState& state, const StereoPair& lr, double r) {
    if (!(r > 0)) throw ArgumentError("super_resolve: scale must be > 0");
    const int out_h = static_cast<int>(std::lround(r * lr.height()));
    const int out_w = static_cast<int>(std::lround(r * lr.width()));
    return super_resolve(state, lr, out_h, out_w);
}

StereoPair super_resolve(ModelState& state, const StereoPair& lr, int out_h, int out_w) {
    lr.validate();
    if (out_h < 1 || out_w < 1) throw ArgumentError("super_resolve: output size must be >= 1");
    const int h = lr.height(), w = lr.width();
    const ModelConfig& cfg = state.config;

    Tensor gray_l = luminance(lr.left), gray_r = luminance(lr.right);
    NccBlockMatcher matcher;
    DisparityField disp_l = matcher.estimate(gray_l, gray_r, cfg.disparity);
    DisparityField disp_r = matcher.estimate(gray_r, gray_l, cfg.disparity);

    const double r = std::sqrt(static_cast<double>(out_h) * out_w /
                               (static_cast<double>(h) * w));
    ScaleConditioning s = ScaleConditioning::from_scale(r, out_h, out_w);

    Tape tape;
    ParamBinder bind(tape, state, false);
    FeatureGridPair codes = encode(tape, bind, cfg, lr, s);
    ViewContext ctx_l = build_view_context(tape, bind, cfg, codes.left, codes.right, disp_l, true);
    ViewContext ctx_r =
        build_view_context(tape, bind, cfg, codes.right, codes.left, disp_r, false);

    QueryGrid dense = make_query_grid(out_h, out_w, r);
    const int n = dense.count();
    const int chunk = cfg.upsampler.decode_chunk > 0 ? cfg.upsampler.decode_chunk : n;

    StereoPair out;
    out.left = Tensor({out_h, out_w, 3});
    out.right = Tensor({out_h, out_w, 3});
    Tape scratch;
    for (int start = 0; start < n; start += chunk) {
        const int m = std::min(chunk, n - start);
        QueryGrid sub;
        sub.coords = Tensor({m, 2});
        std::copy(dense.coords.data.begin() + static_cast<std::size_t>(start) * 2,
                  dense.coords.data.begin() + static_cast<std::size_t>(start + m) * 2,
                  sub.coords.data.begin());
        sub.cell_y = dense.cell_y;
        sub.cell_x = dense.cell_x;
        sub.scale = dense.scale;

        Var rgb_l = decode_queries(scratch, bind, cfg, ctx_l, sub, lr.left, true);
        Var rgb_r = decode_queries(scratch, bind, cfg, ctx_r, sub, lr.right, false);
        for (int i = 0; i < m; ++i)
            for (int c = 0; c < 3; ++c) {
                const std::size_t dst = static_cast<std::size_t>(start + i) * 3 + c;
                out.left.data[dst] = std::clamp(rgb_l->value.at(i, c), 0.0, 1.0);
                out.right.data[dst] = std::clamp(rgb_r->value.at(i, c), 0.0, 1.0);
            }
        scratch.clear();
    }
    return out;
}

}  // namespace stereoinr
