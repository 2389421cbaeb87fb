#include "stereoinr/encoder.hpp"

namespace stereoinr {

Var spatial_adapter(Tape& t, const Var& x, const Var& w_down, const Var& b_down,
                    const Var& w_up, const Var& b_up) {
    const int h = x->value.shape[0], w = x->value.shape[1], c = x->value.shape[2];
    Var flat = ad::reshape(t, x, {h * w, c});
    Var mid = ad::gelu(t, ad::linear(t, flat, w_down, b_down));
    Var up = ad::linear(t, mid, w_up, b_up);
    return ad::add(t, x, ad::reshape(t, up, {h, w, c}));
}

std::pair<Var, Var> stereo_adapter(Tape& t, const Var& x_left, const Var& x_right,
                                   const Var& wq, const Var& wk, const Var& wv,
                                   const Var& gate) {
    require_same_shape(x_left->value, x_right->value, "stereo_adapter");
    Var attn_l = ad::epipolar_attention(t, x_left, x_right, wq, wk, wv);
    Var attn_r = ad::epipolar_attention(t, x_right, x_left, wq, wk, wv);
    Var out_l = ad::add(t, x_left, ad::mul_channels(t, attn_l, gate));
    Var out_r = ad::add(t, x_right, ad::mul_channels(t, attn_r, gate));
    return {out_l, out_r};
}

Var scale_adapter_gate(Tape& t, const ScaleConditioning& s, const ScaleAdapterParams& p) {
    Tensor sv({1, 3});
    sv.at(0, 0) = s.r;
    sv.at(0, 1) = s.cell_y;
    sv.at(0, 2) = s.cell_x;
    Var sc = t.constant(sv);
    Var e = ad::linear(t, ad::gelu(t, ad::linear(t, sc, p.mlp1_l1_w, p.mlp1_l1_b)),
                       p.mlp1_l2_w, p.mlp1_l2_b);
    return ad::sigmoid(t, ad::linear(t, e, p.mlp2_w, p.mlp2_b));  // [1, C]
}

Var scale_adapter(Tape& t, const Var& x, const ScaleConditioning& s,
                  const ScaleAdapterParams& p) {
    Var g = scale_adapter_gate(t, s, p);
    Var ln = ad::layernorm_channels(t, x, p.ln_gamma, p.ln_beta);
    Var modulated = ad::mul_channels(t, ln, g);
    return ad::add(t, x, ad::mul_channels(t, modulated, p.alpha));
}

ScaleAdapterParams bind_scale_adapter(ParamBinder& bind, int group, const std::string& suffix) {
    std::string p = "adapter.scale.group" + std::to_string(group);
    return {bind(p + ".mlp1.l1.weight" + suffix), bind(p + ".mlp1.l1.bias" + suffix),
            bind(p + ".mlp1.l2.weight" + suffix), bind(p + ".mlp1.l2.bias" + suffix),
            bind(p + ".mlp2.weight" + suffix),    bind(p + ".mlp2.bias" + suffix),
            bind(p + ".ln.gamma" + suffix),       bind(p + ".ln.beta" + suffix),
            bind(p + ".alpha" + suffix)};
}

FeatureGridPair encode(Tape& t, ParamBinder& bind, const ModelConfig& cfg,
                       const StereoPair& pair, const ScaleConditioning& s) {
    if (pair.left.shape != pair.right.shape)
        throw ShapeError("encode: stereo pair dimension mismatch");
    const int h = pair.height(), w = pair.width();
    if (h < cfg.encoder.min_input_size || w < cfg.encoder.min_input_size)
        throw ShapeError("encode: input smaller than " +
                         std::to_string(cfg.encoder.min_input_size) + " pixels per side");

    const std::string sl = view_suffix(cfg.encoder, true);
    const std::string sr = view_suffix(cfg.encoder, false);

    auto head = [&](const Image& img, const std::string& sfx) {
        Var x = t.constant(img);
        return ad::conv3x3(t, x, bind("backbone.head.weight" + sfx),
                           bind("backbone.head.bias" + sfx));
    };
    Var f0_l = head(pair.left, sl);
    Var f0_r = head(pair.right, sr);
    Var zl = f0_l, zr = f0_r;

    for (int g = 0; g < cfg.encoder.n_blocks; ++g) {
        std::string gp = "backbone.group" + std::to_string(g);
        std::string sp = "adapter.spatial.group" + std::to_string(g);
        std::string st = "adapter.stereo.group" + std::to_string(g);
        auto group_body = [&](Var x, const std::string& sfx) {
            Var y = ad::gelu(t, ad::conv3x3(t, x, bind(gp + ".conv1.weight" + sfx),
                                            bind(gp + ".conv1.bias" + sfx)));
            y = ad::conv3x3(t, y, bind(gp + ".conv2.weight" + sfx),
                            bind(gp + ".conv2.bias" + sfx));
            y = spatial_adapter(t, y, bind(sp + ".down.weight" + sfx),
                                bind(sp + ".down.bias" + sfx), bind(sp + ".up.weight" + sfx),
                                bind(sp + ".up.bias" + sfx));
            return ad::add(t, x, y);
        };
        zl = group_body(zl, sl);
        zr = group_body(zr, sr);
        std::tie(zl, zr) = stereo_adapter(t, zl, zr, bind(st + ".wq"), bind(st + ".wk"),
                                          bind(st + ".wv"), bind(st + ".gate"));
        zl = scale_adapter(t, zl, s, bind_scale_adapter(bind, g, sl));
        zr = scale_adapter(t, zr, s, bind_scale_adapter(bind, g, sr));
    }

    return {ad::add(t, zl, f0_l), ad::add(t, zr, f0_r)};
}

}  // namespace stereoinr
