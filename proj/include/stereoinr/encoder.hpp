#pragma once

#include <string>
#include <utility>

#include "stereoinr/autodiff.hpp"
#include "stereoinr/imaging_io.hpp"
#include "stereoinr/model.hpp"

namespace stereoinr {

// Latent code grids z_L, z_R on the LR lattice, [h, w, C].
struct FeatureGridPair {
    Var left;
    Var right;
};

// Parameter suffix for a view branch ("" when weights are shared).
inline std::string view_suffix(const EncoderConfig& cfg, bool left) {
    return cfg.share_view_weights ? std::string{} : (left ? ".left" : ".right");
}

// x + Up(GELU(Down(x))); Up zero-initialized so the adapter starts as
// the identity.
Var spatial_adapter(Tape& t, const Var& x, const Var& w_down, const Var& b_down,
                    const Var& w_up, const Var& b_up);

// Per-row epipolar cross attention between the two views with a
// zero-initialized per-channel residual gate.
std::pair<Var, Var> stereo_adapter(Tape& t, const Var& x_left, const Var& x_right,
                                   const Var& wq, const Var& wk, const Var& wv,
                                   const Var& gate);

struct ScaleAdapterParams {
    Var mlp1_l1_w, mlp1_l1_b, mlp1_l2_w, mlp1_l2_b;
    Var mlp2_w, mlp2_b;
    Var ln_gamma, ln_beta;
    Var alpha;  // zero-initialized residual gate
};

// x + alpha * (LN(x) * Sigmoid(MLP2(MLP1(s)))), channel-wise gate.
Var scale_adapter(Tape& t, const Var& x, const ScaleConditioning& s,
                  const ScaleAdapterParams& p);

// The per-channel sigmoid gate alone (for tests and diagnostics).
Var scale_adapter_gate(Tape& t, const ScaleConditioning& s, const ScaleAdapterParams& p);

ScaleAdapterParams bind_scale_adapter(ParamBinder& bind, int group, const std::string& suffix);

// Residual backbone with adapters; output grids keep the input spatial size.
FeatureGridPair encode(Tape& t, ParamBinder& bind, const ModelConfig& cfg,
                       const StereoPair& pair, const ScaleConditioning& s);

}  // namespace stereoinr
