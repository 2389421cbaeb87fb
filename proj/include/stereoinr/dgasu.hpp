#pragma once

#include <string>
#include <vector>

#include "stereoinr/autodiff.hpp"
#include "stereoinr/disparity.hpp"
#include "stereoinr/encoder.hpp"
#include "stereoinr/imaging_io.hpp"
#include "stereoinr/model.hpp"

namespace stereoinr {

// gamma(u) = (u, cos(pi u), sin(pi u), ..., cos(n pi u), sin(n pi u)),
// applied per axis. rel: [N, 2] -> [N, 2 * (1 + 2n)].
Tensor positional_encode(const Tensor& rel, int n_freqs);

// Warped other-view codes in this view's frame, with a row-wise fallback
// to the unwarped codes where the warp left a whole row invalid.
struct WarpedCodes {
    Var grid;                         // [h, w, C]
    std::vector<std::uint8_t> valid;  // per-site warp validity
};

WarpedCodes warp_codes(Tape& t, const Var& other, const DisparityField& disp);

// Window cross attention (query = own codes, keys/values = warped codes)
// followed by a squeeze-excite refinement:
//   z~ = z + Conv1(F) + F * sigmoid(Conv2(F)).
Var cross_view_fuse(Tape& t, ParamBinder& bind, const ModelConfig& cfg, const Var& own,
                    const Var& warped, const std::string& suffix);

// One view's decode-ready state.
struct ViewContext {
    Var z_refined;  // fused + refined own codes, [h, w, C]
    Var warped;     // other-view codes in this frame, [h, w, C]
};

ViewContext build_view_context(Tape& t, ParamBinder& bind, const ModelConfig& cfg,
                               const Var& own, const Var& other, const DisparityField& disp,
                               bool left);

// Nearest LR cell index and in-cell offsets (in [-1, 1]) per query.
void nearest_cells(const QueryGrid& queries, int h, int w, std::vector<int>& centers,
                   Tensor& rel);

// RGB at the query coordinates: token projection, alternating self/cross
// window attention rounds, coordinate MLP, plus the bilinear LR skip.
// Returns [N, 3]; differentiable in the model parameters.
Var decode_queries(Tape& t, ParamBinder& bind, const ModelConfig& cfg, const ViewContext& ctx,
                   const QueryGrid& queries, const Image& lr_image, bool left);

// Full pipeline: disparity from the LR pair, encode, fuse, dense decode in
// chunks of config.upsampler.decode_chunk queries, output clipped to [0, 1].
StereoPair super_resolve(ModelState& state, const StereoPair& lr, int out_h, int out_w);

// Magnification form: output is round(r * H) x round(r * W), r > 0.
StereoPair super_resolve(ModelState& state, const StereoPair& lr, double r);

// Bilinear LR skip sampled at the query coordinates, [N, 3].
Tensor lr_skip(const Image& lr_image, const QueryGrid& queries);

}  // namespace stereoinr
