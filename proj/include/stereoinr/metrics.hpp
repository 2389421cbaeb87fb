#pragma once

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stereoinr/disparity.hpp"
#include "stereoinr/image.hpp"
#include "stereoinr/imaging_io.hpp"

namespace stereoinr {

// 10 log10(1 / MSE) over all RGB elements, capped at 100 dB for MSE = 0.
double psnr(const Tensor& a, const Tensor& b);

// Stereo-pair PSNR: mean of the two single-view PSNRs.
double pair_psnr(const StereoPair& a, const StereoPair& b);

// Single-scale SSIM on luminance: 11x11 Gaussian window (sigma 1.5),
// K1 = 0.01, K2 = 0.03, dynamic range 1, valid window positions only.
double ssim(const Image& a, const Image& b);

// Mean |d1 - d2| over pixels valid in both fields; empty intersection is
// an error (the metric is undefined there).
double disparity_mae(const DisparityField& d1, const DisparityField& d2);

class PerceptualBackend {
public:
    virtual ~PerceptualBackend() = default;
    virtual std::string id() const = 0;
    // Distance in [0, inf), 0 for identical images.
    virtual double distance(const Image& a, const Image& b) const = 0;
};

// Desk-scale proxy: P(a, b) = clamp(1 - SSIM(a, b), 0, 1). Not comparable
// to learned perceptual distances.
class SsimProxyBackend final : public PerceptualBackend {
public:
    std::string id() const override { return "ssim_proxy"; }
    double distance(const Image& a, const Image& b) const override;
};

// SCORE = 1 - 0.5 (P_L + P_R) - 0.1 MAE(D_sr, D_hr), with both disparity
// maps estimated from the respective image pairs.
double score_metric(const StereoPair& sr, const StereoPair& hr, const PerceptualBackend& p,
                    const DisparityEstimator& est, const DisparityConfig& cfg = {});

// Remove `border` pixels on every side (used before PSNR/SSIM at scale r).
Image crop_border(const Image& img, int border);

// Produces the SR pair for one LR input at a requested output size.
using SuperResolver = std::function<StereoPair(const StereoPair&, int, int)>;

SuperResolver bicubic_resolver();

// Per-scale evaluation: each HR pair is bicubic-degraded by `scale`,
// re-resolved, and scored with a 2r border crop before PSNR/SSIM.
// Returns the per-scale MetricsReport object for the report JSON.
nlohmann::json evaluate_dataset(const Dataset& data, double scale, const SuperResolver& resolve,
                                const PerceptualBackend& perceptual,
                                const DisparityConfig& disp_cfg = {});

// Report envelope shared by `eval` and `baseline`.
nlohmann::json make_report(const std::string& method, const std::string& dataset_dir,
                           const std::string& config_hash_hex,
                           const PerceptualBackend& perceptual,
                           std::vector<nlohmann::json> per_scale);

extern const char* kCodeVersion;

}  // namespace stereoinr
