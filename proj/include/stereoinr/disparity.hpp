#pragma once

#include <memory>
#include <string>
#include <vector>

#include "stereoinr/autodiff.hpp"
#include "stereoinr/image.hpp"
#include "stereoinr/tensor.hpp"

namespace stereoinr {

// Horizontal disparity in pixels under the convention
//   reference(x, y) ~ target(x - d(y, x), y).
struct DisparityField {
    Tensor d;                        // [h, w]
    std::vector<std::uint8_t> valid; // h*w, row-major

    int height() const { return d.shape[0]; }
    int width() const { return d.shape[1]; }
    bool is_valid(int y, int x) const { return valid[static_cast<std::size_t>(y) * width() + x]; }
};

struct DisparityConfig {
    int d_max = 24;
    int window = 7;  // odd
};

class DisparityEstimator {
public:
    virtual ~DisparityEstimator() = default;
    virtual std::string id() const = 0;
    virtual DisparityField estimate(const Tensor& reference_gray, const Tensor& target_gray,
                                    const DisparityConfig& cfg) const = 0;
};

// Zero-mean NCC block matching over integer shifts with 3-point parabolic
// sub-pixel refinement. Ties break toward the smaller |shift|.
class NccBlockMatcher final : public DisparityEstimator {
public:
    std::string id() const override { return "ncc_block_matching"; }
    DisparityField estimate(const Tensor& reference_gray, const Tensor& target_gray,
                            const DisparityConfig& cfg) const override;
};

// Convenience front door on RGB images (matched on luminance).
DisparityField estimate_disparity(const Image& reference, const Image& target,
                                  const DisparityConfig& cfg = {},
                                  const DisparityEstimator& est = NccBlockMatcher{});

struct WarpResult {
    Var grid;                         // [h, w, C]
    std::vector<std::uint8_t> valid;  // false where clamped or disp invalid
};

// Bilinear horizontal warp of a feature grid along a disparity field:
// out(y, x) = grid(y, x - d(y, x)), clamped at the image border.
WarpResult warp(Tape& tape, const Var& grid, const DisparityField& disp);

// Non-autodiff variant for plain tensors (images, oracles).
Tensor warp_tensor(const Tensor& grid, const DisparityField& disp,
                   std::vector<std::uint8_t>* valid_out = nullptr);

// Disparity map export: 16-bit PNG with value = (d + 32) * 256 clamped,
// plus an 8-bit validity mask.
void save_disparity(const DisparityField& f, const std::string& path_d,
                    const std::string& path_valid);

}  // namespace stereoinr
