#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stereoinr/image.hpp"
#include "stereoinr/rng.hpp"
#include "stereoinr/tensor.hpp"

namespace stereoinr {

struct StereoPair {
    Image left;
    Image right;

    void validate() const;
    int height() const { return left.shape[0]; }
    int width() const { return left.shape[1]; }
};

// Continuous query coordinates over the [-1, 1]^2 image domain. Dense
// grids are row-major over an h_out x w_out cell-center lattice.
struct QueryGrid {
    Tensor coords;             // [N, 2], (y, x) order, each in [-1, 1]
    double cell_y = 0;         // 2 / h_out
    double cell_x = 0;         // 2 / w_out
    double scale = 1;          // magnification r
    int out_h = 0, out_w = 0;  // 0 x 0 means a sparse (training) grid

    int count() const { return coords.shape.empty() ? 0 : coords.shape[0]; }
    bool dense() const { return out_h > 0 && out_w > 0; }
};

struct TrainingBatch {
    StereoPair lr_pair;   // 64 x 96
    QueryGrid queries;    // N sampled HR cell centers
    Tensor gt_left;       // [N, 3]
    Tensor gt_right;      // [N, 3]
    double scale = 1;     // r ~ U(1, 4)
    int hr_h = 0, hr_w = 0;
};

// Catmull-Rom bicubic (a = -0.5) with an antialias-stretched kernel when
// downscaling, normalized weights and edge-clamped borders. Output is
// clipped to [0, 1]; a same-size target returns the input bit-exactly.
Image bicubic_resample(const Image& image, int out_h, int out_w);

// Bilinear resampling on the same cell-center lattice convention.
Image bilinear_resample(const Image& image, int out_h, int out_w);

StereoPair load_stereo_pair(const std::string& path_left, const std::string& path_right);

// Cell-center lattice: coordinate of output cell (i, j) is
// (-1 + (2i+1)/h_out, -1 + (2j+1)/w_out), dense row-major.
QueryGrid make_query_grid(int h_out, int w_out, double r);

struct DatasetPair {
    std::string name;
    std::string left_path, right_path;
    std::optional<std::string> disp_left_path, disp_right_path;
    int height = 0, width = 0;
};

struct Dataset {
    std::string dir;
    std::vector<DatasetPair> pairs;

    bool empty() const { return pairs.empty(); }
    StereoPair load(std::size_t i) const;
    // Ground-truth layer disparity D >= 0 for the given view; see
    // synth_stereo_dataset for the sign convention.
    Tensor load_gt_disparity(std::size_t i, bool left_view) const;
};

Dataset open_dataset(const std::string& dir);

struct SamplerConfig {
    int lr_h = 64, lr_w = 96;
    int n_queries = 6144;
    double scale_min = 1.0, scale_max = 4.0;
    int max_resample_attempts = 100;
};

// Draws r ~ U(scale_min, scale_max), crops an aligned round(lr_h*r) x
// round(lr_w*r) HR patch from a random pair, bicubic-downsamples it to
// lr_h x lr_w and samples n_queries HR cell centers without replacement.
TrainingBatch sample_training_batch(const Dataset& dataset, Rng& rng,
                                    const SamplerConfig& cfg = {});

struct SynthConfig {
    int n_pairs = 8;
    int height = 128, width = 192;
    std::uint64_t seed = 0;
    double max_disparity = 8.0;
};

// Writes rectified synthetic stereo pairs plus exact per-view disparity
// maps (16-bit PNG, value = D * 256). Convention: a layer with disparity
// D satisfies left(x) = right(x + D): its pixels sit D columns further
// left in the left view than in the right view.
std::string synth_stereo_dataset(const SynthConfig& cfg, const std::string& out_dir);

}  // namespace stereoinr
