#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "stereoinr/autodiff.hpp"
#include "stereoinr/disparity.hpp"
#include "stereoinr/tensor.hpp"

namespace stereoinr {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EncoderConfig {
    int channels = 64;
    int n_blocks = 4;
    int adapter_bottleneck = 16;
    bool share_view_weights = true;
    int scale_embed_dim = 32;
    int min_input_size = 8;

    void validate() const {
        if (n_blocks < 1) throw ArgumentError("EncoderConfig: n_blocks must be >= 1");
        if (adapter_bottleneck >= channels)
            throw ArgumentError("EncoderConfig: adapter bottleneck must be < channels");
    }
};

struct PosEncConfig {
    int n_freqs = 10;  // encoded dimension per scalar = 1 + 2n
};

struct UpsamplerConfig {
    int window_radius = 1;  // (2k+1)^2 attention windows
    int n_rounds = 2;       // self+cross alternations
    int mlp_hidden = 256;
    int mlp_layers = 4;
    int decode_chunk = 4096;
};

struct ModelConfig {
    EncoderConfig encoder;
    PosEncConfig posenc;
    UpsamplerConfig upsampler;
    DisparityConfig disparity;
};

// Scale conditioning passed to the encoder: magnification plus the output
// cell extents, the minimal information distinguishing anisotropic targets.
struct ScaleConditioning {
    double r = 1;
    double cell_y = 0;  // 2 / H_out
    double cell_x = 0;  // 2 / W_out

    static ScaleConditioning from_scale(double r, int out_h, int out_w) {
        return {r, 2.0 / out_h, 2.0 / out_w};
    }
};

// All learnable state. Parameters are partitioned into the frozen backbone
// (randomly initialized once, checkpointed, never updated) and the tunable
// adapter/upsampler groups.
struct ModelState {
    ModelConfig config;
    std::map<std::string, Tensor> params;  // ordered: deterministic iteration
    std::set<std::string> frozen;
    std::map<std::string, Tensor> adam_m, adam_v;
    std::int64_t step = 0;
    std::uint64_t seed = 0;

    bool is_frozen(const std::string& name) const { return frozen.count(name) > 0; }
    const Tensor& param(const std::string& name) const;
};

ModelState init_model(const ModelConfig& cfg, std::uint64_t seed);

// Single-archive checkpoint: JSON manifest (names, shapes, little-endian
// float64 payload layout, format version) followed by raw array bytes.
// Writes are atomic (temp file + rename).
void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

// FNV-1a over the serialized config, for report provenance.
std::string config_hash(const ModelConfig& cfg);

// Builds tape leaves for parameters on demand. With `training`, tunable
// parameters require grad; frozen ones never do.
class ParamBinder {
public:
    ParamBinder(Tape& tape, ModelState& state, bool training)
        : tape_(tape), state_(state), training_(training) {}

    Var operator()(const std::string& name);

    const std::map<std::string, Var>& bound() const { return bound_; }

private:
    Tape& tape_;
    ModelState& state_;
    bool training_;
    std::map<std::string, Var> bound_;
};

}  // namespace stereoinr
