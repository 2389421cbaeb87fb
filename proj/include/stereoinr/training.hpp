#pragma once

#include <atomic>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>

#include "stereoinr/dgasu.hpp"
#include "stereoinr/imaging_io.hpp"
#include "stereoinr/model.hpp"

namespace stereoinr {

// Unrecoverable optimization failure (non-finite loss).
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    std::int64_t total_steps = 2000;
    double lr0 = 5e-4;
    int batch_size = 1;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double clip_norm = 1.0;
    std::int64_t eval_every = 500;
    std::int64_t checkpoint_every = 500;
    int val_pairs = 4;  // held-out pairs used per validation round
    SamplerConfig sampler;

    void validate() const {
        if (!(lr0 > 0)) throw ArgumentError("TrainConfig: lr0 must be > 0");
        if (total_steps < 1) throw ArgumentError("TrainConfig: total_steps must be >= 1");
        if (batch_size != 1) throw ArgumentError("TrainConfig: only batch_size 1 is supported");
    }
};

// 0.5 * lr0 * (1 + cos(pi * step / total_steps)); no warmup, floor 0.
double cosine_lr(double lr0, std::int64_t step, std::int64_t total_steps);

// Mean absolute error over all elements of both views jointly.
double l1_loss(const Tensor& pred_left, const Tensor& gt_left, const Tensor& pred_right,
               const Tensor& gt_right);

// One Adam step with bias correction; t is the 1-based step count.
void adam_update(Tensor& p, Tensor& m, Tensor& v, const Tensor& g, double lr, double beta1,
                 double beta2, double eps, std::int64_t t);

struct StepStats {
    double loss = 0;
    double lr = 0;
    double grad_norm = 0;  // pre-clip global norm
};

// Forward on the batch's sampled queries, L1 loss, backprop, global-norm
// clip, Adam on the tunable parameters; increments state.step.
StepStats train_step(ModelState& state, const TrainingBatch& batch, const TrainConfig& cfg);

struct FitResult {
    std::string best_checkpoint, last_checkpoint;
    double best_psnr_x2 = -1;
    std::int64_t steps_run = 0;
    bool interrupted = false;
};

// Validation PSNR at magnification r on up to max_pairs pairs (bicubic
// degradation, 2r border crop) — the training-time metric.
double validation_psnr(ModelState& state, const Dataset& data, double r, int max_pairs);

// Runs state.step -> cfg.total_steps, one NDJSON record per step on `log`.
// Checkpoints best (by x2 validation PSNR) and last states under out_dir.
// A set `stop` flag flushes the last checkpoint and returns early.
FitResult fit(ModelState& state, const Dataset& train_data, const Dataset* holdout,
              const TrainConfig& cfg, const std::string& out_dir, std::ostream* log = nullptr,
              const std::atomic<bool>* stop = nullptr);

}  // namespace stereoinr
