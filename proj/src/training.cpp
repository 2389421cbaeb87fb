#include "stereoinr/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "json.hpp"
#include "stereoinr/metrics.hpp"
#include "stereoinr/rng.hpp"

namespace stereoinr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr double kPi = 3.14159265358979323846;
// Keeps per-step sampler streams disjoint from other derived streams.
constexpr std::uint64_t kBatchStream = 0xB47C0000ULL;
}  // namespace

double cosine_lr(double lr0, std::int64_t step, std::int64_t total_steps) {
    if (step < 0 || step > total_steps)
        throw ArgumentError("cosine_lr: step outside [0, total_steps]");
    return 0.5 * lr0 * (1.0 + std::cos(kPi * static_cast<double>(step) / total_steps));
}

double l1_loss(const Tensor& pred_left, const Tensor& gt_left, const Tensor& pred_right,
               const Tensor& gt_right) {
    require_same_shape(pred_left, gt_left, "l1_loss");
    require_same_shape(pred_right, gt_right, "l1_loss");
    double sum = 0;
    for (std::size_t i = 0; i < pred_left.size(); ++i)
        sum += std::abs(pred_left.data[i] - gt_left.data[i]);
    for (std::size_t i = 0; i < pred_right.size(); ++i)
        sum += std::abs(pred_right.data[i] - gt_right.data[i]);
    return sum / (pred_left.size() + pred_right.size());
}

void adam_update(Tensor& p, Tensor& m, Tensor& v, const Tensor& g, double lr, double beta1,
                 double beta2, double eps, std::int64_t t) {
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < p.size(); ++i) {
        m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
        v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
        const double mhat = m.data[i] / bc1;
        const double vhat = v.data[i] / bc2;
        p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

StepStats train_step(ModelState& state, const TrainingBatch& batch, const TrainConfig& cfg) {
    cfg.validate();
    const ModelConfig& mc = state.config;

    // Disparity is recomputed from the LR pair every step; it enters the
    // graph as a fixed coefficient field.
    Tensor gl = luminance(batch.lr_pair.left), gr = luminance(batch.lr_pair.right);
    NccBlockMatcher matcher;
    DisparityField disp_l = matcher.estimate(gl, gr, mc.disparity);
    DisparityField disp_r = matcher.estimate(gr, gl, mc.disparity);

    ScaleConditioning s = ScaleConditioning::from_scale(batch.scale, batch.hr_h, batch.hr_w);

    Tape tape;
    ParamBinder bind(tape, state, true);
    FeatureGridPair codes = encode(tape, bind, mc, batch.lr_pair, s);
    ViewContext ctx_l =
        build_view_context(tape, bind, mc, codes.left, codes.right, disp_l, true);
    ViewContext ctx_r =
        build_view_context(tape, bind, mc, codes.right, codes.left, disp_r, false);
    Var pred_l =
        decode_queries(tape, bind, mc, ctx_l, batch.queries, batch.lr_pair.left, true);
    Var pred_r =
        decode_queries(tape, bind, mc, ctx_r, batch.queries, batch.lr_pair.right, false);

    Var loss = ad::scale(tape, ad::add(tape, ad::mean_abs_diff(tape, pred_l, batch.gt_left),
                                       ad::mean_abs_diff(tape, pred_r, batch.gt_right)),
                         0.5);
    const double loss_val = loss->value.data[0];
    if (!std::isfinite(loss_val))
        throw TrainingError("non-finite loss at step " + std::to_string(state.step) +
                            " (scale " + std::to_string(batch.scale) + ", seed " +
                            std::to_string(state.seed) + ")");

    tape.backward(loss);

    double sq = 0;
    for (const auto& [name, var] : bind.bound()) {
        if (!var->requires_grad) continue;
        for (double g : var->grad.data) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

    const double lr = cosine_lr(cfg.lr0, state.step, cfg.total_steps);
    const std::int64_t t = state.step + 1;
    for (const auto& [name, var] : bind.bound()) {
        if (!var->requires_grad) continue;
        Tensor g = var->grad;
        if (clip != 1.0)
            for (double& x : g.data) x *= clip;
        adam_update(state.params.at(name), state.adam_m.at(name), state.adam_v.at(name), g, lr,
                    cfg.beta1, cfg.beta2, cfg.eps, t);
    }
    state.step = t;
    return {loss_val, lr, norm};
}

double validation_psnr(ModelState& state, const Dataset& data, double r, int max_pairs) {
    const int n = std::min<int>(max_pairs, static_cast<int>(data.pairs.size()));
    if (n == 0) throw ArgumentError("validation_psnr: empty dataset");
    const int border = static_cast<int>(std::lround(2.0 * r));
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        StereoPair hr = data.load(i);
        const int h = hr.height(), w = hr.width();
        StereoPair lr;
        lr.left = bicubic_resample(hr.left, std::max(1, (int)std::lround(h / r)),
                                   std::max(1, (int)std::lround(w / r)));
        lr.right = bicubic_resample(hr.right, lr.left.shape[0], lr.left.shape[1]);
        StereoPair sr = super_resolve(state, lr, h, w);
        sum += 0.5 * (psnr(crop_border(sr.left, border), crop_border(hr.left, border)) +
                      psnr(crop_border(sr.right, border), crop_border(hr.right, border)));
    }
    return sum / n;
}

FitResult fit(ModelState& state, const Dataset& train_data, const Dataset* holdout,
              const TrainConfig& cfg, const std::string& out_dir, std::ostream* log,
              const std::atomic<bool>* stop) {
    cfg.validate();
    if (train_data.empty()) throw ArgumentError("fit: empty training dataset");
    fs::create_directories(out_dir);
    const Dataset& val = holdout && !holdout->empty() ? *holdout : train_data;

    FitResult res;
    res.best_checkpoint = (fs::path(out_dir) / "best.ckpt").string();
    res.last_checkpoint = (fs::path(out_dir) / "last.ckpt").string();

    while (state.step < cfg.total_steps) {
        if (stop && stop->load()) {
            save_checkpoint(state, res.last_checkpoint);
            res.interrupted = true;
            return res;
        }
        Rng rng(Rng::derive(state.seed, kBatchStream + static_cast<std::uint64_t>(state.step)));
        TrainingBatch batch = sample_training_batch(train_data, rng, cfg.sampler);
        StepStats st = train_step(state, batch, cfg);
        ++res.steps_run;

        json rec{{"step", state.step}, {"loss", st.loss}, {"lr", st.lr}};
        const bool do_eval =
            cfg.eval_every > 0 &&
            (state.step % cfg.eval_every == 0 || state.step == cfg.total_steps);
        if (do_eval) {
            const double p2 = validation_psnr(state, val, 2.0, cfg.val_pairs);
            const double p4 = validation_psnr(state, val, 4.0, cfg.val_pairs);
            rec["psnr_x2"] = p2;
            rec["psnr_x4"] = p4;
            if (p2 > res.best_psnr_x2) {
                res.best_psnr_x2 = p2;
                save_checkpoint(state, res.best_checkpoint);
            }
        }
        if (log) *log << rec.dump() << "\n";
        if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0)
            save_checkpoint(state, res.last_checkpoint);
    }

    save_checkpoint(state, res.last_checkpoint);
    if (res.best_psnr_x2 < 0) {
        // Never validated: the last state doubles as best.
        save_checkpoint(state, res.best_checkpoint);
    }
    if (log) log->flush();
    return res;
}

}  // namespace stereoinr
