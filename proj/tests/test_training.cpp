#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "stereoinr/training.hpp"

using namespace stereoinr;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.encoder.channels = 8;
    c.encoder.n_blocks = 1;
    c.encoder.adapter_bottleneck = 4;
    c.encoder.scale_embed_dim = 8;
    c.upsampler.mlp_hidden = 16;
    c.upsampler.mlp_layers = 2;
    c.upsampler.n_rounds = 1;
    c.disparity.d_max = 8;
    return c;
}

TrainConfig tiny_train(std::int64_t steps) {
    TrainConfig t;
    t.total_steps = steps;
    t.eval_every = steps;
    t.checkpoint_every = steps;
    t.val_pairs = 2;
    t.sampler.lr_h = 16;
    t.sampler.lr_w = 24;
    t.sampler.n_queries = 128;
    t.sampler.scale_max = 2.0;
    return t;
}

// Small on-disk dataset shared by the suite; built once.
const std::string& dataset_dir() {
    static std::string dir = [] {
        fs::path d = fs::temp_directory_path() / "stereoinr_test_train_ds";
        SynthConfig cfg;
        cfg.n_pairs = 4;
        cfg.height = 64;
        cfg.width = 64;
        cfg.seed = 21;
        synth_stereo_dataset(cfg, d.string());
        return d.string();
    }();
    return dir;
}

bool same_params(const ModelState& a, const ModelState& b) {
    if (a.params.size() != b.params.size()) return false;
    for (const auto& [name, t] : a.params) {
        auto it = b.params.find(name);
        if (it == b.params.end() || it->second.data != t.data) return false;
    }
    return true;
}

std::uint64_t hash_params(const ModelState& st, bool frozen_only) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, t] : st.params) {
        if (frozen_only && !st.is_frozen(name)) continue;
        for (double v : t.data) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            h = (h ^ bits) * 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(cosine_lr(5e-4, 0, 2000) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(cosine_lr(5e-4, 2000, 2000) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(cosine_lr(5e-4, 1000, 2000) == doctest::Approx(2.5e-4).epsilon(1e-12));
    CHECK(cosine_lr(1.0, 500, 2000) ==
          doctest::Approx(0.5 * (1 + std::cos(3.14159265358979323846 / 4))).epsilon(1e-12));
    CHECK_THROWS_AS(cosine_lr(5e-4, -1, 2000), ArgumentError);
    CHECK_THROWS_AS(cosine_lr(5e-4, 2001, 2000), ArgumentError);
}

TEST_CASE("L1 loss identities and scalar-loop oracle") {
    Tensor a({4, 3}), b({4, 3});
    Rng rng(71);
    for (auto& v : a.data) v = rng.uniform();
    b = a;
    CHECK(l1_loss(a, b, a, b) == 0.0);

    Tensor c = a;
    for (auto& v : c.data) v += 0.1;
    CHECK(l1_loss(c, a, c, a) == doctest::Approx(0.1).epsilon(1e-12));

    Tensor d({4, 3}), e({4, 3});
    for (auto& v : d.data) v = rng.uniform();
    for (auto& v : e.data) v = rng.uniform();
    double sl = 0, sr = 0;
    for (int i = 0; i < 12; ++i) sl += std::abs(a.data[i] - d.data[i]);
    for (int i = 0; i < 12; ++i) sr += std::abs(c.data[i] - e.data[i]);
    CHECK(l1_loss(a, d, c, e) == doctest::Approx(0.5 * (sl / 12 + sr / 12)).epsilon(1e-12));
}

TEST_CASE("Adam matches a scalar reference over 50 steps") {
    // Reference: textbook Adam with bias correction, scalar per parameter.
    const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<double> p = {0.5, -1.2, 3.0}, m(3, 0.0), v(3, 0.0);
    Tensor tp({3}), tm({3}), tv({3});
    tp.data = p;

    Rng rng(72);
    for (std::int64_t t = 1; t <= 50; ++t) {
        Tensor g({3});
        for (auto& x : g.data) x = rng.normal();
        adam_update(tp, tm, tv, g, lr, b1, b2, eps, t);
        for (int i = 0; i < 3; ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g.data[i];
            v[i] = b2 * v[i] + (1 - b2) * g.data[i] * g.data[i];
            double mh = m[i] / (1 - std::pow(b1, t));
            double vh = v[i] / (1 - std::pow(b2, t));
            p[i] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
    for (int i = 0; i < 3; ++i) CHECK(std::abs(tp.data[i] - p[i]) <= 1e-10);
}

TEST_CASE("a train step leaves frozen parameters bit-identical") {
    ModelConfig cfg = tiny_cfg();
    ModelState st = init_model(cfg, 5);
    Dataset ds = open_dataset(dataset_dir());
    TrainConfig tc = tiny_train(10);
    std::uint64_t before = hash_params(st, true);

    Rng rng(Rng::derive(st.seed, 0xB47C0000ULL));
    TrainingBatch b = sample_training_batch(ds, rng, tc.sampler);
    StepStats s = train_step(st, b, tc);
    CHECK(std::isfinite(s.loss));
    CHECK(s.lr == doctest::Approx(tc.lr0).epsilon(1e-12));
    CHECK(hash_params(st, true) == before);
    CHECK(st.step == 1);
}

TEST_CASE("training is deterministic for a fixed seed") {
    ModelConfig cfg = tiny_cfg();
    Dataset ds = open_dataset(dataset_dir());
    TrainConfig tc = tiny_train(5);

    auto run = [&] {
        ModelState st = init_model(cfg, 42);
        std::vector<double> losses;
        for (int s = 0; s < 5; ++s) {
            Rng rng(Rng::derive(st.seed, 0xB47C0000ULL + s));
            TrainingBatch b = sample_training_batch(ds, rng, tc.sampler);
            losses.push_back(train_step(st, b, tc).loss);
        }
        return std::pair(losses, st);
    };
    auto [l1v, s1] = run();
    auto [l2v, s2] = run();
    CHECK(l1v == l2v);
    CHECK(same_params(s1, s2));
}

TEST_CASE("running loss decreases over a 200-step optimization run") {
    ModelConfig cfg = tiny_cfg();
    ModelState st = init_model(cfg, 6);
    Dataset ds = open_dataset(dataset_dir());
    TrainConfig tc = tiny_train(200);

    // Per-batch losses vary a lot with the sampled scale, so measure the
    // loss on a fixed probe set before and after training. train_step
    // reports the pre-update loss, so a throwaway copy of the state gives
    // a pure evaluation.
    std::vector<TrainingBatch> probes;
    for (int i = 0; i < 8; ++i) {
        Rng rng(Rng::derive(999, static_cast<std::uint64_t>(i)));
        probes.push_back(sample_training_batch(ds, rng, tc.sampler));
    }
    auto probe_loss = [&](const ModelState& s) {
        double sum = 0;
        for (const auto& b : probes) {
            ModelState tmp = s;
            sum += train_step(tmp, b, tc).loss;
        }
        return sum / probes.size();
    };

    double before = probe_loss(st);
    for (int s = 0; s < 200; ++s) {
        Rng rng(Rng::derive(st.seed, 0xB47C0000ULL + s));
        TrainingBatch b = sample_training_batch(ds, rng, tc.sampler);
        train_step(st, b, tc);
    }
    CHECK(probe_loss(st) < before);
}

TEST_CASE("checkpoint round trip preserves every field") {
    ModelConfig cfg = tiny_cfg();
    ModelState st = init_model(cfg, 77);
    st.step = 123;
    Rng rng(73);
    for (auto& [name, t] : st.adam_m)
        for (auto& v : t.data) v = rng.normal();

    fs::path p = fs::temp_directory_path() / "stereoinr_test_ckpt.bin";
    save_checkpoint(st, p.string());
    ModelState back = load_checkpoint(p.string());
    CHECK(same_params(st, back));
    CHECK(back.step == 123);
    CHECK(back.seed == 77);
    CHECK(back.frozen == st.frozen);
    for (const auto& [name, t] : st.adam_m) CHECK(back.adam_m.at(name).data == t.data);
    for (const auto& [name, t] : st.adam_v) CHECK(back.adam_v.at(name).data == t.data);
    CHECK(config_hash(back.config) == config_hash(st.config));
}

TEST_CASE("corrupted and mismatched checkpoints are rejected") {
    fs::path p = fs::temp_directory_path() / "stereoinr_test_ckpt_bad.bin";
    {
        std::ofstream f(p, std::ios::binary);
        f << "SINRCKPTgarbage that is not a manifest";
    }
    CHECK_THROWS_AS(load_checkpoint(p.string()), CheckpointError);

    ModelState st = init_model(tiny_cfg(), 1);
    fs::path q = fs::temp_directory_path() / "stereoinr_test_ckpt_v.bin";
    save_checkpoint(st, q.string());
    // Flip the version field (bytes 8..11) and expect a version error.
    std::fstream f(q, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    std::uint32_t v = 999;
    f.write(reinterpret_cast<const char*>(&v), 4);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(q.string()), CheckpointError);

    CHECK_THROWS_AS(load_checkpoint("/nonexistent/no.ckpt"), CheckpointError);
}

TEST_CASE("resuming at step k reproduces the uninterrupted run bitwise") {
    ModelConfig cfg = tiny_cfg();
    Dataset ds = open_dataset(dataset_dir());
    TrainConfig tc = tiny_train(8);
    fs::path dir = fs::temp_directory_path() / "stereoinr_test_resume";
    fs::create_directories(dir);

    ModelState full = init_model(cfg, 9);
    fit(full, ds, nullptr, tc, (dir / "full").string());

    ModelState half = init_model(cfg, 9);
    TrainConfig tc4 = tc;
    tc4.total_steps = 4;  // run 4 of 8 steps, checkpoint, then continue
    for (int s = 0; s < 4; ++s) {
        Rng rng(Rng::derive(half.seed, 0xB47C0000ULL + s));
        train_step(half, sample_training_batch(ds, rng, tc.sampler), tc);
    }
    fs::path mid = dir / "mid.ckpt";
    save_checkpoint(half, mid.string());
    ModelState resumed = load_checkpoint(mid.string());
    fit(resumed, ds, nullptr, tc, (dir / "resumed").string());

    CHECK(same_params(full, resumed));
    CHECK(full.step == resumed.step);
    for (const auto& [name, t] : full.adam_m) CHECK(resumed.adam_m.at(name).data == t.data);
}

TEST_CASE("fit writes one NDJSON record per step and checkpoints") {
    ModelConfig cfg = tiny_cfg();
    ModelState st = init_model(cfg, 10);
    Dataset ds = open_dataset(dataset_dir());
    TrainConfig tc = tiny_train(6);
    fs::path dir = fs::temp_directory_path() / "stereoinr_test_fit";
    fs::create_directories(dir);

    std::ostringstream log;
    FitResult res = fit(st, ds, &ds, tc, dir.string(), &log);
    CHECK(res.steps_run == 6);
    CHECK_FALSE(res.interrupted);
    CHECK(fs::exists(res.last_checkpoint));
    CHECK(fs::exists(res.best_checkpoint));

    int lines = 0;
    std::istringstream in(log.str());
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) ++lines;
    CHECK(lines == 6);
}

TEST_CASE("initial loss equals the bilinear-skip L1 of the batch") {
    // With the zero-initialized decoder the prediction is the bilinear skip,
    // so the first loss must equal that closed-form value.
    ModelConfig cfg = tiny_cfg();
    ModelState st = init_model(cfg, 11);
    Dataset ds = open_dataset(dataset_dir());
    TrainConfig tc = tiny_train(1);

    Rng rng(Rng::derive(st.seed, 0xB47C0000ULL));
    TrainingBatch b = sample_training_batch(ds, rng, tc.sampler);
    Tensor skip_l = lr_skip(b.lr_pair.left, b.queries);
    Tensor skip_r = lr_skip(b.lr_pair.right, b.queries);
    double expect = l1_loss(skip_l, b.gt_left, skip_r, b.gt_right);
    StepStats s = train_step(st, b, tc);
    CHECK(s.loss == doctest::Approx(expect).epsilon(1e-9));
}
