#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stereoinr/config_json.hpp"
#include "stereoinr/dgasu.hpp"
#include "stereoinr/imaging_io.hpp"
#include "stereoinr/metrics.hpp"
#include "stereoinr/model.hpp"
#include "stereoinr/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stereoinr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitTraining = 3;
constexpr int kExitArtifact = 4;

std::atomic<bool> g_stop{false};

void on_sigint(int) { g_stop.store(true); }

// STEREOINR_THREADS caps worker parallelism; all pipelines here are
// single-threaded, so the cap is parsed, validated and recorded only.
int thread_cap() {
    const char* env = std::getenv("STEREOINR_THREADS");
    if (!env || !*env) return 0;
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 0) throw ArgumentError("STEREOINR_THREADS must be a non-negative integer");
    return static_cast<int>(v);
}

void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                         const std::string& where) {
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ArgumentError("config: unknown key \"" + key + "\" in " + where);
    }
}

struct RunConfig {
    std::string dataset;
    std::string holdout;  // optional
    std::string out_dir;
    std::uint64_t seed = 0;
    ModelConfig model;
    TrainConfig train;
};

void parse_sampler(const json& j, SamplerConfig& s) {
    reject_unknown_keys(j, {"lr_h", "lr_w", "n_queries", "scale_min", "scale_max",
                            "max_resample_attempts"},
                        "train.sampler");
    if (j.contains("lr_h")) s.lr_h = j.at("lr_h").get<int>();
    if (j.contains("lr_w")) s.lr_w = j.at("lr_w").get<int>();
    if (j.contains("n_queries")) s.n_queries = j.at("n_queries").get<int>();
    if (j.contains("scale_min")) s.scale_min = j.at("scale_min").get<double>();
    if (j.contains("scale_max")) s.scale_max = j.at("scale_max").get<double>();
    if (j.contains("max_resample_attempts"))
        s.max_resample_attempts = j.at("max_resample_attempts").get<int>();
}

void parse_train(const json& j, TrainConfig& t) {
    reject_unknown_keys(j, {"total_steps", "lr0", "batch_size", "beta1", "beta2", "eps",
                            "clip_norm", "eval_every", "checkpoint_every", "val_pairs",
                            "sampler"},
                        "train");
    if (j.contains("total_steps")) t.total_steps = j.at("total_steps").get<std::int64_t>();
    if (j.contains("lr0")) t.lr0 = j.at("lr0").get<double>();
    if (j.contains("batch_size")) t.batch_size = j.at("batch_size").get<int>();
    if (j.contains("beta1")) t.beta1 = j.at("beta1").get<double>();
    if (j.contains("beta2")) t.beta2 = j.at("beta2").get<double>();
    if (j.contains("eps")) t.eps = j.at("eps").get<double>();
    if (j.contains("clip_norm")) t.clip_norm = j.at("clip_norm").get<double>();
    if (j.contains("eval_every")) t.eval_every = j.at("eval_every").get<std::int64_t>();
    if (j.contains("checkpoint_every"))
        t.checkpoint_every = j.at("checkpoint_every").get<std::int64_t>();
    if (j.contains("val_pairs")) t.val_pairs = j.at("val_pairs").get<int>();
    if (j.contains("sampler")) parse_sampler(j.at("sampler"), t.sampler);
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ArgumentError("config parse error in " + path + ": " + e.what());
    }
    reject_unknown_keys(j, {"dataset", "holdout", "out_dir", "seed", "model", "train"}, path);

    RunConfig c;
    c.dataset = j.at("dataset").get<std::string>();
    c.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("holdout")) c.holdout = j.at("holdout").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown_keys(m, {"encoder", "posenc", "upsampler", "disparity"}, "model");
        json full = config_to_json(ModelConfig{});
        for (const auto& [sec, defaults] : full.items()) {
            if (!m.contains(sec)) continue;
            std::vector<std::string> allowed;
            for (const auto& [k, _] : defaults.items()) allowed.push_back(k);
            reject_unknown_keys(m.at(sec), allowed, "model." + sec);
            full[sec].update(m.at(sec));
        }
        c.model = config_from_json(full);
    }
    if (j.contains("train")) parse_train(j.at("train"), c.train);
    if (!fs::exists(c.dataset)) throw ArgumentError("config: dataset path does not exist: " + c.dataset);
    if (!c.holdout.empty() && !fs::exists(c.holdout))
        throw ArgumentError("config: holdout path does not exist: " + c.holdout);
    return c;
}

std::vector<double> parse_scales(const std::string& spec) {
    std::vector<double> out;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        std::size_t pos = 0;
        double v = std::stod(tok, &pos);
        if (pos != tok.size() || !(v > 0))
            throw ArgumentError("invalid scale value: " + tok);
        out.push_back(v);
    }
    if (out.empty()) throw ArgumentError("no scales given");
    return out;
}

// A bad dataset path is a configuration mistake (exit 2), not a broken
// artifact, so translate the I/O failure.
Dataset open_dataset_or_usage_error(const std::string& dir) {
    try {
        return open_dataset(dir);
    } catch (const IoError& e) {
        throw ArgumentError(e.what());
    }
}

std::string format_scale(double r) {
    std::ostringstream os;
    os << r;
    return os.str();
}

int cmd_synth(const std::string& out_dir, int pairs, int height, int width,
              std::uint64_t seed, double max_disp) {
    SynthConfig cfg;
    cfg.n_pairs = pairs;
    cfg.height = height;
    cfg.width = width;
    cfg.seed = seed;
    cfg.max_disparity = max_disp;
    std::string manifest = synth_stereo_dataset(cfg, out_dir);
    std::cout << "wrote " << pairs << " pairs, manifest " << manifest << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, std::int64_t seed_override,
              const std::string& resume) {
    RunConfig rc = parse_run_config(config_path);
    if (seed_override >= 0) rc.seed = static_cast<std::uint64_t>(seed_override);

    ModelState state;
    if (!resume.empty()) {
        state = load_checkpoint(resume);
        if (config_hash(state.config) != config_hash(rc.model))
            std::cerr << "note: resuming with the checkpoint's model config\n";
    } else {
        state = init_model(rc.model, rc.seed);
    }

    Dataset train_set = open_dataset_or_usage_error(rc.dataset);
    Dataset holdout_set;
    if (!rc.holdout.empty()) holdout_set = open_dataset_or_usage_error(rc.holdout);

    fs::create_directories(rc.out_dir);
    std::ofstream log(fs::path(rc.out_dir) / "train_log.ndjson",
                      resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open training log in " + rc.out_dir);

    std::signal(SIGINT, on_sigint);
    FitResult fr = fit(state, train_set, rc.holdout.empty() ? nullptr : &holdout_set, rc.train,
                       rc.out_dir, &log, &g_stop);
    std::signal(SIGINT, SIG_DFL);
    if (fr.interrupted) {
        std::cerr << "interrupted: last checkpoint flushed to " << fr.last_checkpoint << "\n";
        return 130;
    }

    // Final eval report on the held-out split (training set when absent).
    const Dataset& eval_set = rc.holdout.empty() ? train_set : holdout_set;
    const std::string& eval_dir = rc.holdout.empty() ? rc.dataset : rc.holdout;
    SsimProxyBackend proxy;
    SuperResolver resolver = [&state](const StereoPair& lr, int oh, int ow) {
        return super_resolve(state, lr, oh, ow);
    };
    std::vector<json> per_scale;
    for (double r : {2.0, 4.0})
        per_scale.push_back(evaluate_dataset(eval_set, r, resolver, proxy,
                                             state.config.disparity));
    json report = make_report("stereoinr", eval_dir, config_hash(state.config), proxy,
                              std::move(per_scale));
    std::ofstream rep(fs::path(rc.out_dir) / "eval_report.json");
    rep << report.dump(2) << "\n";

    std::cout << "trained " << fr.steps_run << " steps; best x2 PSNR " << fr.best_psnr_x2
              << " dB\nbest: " << fr.best_checkpoint << "\nlast: " << fr.last_checkpoint
              << "\n";
    return kExitOk;
}

int cmd_sr(const std::string& ckpt, const std::string& left, const std::string& right,
           double scale, const std::string& out_dir) {
    if (!(scale > 0)) throw ArgumentError("--scale must be > 0");
    if (scale < 1.0 || scale > 4.0)
        std::cerr << "warning: scale " << scale
                  << " is outside the training distribution [1, 4]\n";
    ModelState state = load_checkpoint(ckpt);
    StereoPair lr = load_stereo_pair(left, right);
    StereoPair sr = super_resolve(state, lr, scale);

    std::string name = fs::path(left).stem().string();
    if (name.size() > 2 && name.compare(name.size() - 2, 2, "_L") == 0)
        name.resize(name.size() - 2);
    fs::create_directories(out_dir);
    const std::string tag = "_x" + format_scale(scale) + ".png";
    const std::string path_l = (fs::path(out_dir) / (name + "_L" + tag)).string();
    const std::string path_r = (fs::path(out_dir) / (name + "_R" + tag)).string();
    save_png_rgb(sr.left, path_l);
    save_png_rgb(sr.right, path_r);
    std::cout << path_l << "\n" << path_r << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& dataset_dir,
             const std::string& scales_spec, const std::string& report_path) {
    std::vector<double> scales = parse_scales(scales_spec);
    Dataset data = open_dataset_or_usage_error(dataset_dir);
    if (data.empty()) throw ArgumentError("dataset is empty: " + dataset_dir);

    SsimProxyBackend proxy;
    std::vector<json> per_scale;
    std::string method, hash;
    if (ckpt.empty()) {
        method = "bicubic";
        hash = "none";
        for (double r : scales)
            per_scale.push_back(evaluate_dataset(data, r, bicubic_resolver(), proxy));
    } else {
        ModelState state = load_checkpoint(ckpt);
        method = "stereoinr";
        hash = config_hash(state.config);
        SuperResolver resolver = [&state](const StereoPair& lr, int oh, int ow) {
            return super_resolve(state, lr, oh, ow);
        };
        for (double r : scales)
            per_scale.push_back(
                evaluate_dataset(data, r, resolver, proxy, state.config.disparity));
    }
    json report = make_report(method, dataset_dir, hash, proxy, std::move(per_scale));
    std::ofstream out(report_path);
    if (!out) throw IoError("cannot write report: " + report_path);
    out << report.dump(2) << "\n";
    std::cout << "report written to " << report_path << "\n";
    return kExitOk;
}

int run(int argc, char** argv) {
    CLI::App app{"Arbitrary-scale stereo image super-resolution"};
    app.require_subcommand(1);
    (void)thread_cap();

    auto* synth = app.add_subcommand("synth", "Generate a synthetic rectified stereo dataset");
    std::string synth_out;
    int synth_pairs = 8, synth_h = 128, synth_w = 192;
    std::uint64_t synth_seed = 0;
    double synth_disp = 8.0;
    synth->add_option("--out-dir", synth_out, "Output dataset directory")->required();
    synth->add_option("--pairs", synth_pairs, "Number of stereo pairs");
    synth->add_option("--height", synth_h, "Image height");
    synth->add_option("--width", synth_w, "Image width");
    synth->add_option("--seed", synth_seed, "RNG seed");
    synth->add_option("--max-disparity", synth_disp, "Maximum layer disparity in pixels");

    auto* train = app.add_subcommand("train", "Fine-tune adapters and the upsampler");
    std::string train_config, train_resume;
    std::int64_t train_seed = -1;
    train->add_option("--config", train_config, "Run config JSON")->required();
    train->add_option("--seed", train_seed, "Seed override (>= 0)");
    train->add_option("--resume", train_resume, "Checkpoint to resume from");

    auto* sr = app.add_subcommand("sr", "Super-resolve one stereo pair at any scale");
    std::string sr_ckpt, sr_left, sr_right, sr_out;
    double sr_scale = 0;
    sr->add_option("--checkpoint", sr_ckpt, "Model checkpoint")->required();
    sr->add_option("--left", sr_left, "Left view PNG")->required();
    sr->add_option("--right", sr_right, "Right view PNG")->required();
    sr->add_option("--scale", sr_scale, "Magnification r > 0 (any real)")->required();
    sr->add_option("--out-dir", sr_out, "Output directory")->required();

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string ev_ckpt, ev_data, ev_scales = "2,3,4", ev_report;
    ev->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required();
    ev->add_option("--dataset", ev_data, "Dataset directory")->required();
    ev->add_option("--scales", ev_scales, "Comma-separated magnifications");
    ev->add_option("--report", ev_report, "Report JSON output path")->required();

    auto* base = app.add_subcommand("baseline", "Evaluate the bicubic baseline on a dataset");
    std::string base_data, base_scales = "2,3,4", base_report;
    base->add_option("--dataset", base_data, "Dataset directory")->required();
    base->add_option("--scales", base_scales, "Comma-separated magnifications");
    base->add_option("--report", base_report, "Report JSON output path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    if (synth->parsed())
        return cmd_synth(synth_out, synth_pairs, synth_h, synth_w, synth_seed, synth_disp);
    if (train->parsed()) return cmd_train(train_config, train_seed, train_resume);
    if (sr->parsed()) return cmd_sr(sr_ckpt, sr_left, sr_right, sr_scale, sr_out);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_scales, ev_report);
    if (base->parsed()) return cmd_eval("", base_data, base_scales, base_report);
    return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitArtifact;
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitTraining;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitArtifact;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}
