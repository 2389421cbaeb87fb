#include "stereoinr/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "stereoinr/rng.hpp"

namespace stereoinr {

namespace fs = std::filesystem;
using nlohmann::json;

const Tensor& ModelState::param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ArgumentError("unknown parameter: " + name);
    return it->second;
}

Var ParamBinder::operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto pit = state_.params.find(name);
    if (pit == state_.params.end()) throw ArgumentError("unknown parameter: " + name);
    bool rg = training_ && !state_.is_frozen(name);
    Var v = tape_.leaf(pit->second, rg);
    bound_.emplace(name, v);
    return v;
}

namespace {

int posenc_dim(const PosEncConfig& p) { return 2 * (1 + 2 * p.n_freqs); }

struct Builder {
    ModelState& st;
    Rng rng;

    void add(const std::string& name, std::vector<int> shape, double std_dev, bool frozen) {
        Tensor t(std::move(shape));
        if (std_dev > 0)
            for (auto& v : t.data) v = rng.normal() * std_dev;
        st.params.emplace(name, std::move(t));
        if (frozen) st.frozen.insert(name);
    }
    void add_const(const std::string& name, std::vector<int> shape, double value, bool frozen) {
        st.params.emplace(name, Tensor::full(std::move(shape), value));
        if (frozen) st.frozen.insert(name);
    }
};

void add_view_params(Builder& b, const ModelConfig& cfg, const std::string& suffix) {
    const int c = cfg.encoder.channels;
    const int m = cfg.encoder.adapter_bottleneck;
    const int e = cfg.encoder.scale_embed_dim;
    const int pe = posenc_dim(cfg.posenc);
    const double conv_std = std::sqrt(2.0 / (9.0 * c));
    const double attn_std = std::sqrt(1.0 / c);

    b.add("backbone.head.weight" + suffix, {c, 9 * 3}, std::sqrt(2.0 / 27.0), true);
    b.add_const("backbone.head.bias" + suffix, {c}, 0.0, true);
    for (int g = 0; g < cfg.encoder.n_blocks; ++g) {
        std::string gp = "backbone.group" + std::to_string(g);
        b.add(gp + ".conv1.weight" + suffix, {c, 9 * c}, conv_std, true);
        b.add_const(gp + ".conv1.bias" + suffix, {c}, 0.0, true);
        b.add(gp + ".conv2.weight" + suffix, {c, 9 * c}, conv_std, true);
        b.add_const(gp + ".conv2.bias" + suffix, {c}, 0.0, true);

        std::string sp = "adapter.spatial.group" + std::to_string(g);
        b.add(sp + ".down.weight" + suffix, {m, c}, std::sqrt(2.0 / c), false);
        b.add_const(sp + ".down.bias" + suffix, {m}, 0.0, false);
        b.add_const(sp + ".up.weight" + suffix, {c, m}, 0.0, false);  // identity at init
        b.add_const(sp + ".up.bias" + suffix, {c}, 0.0, false);

        std::string sc = "adapter.scale.group" + std::to_string(g);
        b.add(sc + ".mlp1.l1.weight" + suffix, {e, 3}, std::sqrt(2.0 / 3.0), false);
        b.add_const(sc + ".mlp1.l1.bias" + suffix, {e}, 0.0, false);
        b.add(sc + ".mlp1.l2.weight" + suffix, {e, e}, std::sqrt(2.0 / e), false);
        b.add_const(sc + ".mlp1.l2.bias" + suffix, {e}, 0.0, false);
        b.add(sc + ".mlp2.weight" + suffix, {c, e}, std::sqrt(2.0 / e), false);
        b.add_const(sc + ".mlp2.bias" + suffix, {c}, 0.0, false);
        b.add_const(sc + ".ln.gamma" + suffix, {c}, 1.0, false);
        b.add_const(sc + ".ln.beta" + suffix, {c}, 0.0, false);
        b.add_const(sc + ".alpha" + suffix, {c}, 0.0, false);  // zero residual gate
    }

    // Upsampler (DGASU), tunable throughout.
    b.add("upsampler.fuse.wq" + suffix, {c, c}, attn_std, false);
    b.add("upsampler.fuse.wk" + suffix, {c, c}, attn_std, false);
    b.add("upsampler.fuse.wv" + suffix, {c, c}, attn_std, false);
    b.add_const("upsampler.se.conv1.weight" + suffix, {c, 9 * c}, 0.0, false);
    b.add("upsampler.se.conv2.weight" + suffix, {c, 9 * c}, conv_std, false);
    b.add("upsampler.token.weight" + suffix, {c, c + pe}, std::sqrt(2.0 / (c + pe)), false);
    b.add_const("upsampler.token.bias" + suffix, {c}, 0.0, false);
    for (int i = 0; i < 2 * cfg.upsampler.n_rounds; ++i) {
        std::string bp = "upsampler.block" + std::to_string(i);
        for (const char* role : {".wq", ".wk", ".wv"})
            b.add(bp + role + suffix, {c, c}, attn_std, false);
        // Zero output projection: the residual attention path fades in
        // during training instead of injecting noise at init.
        b.add_const(bp + ".wo" + suffix, {c, c}, 0.0, false);
    }
    const int mlp_in = 2 * c + pe;
    for (int i = 0; i < cfg.upsampler.mlp_layers; ++i) {
        std::string lp = "upsampler.mlp.layer" + std::to_string(i);
        int in = i == 0 ? mlp_in : cfg.upsampler.mlp_hidden;
        int out = i == cfg.upsampler.mlp_layers - 1 ? 3 : cfg.upsampler.mlp_hidden;
        bool last = i == cfg.upsampler.mlp_layers - 1;
        if (last) {
            b.add_const(lp + ".weight" + suffix, {out, in}, 0.0, false);  // zero-init head
            b.add_const(lp + ".bias" + suffix, {out}, 0.0, false);
        } else {
            b.add(lp + ".weight" + suffix, {out, in}, std::sqrt(2.0 / in), false);
            b.add_const(lp + ".bias" + suffix, {out}, 0.0, false);
        }
    }
}

}  // namespace

ModelState init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.encoder.validate();
    if (cfg.upsampler.mlp_layers < 2) throw ArgumentError("upsampler needs >= 2 MLP layers");
    ModelState st;
    st.config = cfg;
    st.seed = seed;
    Builder b{st, Rng(Rng::derive(seed, 0xC0DEBA5E))};

    const int c = cfg.encoder.channels;
    const double attn_std = std::sqrt(1.0 / c);
    // The stereo adapter operates on the pair jointly and is always a single
    // parameter set; its residual gate starts at zero (identity at init).
    for (int g = 0; g < cfg.encoder.n_blocks; ++g) {
        std::string sp = "adapter.stereo.group" + std::to_string(g);
        b.add(sp + ".wq", {c, c}, attn_std, false);
        b.add(sp + ".wk", {c, c}, attn_std, false);
        b.add(sp + ".wv", {c, c}, attn_std, false);
        b.add_const(sp + ".gate", {c}, 0.0, false);
    }

    if (cfg.encoder.share_view_weights) {
        add_view_params(b, cfg, "");
    } else {
        add_view_params(b, cfg, ".left");
        add_view_params(b, cfg, ".right");
    }

    for (const auto& [name, t] : st.params) {
        if (st.is_frozen(name)) continue;
        st.adam_m.emplace(name, Tensor(t.shape));
        st.adam_v.emplace(name, Tensor(t.shape));
    }
    return st;
}

// ---------------------------------------------------------------------------
// Config (de)serialization
// ---------------------------------------------------------------------------

json config_to_json(const ModelConfig& c) {
    return json{
        {"encoder",
         {{"channels", c.encoder.channels},
          {"n_blocks", c.encoder.n_blocks},
          {"adapter_bottleneck", c.encoder.adapter_bottleneck},
          {"share_view_weights", c.encoder.share_view_weights},
          {"scale_embed_dim", c.encoder.scale_embed_dim},
          {"min_input_size", c.encoder.min_input_size}}},
        {"posenc", {{"n_freqs", c.posenc.n_freqs}}},
        {"upsampler",
         {{"window_radius", c.upsampler.window_radius},
          {"n_rounds", c.upsampler.n_rounds},
          {"mlp_hidden", c.upsampler.mlp_hidden},
          {"mlp_layers", c.upsampler.mlp_layers},
          {"decode_chunk", c.upsampler.decode_chunk}}},
        {"disparity", {{"d_max", c.disparity.d_max}, {"window", c.disparity.window}}}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    const auto& e = j.at("encoder");
    c.encoder.channels = e.at("channels").get<int>();
    c.encoder.n_blocks = e.at("n_blocks").get<int>();
    c.encoder.adapter_bottleneck = e.at("adapter_bottleneck").get<int>();
    c.encoder.share_view_weights = e.at("share_view_weights").get<bool>();
    c.encoder.scale_embed_dim = e.at("scale_embed_dim").get<int>();
    c.encoder.min_input_size = e.at("min_input_size").get<int>();
    c.posenc.n_freqs = j.at("posenc").at("n_freqs").get<int>();
    const auto& u = j.at("upsampler");
    c.upsampler.window_radius = u.at("window_radius").get<int>();
    c.upsampler.n_rounds = u.at("n_rounds").get<int>();
    c.upsampler.mlp_hidden = u.at("mlp_hidden").get<int>();
    c.upsampler.mlp_layers = u.at("mlp_layers").get<int>();
    c.upsampler.decode_chunk = u.at("decode_chunk").get<int>();
    c.disparity.d_max = j.at("disparity").at("d_max").get<int>();
    c.disparity.window = j.at("disparity").at("window").get<int>();
    return c;
}

std::string config_hash(const ModelConfig& cfg) {
    std::string s = config_to_json(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'S', 'I', 'N', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

void write_doubles(std::ofstream& out, const Tensor& t) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
}

void read_doubles(std::ifstream& in, Tensor& t) {
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw CheckpointError("checkpoint truncated while reading tensor payload");
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& path) {
    json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["byte_order"] = "little";
    manifest["element_type"] = "float64";
    manifest["step"] = state.step;
    manifest["seed"] = state.seed;
    manifest["config"] = config_to_json(state.config);
    json tensors = json::array();
    for (const auto& [name, t] : state.params)
        tensors.push_back(
            {{"name", name}, {"shape", t.shape}, {"frozen", state.is_frozen(name)}});
    manifest["tensors"] = tensors;
    json adam = json::array();
    for (const auto& [name, t] : state.adam_m) adam.push_back(name);
    manifest["adam"] = adam;

    std::string mstr = manifest.dump();
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint: " + tmp);
        out.write(kMagic, 8);
        std::uint32_t ver = kFormatVersion;
        out.write(reinterpret_cast<const char*>(&ver), 4);
        std::uint64_t mlen = mstr.size();
        out.write(reinterpret_cast<const char*>(&mlen), 8);
        out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
        for (const auto& [name, t] : state.params) write_doubles(out, t);
        for (const auto& [name, t] : state.adam_m) write_doubles(out, t);
        for (const auto& [name, t] : state.adam_v) write_doubles(out, t);
        if (!out) throw IoError("short write on checkpoint: " + tmp);
    }
    fs::rename(tmp, path);
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw CheckpointError("not a checkpoint file: " + path);
    std::uint32_t ver = 0;
    in.read(reinterpret_cast<char*>(&ver), 4);
    if (ver != kFormatVersion)
        throw CheckpointError("incompatible checkpoint format version " + std::to_string(ver) +
                              " (expected " + std::to_string(kFormatVersion) + ")");
    std::uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), 8);
    if (!in || mlen > (1ULL << 30)) throw CheckpointError("corrupt checkpoint manifest length");
    std::string mstr(mlen, '\0');
    in.read(mstr.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw CheckpointError("checkpoint truncated in manifest");
    json manifest;
    try {
        manifest = json::parse(mstr);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("corrupt checkpoint manifest: ") + e.what());
    }

    ModelState st;
    st.config = config_from_json(manifest.at("config"));
    st.step = manifest.at("step").get<std::int64_t>();
    st.seed = manifest.at("seed").get<std::uint64_t>();
    for (const auto& jt : manifest.at("tensors")) {
        std::string name = jt.at("name").get<std::string>();
        Tensor t(jt.at("shape").get<std::vector<int>>());
        st.params.emplace(name, std::move(t));
        if (jt.at("frozen").get<bool>()) st.frozen.insert(name);
    }
    for (const auto& jn : manifest.at("adam")) {
        std::string name = jn.get<std::string>();
        st.adam_m.emplace(name, Tensor(st.param(name).shape));
        st.adam_v.emplace(name, Tensor(st.param(name).shape));
    }
    for (auto& [name, t] : st.params) read_doubles(in, t);
    for (auto& [name, t] : st.adam_m) read_doubles(in, t);
    for (auto& [name, t] : st.adam_v) read_doubles(in, t);
    return st;
}

}  // namespace stereoinr
