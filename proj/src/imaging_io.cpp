#include "stereoinr/imaging_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace stereoinr {

namespace fs = std::filesystem;
using nlohmann::json;

void StereoPair::validate() const {
    if (left.shape != right.shape)
        throw ShapeError("stereo pair dimension mismatch: " + left.shape_str() + " vs " +
                         right.shape_str());
    for (const Image* img : {&left, &right})
        for (double v : img->data)
            if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                throw ArgumentError("stereo pair values must be finite and in [0,1]");
}

StereoPair load_stereo_pair(const std::string& path_left, const std::string& path_right) {
    StereoPair p{load_png_rgb(path_left), load_png_rgb(path_right)};
    if (p.left.shape != p.right.shape)
        throw ShapeError("stereo pair dimension mismatch: " + p.left.shape_str() + " vs " +
                         p.right.shape_str());
    return p;
}

namespace {

// Catmull-Rom kernel, a = -0.5, support 2.
double catmull_rom(double t) {
    t = std::abs(t);
    if (t < 1.0) return (1.5 * t - 2.5) * t * t + 1.0;
    if (t < 2.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
    return 0.0;
}

struct AxisTaps {
    std::vector<int> first;       // first source index per output index
    std::vector<double> weights;  // taps_per * out_len, normalized
    int taps = 0;
};

AxisTaps make_taps(int in_len, int out_len) {
    AxisTaps r;
    double sf = static_cast<double>(out_len) / in_len;
    double kscale = std::min(1.0, sf);  // antialias stretch when downscaling
    double support = 2.0 / kscale;
    r.taps = static_cast<int>(std::ceil(support)) * 2 + 1;
    r.first.resize(out_len);
    r.weights.assign(static_cast<std::size_t>(out_len) * r.taps, 0.0);
    for (int i = 0; i < out_len; ++i) {
        double center = (i + 0.5) / sf - 0.5;
        int first = static_cast<int>(std::floor(center - support)) + 1;
        r.first[i] = first;
        double sum = 0;
        for (int j = 0; j < r.taps; ++j) {
            double w = catmull_rom((center - (first + j)) * kscale);
            r.weights[static_cast<std::size_t>(i) * r.taps + j] = w;
            sum += w;
        }
        for (int j = 0; j < r.taps; ++j)
            r.weights[static_cast<std::size_t>(i) * r.taps + j] /= sum;
    }
    return r;
}

// Resample rows (vertical) of an [h, w, c] tensor to out_len rows.
Tensor resample_rows(const Tensor& src, int out_len) {
    const int h = src.shape[0], w = src.shape[1], c = src.shape[2];
    AxisTaps taps = make_taps(h, out_len);
    Tensor dst({out_len, w, c});
    for (int i = 0; i < out_len; ++i)
        for (int j = 0; j < taps.taps; ++j) {
            double wt = taps.weights[static_cast<std::size_t>(i) * taps.taps + j];
            if (wt == 0.0) continue;
            int ys = std::clamp(taps.first[i] + j, 0, h - 1);  // edge clamp
            const double* srow = &src.data[static_cast<std::size_t>(ys) * w * c];
            double* drow = &dst.data[static_cast<std::size_t>(i) * w * c];
            for (int k = 0; k < w * c; ++k) drow[k] += wt * srow[k];
        }
    return dst;
}

Tensor transpose_hw(const Tensor& src) {
    const int h = src.shape[0], w = src.shape[1], c = src.shape[2];
    Tensor dst({w, h, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int k = 0; k < c; ++k) dst.at(x, y, k) = src.at(y, x, k);
    return dst;
}

}  // namespace

Image bicubic_resample(const Image& image, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw ArgumentError("bicubic_resample: non-positive target");
    if (out_h == image.shape[0] && out_w == image.shape[1]) return image;
    Tensor tmp = resample_rows(image, out_h);
    Tensor out = transpose_hw(resample_rows(transpose_hw(tmp), out_w));
    for (auto& v : out.data) v = std::clamp(v, 0.0, 1.0);
    return out;
}

Image bilinear_resample(const Image& image, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw ArgumentError("bilinear_resample: non-positive target");
    const int c = image.shape[2];
    Image out({out_h, out_w, c});
    double sfy = static_cast<double>(out_h) / image.shape[0];
    double sfx = static_cast<double>(out_w) / image.shape[1];
    std::vector<double> px(c);
    for (int i = 0; i < out_h; ++i)
        for (int j = 0; j < out_w; ++j) {
            sample_bilinear(image, (i + 0.5) / sfy - 0.5, (j + 0.5) / sfx - 0.5, px.data());
            for (int k = 0; k < c; ++k) out.at(i, j, k) = px[k];
        }
    return out;
}

QueryGrid make_query_grid(int h_out, int w_out, double r) {
    if (h_out < 1 || w_out < 1) throw ArgumentError("make_query_grid: non-positive size");
    QueryGrid g;
    g.coords = Tensor({h_out * w_out, 2});
    for (int i = 0; i < h_out; ++i)
        for (int j = 0; j < w_out; ++j) {
            g.coords.at(i * w_out + j, 0) = -1.0 + (2.0 * i + 1.0) / h_out;
            g.coords.at(i * w_out + j, 1) = -1.0 + (2.0 * j + 1.0) / w_out;
        }
    g.cell_y = 2.0 / h_out;
    g.cell_x = 2.0 / w_out;
    g.scale = r;
    g.out_h = h_out;
    g.out_w = w_out;
    return g;
}

StereoPair Dataset::load(std::size_t i) const {
    const DatasetPair& p = pairs.at(i);
    return load_stereo_pair(p.left_path, p.right_path);
}

Tensor Dataset::load_gt_disparity(std::size_t i, bool left_view) const {
    const DatasetPair& p = pairs.at(i);
    const auto& path = left_view ? p.disp_left_path : p.disp_right_path;
    if (!path) throw IoError("pair " + p.name + " has no ground-truth disparity");
    return load_png_u16(*path, 256.0, 0.0);
}

Dataset open_dataset(const std::string& dir) {
    fs::path mpath = fs::path(dir) / "manifest.json";
    std::ifstream in(mpath);
    if (!in) throw IoError("cannot open dataset manifest: " + mpath.string());
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        throw IoError("invalid dataset manifest " + mpath.string() + ": " + e.what());
    }
    Dataset ds;
    ds.dir = dir;
    for (const auto& jp : m.at("pairs")) {
        DatasetPair p;
        p.name = jp.at("name").get<std::string>();
        p.height = jp.at("height").get<int>();
        p.width = jp.at("width").get<int>();
        p.left_path = (fs::path(dir) / (p.name + "_L.png")).string();
        p.right_path = (fs::path(dir) / (p.name + "_R.png")).string();
        if (jp.value("gt_disparity", false)) {
            p.disp_left_path = (fs::path(dir) / (p.name + "_dL.png")).string();
            p.disp_right_path = (fs::path(dir) / (p.name + "_dR.png")).string();
        }
        ds.pairs.push_back(std::move(p));
    }
    return ds;
}

namespace {

Image crop(const Image& img, int y0, int x0, int h, int w) {
    Image out({h, w, img.shape[2]});
    for (int y = 0; y < h; ++y)
        std::copy(&img.data[((static_cast<std::size_t>(y0) + y) * img.shape[1] + x0) * 3],
                  &img.data[((static_cast<std::size_t>(y0) + y) * img.shape[1] + x0 + w) * 3],
                  &out.data[static_cast<std::size_t>(y) * w * 3]);
    return out;
}

}  // namespace

TrainingBatch sample_training_batch(const Dataset& dataset, Rng& rng, const SamplerConfig& cfg) {
    if (dataset.empty()) throw ArgumentError("sample_training_batch: empty dataset");
    for (int attempt = 0; attempt < cfg.max_resample_attempts; ++attempt) {
        std::size_t idx = rng.uniform_int(dataset.pairs.size());
        double r = rng.uniform(cfg.scale_min, cfg.scale_max);
        int ph = static_cast<int>(std::lround(cfg.lr_h * r));
        int pw = static_cast<int>(std::lround(cfg.lr_w * r));
        const DatasetPair& meta = dataset.pairs[idx];
        if (ph > meta.height || pw > meta.width) continue;  // skip and resample

        StereoPair hr = dataset.load(idx);
        int y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(meta.height - ph + 1)));
        int x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(meta.width - pw + 1)));
        Image patch_l = crop(hr.left, y0, x0, ph, pw);
        Image patch_r = crop(hr.right, y0, x0, ph, pw);

        TrainingBatch b;
        b.scale = r;
        b.hr_h = ph;
        b.hr_w = pw;
        b.lr_pair = {bicubic_resample(patch_l, cfg.lr_h, cfg.lr_w),
                     bicubic_resample(patch_r, cfg.lr_h, cfg.lr_w)};

        // Sample query cells without replacement (partial Fisher-Yates).
        const int lattice = ph * pw;
        if (cfg.n_queries > lattice)
            throw ArgumentError("sample_training_batch: more queries than lattice cells");
        std::vector<int> cells(lattice);
        for (int i = 0; i < lattice; ++i) cells[i] = i;
        for (int i = 0; i < cfg.n_queries; ++i) {
            std::size_t j = i + rng.uniform_int(static_cast<std::uint64_t>(lattice - i));
            std::swap(cells[i], cells[j]);
        }
        cells.resize(cfg.n_queries);

        b.queries.coords = Tensor({cfg.n_queries, 2});
        b.queries.cell_y = 2.0 / ph;
        b.queries.cell_x = 2.0 / pw;
        b.queries.scale = r;
        b.gt_left = Tensor({cfg.n_queries, 3});
        b.gt_right = Tensor({cfg.n_queries, 3});
        for (int i = 0; i < cfg.n_queries; ++i) {
            int cy = cells[i] / pw, cx = cells[i] % pw;
            b.queries.coords.at(i, 0) = -1.0 + (2.0 * cy + 1.0) / ph;
            b.queries.coords.at(i, 1) = -1.0 + (2.0 * cx + 1.0) / pw;
            for (int k = 0; k < 3; ++k) {
                b.gt_left.at(i, k) = patch_l.at(cy, cx, k);
                b.gt_right.at(i, k) = patch_r.at(cy, cx, k);
            }
        }
        return b;
    }
    throw ArgumentError("sample_training_batch: no pair large enough after " +
                        std::to_string(cfg.max_resample_attempts) + " attempts");
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

namespace {

// Band-limited procedural layer texture: per-channel base + gradient +
// a small set of low-frequency cosine waves. Evaluating the closed form
// at shifted coordinates gives exact sub-pixel disparities.
struct LayerTexture {
    double base[3];
    double grad_x[3], grad_y[3];
    struct Wave {
        double fx, fy, phase, amp[3];
    };
    std::vector<Wave> waves;

    void eval(double x, double y, double* rgb) const {
        for (int c = 0; c < 3; ++c) rgb[c] = base[c] + grad_x[c] * x + grad_y[c] * y;
        for (const Wave& w : waves) {
            double v = std::cos(2.0 * M_PI * (w.fx * x + w.fy * y) + w.phase);
            for (int c = 0; c < 3; ++c) rgb[c] += w.amp[c] * v;
        }
        for (int c = 0; c < 3; ++c) rgb[c] = std::clamp(rgb[c], 0.02, 0.98);
    }
};

LayerTexture random_texture(Rng& rng, int width, int height) {
    LayerTexture t;
    for (int c = 0; c < 3; ++c) {
        t.base[c] = rng.uniform(0.25, 0.75);
        t.grad_x[c] = rng.uniform(-0.3, 0.3) / width;
        t.grad_y[c] = rng.uniform(-0.3, 0.3) / height;
    }
    // Frequencies stay below 0.25 cycles/px so a x2 downsample keeps the
    // texture alias-free; the upper half of the band carries most of the
    // detail energy.
    int n_waves = 6 + static_cast<int>(rng.uniform_int(5));
    for (int k = 0; k < n_waves; ++k) {
        LayerTexture::Wave w;
        double freq = (k < 2) ? rng.uniform(0.03, 0.10) : rng.uniform(0.10, 0.24);
        double ang = rng.uniform(0.0, 2.0 * M_PI);
        w.fx = freq * std::cos(ang);
        w.fy = freq * std::sin(ang);
        w.phase = rng.uniform(0.0, 2.0 * M_PI);
        double a = rng.uniform(0.04, 0.11);
        for (int c = 0; c < 3; ++c) w.amp[c] = a * rng.uniform(0.5, 1.0);
        t.waves.push_back(w);
    }
    return t;
}

struct Layer {
    LayerTexture tex;
    double disparity = 0;
    // Rectangle in right-view coordinates; the background covers everything.
    bool is_background = false;
    int x0 = 0, y0 = 0, w = 0, h = 0;

    bool contains_right(int x, int y) const {
        return is_background || (x >= x0 && x < x0 + w && y >= y0 && y < y0 + h);
    }
    // left(x) = right(x + D)
    bool contains_left(int x, int y) const {
        return is_background || contains_right(x + static_cast<int>(std::lround(disparity)), y);
    }
};

}  // namespace

std::string synth_stereo_dataset(const SynthConfig& cfg, const std::string& out_dir) {
    if (cfg.height < 64 || cfg.width < 64)
        throw ArgumentError("synth_stereo_dataset: size must be at least 64x64");
    if (cfg.n_pairs < 1) throw ArgumentError("synth_stereo_dataset: n_pairs must be >= 1");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create dataset directory: " + out_dir);

    json manifest;
    manifest["pairs"] = json::array();

    for (int p = 0; p < cfg.n_pairs; ++p) {
        Rng rng(Rng::derive(cfg.seed, static_cast<std::uint64_t>(p)));

        std::vector<Layer> layers;
        Layer bg;
        bg.is_background = true;
        bg.tex = random_texture(rng, cfg.width, cfg.height);
        bg.disparity = rng.uniform(0.0, 2.0);
        layers.push_back(bg);

        int n_rects = 2 + static_cast<int>(rng.uniform_int(4));  // 2..5
        for (int i = 0; i < n_rects; ++i) {
            Layer l;
            l.tex = random_texture(rng, cfg.width, cfg.height);
            l.disparity = rng.uniform(0.0, cfg.max_disparity);
            l.w = 16 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.width / 2)));
            l.h = 16 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.height / 2)));
            l.x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.width - 8)));
            l.y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.height - 8)));
            layers.push_back(l);
        }
        // Larger disparity = nearer; nearer layers occlude.
        std::stable_sort(layers.begin() + 1, layers.end(),
                         [](const Layer& a, const Layer& b) { return a.disparity < b.disparity; });

        Image left({cfg.height, cfg.width, 3}), right({cfg.height, cfg.width, 3});
        Tensor disp_l({cfg.height, cfg.width}), disp_r({cfg.height, cfg.width});
        double rgb[3];
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x) {
                for (auto it = layers.rbegin(); it != layers.rend(); ++it)
                    if (it->contains_right(x, y)) {
                        it->tex.eval(x, y, rgb);
                        for (int c = 0; c < 3; ++c) right.at(y, x, c) = rgb[c];
                        disp_r.at(y, x) = it->disparity;
                        break;
                    }
                for (auto it = layers.rbegin(); it != layers.rend(); ++it)
                    if (it->contains_left(x, y)) {
                        it->tex.eval(x + it->disparity, y, rgb);
                        for (int c = 0; c < 3; ++c) left.at(y, x, c) = rgb[c];
                        disp_l.at(y, x) = it->disparity;
                        break;
                    }
            }

        char name[32];
        std::snprintf(name, sizeof(name), "pair%04d", p);
        save_png_rgb(left, (fs::path(out_dir) / (std::string(name) + "_L.png")).string());
        save_png_rgb(right, (fs::path(out_dir) / (std::string(name) + "_R.png")).string());
        save_png_u16(disp_l, (fs::path(out_dir) / (std::string(name) + "_dL.png")).string(),
                     256.0, 0.0);
        save_png_u16(disp_r, (fs::path(out_dir) / (std::string(name) + "_dR.png")).string(),
                     256.0, 0.0);
        manifest["pairs"].push_back({{"name", name},
                                     {"height", cfg.height},
                                     {"width", cfg.width},
                                     {"gt_disparity", true}});
    }

    fs::path mpath = fs::path(out_dir) / "manifest.json";
    std::ofstream out(mpath);
    if (!out) throw IoError("cannot write manifest: " + mpath.string());
    out << manifest.dump(2) << "\n";
    return mpath.string();
}

}  // namespace stereoinr
