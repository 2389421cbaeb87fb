#include "stereoinr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace stereoinr {

using nlohmann::json;

const char* kCodeVersion = "0.1.0";

namespace {

// Order-independent accumulation for report determinism.
struct KahanMean {
    double sum = 0, comp = 0;
    long n = 0;
    void add(double x) {
        double y = x - comp;
        double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
        ++n;
    }
    double mean() const { return n ? sum / n : 0.0; }
};

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "psnr");
    KahanMean mse;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse.add(d * d);
    }
    const double m = mse.mean();
    if (m <= 0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / m));
}

double pair_psnr(const StereoPair& a, const StereoPair& b) {
    return 0.5 * (psnr(a.left, b.left) + psnr(a.right, b.right));
}

double ssim(const Image& a, const Image& b) {
    require_same_shape(a, b, "ssim");
    const Tensor ya = luminance(a), yb = luminance(b);
    const int h = ya.shape[0], w = ya.shape[1];
    constexpr int kWin = 11, kHalf = 5;
    constexpr double kSigma = 1.5, kK1 = 0.01, kK2 = 0.03, kL = 1.0;
    if (h < kWin || w < kWin)
        throw ArgumentError("ssim: image smaller than the 11x11 window");

    double g[kWin];
    double gsum = 0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - kHalf;
        g[i] = std::exp(-d * d / (2 * kSigma * kSigma));
        gsum += g[i];
    }
    for (double& v : g) v /= gsum;

    const double c1 = (kK1 * kL) * (kK1 * kL);
    const double c2 = (kK2 * kL) * (kK2 * kL);
    KahanMean acc;
    for (int y = kHalf; y < h - kHalf; ++y)
        for (int x = kHalf; x < w - kHalf; ++x) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int dy = -kHalf; dy <= kHalf; ++dy)
                for (int dx = -kHalf; dx <= kHalf; ++dx) {
                    const double wgt = g[dy + kHalf] * g[dx + kHalf];
                    const double va = ya.at(y + dy, x + dx);
                    const double vb = yb.at(y + dy, x + dx);
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            saa -= ma * ma;
            sbb -= mb * mb;
            sab -= ma * mb;
            acc.add(((2 * ma * mb + c1) * (2 * sab + c2)) /
                    ((ma * ma + mb * mb + c1) * (saa + sbb + c2)));
        }
    return acc.mean();
}

double disparity_mae(const DisparityField& d1, const DisparityField& d2) {
    require_same_shape(d1.d, d2.d, "disparity_mae");
    KahanMean acc;
    for (std::size_t i = 0; i < d1.d.size(); ++i)
        if (d1.valid[i] && d2.valid[i]) acc.add(std::abs(d1.d.data[i] - d2.d.data[i]));
    if (acc.n == 0) throw ArgumentError("disparity_mae: no mutually valid pixels");
    return acc.mean();
}

double SsimProxyBackend::distance(const Image& a, const Image& b) const {
    return std::clamp(1.0 - ssim(a, b), 0.0, 1.0);
}

double score_metric(const StereoPair& sr, const StereoPair& hr, const PerceptualBackend& p,
                    const DisparityEstimator& est, const DisparityConfig& cfg) {
    const double pl = p.distance(sr.left, hr.left);
    const double pr = p.distance(sr.right, hr.right);
    const DisparityField d_sr = estimate_disparity(sr.left, sr.right, cfg, est);
    const DisparityField d_hr = estimate_disparity(hr.left, hr.right, cfg, est);
    return 1.0 - 0.5 * (pl + pr) - 0.1 * disparity_mae(d_sr, d_hr);
}

Image crop_border(const Image& img, int border) {
    if (border < 0) throw ArgumentError("crop_border: negative border");
    if (border == 0) return img;
    const int h = img.shape[0], w = img.shape[1], c = img.shape[2];
    const int oh = h - 2 * border, ow = w - 2 * border;
    if (oh < 1 || ow < 1) throw ArgumentError("crop_border: border larger than image");
    Image out({oh, ow, c});
    for (int y = 0; y < oh; ++y)
        std::copy(&img.data[((static_cast<std::size_t>(y) + border) * w + border) * c],
                  &img.data[((static_cast<std::size_t>(y) + border) * w + border + ow) * c],
                  &out.data[static_cast<std::size_t>(y) * ow * c]);
    return out;
}

SuperResolver bicubic_resolver() {
    return [](const StereoPair& lr, int out_h, int out_w) {
        StereoPair sr;
        sr.left = bicubic_resample(lr.left, out_h, out_w);
        sr.right = bicubic_resample(lr.right, out_h, out_w);
        return sr;
    };
}

json evaluate_dataset(const Dataset& data, double scale, const SuperResolver& resolve,
                      const PerceptualBackend& perceptual, const DisparityConfig& disp_cfg) {
    if (data.empty()) throw ArgumentError("evaluate_dataset: empty dataset");
    if (!(scale > 0)) throw ArgumentError("evaluate_dataset: scale must be > 0");
    const int border = static_cast<int>(std::lround(2.0 * scale));
    const NccBlockMatcher matcher;

    json pairs = json::array();
    KahanMean m_psnr, m_ssim, m_perc, m_mae, m_score;
    for (std::size_t i = 0; i < data.pairs.size(); ++i) {
        const StereoPair hr = data.load(i);
        const int h = hr.height(), w = hr.width();
        const int lh = std::max(1, static_cast<int>(std::lround(h / scale)));
        const int lw = std::max(1, static_cast<int>(std::lround(w / scale)));
        StereoPair lr;
        lr.left = bicubic_resample(hr.left, lh, lw);
        lr.right = bicubic_resample(hr.right, lh, lw);
        const StereoPair sr = resolve(lr, h, w);

        const Image sl = crop_border(sr.left, border), sr_r = crop_border(sr.right, border);
        const Image hl = crop_border(hr.left, border), hr_r = crop_border(hr.right, border);
        const double psnr_l = psnr(sl, hl), psnr_r = psnr(sr_r, hr_r);
        const double ssim_l = ssim(sl, hl), ssim_r = ssim(sr_r, hr_r);
        const double perc_l = perceptual.distance(sl, hl);
        const double perc_r = perceptual.distance(sr_r, hr_r);

        const DisparityField d_sr = estimate_disparity(sr.left, sr.right, disp_cfg, matcher);
        const DisparityField d_hr = estimate_disparity(hr.left, hr.right, disp_cfg, matcher);
        const double mae = disparity_mae(d_sr, d_hr);
        const double score = 1.0 - 0.5 * (perc_l + perc_r) - 0.1 * mae;

        pairs.push_back({{"name", data.pairs[i].name},
                         {"psnr_left", psnr_l},
                         {"psnr_right", psnr_r},
                         {"psnr", 0.5 * (psnr_l + psnr_r)},
                         {"ssim_left", ssim_l},
                         {"ssim_right", ssim_r},
                         {"ssim", 0.5 * (ssim_l + ssim_r)},
                         {"perceptual_left", perc_l},
                         {"perceptual_right", perc_r},
                         {"perceptual_mean", 0.5 * (perc_l + perc_r)},
                         {"disparity_mae", mae},
                         {"score", score}});
        m_psnr.add(0.5 * (psnr_l + psnr_r));
        m_ssim.add(0.5 * (ssim_l + ssim_r));
        m_perc.add(0.5 * (perc_l + perc_r));
        m_mae.add(mae);
        m_score.add(score);
    }

    return json{{"scale", scale},
                {"border_crop", border},
                {"out_of_training_distribution", scale < 1.0 || scale > 4.0},
                {"pairs", pairs},
                {"aggregate",
                 {{"psnr", m_psnr.mean()},
                  {"ssim", m_ssim.mean()},
                  {"perceptual_mean", m_perc.mean()},
                  {"disparity_mae", m_mae.mean()},
                  {"score", m_score.mean()}}}};
}

json make_report(const std::string& method, const std::string& dataset_dir,
                 const std::string& config_hash_hex, const PerceptualBackend& perceptual,
                 std::vector<json> per_scale) {
    json reports = json::array();
    for (auto& r : per_scale) reports.push_back(std::move(r));
    return json{{"schema", "stereoinr-report-v1"},
                {"code_version", kCodeVersion},
                {"method", method},
                {"dataset", dataset_dir},
                {"config_hash", config_hash_hex},
                {"perceptual_backend", perceptual.id()},
                {"disparity_backend", NccBlockMatcher{}.id()},
                {"comparability_note",
                 "perceptual distances use the SSIM proxy and disparity uses NCC block "
                 "matching; SCORE values are not comparable to LPIPS/RAFT-Stereo results"},
                {"reports", reports}};
}

}  // namespace stereoinr
