#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "stereoinr/disparity.hpp"
#include "stereoinr/imaging_io.hpp"
#include "stereoinr/rng.hpp"

using namespace stereoinr;
namespace fs = std::filesystem;

namespace {

// Smooth analytic luminance field, evaluable at fractional coordinates.
double field(double x, double y) {
    return 0.5 + 0.18 * std::cos(0.19 * x + 0.11 * y + 0.3) +
           0.14 * std::cos(0.07 * x - 0.15 * y + 1.1) + 0.1 * std::cos(0.12 * x + 0.9);
}

Tensor render(int h, int w, double shift) {
    Tensor img({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.at(y, x) = field(x + shift, y);
    return img;
}

}  // namespace

TEST_CASE("constant integer shift recovered within 0.5 px") {
    const int h = 32, w = 110;
    // reference(x) = field(x), target(x) = field(x + 3)
    // => reference(x) = target(x - 3): disparity +3 everywhere.
    Tensor ref = render(h, w, 0.0);
    Tensor tgt = render(h, w, 3.0);
    DisparityConfig cfg;
    NccBlockMatcher m;
    DisparityField f = m.estimate(ref, tgt, cfg);
    int valid = 0, good = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!f.is_valid(y, x)) continue;
            ++valid;
            if (std::abs(f.d.at(y, x) - 3.0) <= 0.5) ++good;
        }
    REQUIRE(valid > 0);
    CHECK(good >= 0.95 * valid);
}

TEST_CASE("fractional shift recovered by parabolic refinement") {
    const int h = 24, w = 110;
    Tensor ref = render(h, w, 0.0);
    Tensor tgt = render(h, w, 2.5);
    DisparityField f = NccBlockMatcher{}.estimate(ref, tgt, {});
    int valid = 0, good = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!f.is_valid(y, x)) continue;
            ++valid;
            if (std::abs(f.d.at(y, x) - 2.5) <= 0.5) ++good;
        }
    REQUIRE(valid > 0);
    CHECK(good >= 0.95 * valid);
}

TEST_CASE("textureless input resolves to the zero-shift tie-break") {
    Tensor ref({20, 100}, 0.5), tgt({20, 100}, 0.5);
    DisparityField f = NccBlockMatcher{}.estimate(ref, tgt, {});
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 100; ++x)
            if (f.is_valid(y, x)) CHECK(f.d.at(y, x) == 0.0);
}

TEST_CASE("ground-truth recovery on the synthetic dataset") {
    fs::path dir = fs::temp_directory_path() / "stereoinr_test_disp_ds";
    SynthConfig cfg;
    cfg.n_pairs = 3;
    cfg.height = 96;
    cfg.width = 160;
    cfg.seed = 31;
    synth_stereo_dataset(cfg, dir.string());
    Dataset ds = open_dataset(dir.string());

    int valid_total = 0, good_total = 0;
    for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
        StereoPair p = ds.load(i);
        Tensor gt = ds.load_gt_disparity(i, true);  // layer disparity D >= 0
        // left(x) = right(x + D) => estimate(left, right) yields d = -D.
        DisparityField f = estimate_disparity(p.left, p.right);
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x) {
                if (!f.is_valid(y, x)) continue;
                ++valid_total;
                if (std::abs(f.d.at(y, x) + gt.at(y, x)) <= 1.0) ++good_total;
            }
    }
    REQUIRE(valid_total > 1000);
    INFO("within-1px fraction: ", double(good_total) / valid_total);
    CHECK(good_total >= 0.90 * valid_total);
}

TEST_CASE("warp matches a direct bilinear-shift oracle") {
    Rng rng(41);
    const int h = 5, w = 9, c = 3;
    Tensor grid({h, w, c});
    for (auto& v : grid.data) v = rng.uniform();
    DisparityField disp;
    disp.d = Tensor({h, w});
    disp.valid.assign(h * w, 1);
    for (auto& v : disp.d.data) v = rng.uniform(-3.0, 3.0);
    disp.valid[7] = 0;  // one invalid site

    std::vector<std::uint8_t> valid;
    Tensor out = warp_tensor(grid, disp, &valid);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double xs = x - disp.d.at(y, x);
            bool clamped = xs < 0.0 || xs > w - 1;
            xs = std::clamp(xs, 0.0, double(w - 1));
            int x0 = static_cast<int>(std::floor(xs));
            int x1 = std::min(x0 + 1, w - 1);
            double fr = xs - x0;
            for (int k = 0; k < c; ++k)
                CHECK(out.at(y, x, k) ==
                      doctest::Approx((1 - fr) * grid.at(y, x0, k) + fr * grid.at(y, x1, k))
                          .epsilon(1e-12));
            bool expect_valid = !clamped && disp.valid[y * w + x];
            CHECK(static_cast<bool>(valid[y * w + x]) == expect_valid);
        }
}

TEST_CASE("zero-disparity warp is the identity with full validity") {
    Tensor grid({3, 4, 2});
    for (std::size_t i = 0; i < grid.size(); ++i) grid.data[i] = double(i);
    DisparityField disp;
    disp.d = Tensor({3, 4});
    disp.valid.assign(12, 1);
    std::vector<std::uint8_t> valid;
    Tensor out = warp_tensor(grid, disp, &valid);
    CHECK(out.data == grid.data);
    for (auto v : valid) CHECK(v == 1);
}

TEST_CASE("disparity export files exist and round-trip the field") {
    DisparityField f;
    f.d = Tensor({8, 8});
    f.valid.assign(64, 1);
    for (int i = 0; i < 64; ++i) f.d.data[i] = -4.0 + i * 0.2;
    fs::path dir = fs::temp_directory_path() / "stereoinr_test_dexp";
    fs::create_directories(dir);
    std::string pd = (dir / "d.png").string(), pv = (dir / "v.png").string();
    save_disparity(f, pd, pv);
    // stored value = (d + 32) * 256
    Tensor back = load_png_u16(pd, 256.0, 32.0 * 256.0);
    for (int i = 0; i < 64; ++i)
        CHECK(std::abs(back.data[i] - f.d.data[i]) <= 0.5 / 256.0 + 1e-9);
}

TEST_CASE("estimator shape and config validation") {
    CHECK(NccBlockMatcher{}.id() == "ncc_block_matching");
    Tensor a({10, 60}), b({10, 61});
    CHECK_THROWS_AS(NccBlockMatcher{}.estimate(a, b, {}), ShapeError);
}
