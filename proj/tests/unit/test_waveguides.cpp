#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "qdalign/random.hpp"
#include "qdalign/synth.hpp"
#include "qdalign/waveguides.hpp"

using namespace qdalign;

namespace {

constexpr double kPitch = 59.0;

std::vector<double> triple(double left, double mid, double right, std::size_t n) {
    TripleGaussianModel m;
    m.center = {left, mid, right};
    m.amplitude = {60.0, 100.0, 60.0};
    m.width = {3.4, 3.7, 3.4};
    m.offset = 10.0;
    m.slope = 0.05;
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = m(static_cast<double>(i));
    return p;
}

Image guide_image(double axis_nm, Orientation o, double bright, std::uint64_t seed, bool noise) {
    Scene s;
    s.mode = ImagingMode::intrinsic_markers;
    s.background.offset = 20.0;
    WaveguideSpec w;
    w.axis_nm = axis_nm;
    w.orientation = o;
    w.start_nm = 100 * kPitch;
    w.end_nm = 500 * kPitch;
    w.guide_brightness = bright;
    w.edge_brightness = 0.6 * bright;
    s.waveguides.push_back(w);
    s.shot_noise = noise;
    s.seed = seed;
    return render(s, 600, 600);
}

}  // namespace

TEST(GuideSection, NoiseFreeExact) {
    const auto p = triple(14.75, 30.0, 45.25, 61);
    const auto f = fit_guide_section(p, {15.25});
    EXPECT_NEAR(f.center, 30.0, 1e-3);
    EXPECT_GT(f.unc, 0.0);
}

TEST(GuideSection, MiddleShiftLeavesSides) {
    const auto a = fit_guide_section(triple(14.75, 30.0, 45.25, 61), {15.25});
    const auto b = fit_guide_section(triple(14.75, 30.5, 45.25, 61), {15.25});
    EXPECT_NEAR(b.center - a.center, 0.5, 1e-3);
    EXPECT_NEAR(b.model.center[0], a.model.center[0], 1e-3);
    EXPECT_NEAR(b.model.center[2], a.model.center[2], 1e-3);
}

TEST(GuideSection, OffCenterGuide) {
    // guide 5 px from the midline, nominal offsets slightly wrong
    const auto f = fit_guide_section(triple(19.0, 35.0, 51.0, 61), {14.0});
    EXPECT_NEAR(f.center, 35.0, 1e-3);
    EXPECT_TRUE(f.model.ordered());
}

TEST(GuideSection, Contract) {
    EXPECT_THROW(fit_guide_section(std::vector<double>(8, 1.0)), ContractError);
    EXPECT_THROW(fit_guide_section(triple(14.75, 30.0, 45.25, 61), {40.0}), ContractError);
    EXPECT_THROW(fit_guide_section(std::vector<double>(40, 1.0), {10.0}), FitError);
}

TEST(Waveguide, NoiseFreeAxis) {
    const Image img = guide_image(29'500.0, Orientation::along_x, 400.0, 0, false);
    const int y0 = static_cast<int>(std::lround(29'500.0 / kPitch)) - 30;
    const auto axis = fit_waveguide(img, Roi{100, y0, 400, 61}, Orientation::along_x, {9, 0.6, {900.0 / kPitch}});
    EXPECT_NEAR(axis.axis_nm, 29'500.0, 1.0);
    EXPECT_EQ(axis.sections.size(), 9u);
    EXPECT_EQ(axis.orientation, Orientation::along_x);
    // sections span the central 60 %
    EXPECT_NEAR(axis.sections.front().position_nm, (100 + std::lround(0.2 * 399)) * kPitch, 1e-9);
}

TEST(Waveguide, AlongYGivesX) {
    const Image img = guide_image(20'000.0, Orientation::along_y, 400.0, 0, false);
    const int x0 = static_cast<int>(std::lround(20'000.0 / kPitch)) - 30;
    const auto axis = fit_waveguide(img, Roi{x0, 100, 61, 400}, Orientation::along_y, {9, 0.6, {900.0 / kPitch}});
    EXPECT_NEAR(axis.axis_nm, 20'000.0, 1.0);
}

TEST(Waveguide, WeightedMeanProperties) {
    const Image img = guide_image(29'500.0, Orientation::along_x, 60.0, 5, true);
    const int y0 = static_cast<int>(std::lround(29'500.0 / kPitch)) - 30;
    const auto axis = fit_waveguide(img, Roi{100, y0, 400, 61}, Orientation::along_x, {9, 0.6, {900.0 / kPitch}});
    double lo = 1e300, hi = -1e300, min_unc = 1e300;
    for (const auto& s : axis.sections) lo = std::min(lo, s.center_nm), hi = std::max(hi, s.center_nm), min_unc = std::min(min_unc, s.unc_nm);
    EXPECT_GE(axis.axis_nm, lo);
    EXPECT_LE(axis.axis_nm, hi);
    EXPECT_LE(axis.unc_nm, min_unc);
    EXPECT_GT(axis.unc_nm, 0.0);
}

TEST(Waveguide, NoGuideIsAnAxisError) {
    Image flat(100, 100, kPitch);
    Rng rng(1);
    for (auto& v : flat.counts()) v = rng.poisson(20.0);
    EXPECT_THROW(fit_waveguide(flat, Roi{0, 20, 100, 61}, Orientation::along_x, {9, 0.6, {15.0}}), DegenerateError);
}

TEST(Misalign, OnAxisAndOffset) {
    WaveguideAxis wg;
    wg.orientation = Orientation::along_x;
    wg.axis_nm = 1000.0;
    wg.unc_nm = 8.0;
    EmitterFit qd;
    qd.x_nm = 5000.0;
    qd.y_nm = 1000.0;
    qd.unc_x_nm = 99.0;
    qd.unc_y_nm = 6.0;
    auto m = misalign(qd, wg);
    EXPECT_DOUBLE_EQ(m.delta_nm, 0.0);
    EXPECT_DOUBLE_EQ(m.unc_nm, 10.0);
    qd.y_nm = 1046.0;
    EXPECT_DOUBLE_EQ(misalign(qd, wg).delta_nm, 46.0);
    qd.y_nm = 1000.0 - 46.0;
    EXPECT_DOUBLE_EQ(misalign(qd, wg).delta_nm, -46.0);
    EXPECT_THROW(misalign(qd, wg, Orientation::along_y), ContractError);
    wg.orientation = Orientation::along_y;
    wg.axis_nm = 4990.0;
    EXPECT_DOUBLE_EQ(misalign(qd, wg, Orientation::along_y).delta_nm, 10.0);
}

TEST(Misalign, ReflectionAntisymmetry) {
    Rng rng(4);
    WaveguideAxis wg;
    wg.axis_nm = 777.0;
    wg.unc_nm = 3.0;
    for (int i = 0; i < 50; ++i) {
        const double d = 100.0 * rng.normal();
        const auto a = misalign(0.0, wg.axis_nm + d, 1.0, 1.0, wg);
        const auto b = misalign(0.0, wg.axis_nm - d, 1.0, 1.0, wg);
        EXPECT_NEAR(a.delta_nm, -b.delta_nm, 1e-9);
    }
}

TEST(MisalignStats, ConstantList) {
    const std::vector<double> v(6, 4.0);
    const auto s = misalign_stats(v);
    EXPECT_DOUBLE_EQ(s.mean, 4.0);
    EXPECT_DOUBLE_EQ(s.std_dev, 0.0);
    EXPECT_THROW(misalign_stats(std::vector<double>(4, 1.0)), ContractError);
}

TEST(MisalignStats, MatchesBruteForce) {
    Rng rng(8);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> v(5 + t);
        for (auto& x : v) x = 9.0 + 46.0 * rng.normal();
        double mean = 0;
        for (double x : v) mean += x;
        mean /= v.size();
        double var = 0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= (v.size() - 1);
        const auto s = misalign_stats(v);
        EXPECT_NEAR(s.mean, mean, 1e-12);
        EXPECT_NEAR(s.std_dev, std::sqrt(var), 1e-12);
    }
}

TEST(MisalignStats, AndersonDarlingSeparatesShapes) {
    Rng rng(12);
    std::vector<double> normal(200), expo(200);
    for (auto& x : normal) x = rng.normal();
    for (auto& x : expo) x = -std::log(1.0 - rng.uniform());
    EXPECT_GT(misalign_stats(normal).ad_p_value, 0.05);
    EXPECT_LT(misalign_stats(expo).ad_p_value, 0.001);
    // tabulated 5 % critical value for the adjusted statistic
    int rejects = 0;
    for (int t = 0; t < 400; ++t) {
        std::vector<double> v(30);
        for (auto& x : v) x = rng.normal();
        rejects += misalign_stats(v).ad_adjusted > 0.752;
    }
    EXPECT_NEAR(rejects / 400.0, 0.05, 0.03);
}

TEST(Histogram, CountsAndExports) {
    const std::vector<double> v{-12.0, -1.0, 0.0, 3.0, 9.99, 10.0, 25.0};
    const auto bins = histogram(v, 10.0);
    std::size_t total = 0;
    for (const auto& b : bins) total += b.count;
    EXPECT_EQ(total, v.size());
    EXPECT_DOUBLE_EQ(bins.front().center_nm, -15.0);
    EXPECT_DOUBLE_EQ(bins.back().center_nm, 25.0);
    EXPECT_EQ(bins[2].count, 3u);  // [0, 10)
    const auto csv = histogram_csv(bins);
    EXPECT_EQ(csv.substr(0, 20), "bin_center_nm,count\n");
    const auto svg = histogram_svg(bins, misalign_stats(v), 10.0);
    EXPECT_NE(svg.find("<svg"), std::string::npos);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    EXPECT_THROW(histogram(v, 0.0), ContractError);
}
