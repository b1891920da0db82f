#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "qdalign/fitcore.hpp"
#include "qdalign/models.hpp"
#include "qdalign/random.hpp"

using namespace qdalign;

namespace {

// Simpson quadrature of the Gaussian density: erf(x) = 2/sqrt(pi) * int_0^x exp(-t^2) dt
double erf_quadrature(double x) {
    const int n = 4000;
    const double h = x / n;
    double s = 0;
    for (int i = 0; i <= n; ++i) s += std::exp(-(i * h) * (i * h)) * (i == 0 || i == n ? 1 : (i % 2 ? 4 : 2));
    return s * h / 3.0 * 2.0 / std::sqrt(std::numbers::pi);
}

template <class Model, class Eval, class Grad>
double max_gradient_error(const Model& m, Eval eval, Grad grad, double step = 1e-6) {
    const auto p = m.params();
    std::array<double, Model::kParams> g{};
    grad(m, g);
    double worst = 0;
    for (int j = 0; j < Model::kParams; ++j) {
        auto hi = p, lo = p;
        const double h = step * std::max(std::fabs(p[j]), 1.0);
        hi[j] += h;
        lo[j] -= h;
        const double fd = (eval(hi) - eval(lo)) / (2 * h);
        const double scale = std::max({std::fabs(fd), std::fabs(g[j]), 1e-3});
        worst = std::max(worst, std::fabs(fd - g[j]) / scale);
    }
    return worst;
}

}  // namespace

TEST(ErfEdge, QuadratureOracle) {
    for (double x = -4; x <= 4; x += 0.37) EXPECT_NEAR(std::erf(x), erf_quadrature(x), 1e-10);
}

TEST(ErfEdge, SpecExample) {
    ErfEdgeModel m{1.0, 0.0, 2.0, 6.0, 0.0, 0.0};
    const double expected = (erf_quadrature(-3.0) - 0.0) / (-2.0 * erf_quadrature(1.5));
    EXPECT_NEAR(m(3.0), expected, 1e-10);
    EXPECT_NEAR(m(3.0), 0.5175, 1e-4);
}

TEST(ErfEdge, CenterAndTails) {
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        ErfEdgeModel m{rng.uniform(-5, 5), rng.uniform(-50, 50), rng.uniform(0.1, 20), rng.uniform(0.5, 20),
                       rng.uniform(-1, 1), rng.uniform(-10, 10)};
        EXPECT_NEAR(m(m.center), m.amplitude + m.slope * m.center + m.offset, 1e-12 * (1 + std::fabs(m(m.center))));
        m.slope = 0;
        const double dx = rng.uniform(0, 10);
        EXPECT_NEAR(m(m.center + dx), m(m.center - dx), 1e-12);
    }
    ErfEdgeModel far{1.0, 0.0, 1.0, 4.0, 0.0, 0.0};
    EXPECT_NEAR(far(1e3), 0.0, 1e-300);
    EXPECT_NEAR(far(-1e3), 0.0, 1e-300);
}

TEST(ErfEdge, StdDevConventionSwitch) {
    ErfEdgeModel var{1.0, 0.0, 4.0, 6.0, 0.0, 0.0, BlurConvention::variance};
    ErfEdgeModel sd{1.0, 0.0, 2.0, 6.0, 0.0, 0.0, BlurConvention::std_dev};
    for (double x = -8; x <= 8; x += 0.5) EXPECT_NEAR(var(x), sd(x), 1e-14);
}

TEST(Models, PointValues) {
    Gaussian2DModel g{3.0, 1.0, 2.0, 1.5, 0.7, 0.25};
    EXPECT_DOUBLE_EQ(eval_model(g, 1.0, 2.0), 3.25);
    TripleGaussianModel t;
    t.amplitude = {2.0, 0.0, 1.0};
    t.center = {-3.0, 0.0, 3.0};
    t.width = {1.0, 1.0, 1.0};
    t.offset = 0.5;
    for (double x = -6; x <= 6; x += 0.5)
        EXPECT_NEAR(eval_model(t, x), 2.0 * std::exp(-0.5 * (x + 3) * (x + 3)) + std::exp(-0.5 * (x - 3) * (x - 3)) + 0.5,
                    1e-14);
    EllipticalAiryModel a{5.0, 3.0, 4.0, 2.5, 1.5, 30.0, 0.1};
    const double t30 = std::numbers::pi / 6;
    const double r = kAiryFirstZero * 2.5;
    EXPECT_NEAR(eval_model(a, 3.0 + r * std::cos(t30), 4.0 + r * std::sin(t30)), 0.1, 1e-12);
    EXPECT_DOUBLE_EQ(eval_model(a, 3.0, 4.0), 5.1);
}

TEST(Models, AnalyticGradientsMatchFiniteDifferences) {
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        ErfEdgeModel e{rng.uniform(0.5, 3), rng.uniform(-3, 3), rng.uniform(0.5, 8), rng.uniform(2, 10),
                       rng.uniform(-0.1, 0.1), rng.uniform(-1, 1)};
        const double x = rng.uniform(-8, 8);
        EXPECT_LT(max_gradient_error(
                      e, [&](const auto& p) { return ErfEdgeModel::from_params(p)(x); },
                      [&](const auto& m, auto& g) { m.gradient(x, g); }),
                  1e-4);

        Gaussian2DModel g{rng.uniform(1, 100), rng.uniform(5, 10), rng.uniform(5, 10), rng.uniform(0.8, 3),
                          rng.uniform(0.8, 3), rng.uniform(0, 5)};
        const double gx = rng.uniform(3, 12), gy = rng.uniform(3, 12);
        EXPECT_LT(max_gradient_error(
                      g, [&](const auto& p) { return Gaussian2DModel::from_params(p)(gx, gy); },
                      [&](const auto& m, auto& gr) { m.gradient(gx, gy, gr); }),
                  1e-4);

        EllipticalAiryModel a{rng.uniform(1, 100), rng.uniform(5, 10), rng.uniform(5, 10), rng.uniform(2, 4),
                              rng.uniform(1, 2), rng.uniform(-80, 80), rng.uniform(0, 5)};
        const double ax = rng.uniform(3, 12), ay = rng.uniform(3, 12);
        EXPECT_LT(max_gradient_error(
                      a, [&](const auto& p) { return EllipticalAiryModel::from_params(p)(ax, ay); },
                      [&](const auto& m, auto& gr) { m.gradient(ax, ay, gr); }),
                  1e-4);
    }
}

TEST(Models, LineGradientsMatchFiniteDifferences) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        TripleGaussianModel t;
        for (int i = 0; i < 3; ++i) {
            t.amplitude[i] = rng.uniform(5, 100);
            t.center[i] = rng.uniform(-1, 1) + 15.0 * (i - 1);
            t.width[i] = rng.uniform(1, 4);
        }
        t.slope = rng.uniform(-0.5, 0.5);
        t.offset = rng.uniform(0, 50);
        const double x = rng.uniform(-25, 25);
        EXPECT_LT(max_gradient_error(
                      t, [&](const auto& p) { return TripleGaussianModel::from_params(p)(x); },
                      [&](const auto& m, auto& g) { m.gradient(x, g); }),
                  1e-4);

        const double ref = rng.uniform(930, 940);
        GaussianLineModel l{rng.uniform(10, 2000), ref + rng.uniform(-0.2, 0.2), rng.uniform(0.02, 0.2), rng.uniform(-5, 5),
                            rng.uniform(0, 50), ref};
        const double lx = l.center + rng.uniform(-3, 3) * l.width;
        EXPECT_LT(max_gradient_error(
                      l, [&](const auto& p) { return GaussianLineModel::from_params(p, ref)(lx); },
                      [&](const auto& m, auto& g) { m.gradient(lx, g); }, 1e-8),
                  1e-4);
    }
}

TEST(Models, SelfFitRecoversParameters) {
    Rng rng(123);
    // Gaussian2D on a 15x15 grid
    Gaussian2DModel truth{500.0, 7.3, 6.8, 1.6, 2.1, 12.0};
    Image img(15, 15);
    for (int y = 0; y < 15; ++y)
        for (int x = 0; x < 15; ++x) img(x, y) = truth(x, y);
    auto init = truth;
    init.amplitude *= 1.1, init.x0 *= 0.97, init.y0 *= 1.04, init.sigma_x *= 1.1, init.sigma_y *= 0.9, init.offset *= 1.1;
    const auto res = lm_fit(image_fit_problem(img, init));
    const auto p = truth.params();
    for (int j = 0; j < Gaussian2DModel::kParams; ++j) EXPECT_NEAR(res.params[j], p[j], 1e-6 * std::fabs(p[j]));

    // erf edge, width fixed
    ErfEdgeModel edge{40.0, 20.3, 6.0, 8.5, 0.02, 3.0};
    std::vector<double> xs, ys;
    for (int i = 0; i < 41; ++i) xs.push_back(i), ys.push_back(edge(i));
    auto e0 = edge;
    e0.amplitude *= 0.9, e0.center *= 1.02, e0.sigma *= 1.1, e0.slope *= 1.1, e0.offset *= 0.9;
    auto pb = curve_fit_problem(xs, ys, e0);
    pb.fixed = {false, false, false, true, false, false};
    const auto er = lm_fit(pb);
    const auto ep = edge.params();
    for (int j = 0; j < ErfEdgeModel::kParams; ++j) EXPECT_NEAR(er.params[j], ep[j], 1e-5 * std::fabs(ep[j]));

    // triple gaussian
    TripleGaussianModel tg;
    tg.amplitude = {80.0, 120.0, 70.0};
    tg.center = {12.0, 20.0, 28.5};
    tg.width = {1.8, 2.5, 1.7};
    tg.slope = 0.3;
    tg.offset = 10.0;
    xs.clear(), ys.clear();
    for (int i = 0; i < 41; ++i) xs.push_back(i), ys.push_back(tg(i));
    auto t0 = tg;
    for (int i = 0; i < 3; ++i) t0.amplitude[i] *= 1.1, t0.center[i] *= 1.02, t0.width[i] *= 0.9;
    t0.slope *= 1.1, t0.offset *= 0.9;
    const auto tr = lm_fit(curve_fit_problem(xs, ys, t0));
    const auto tp = tg.params();
    for (int j = 0; j < TripleGaussianModel::kParams; ++j) EXPECT_NEAR(tr.params[j], tp[j], 1e-5 * std::fabs(tp[j]));

    // elliptical airy
    EllipticalAiryModel ea{300.0, 7.2, 7.6, 3.2, 2.4, 25.0, 5.0};
    Image ai(15, 15);
    for (int y = 0; y < 15; ++y)
        for (int x = 0; x < 15; ++x) ai(x, y) = ea(x, y);
    auto a0 = ea;
    a0.amplitude *= 1.1, a0.x0 *= 1.03, a0.y0 *= 0.97, a0.scale_major *= 1.1, a0.scale_minor *= 0.9;
    a0.orientation_deg *= 1.1, a0.offset *= 1.1;
    const auto ar = lm_fit(image_fit_problem(ai, a0));
    const auto ap = ea.params();
    for (int j = 0; j < EllipticalAiryModel::kParams; ++j) EXPECT_NEAR(ar.params[j], ap[j], 1e-5 * std::fabs(ap[j]));

    // spectral line
    GaussianLineModel line{900.0, 935.0, 0.05, 20.0, 100.0, 935.0};
    xs.clear(), ys.clear();
    for (int i = 0; i < 21; ++i) xs.push_back(934.5 + 0.05 * i), ys.push_back(line(xs.back()));
    auto l0 = line;
    l0.amplitude *= 1.1, l0.center += 0.01, l0.width *= 1.1, l0.slope *= 0.9, l0.offset *= 1.1;
    const auto lr = lm_fit(curve_fit_problem(xs, ys, l0));
    const auto lp = line.params();
    for (int j = 0; j < GaussianLineModel::kParams; ++j) EXPECT_NEAR(lr.params[j], lp[j], 1e-5 * std::fabs(lp[j]));
}
