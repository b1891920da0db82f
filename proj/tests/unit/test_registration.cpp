#include <gtest/gtest.h>

#include <cmath>

#include "qdalign/random.hpp"
#include "qdalign/registration.hpp"

using namespace qdalign;

namespace {

std::vector<ControlPoint> square(double pitch = 40'000.0) {
    std::vector<ControlPoint> pts;
    for (int j = 0; j < 2; ++j)
        for (int i = 0; i < 2; ++i)
            pts.push_back({i * pitch, j * pitch, 3.1, 3.1, i * pitch, j * pitch});
    return pts;
}

/// Image-frame position of grid point g under a rotation θ about the origin and a shift.
std::array<double, 2> observe(double gx, double gy, double theta_deg, double sx, double sy) {
    const double t = theta_deg * std::numbers::pi / 180.0;
    // g = R(θ)·p + s  ⇒  p = R(−θ)·(g − s)
    const double x = gx - sx, y = gy - sy;
    return {std::cos(t) * x + std::sin(t) * y, -std::sin(t) * x + std::cos(t) * y};
}

}  // namespace

TEST(Registration, IdentityTransform) {
    const auto t = solve_transform(square());
    EXPECT_NEAR(t.rotation_deg, 0.0, 1e-12);
    EXPECT_NEAR(t.scale, 1.0, 1e-12);
    EXPECT_NEAR(t.tx_nm, 0.0, 1e-9);
    EXPECT_NEAR(t.ty_nm, 0.0, 1e-9);
    EXPECT_NEAR(t.residual_rms_nm, 0.0, 1e-9);
    EXPECT_TRUE(t.warnings.empty());
}

TEST(Registration, PureTranslation) {
    auto pts = square();
    for (auto& p : pts) p.nominal_x_nm += 100.0, p.nominal_y_nm -= 50.0;
    for (auto anchor : {std::optional<std::size_t>{}, std::optional<std::size_t>{0}}) {
        const auto t = solve_transform(pts, {TransformKind::similarity, anchor});
        EXPECT_NEAR(t.tx_nm, 100.0, 1e-9);
        EXPECT_NEAR(t.ty_nm, -50.0, 1e-9);
        EXPECT_NEAR(t.rotation_deg, 0.0, 1e-12);
    }
}

TEST(Registration, NoiseFreeRoundTrip) {
    auto pts = square();
    for (auto& p : pts) {
        const auto o = observe(p.nominal_x_nm, p.nominal_y_nm, 0.37, 1234.5, -987.0);
        p.observed_x_nm = 1.002 * o[0];
        p.observed_y_nm = 1.002 * o[1];
    }
    for (auto kind : {TransformKind::similarity, TransformKind::affine}) {
        const auto t = solve_transform(pts, {kind});
        EXPECT_LT(t.residual_rms_nm, 1e-6);
        for (const auto& p : pts) {
            const auto g = t.apply(p.observed_x_nm, p.observed_y_nm);
            EXPECT_NEAR(g.x(), p.nominal_x_nm, 1e-6);
            EXPECT_NEAR(g.y(), p.nominal_y_nm, 1e-6);
        }
    }
}

TEST(Registration, NoisyRotationRecovered) {
    Rng rng(3);
    int inside_rot = 0, inside_tx = 0;
    const int trials = 200;
    for (int k = 0; k < trials; ++k) {
        auto pts = square();
        for (auto& p : pts) {
            const auto o = observe(p.nominal_x_nm, p.nominal_y_nm, 0.2, 37.0, 12.0);
            p.observed_x_nm = o[0] + 3.1 * rng.normal();
            p.observed_y_nm = o[1] + 3.1 * rng.normal();
        }
        const auto t = solve_transform(pts);
        // rotation variance from the (m11, m21) block: θ ≈ m21 for a near-identity transform
        const double sd_rot = std::sqrt(t.covariance(1, 1)) * 180.0 / std::numbers::pi;
        inside_rot += std::fabs(t.rotation_deg - 0.2) <= 2.0 * sd_rot;
        inside_tx += std::fabs(t.tx_nm - 37.0) <= 2.0 * std::sqrt(t.covariance(4, 4));
    }
    EXPECT_GE(inside_rot, 0.9 * trials);
    EXPECT_GE(inside_tx, 0.9 * trials);
}

TEST(Registration, FrameCovarianceMatchesMonteCarlo) {
    Rng rng(17);
    const int trials = 4000;
    double sx = 0, sxx = 0;
    FrameTransform last;
    for (int k = 0; k < trials; ++k) {
        auto pts = square();
        for (auto& p : pts) p.observed_x_nm += 3.1 * rng.normal(), p.observed_y_nm += 3.1 * rng.normal();
        last = solve_transform(pts, {TransformKind::similarity, std::size_t{0}});
        const double gx = last.apply(30'000.0, 10'000.0).x() - 30'000.0;
        sx += gx, sxx += gx * gx;
    }
    const double sd = std::sqrt(sxx / trials - (sx / trials) * (sx / trials));
    const double pred = std::sqrt(last.frame_covariance(30'000.0, 10'000.0)(0, 0));
    EXPECT_NEAR(sd / pred, 1.0, 0.06);
}

TEST(Registration, Underdetermined) {
    auto pts = square();
    pts.resize(1);
    EXPECT_THROW(solve_transform(pts), DegenerateError);
    pts = square();
    pts.resize(2);
    EXPECT_NO_THROW(solve_transform(pts));
    EXPECT_THROW(solve_transform(pts, {TransformKind::affine}), DegenerateError);
}

TEST(Registration, MisidentificationWarning) {
    auto pts = square();
    pts[3].nominal_x_nm += 200.0;  // a cross assigned to the wrong node
    const auto t = solve_transform(pts);
    EXPECT_FALSE(t.warnings.empty());
    pts = square();
    std::swap(pts[1].nominal_x_nm, pts[2].nominal_x_nm);
    std::swap(pts[1].nominal_y_nm, pts[2].nominal_y_nm);
    EXPECT_THROW(solve_transform(pts), DegenerateError);  // scale collapses
}

TEST(Registration, ToGlobal) {
    const auto ident = solve_transform(square());
    const auto g = to_global(12'345.0, 23'456.0, 0.6, 0.6, ident);
    EXPECT_NEAR(g.x_nm, 12'345.0, 1e-9);
    EXPECT_NEAR(g.y_nm, 23'456.0, 1e-9);
    EXPECT_NEAR(g.point_unc_nm, 0.6 * std::numbers::sqrt2, 1e-9);
    EXPECT_NEAR(g.unc_nm, std::hypot(g.point_unc_nm, g.frame_unc_nm), 1e-12);
    EXPECT_NEAR(combine_uncertainty(0.6, 4.86), 4.897, 1e-3);
    EXPECT_NEAR(combine_uncertainty(0.7, std::sqrt(9.2 * 9.2 - 0.49)), 9.2, 1e-12);
}

TEST(Registration, ToGlobalMonotone) {
    auto pts = square();
    const auto t1 = solve_transform(pts, {TransformKind::similarity, std::size_t{0}});
    for (auto& p : pts) p.unc_x_nm = p.unc_y_nm = 5.5;
    const auto t2 = solve_transform(pts, {TransformKind::similarity, std::size_t{0}});
    const auto a = to_global(20'000.0, 20'000.0, 0.6, 0.6, t1);
    const auto b = to_global(20'000.0, 20'000.0, 0.7, 0.7, t1);
    const auto c = to_global(20'000.0, 20'000.0, 0.6, 0.6, t2);
    EXPECT_LT(a.unc_nm, b.unc_nm);
    EXPECT_LT(a.unc_nm, c.unc_nm);
}

TEST(Registration, AnchoredFrameUncertainty) {
    // translation pinned to the origin cross, linear part from the other three: at the anchor the
    // frame uncertainty is that cross's own 2D uncertainty, growing with the lever arm
    const auto t = solve_transform(square(), {TransformKind::similarity, std::size_t{0}});
    const auto at_anchor = to_global(0.0, 0.0, 0.0, 0.0, t);
    EXPECT_NEAR(at_anchor.frame_unc_nm, 3.1 * std::numbers::sqrt2, 1e-6);
    const auto mid = to_global(20'000.0, 20'000.0, 0.6, 0.6, t);
    EXPECT_GT(mid.frame_unc_nm, at_anchor.frame_unc_nm);
    // the anchor cross does not enter the rotation: moving it only shifts the frame
    auto pts = square();
    pts[0].observed_x_nm += 5.0;
    const auto u = solve_transform(pts, {TransformKind::similarity, std::size_t{0}});
    EXPECT_NEAR(u.rotation_deg, 0.0, 1e-12);
    EXPECT_NEAR(u.tx_nm, -5.0, 1e-9);
}

TEST(Correlate, Yields) {
    std::vector<GlobalPoint> pre, post;
    Rng rng(2);
    for (int i = 0; i < 25; ++i) {
        GlobalPoint p;
        p.x_nm = 1000.0 * i;
        p.y_nm = 500.0 * (i % 3);
        p.device_class = i % 2 ? "nanoguide" : "phcw";
        pre.push_back(p);
        p.x_nm += 30.0 * rng.normal();
        post.push_back(p);
    }
    auto c = correlate_devices(pre, post);
    EXPECT_DOUBLE_EQ(c.yield, 1.0);
    EXPECT_EQ(c.per_class["nanoguide"].first, 12u);
    EXPECT_EQ(c.per_class["phcw"].second, 13u);
    // swap symmetry
    EXPECT_DOUBLE_EQ(correlate_devices(post, pre).yield, c.yield);
    // one dropout
    post.erase(post.begin() + 4);
    c = correlate_devices(pre, post);
    EXPECT_NEAR(c.yield, 24.0 / 25.0, 1e-12);
    EXPECT_EQ(c.unmatched_pre, std::vector<std::size_t>{4});
    EXPECT_NEAR(c.yield_error, std::sqrt(0.96 * 0.04 / 25), 1e-12);
    // everything displaced beyond the radius
    for (auto& p : post) p.y_nm += 1000.0;
    EXPECT_DOUBLE_EQ(correlate_devices(pre, post).yield, 0.0);
    EXPECT_THROW(correlate_devices(pre, post, 0.0), ContractError);
}

TEST(Registration, JsonRoundTrip) {
    auto pts = square();
    pts[2].observed_x_nm += 4.0;
    const auto t = solve_transform(pts, {TransformKind::similarity, std::size_t{0}});
    const auto j = to_json(t);
    const auto u = transform_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_DOUBLE_EQ(u.tx_nm, t.tx_nm);
    EXPECT_DOUBLE_EQ(u.matrix(1, 0), t.matrix(1, 0));
    EXPECT_DOUBLE_EQ(u.covariance(4, 4), t.covariance(4, 4));
    EXPECT_EQ(u.anchor, t.anchor);
    EXPECT_THROW(transform_from_json(nlohmann::json::parse("{}")), FormatError);
}
