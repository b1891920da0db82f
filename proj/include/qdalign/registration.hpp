#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qdalign/error.hpp"
#include "qdalign/markers.hpp"

namespace qdalign {

/// One cross seen in the image (nm, image frame) together with its node in the grid frame.
struct ControlPoint {
    double observed_x_nm = 0.0;
    double observed_y_nm = 0.0;
    double unc_x_nm = 1.0;  ///< one standard deviation
    double unc_y_nm = 1.0;
    double nominal_x_nm = 0.0;
    double nominal_y_nm = 0.0;
};

enum class TransformKind { similarity, affine };

/// Maps image-frame nm to grid-frame nm: g = M·p + t. For a similarity M = s·R(θ).
struct FrameTransform {
    TransformKind kind = TransformKind::similarity;
    double rotation_deg = 0.0;
    double scale = 1.0;
    double tx_nm = 0.0;
    double ty_nm = 0.0;
    Eigen::Matrix2d matrix = Eigen::Matrix2d::Identity();
    double residual_rms_nm = 0.0;
    /// covariance of (m11, m21, m12, m22, tx, ty) propagated from the cross uncertainties
    Eigen::Matrix<double, 6, 6> covariance = Eigen::Matrix<double, 6, 6>::Zero();
    std::optional<std::size_t> anchor;  ///< control point whose position pins the translation
    std::vector<std::string> warnings;

    Eigen::Vector2d apply(double x_nm, double y_nm) const { return matrix * Eigen::Vector2d(x_nm, y_nm) + Eigen::Vector2d(tx_nm, ty_nm); }

    /// Covariance of the mapped position of an exactly known image point.
    Eigen::Matrix2d frame_covariance(double x_nm, double y_nm) const {
        Eigen::Matrix<double, 2, 6> g;
        g << x_nm, 0.0, y_nm, 0.0, 1.0, 0.0,
             0.0, x_nm, 0.0, y_nm, 0.0, 1.0;
        return g * covariance * g.transpose();
    }
};

struct TransformOptions {
    TransformKind kind = TransformKind::similarity;
    /// Pin the translation to this control point (the grid square's origin cross) and fit the linear
    /// part to the remaining crosses, so that origin and orientation errors are independent.
    /// Plain least squares over all crosses when empty.
    std::optional<std::size_t> anchor;
    double misidentification_factor = 3.0;
    double scale_min = 0.9;
    double scale_max = 1.1;
};

namespace detail {

inline std::array<double, 6> solve_transform_params(const std::vector<ControlPoint>& pts, const TransformOptions& opt) {
    const std::size_t n = pts.size();
    const std::size_t need = opt.kind == TransformKind::similarity ? 2 : 3;
    // with an anchor, the linear part comes from the other crosses when they suffice
    const bool skip_anchor = opt.anchor && n - 1 >= need;
    std::vector<double> w(n);
    double sw = 0.0;
    Eigen::Vector2d pm = Eigen::Vector2d::Zero(), qm = Eigen::Vector2d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = skip_anchor && i == *opt.anchor ? 0.0 : 2.0 / (pts[i].unc_x_nm * pts[i].unc_x_nm + pts[i].unc_y_nm * pts[i].unc_y_nm);
        sw += w[i];
        pm += w[i] * Eigen::Vector2d(pts[i].observed_x_nm, pts[i].observed_y_nm);
        qm += w[i] * Eigen::Vector2d(pts[i].nominal_x_nm, pts[i].nominal_y_nm);
    }
    pm /= sw;
    qm /= sw;
    Eigen::Matrix2d m;
    if (opt.kind == TransformKind::similarity) {
        double num_a = 0, num_b = 0, den = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double px = pts[i].observed_x_nm - pm.x(), py = pts[i].observed_y_nm - pm.y();
            const double qx = pts[i].nominal_x_nm - qm.x(), qy = pts[i].nominal_y_nm - qm.y();
            num_a += w[i] * (px * qx + py * qy);
            num_b += w[i] * (px * qy - py * qx);
            den += w[i] * (px * px + py * py);
        }
        if (!(den > 0.0)) throw DegenerateError("solve_transform: control points coincide");
        const double a = num_a / den, b = num_b / den;
        m << a, -b, b, a;
    } else {
        Eigen::Matrix2d spp = Eigen::Matrix2d::Zero(), sqp = Eigen::Matrix2d::Zero();
        for (std::size_t i = 0; i < n; ++i) {
            const Eigen::Vector2d p(pts[i].observed_x_nm - pm.x(), pts[i].observed_y_nm - pm.y());
            const Eigen::Vector2d q(pts[i].nominal_x_nm - qm.x(), pts[i].nominal_y_nm - qm.y());
            spp += w[i] * p * p.transpose();
            sqp += w[i] * q * p.transpose();
        }
        if (!(std::fabs(spp.determinant()) > 1e-12 * spp.squaredNorm())) throw DegenerateError("solve_transform: control points are collinear");
        m = sqp * spp.inverse();
    }
    Eigen::Vector2d t;
    if (opt.anchor) {
        const auto& a = pts[*opt.anchor];
        t = Eigen::Vector2d(a.nominal_x_nm, a.nominal_y_nm) - m * Eigen::Vector2d(a.observed_x_nm, a.observed_y_nm);
    } else {
        t = qm - m * pm;
    }
    return {m(0, 0), m(1, 0), m(0, 1), m(1, 1), t.x(), t.y()};
}

}  // namespace detail

/// Weighted least-squares transform from observed cross centers to their grid nodes. The parameter
/// covariance is propagated from the per-cross uncertainties through the solve.
inline FrameTransform solve_transform(const std::vector<ControlPoint>& pts, const TransformOptions& opt = {}) {
    const std::size_t need = opt.kind == TransformKind::similarity ? 2 : 3;
    if (pts.size() < need)
        throw DegenerateError(fmt::format("solve_transform: {} crosses cannot fix a {} transform (need {})", pts.size(),
                                          opt.kind == TransformKind::similarity ? "similarity" : "affine", need));
    if (opt.anchor && *opt.anchor >= pts.size()) throw ContractError("solve_transform: anchor index out of range");
    for (const auto& p : pts)
        if (!(p.unc_x_nm > 0.0 && p.unc_y_nm > 0.0)) throw ContractError("solve_transform: cross uncertainties must be positive");

    const auto par = detail::solve_transform_params(pts, opt);
    FrameTransform t;
    t.kind = opt.kind;
    t.anchor = opt.anchor;
    t.matrix << par[0], par[2], par[1], par[3];
    t.tx_nm = par[4];
    t.ty_nm = par[5];
    t.rotation_deg = std::atan2(par[1], par[0]) * 180.0 / std::numbers::pi;
    t.scale = std::sqrt(std::fabs(t.matrix.determinant()));
    if (!(t.scale >= opt.scale_min && t.scale <= opt.scale_max))
        throw DegenerateError(fmt::format("solve_transform: scale {:.4f} outside [{}, {}]; crosses misidentified?", t.scale,
                                          opt.scale_min, opt.scale_max));

    double ss = 0.0;
    std::vector<double> uncs;
    for (const auto& p : pts) {
        const Eigen::Vector2d r = t.apply(p.observed_x_nm, p.observed_y_nm) - Eigen::Vector2d(p.nominal_x_nm, p.nominal_y_nm);
        ss += r.squaredNorm();
        uncs.push_back(std::hypot(p.unc_x_nm, p.unc_y_nm) / std::numbers::sqrt2);
    }
    t.residual_rms_nm = std::sqrt(ss / static_cast<double>(pts.size()));
    std::nth_element(uncs.begin(), uncs.begin() + static_cast<std::ptrdiff_t>(uncs.size() / 2), uncs.end());
    const double median_unc = uncs[uncs.size() / 2];
    if (t.residual_rms_nm > opt.misidentification_factor * median_unc)
        t.warnings.push_back(fmt::format("residual rms {:.2f} nm exceeds {}x the median cross uncertainty ({:.2f} nm); "
                                         "check the cross identification",
                                         t.residual_rms_nm, opt.misidentification_factor, median_unc));

    // linear propagation: the parameters are smooth functions of the observed positions
    Eigen::Matrix<double, 6, Eigen::Dynamic> jac(6, 2 * pts.size());
    Eigen::VectorXd var(2 * pts.size());
    auto work = pts;
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (int axis = 0; axis < 2; ++axis) {
            double& coord = axis == 0 ? work[i].observed_x_nm : work[i].observed_y_nm;
            const double orig = coord;
            const double h = 1e-3 * std::max(1.0, axis == 0 ? pts[i].unc_x_nm : pts[i].unc_y_nm);
            coord = orig + h;
            const auto up = detail::solve_transform_params(work, opt);
            coord = orig - h;
            const auto dn = detail::solve_transform_params(work, opt);
            coord = orig;
            for (int k = 0; k < 6; ++k) jac(k, static_cast<Eigen::Index>(2 * i + axis)) = (up[k] - dn[k]) / (2.0 * h);
            const double u = axis == 0 ? pts[i].unc_x_nm : pts[i].unc_y_nm;
            var[static_cast<Eigen::Index>(2 * i + axis)] = u * u;
        }
    t.covariance = jac * var.asDiagonal() * jac.transpose();
    return t;
}

/// Control points from fitted crosses and their grid nodes.
inline std::vector<ControlPoint> control_points(const std::vector<CrossFit>& fits, const std::vector<CrossDetection>& nodes) {
    if (fits.size() != nodes.size()) throw ContractError("control_points: one grid node per cross fit needed");
    std::vector<ControlPoint> out;
    for (std::size_t i = 0; i < fits.size(); ++i)
        out.push_back({fits[i].center_x_nm, fits[i].center_y_nm, fits[i].unc_x_nm, fits[i].unc_y_nm, nodes[i].nominal_x_nm,
                       nodes[i].nominal_y_nm});
    return out;
}

enum class PointSource { marker, emitter, waveguide };

inline std::string to_string(PointSource s) {
    switch (s) {
        case PointSource::marker: return "marker";
        case PointSource::emitter: return "emitter";
        case PointSource::waveguide: return "waveguide";
    }
    return "?";
}

struct GlobalPoint {
    double x_nm = 0.0;
    double y_nm = 0.0;
    double unc_nm = 0.0;        ///< total 2D (radial) uncertainty: √(point² + frame²)
    double point_unc_nm = 0.0;  ///< radial uncertainty of the measured position alone
    double frame_unc_nm = 0.0;  ///< radial uncertainty contributed by the transform
    PointSource source = PointSource::emitter;
    std::string device_class;
    Eigen::Matrix2d covariance = Eigen::Matrix2d::Zero();
};

/// Quadrature sum of a point uncertainty and a marker-frame uncertainty.
inline double combine_uncertainty(double point_unc_nm, double frame_unc_nm) { return std::hypot(point_unc_nm, frame_unc_nm); }

/// Maps an image-frame point with per-axis uncertainty into the grid frame. The total covariance is
/// the mapped point covariance plus the transform covariance at the point; the reported uncertainty is
/// its radial form √(σx² + σy²).
inline GlobalPoint to_global(double x_nm, double y_nm, double unc_x_nm, double unc_y_nm, const FrameTransform& t,
                             PointSource source = PointSource::emitter) {
    if (!(unc_x_nm >= 0.0 && unc_y_nm >= 0.0)) throw ContractError("to_global: uncertainties must be non-negative");
    GlobalPoint g;
    const Eigen::Vector2d q = t.apply(x_nm, y_nm);
    g.x_nm = q.x();
    g.y_nm = q.y();
    g.source = source;
    const Eigen::Matrix2d point = t.matrix * Eigen::Vector2d(unc_x_nm * unc_x_nm, unc_y_nm * unc_y_nm).asDiagonal() * t.matrix.transpose();
    const Eigen::Matrix2d frame = t.frame_covariance(x_nm, y_nm);
    g.covariance = point + frame;
    g.point_unc_nm = std::sqrt(std::max(point.trace(), 0.0));
    g.frame_unc_nm = std::sqrt(std::max(frame.trace(), 0.0));
    g.unc_nm = combine_uncertainty(g.point_unc_nm, g.frame_unc_nm);
    return g;
}

struct DeviceMatch {
    std::size_t pre = 0;
    std::size_t post = 0;
    double distance_nm = 0.0;
};

struct Correlation {
    std::vector<DeviceMatch> matches;
    std::vector<std::size_t> unmatched_pre;
    std::vector<std::size_t> unmatched_post;
    double yield = 0.0;        ///< matched / number of pre-located devices
    double yield_error = 0.0;  ///< binomial standard error
    std::map<std::string, std::pair<std::size_t, std::size_t>> per_class;  ///< class → (matched, total)
};

/// Greedy nearest-neighbour matching of pre-fabrication locations to post-fabrication detections:
/// pairs closer than `radius_nm` are taken in order of increasing distance, each point used once.
inline Correlation correlate_devices(const std::vector<GlobalPoint>& pre, const std::vector<GlobalPoint>& post, double radius_nm = 150.0) {
    if (!(radius_nm > 0.0)) throw ContractError("correlate_devices: radius must be positive");
    std::vector<DeviceMatch> cand;
    for (std::size_t i = 0; i < pre.size(); ++i)
        for (std::size_t j = 0; j < post.size(); ++j) {
            const double d = std::hypot(pre[i].x_nm - post[j].x_nm, pre[i].y_nm - post[j].y_nm);
            if (d <= radius_nm) cand.push_back({i, j, d});
        }
    std::sort(cand.begin(), cand.end(), [](const DeviceMatch& a, const DeviceMatch& b) {
        return std::tie(a.distance_nm, a.pre, a.post) < std::tie(b.distance_nm, b.pre, b.post);
    });
    std::vector<bool> used_pre(pre.size(), false), used_post(post.size(), false);
    Correlation c;
    for (const auto& m : cand) {
        if (used_pre[m.pre] || used_post[m.post]) continue;
        used_pre[m.pre] = used_post[m.post] = true;
        c.matches.push_back(m);
    }
    std::sort(c.matches.begin(), c.matches.end(), [](const DeviceMatch& a, const DeviceMatch& b) { return a.pre < b.pre; });
    for (std::size_t i = 0; i < pre.size(); ++i) {
        auto& cls = c.per_class[pre[i].device_class];
        ++cls.second;
        if (used_pre[i]) ++cls.first;
        else c.unmatched_pre.push_back(i);
    }
    for (std::size_t j = 0; j < post.size(); ++j)
        if (!used_post[j]) c.unmatched_post.push_back(j);
    if (!pre.empty()) {
        const double n = static_cast<double>(pre.size());
        c.yield = static_cast<double>(c.matches.size()) / n;
        c.yield_error = std::sqrt(c.yield * (1.0 - c.yield) / n);
    }
    return c;
}

inline nlohmann::json to_json(const FrameTransform& t) {
    nlohmann::json j;
    j["kind"] = t.kind == TransformKind::similarity ? "similarity" : "affine";
    j["rotation_deg"] = t.rotation_deg;
    j["scale"] = t.scale;
    j["translation_nm"] = {t.tx_nm, t.ty_nm};
    j["matrix"] = {{t.matrix(0, 0), t.matrix(0, 1)}, {t.matrix(1, 0), t.matrix(1, 1)}};
    j["residual_rms_nm"] = t.residual_rms_nm;
    std::vector<std::vector<double>> cov(6, std::vector<double>(6));
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 6; ++c) cov[r][c] = t.covariance(r, c);
    j["covariance"] = cov;
    j["anchor"] = t.anchor ? nlohmann::json(*t.anchor) : nlohmann::json(nullptr);
    j["warnings"] = t.warnings;
    return j;
}

inline FrameTransform transform_from_json(const nlohmann::json& j) {
    try {
        FrameTransform t;
        t.kind = j.at("kind").get<std::string>() == "affine" ? TransformKind::affine : TransformKind::similarity;
        t.rotation_deg = j.at("rotation_deg").get<double>();
        t.scale = j.at("scale").get<double>();
        t.tx_nm = j.at("translation_nm").at(0).get<double>();
        t.ty_nm = j.at("translation_nm").at(1).get<double>();
        const auto& m = j.at("matrix");
        t.matrix << m.at(0).at(0).get<double>(), m.at(0).at(1).get<double>(), m.at(1).at(0).get<double>(), m.at(1).at(1).get<double>();
        t.residual_rms_nm = j.at("residual_rms_nm").get<double>();
        if (j.contains("covariance"))
            for (int r = 0; r < 6; ++r)
                for (int c = 0; c < 6; ++c) t.covariance(r, c) = j["covariance"].at(r).at(c).get<double>();
        if (j.contains("anchor") && !j["anchor"].is_null()) t.anchor = j["anchor"].get<std::size_t>();
        if (j.contains("warnings")) t.warnings = j["warnings"].get<std::vector<std::string>>();
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("transform JSON: ") + e.what());
    }
}

}  // namespace qdalign
