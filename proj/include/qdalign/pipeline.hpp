#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "qdalign/csv.hpp"
#include "qdalign/emitters.hpp"
#include "qdalign/error.hpp"
#include "qdalign/image.hpp"
#include "qdalign/imgproc.hpp"
#include "qdalign/markers.hpp"
#include "qdalign/registration.hpp"
#include "qdalign/waveguides.hpp"

namespace qdalign {

/// A failure tagged with the pipeline stage it happened in. `config` marks problems with the
/// inputs themselves (missing or unreadable files, bad settings) rather than with the data.
class PipelineError : public Error {
public:
    PipelineError(std::string stage, const std::string& what, bool config = false)
        : Error(what), stage_(std::move(stage)), config_(config) {}
    const std::string& stage() const noexcept { return stage_; }
    bool is_config() const noexcept { return config_; }

private:
    std::string stage_;
    bool config_;
};

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first exception is rethrown after all
/// workers stop.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    const auto workers = static_cast<std::size_t>(std::clamp(jobs, 1, 64));
    if (workers == 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex m;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(m);
                    if (!err) err = std::current_exception();
                    next = n;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

/// Loads an input image, reporting a missing or malformed file as a configuration error of `stage`.
inline Image load_stage_image(const std::filesystem::path& path, const std::string& stage) {
    if (path.empty()) throw PipelineError(stage, fmt::format("{}: no image given", stage), true);
    if (!std::filesystem::exists(path)) throw PipelineError(stage, fmt::format("{}: image '{}' not found", stage, path.string()), true);
    try {
        return load_image(path);
    } catch (const Error& e) {
        throw PipelineError(stage, e.what(), true);
    }
}

/// Image point after `rotate(img, angle_deg)`.
inline std::array<double, 2> rotated_position(const Image& img, double angle_deg, double x_px, double y_px) {
    const double t = angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(t), s = std::sin(t);
    const double cx = 0.5 * (img.width() - 1), cy = 0.5 * (img.height() - 1);
    const double dx = x_px - cx, dy = y_px - cy;
    return {cx + c * dx - s * dy, cy + s * dx + c * dy};
}

struct LocateOptions {
    GridGeometry grid;
    TransformKind transform = TransformKind::similarity;
    double resample_threshold_deg = 1.0;  ///< smaller rotations are left to the transform
    SpotDetectOptions spots;
};

struct LocatedCross {
    CrossDetection node;
    CrossFit fit;
};

struct LocatedEmitter {
    EmitterFit fit;  ///< image frame (after any rotation correction)
    GlobalPoint global;
};

struct LocateResult {
    RotationEstimate rotation;
    bool resampled = false;
    std::vector<LocatedCross> crosses;
    FrameTransform transform;
    std::vector<LocatedEmitter> emitters;
    std::vector<std::string> warnings;
};

/// Pre-fabrication localization of the QDs of one grid square: rotation check, background removal,
/// cross detection and fitting, marker-frame transform, then Gaussian fits of every QD spot mapped
/// into the grid frame with their total uncertainty δ.
inline LocateResult locate(const Image& markers, const Image& emitters, const LocateOptions& opt = {}) {
    LocateResult r;
    if (markers.pitch_nm() != emitters.pitch_nm() || markers.width() != emitters.width() || markers.height() != emitters.height())
        throw PipelineError("emitters", "locate: marker and emitter images differ in size or pitch", true);

    Image work = markers;
    try {
        r.rotation = estimate_rotation(markers);
    } catch (const NoFeaturesError& e) {
        throw PipelineError("imgproc", e.what());
    }
    if (std::fabs(r.rotation.angle_deg) > opt.resample_threshold_deg) {
        work = rotate(markers, -r.rotation.angle_deg);
        r.resampled = true;
    }
    const auto [residual, model] = subtract_background(work);
    const Image shadow = invert_residual(work, model);

    const auto nodes = detect_crosses(shadow, opt.grid);
    const double d_px = opt.grid.arm_width_nm / markers.pitch_nm();
    std::vector<CrossFit> fits;
    std::vector<CrossDetection> used;
    std::optional<std::size_t> anchor;
    for (const auto& n : nodes) {
        try {
            auto f = fit_cross(shadow, n.roi, d_px);
            if (n.node_i == 0 && n.node_j == 0) anchor = used.size();
            used.push_back(n);
            fits.push_back(f);
            r.crosses.push_back({n, std::move(f)});
        } catch (const Error& e) {
            r.warnings.push_back(fmt::format("cross ({}, {}) discarded: {}", n.node_i, n.node_j, e.what()));
        }
    }
    if (fits.empty()) throw PipelineError("markers", "locate: no alignment crosses found");
    if (!anchor) r.warnings.push_back("cross (0, 0) not found; transform fitted without an anchor");
    try {
        r.transform = solve_transform(control_points(fits, used), {opt.transform, anchor});
    } catch (const Error& e) {
        throw PipelineError("registration", e.what());
    }
    for (const auto& w : r.transform.warnings) r.warnings.push_back(w);

    const auto rois = detect_spots(emitters, opt.spots);
    for (std::size_t k = 0; k < rois.size(); ++k) {
        try {
            auto f = fit_emitter_gaussian(emitters, rois[k]);
            if (r.resampled) {
                const double p = emitters.pitch_nm();
                const auto q = rotated_position(emitters, -r.rotation.angle_deg, f.x_nm / p, f.y_nm / p);
                f.x_nm = q[0] * p;
                f.y_nm = q[1] * p;
            }
            r.emitters.push_back({f, to_global(f.x_nm, f.y_nm, f.unc_x_nm, f.unc_y_nm, r.transform)});
        } catch (const Error& e) {
            r.warnings.push_back(fmt::format("spot {} discarded: {}", k, e.what()));
        }
    }
    if (r.emitters.empty()) throw PipelineError("emitters", "locate: no QD spots could be fitted");
    return r;
}

inline std::string markers_csv(const LocateResult& r) {
    CsvTable t;
    t.header = {"cross_id", "x_nm", "y_nm", "unc_x_nm", "unc_y_nm", "n_sections"};
    for (const auto& c : r.crosses)
        t.rows.push_back({fmt::format("{}_{}", c.node.node_i, c.node.node_j), format_double(c.fit.center_x_nm),
                          format_double(c.fit.center_y_nm), format_double(c.fit.unc_x_nm), format_double(c.fit.unc_y_nm),
                          std::to_string(std::min(c.fit.n_sections_used[0], c.fit.n_sections_used[1]))});
    return format_csv(t);
}

/// Image-frame fits followed by grid-frame coordinates and δ.
inline std::string emitters_csv(const LocateResult& r) {
    CsvTable t;
    t.header = {"emitter_id", "x_nm", "y_nm", "model", "N", "b2", "unc_x_nm", "unc_y_nm", "grid_x_nm", "grid_y_nm", "delta_nm"};
    for (std::size_t i = 0; i < r.emitters.size(); ++i) {
        const auto& e = r.emitters[i];
        t.rows.push_back({fmt::format("qd{:03}", i), format_double(e.fit.x_nm), format_double(e.fit.y_nm), to_string(e.fit.model),
                          format_double(e.fit.photons), format_double(e.fit.b2), format_double(e.fit.unc_x_nm),
                          format_double(e.fit.unc_y_nm), format_double(e.global.x_nm), format_double(e.global.y_nm),
                          format_double(e.global.unc_nm)});
    }
    return format_csv(t);
}

struct DeviceOptions {
    Orientation orientation = Orientation::along_x;
    double half_across_nm = 1'800.0;  ///< guide ROI half-height around the QD
    double half_along_nm = 6'000.0;   ///< guide ROI half-length around the QD
    double edge_offset_nm = 900.0;    ///< nominal trench-edge distance from the guide axis
    double border_px = 8.0;           ///< the guide ROI keeps this far from the frame edge
    SpotDetectOptions spots;
};

struct DeviceMeasurement {
    EmitterFit qd;
    WaveguideAxis axis;
    Misalignment misalignment;
    Roi guide_roi;
};

/// Post-fabrication misalignment of one device: the brightest spot of the QD image is fitted with
/// the elliptical Airy model and the guide axis is fitted in a window of the wetting-layer image
/// around the QD.
inline DeviceMeasurement measure_device(const Image& wetting, const Image& qd_img, const DeviceOptions& opt = {}) {
    if (wetting.pitch_nm() != qd_img.pitch_nm() || wetting.width() != qd_img.width() || wetting.height() != qd_img.height())
        throw PipelineError("emitters", "device: wetting-layer and QD images differ in size or pitch", true);
    DeviceMeasurement m;
    const auto rois = detect_spots(qd_img, opt.spots);
    if (rois.empty()) throw PipelineError("emitters", "device: no QD spot found");
    std::size_t best = 0;
    double peak = -1.0;
    for (std::size_t k = 0; k < rois.size(); ++k) {
        const auto& r = rois[k];
        for (int y = r.y0; y < r.y0 + r.height; ++y)
            for (int x = r.x0; x < r.x0 + r.width; ++x)
                if (qd_img(x, y) > peak) peak = qd_img(x, y), best = k;
    }
    try {
        m.qd = fit_emitter_airy(qd_img, rois[best]);
    } catch (const Error& e) {
        throw PipelineError("emitters", e.what());
    }

    const double p = wetting.pitch_nm();
    const bool along_x = opt.orientation == Orientation::along_x;
    const double along_c = (along_x ? m.qd.x_nm : m.qd.y_nm) / p, across_c = (along_x ? m.qd.y_nm : m.qd.x_nm) / p;
    const int n_along = along_x ? wetting.width() : wetting.height();
    const int n_across = along_x ? wetting.height() : wetting.width();
    const int border = static_cast<int>(std::ceil(opt.border_px));
    const int a0 = std::max(border, static_cast<int>(std::floor(along_c - opt.half_along_nm / p)));
    const int a1 = std::min(n_along - 1 - border, static_cast<int>(std::ceil(along_c + opt.half_along_nm / p)));
    const int half = static_cast<int>(std::lround(opt.half_across_nm / p));
    const int c0 = static_cast<int>(std::lround(across_c)) - half, c1 = c0 + 2 * half;
    if (a1 - a0 < 20 || c0 < 0 || c1 >= n_across)
        throw PipelineError("waveguides", "device: the QD is too close to the frame edge for a guide window");
    m.guide_roi = along_x ? Roi{a0, c0, a1 - a0 + 1, c1 - c0 + 1} : Roi{c0, a0, c1 - c0 + 1, a1 - a0 + 1};
    WaveguideFitOptions wo;
    wo.section.edge_offset_px = opt.edge_offset_nm / p;
    try {
        m.axis = fit_waveguide(wetting, m.guide_roi, opt.orientation, wo);
    } catch (const Error& e) {
        throw PipelineError("waveguides", e.what());
    }
    m.misalignment = misalign(m.qd, m.axis, opt.orientation);
    return m;
}

}  // namespace qdalign
