#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "qdalign/error.hpp"
#include "qdalign/image.hpp"
#include "qdalign/imgproc.hpp"
#include "qdalign/random.hpp"
#include "qdalign/special.hpp"

namespace qdalign {

enum class ImagingMode { intrinsic_markers, intrinsic_emitters, doped_markers, doped_emitters };
enum class PsfKind { airy, gaussian };
enum class Orientation { along_x, along_y };

inline bool is_marker_mode(ImagingMode m) {
    return m == ImagingMode::intrinsic_markers || m == ImagingMode::doped_markers;
}

inline std::string to_string(ImagingMode m) {
    switch (m) {
        case ImagingMode::intrinsic_markers: return "intrinsic-markers";
        case ImagingMode::intrinsic_emitters: return "intrinsic-emitters";
        case ImagingMode::doped_markers: return "doped-markers";
        case ImagingMode::doped_emitters: return "doped-emitters";
    }
    return "?";
}
inline std::string to_string(PsfKind k) { return k == PsfKind::airy ? "airy" : "gaussian"; }
inline std::string to_string(Orientation o) { return o == Orientation::along_x ? "along-x" : "along-y"; }

/// Gold alignment cross: two perpendicular arms of length `arm_length_nm` (tip to tip) and width d.
struct CrossSpec {
    double center_x_nm = 0.0;
    double center_y_nm = 0.0;
    double arm_length_nm = 10'000.0;
    double arm_width_nm = 500.0;
    double depth = 1.0;  ///< shadow contrast, 1 = opaque
};

/// Binary grid label: 2 rows of `bits_per_axis` gold rectangles. The top row encodes `row`,
/// the bottom row `column`, most significant bit on the left. A vertical rectangle is a 1,
/// a horizontal one a 0.
struct LabelSpec {
    double center_x_nm = 0.0;
    double center_y_nm = 0.0;
    int row = 0;
    int column = 0;
    int bits_per_axis = 3;
    double rect_long_nm = 1'500.0;
    double rect_short_nm = 500.0;
    double spacing_nm = 2'200.0;
    double depth = 1.0;
};

/// Solid gold line across the field, used to estimate the image rotation.
struct LineSpec {
    Orientation orientation = Orientation::along_x;
    double coordinate_nm = 0.0;  ///< y of an along-x line, x of an along-y line
    double width_nm = 500.0;
    double depth = 1.0;
};

struct EmitterSpec {
    double x_nm = 0.0;
    double y_nm = 0.0;
    double photons = 1e4;
    PsfKind psf = PsfKind::gaussian;
    double psf_scale_nm = 100.0;  ///< Gaussian sigma, or Airy radial scale (rho = r / scale)
    double ellipticity = 1.0;     ///< major/minor scale ratio; the major scale is psf_scale·ellipticity
    double orientation_deg = 0.0; ///< direction of the major axis
};

/// Suspended nanoguide seen under wetting-layer illumination: a blurred central ridge plus the
/// light scattered from the outer trench edges.
struct WaveguideSpec {
    double axis_nm = 0.0;
    Orientation orientation = Orientation::along_x;
    double width_nm = 300.0;
    std::array<double, 2> trench_edge_offsets_nm{-900.0, 900.0};
    double edge_brightness = 100.0;   ///< peak counts of each trench-edge line
    double guide_brightness = 100.0;  ///< peak counts of the central ridge
    double start_nm = 0.0;            ///< extent along the guide
    double end_nm = 0.0;
};

struct Scene {
    ImagingMode mode = ImagingMode::intrinsic_markers;
    std::vector<CrossSpec> crosses;
    std::vector<LabelSpec> labels;
    std::vector<LineSpec> lines;
    std::vector<EmitterSpec> emitters;
    std::vector<WaveguideSpec> waveguides;
    BackgroundModel background{0.0, 0.0, 0.0, std::numeric_limits<double>::infinity(),
                               std::numeric_limits<double>::infinity(), 0.0};
    double read_noise_sigma = 0.0;
    bool shot_noise = true;
    std::uint64_t seed = 0;
    double rotation_deg = 0.0;         ///< sample rotation about the frame center
    double blur_sigma_nm = 200.0;      ///< optical blur of shadows and guide profiles
    double brightness_factor = 0.2;    ///< envelope scaling in doped-marker mode
    double exposure_s = 1.0;           ///< scales every expected count
};

struct Frame {
    int width = 1024;
    int height = 1024;
    double pitch_nm = kDefaultPitchNm;

    double field_of_view_x_nm() const { return width * pitch_nm; }
    double field_of_view_y_nm() const { return height * pitch_nm; }
};

/// Image-frame position (nm) of a sample-frame point after the scene rotation.
inline std::array<double, 2> image_position(const Scene& scene, const Frame& frame, double x_nm, double y_nm) {
    const double cx = 0.5 * (frame.width - 1) * frame.pitch_nm, cy = 0.5 * (frame.height - 1) * frame.pitch_nm;
    const double t = scene.rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(t), s = std::sin(t);
    const double dx = x_nm - cx, dy = y_nm - cy;
    return {cx + c * dx - s * dy, cy + s * dx + c * dy};
}

/// Rejects scenes whose parameters break the type invariants or whose features lie outside the frame.
inline void validate_scene(const Scene& scene, const Frame& frame) {
    if (frame.width < 1 || frame.height < 1 || !(frame.pitch_nm > 0.0)) throw ContractError("scene: invalid frame");
    if (!(scene.read_noise_sigma >= 0.0)) throw ContractError("scene: read_noise_sigma must be >= 0");
    if (!(scene.exposure_s > 0.0) || !(scene.brightness_factor >= 0.0) || !(scene.blur_sigma_nm >= 0.0))
        throw ContractError("scene: exposure, brightness factor and blur must be non-negative");
    auto inside = [&](double x, double y, const char* what) {
        const auto p = image_position(scene, frame, x, y);
        const double lo = -0.5 * frame.pitch_nm;
        if (p[0] < lo || p[1] < lo || p[0] > frame.field_of_view_x_nm() + lo || p[1] > frame.field_of_view_y_nm() + lo)
            throw ContractError(std::string("scene: ") + what + " outside the field of view");
    };
    for (const auto& c : scene.crosses) {
        if (!(c.arm_width_nm > 0.0) || !(c.arm_length_nm > c.arm_width_nm))
            throw ContractError("scene: cross needs arm_width > 0 and arm_length > arm_width");
        if (!(c.depth >= 0.0 && c.depth <= 1.0)) throw ContractError("scene: cross depth must be in [0, 1]");
        inside(c.center_x_nm, c.center_y_nm, "cross");
    }
    for (const auto& l : scene.labels) {
        if (l.bits_per_axis < 1 || l.row < 0 || l.column < 0 || l.row >= (1 << l.bits_per_axis) ||
            l.column >= (1 << l.bits_per_axis))
            throw ContractError("scene: label value does not fit its bit count");
        if (!(l.rect_long_nm > l.rect_short_nm && l.rect_short_nm > 0.0)) throw ContractError("scene: label rectangles");
        inside(l.center_x_nm, l.center_y_nm, "label");
    }
    for (const auto& e : scene.emitters) {
        if (!(e.photons > 0.0) || !(e.psf_scale_nm > 0.0) || !(e.ellipticity >= 1.0))
            throw ContractError("scene: emitter needs N > 0, psf_scale > 0, ellipticity >= 1");
        inside(e.x_nm, e.y_nm, "emitter");
    }
    for (const auto& w : scene.waveguides) {
        if (!(w.width_nm > 0.0)) throw ContractError("scene: waveguide width must be positive");
        if (!(w.trench_edge_offsets_nm[0] < 0.0 && w.trench_edge_offsets_nm[1] > 0.0))
            throw ContractError("scene: trench edge offsets must straddle the axis");
        if (!(w.end_nm > w.start_nm)) throw ContractError("scene: waveguide extent is empty");
        const double mid = 0.5 * (w.start_nm + w.end_nm);
        if (w.orientation == Orientation::along_x) inside(mid, w.axis_nm, "waveguide");
        else inside(w.axis_nm, mid, "waveguide");
    }
}

namespace detail {

/// Gaussian-blurred indicator of [-half, half] evaluated at u (blur given as a standard deviation).
inline double blurred_box(double u, double half, double sigma) {
    if (sigma <= 0.0) {
        const double a = std::fabs(u);
        return a < half ? 1.0 : (a == half ? 0.5 : 0.0);
    }
    const double k = 1.0 / (std::numbers::sqrt2 * sigma);
    return 0.5 * (std::erf(k * (half - u)) + std::erf(k * (half + u)));
}

/// Maps pixel coordinates of the frame to sample-frame nm coordinates and back.
struct SampleMap {
    double cx_px, cy_px, pitch, c, s;

    SampleMap(const Scene& scene, const Frame& frame)
        : cx_px(0.5 * (frame.width - 1)), cy_px(0.5 * (frame.height - 1)), pitch(frame.pitch_nm),
          c(std::cos(scene.rotation_deg * std::numbers::pi / 180.0)),
          s(std::sin(scene.rotation_deg * std::numbers::pi / 180.0)) {}

    /// sample nm of the pixel center (x, y)
    std::array<double, 2> to_sample(double x, double y) const {
        const double dx = x - cx_px, dy = y - cy_px;
        return {(cx_px + c * dx + s * dy) * pitch, (cy_px - s * dx + c * dy) * pitch};
    }
    /// pixel coordinates of a sample-frame point
    std::array<double, 2> to_pixel(double x_nm, double y_nm) const {
        const double dx = x_nm / pitch - cx_px, dy = y_nm / pitch - cy_px;
        return {cx_px + c * dx - s * dy, cy_px + s * dx + c * dy};
    }
};

/// Pixel window [x0, x1] x [y0, y1] covering a sample-frame rectangle grown by `margin_nm`.
inline std::array<int, 4> pixel_window(const SampleMap& map, const Frame& frame, double x0, double y0, double x1,
                                       double y1, double margin_nm) {
    double lo_x = 1e300, lo_y = 1e300, hi_x = -1e300, hi_y = -1e300;
    for (double x : {x0 - margin_nm, x1 + margin_nm})
        for (double y : {y0 - margin_nm, y1 + margin_nm}) {
            const auto p = map.to_pixel(x, y);
            lo_x = std::min(lo_x, p[0]), hi_x = std::max(hi_x, p[0]);
            lo_y = std::min(lo_y, p[1]), hi_y = std::max(hi_y, p[1]);
        }
    return {std::max(0, static_cast<int>(std::floor(lo_x))), std::max(0, static_cast<int>(std::floor(lo_y))),
            std::min(frame.width - 1, static_cast<int>(std::ceil(hi_x))),
            std::min(frame.height - 1, static_cast<int>(std::ceil(hi_y)))};
}

/// Multiplies `transmission` by (1 − depth·shadow) for a blurred rectangle, or by the union of two
/// rectangles sharing a center (a cross).
inline void apply_shadow(std::vector<double>& transmission, const SampleMap& map, const Frame& frame,
                         double cx, double cy, std::array<double, 2> half_a, std::array<double, 2> half_b,
                         bool cross, double depth, double blur) {
    const double ext_x = std::max(half_a[0], cross ? half_b[0] : 0.0);
    const double ext_y = std::max(half_a[1], cross ? half_b[1] : 0.0);
    const auto win = pixel_window(map, frame, cx - ext_x, cy - ext_y, cx + ext_x, cy + ext_y, 6.0 * blur + map.pitch);
    for (int y = win[1]; y <= win[3]; ++y)
        for (int x = win[0]; x <= win[2]; ++x) {
            const auto q = map.to_sample(x, y);
            const double u = q[0] - cx, v = q[1] - cy;
            double shadow = blurred_box(u, half_a[0], blur) * blurred_box(v, half_a[1], blur);
            if (cross) {
                const double hx = std::min(half_a[0], half_b[0]), hy = std::min(half_a[1], half_b[1]);
                shadow += blurred_box(u, half_b[0], blur) * blurred_box(v, half_b[1], blur) -
                          blurred_box(u, hx, blur) * blurred_box(v, hy, blur);
            }
            transmission[static_cast<std::size_t>(y) * frame.width + x] *= 1.0 - depth * shadow;
        }
}

/// Fraction of a unit Airy pattern's energy inside normalized radius rho.
inline double airy_encircled_energy(double rho) {
    const double j0 = bessel_j0(rho), j1 = bessel_j1(rho);
    return 1.0 - j0 * j0 - j1 * j1;
}

inline void add_emitter(std::vector<double>& expected, const SampleMap& map, const Frame& frame,
                        const EmitterSpec& e, double scale_counts, double sample_rotation_deg) {
    const auto p = map.to_pixel(e.x_nm, e.y_nm);
    const double major = e.psf_scale_nm * e.ellipticity / frame.pitch_nm;
    const double minor = e.psf_scale_nm / frame.pitch_nm;
    const double t = (e.orientation_deg + sample_rotation_deg) * std::numbers::pi / 180.0;
    const double c = std::cos(t), s = std::sin(t);
    const double photons = e.photons * scale_counts;

    if (e.psf == PsfKind::gaussian && (e.ellipticity == 1.0 || std::fmod(e.orientation_deg + sample_rotation_deg, 90.0) == 0.0)) {
        // axis-aligned Gaussian: exact pixel integration with erf, normalized over the ±6σ window
        const bool swap = std::fabs(s) > 0.5;
        const double sx = swap ? minor : major, sy = swap ? major : minor;
        const double kx = 1.0 / (std::numbers::sqrt2 * sx), ky = 1.0 / (std::numbers::sqrt2 * sy);
        const int rx = static_cast<int>(std::ceil(6.0 * sx)) + 1, ry = static_cast<int>(std::ceil(6.0 * sy)) + 1;
        const int x0 = static_cast<int>(std::lround(p[0])), y0 = static_cast<int>(std::lround(p[1]));
        std::vector<double> fx(2 * rx + 1), fy(2 * ry + 1);
        double sum_x = 0, sum_y = 0;
        for (int i = -rx; i <= rx; ++i) {
            const double a = x0 + i - p[0];
            fx[i + rx] = 0.5 * (std::erf(kx * (a + 0.5)) - std::erf(kx * (a - 0.5)));
            sum_x += fx[i + rx];
        }
        for (int j = -ry; j <= ry; ++j) {
            const double b = y0 + j - p[1];
            fy[j + ry] = 0.5 * (std::erf(ky * (b + 0.5)) - std::erf(ky * (b - 0.5)));
            sum_y += fy[j + ry];
        }
        const double norm = photons / (sum_x * sum_y);
        for (int j = -ry; j <= ry; ++j)
            for (int i = -rx; i <= rx; ++i) {
                const int x = x0 + i, y = y0 + j;
                if (x < 0 || y < 0 || x >= frame.width || y >= frame.height) continue;
                expected[static_cast<std::size_t>(y) * frame.width + x] += norm * fx[i + rx] * fy[j + ry];
            }
        return;
    }

    // general case: 5x5 supersampled pixels inside a window of the pattern
    constexpr int kSub = 5;
    const bool airy = e.psf == PsfKind::airy;
    const double window_rho = airy ? 6.0 * kAiryFirstZero : 6.0;
    const int r = static_cast<int>(std::ceil(window_rho * major)) + 1;
    const int x0 = static_cast<int>(std::lround(p[0])), y0 = static_cast<int>(std::lround(p[1]));
    const double area = airy ? kAiryArea * major * minor * airy_encircled_energy(window_rho)
                             : 2.0 * std::numbers::pi * major * minor * (1.0 - std::exp(-0.5 * window_rho * window_rho));
    const double amp = photons / area;
    for (int j = -r; j <= r; ++j)
        for (int i = -r; i <= r; ++i) {
            const int x = x0 + i, y = y0 + j;
            if (x < 0 || y < 0 || x >= frame.width || y >= frame.height) continue;
            double acc = 0.0;
            for (int sj = 0; sj < kSub; ++sj)
                for (int si = 0; si < kSub; ++si) {
                    const double dx = x - p[0] + (si + 0.5) / kSub - 0.5, dy = y - p[1] + (sj + 0.5) / kSub - 0.5;
                    const double u = (c * dx + s * dy) / major, v = (-s * dx + c * dy) / minor;
                    const double rho2 = u * u + v * v;
                    if (rho2 > window_rho * window_rho) continue;
                    acc += airy ? airy_profile(std::sqrt(rho2)) : std::exp(-0.5 * rho2);
                }
            expected[static_cast<std::size_t>(y) * frame.width + x] += amp * acc / (kSub * kSub);
        }
}

inline void add_waveguide(std::vector<double>& expected, const SampleMap& map, const Frame& frame,
                          const WaveguideSpec& w, double blur_nm, double scale_counts) {
    const bool along_x = w.orientation == Orientation::along_x;
    const double mid_sigma = std::sqrt(blur_nm * blur_nm + w.width_nm * w.width_nm / 12.0);
    const double reach = std::max(std::fabs(w.trench_edge_offsets_nm[0]), w.trench_edge_offsets_nm[1]) + 6.0 * mid_sigma;
    const auto win = along_x ? pixel_window(map, frame, w.start_nm, w.axis_nm - reach, w.end_nm, w.axis_nm + reach, 6.0 * blur_nm)
                             : pixel_window(map, frame, w.axis_nm - reach, w.start_nm, w.axis_nm + reach, w.end_nm, 6.0 * blur_nm);
    const double half_len = 0.5 * (w.end_nm - w.start_nm), mid_len = 0.5 * (w.end_nm + w.start_nm);
    auto gauss = [](double u, double sd) { return std::exp(-0.5 * u * u / (sd * sd)); };
    for (int y = win[1]; y <= win[3]; ++y)
        for (int x = win[0]; x <= win[2]; ++x) {
            const auto q = map.to_sample(x, y);
            const double across = (along_x ? q[1] : q[0]) - w.axis_nm;
            const double along = (along_x ? q[0] : q[1]) - mid_len;
            const double extent = blurred_box(along, half_len, blur_nm);
            const double profile = w.guide_brightness * gauss(across, mid_sigma) +
                                   w.edge_brightness * (gauss(across - w.trench_edge_offsets_nm[0], blur_nm) +
                                                        gauss(across - w.trench_edge_offsets_nm[1], blur_nm));
            expected[static_cast<std::size_t>(y) * frame.width + x] += scale_counts * extent * profile;
        }
}

}  // namespace detail

/// Expected (noise-free) counts of a scene.
inline Image render_expected(const Scene& scene, const Frame& frame) {
    if (frame.width < 16 || frame.height < 16) throw ContractError("render: frame must be at least 16x16");
    const detail::SampleMap map(scene, frame);
    const std::size_t n = static_cast<std::size_t>(frame.width) * frame.height;
    std::vector<double> expected(n, 0.0);
    const bool markers = is_marker_mode(scene.mode);
    const double brightness = scene.mode == ImagingMode::doped_markers ? scene.brightness_factor : 1.0;
    const double scale = scene.exposure_s;

    for (int y = 0; y < frame.height; ++y)
        for (int x = 0; x < frame.width; ++x)
            expected[static_cast<std::size_t>(y) * frame.width + x] = scale * brightness * scene.background(x, y);

    if (markers) {
        std::vector<double> transmission(n, 1.0);
        const double blur = scene.blur_sigma_nm;
        for (const auto& c : scene.crosses) {
            const double hl = 0.5 * c.arm_length_nm, hw = 0.5 * c.arm_width_nm;
            detail::apply_shadow(transmission, map, frame, c.center_x_nm, c.center_y_nm, {hl, hw}, {hw, hl}, true,
                                 c.depth, blur);
        }
        for (const auto& l : scene.labels) {
            for (int r = 0; r < 2; ++r) {
                const int value = r == 0 ? l.row : l.column;
                for (int b = 0; b < l.bits_per_axis; ++b) {
                    const bool one = (value >> (l.bits_per_axis - 1 - b)) & 1;
                    const double x = l.center_x_nm + (b - 0.5 * (l.bits_per_axis - 1)) * l.spacing_nm;
                    const double y = l.center_y_nm + (r - 0.5) * l.spacing_nm;
                    const std::array<double, 2> half = one ? std::array<double, 2>{0.5 * l.rect_short_nm, 0.5 * l.rect_long_nm}
                                                           : std::array<double, 2>{0.5 * l.rect_long_nm, 0.5 * l.rect_short_nm};
                    detail::apply_shadow(transmission, map, frame, x, y, half, half, false, l.depth, blur);
                }
            }
        }
        const double span = 2.0 * std::hypot(frame.field_of_view_x_nm(), frame.field_of_view_y_nm());
        for (const auto& l : scene.lines) {
            const double cx = 0.5 * frame.field_of_view_x_nm(), cy = 0.5 * frame.field_of_view_y_nm();
            if (l.orientation == Orientation::along_x)
                detail::apply_shadow(transmission, map, frame, cx, l.coordinate_nm, {span, 0.5 * l.width_nm},
                                     {span, 0.5 * l.width_nm}, false, l.depth, blur);
            else
                detail::apply_shadow(transmission, map, frame, l.coordinate_nm, cy, {0.5 * l.width_nm, span},
                                     {0.5 * l.width_nm, span}, false, l.depth, blur);
        }
        for (std::size_t i = 0; i < n; ++i) expected[i] *= transmission[i];
        for (const auto& w : scene.waveguides) detail::add_waveguide(expected, map, frame, w, blur, scale);
    } else {
        for (const auto& e : scene.emitters) detail::add_emitter(expected, map, frame, e, scale, scene.rotation_deg);
    }

    Image img = Image::from_counts(frame.width, frame.height, std::move(expected), frame.pitch_nm);
    img.set_meta("exposure_s", fmt::format("{}", scene.exposure_s));
    img.set_meta("mode", to_string(scene.mode));
    return img;
}

/// Renders the scene with Poisson shot noise followed by additive Gaussian read noise (clamped at 0).
/// The random stream is seeded from `scene.seed` only, so equal scenes give equal images.
inline Image render(const Scene& scene, const Frame& frame) {
    Image img = render_expected(scene, frame);
    if (!scene.shot_noise && scene.read_noise_sigma == 0.0) return img;
    Rng rng(scene.seed);
    for (auto& v : img.counts()) {
        double c = scene.shot_noise ? rng.poisson(v) : v;
        if (scene.read_noise_sigma > 0.0) c += scene.read_noise_sigma * rng.normal();
        v = std::max(c, 0.0);
    }
    return img;
}

inline Image render(const Scene& scene, int width, int height, double pitch_nm = kDefaultPitchNm) {
    return render(scene, Frame{width, height, pitch_nm});
}

}  // namespace qdalign
