#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qdalign/error.hpp"
#include "qdalign/markers.hpp"
#include "qdalign/random.hpp"
#include "qdalign/stark.hpp"
#include "qdalign/synth.hpp"

namespace qdalign {

/// One pre-fabrication grid square, imaged once under wetting-layer light (crosses as shadows)
/// and once in QD photoluminescence. The square is centered in the frame with a cross at each
/// corner; node (0, 0) is the top-left cross.
struct SquarePreset {
    bool doped = false;
    Frame frame{1024, 1024, kDefaultPitchNm};
    double square_nm = 40'000.0;
    double arm_length_nm = 10'000.0;
    double arm_width_nm = 500.0;
    double envelope_amplitude = 372.0;   ///< counts at the envelope peak
    double envelope_sigma_px = 500.0;
    double brightness_factor = 0.2;      ///< doped wafers only
    double marker_exposure_s = 1.0;
    double blur_nm = 200.0;
    double rotation_deg = 0.2;
    int emitters = 15;
    double qd_photons = 1e5;
    double qd_sigma_nm = 135.7;
    double emitter_background = 109.0;   ///< counts per pixel in the QD image
    double emitter_inset_nm = 3'000.0;   ///< QDs keep this distance from the square's edges
    double emitter_separation_nm = 2'000.0;

    std::array<double, 2> corner_nm() const {
        return {0.5 * frame.field_of_view_x_nm() - 0.5 * square_nm, 0.5 * frame.field_of_view_y_nm() - 0.5 * square_nm};
    }

    /// Nominal grid as seen in the image, ignoring the small sample rotation.
    GridGeometry grid() const {
        GridGeometry g;
        g.pitch_nm = square_nm;
        const auto c = corner_nm();
        g.origin_x_nm = c[0];
        g.origin_y_nm = c[1];
        g.arm_length_nm = arm_length_nm;
        g.arm_width_nm = arm_width_nm;
        return g;
    }
};

struct SquareScenes {
    Scene markers;
    Scene emitters;
    /// QD positions in the grid frame (nm from the node (0, 0) cross, sample axes)
    std::vector<std::array<double, 2>> qd_grid_nm;
};

inline SquareScenes make_square(const SquarePreset& p, std::uint64_t seed) {
    SquareScenes out;
    Scene& m = out.markers;
    m.mode = p.doped ? ImagingMode::doped_markers : ImagingMode::intrinsic_markers;
    const double cx = 0.5 * (p.frame.width - 1), cy = 0.5 * (p.frame.height - 1);
    m.background = BackgroundModel{p.envelope_amplitude, cx, cy, p.envelope_sigma_px, p.envelope_sigma_px, 0.0};
    m.brightness_factor = p.brightness_factor;
    m.exposure_s = p.marker_exposure_s;
    m.blur_sigma_nm = p.blur_nm;
    m.rotation_deg = p.rotation_deg;
    m.seed = derive_seed(seed, 0);
    const auto corner = p.corner_nm();
    for (int j = 0; j < 2; ++j)
        for (int i = 0; i < 2; ++i)
            m.crosses.push_back({corner[0] + i * p.square_nm, corner[1] + j * p.square_nm, p.arm_length_nm, p.arm_width_nm, 1.0});

    Scene& e = out.emitters;
    e.mode = p.doped ? ImagingMode::doped_emitters : ImagingMode::intrinsic_emitters;
    e.background = BackgroundModel{0.0, 0.0, 0.0, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                                   p.emitter_background};
    e.rotation_deg = p.rotation_deg;
    e.seed = derive_seed(seed, 1);
    Rng rng(derive_seed(seed, 2));
    const double lo = p.emitter_inset_nm, hi = p.square_nm - p.emitter_inset_nm;
    int guard = 0;
    while (static_cast<int>(out.qd_grid_nm.size()) < p.emitters) {
        if (++guard > 100'000) throw ContractError("make_square: cannot place the emitters with the requested separation");
        const std::array<double, 2> q{rng.uniform(lo, hi), rng.uniform(lo, hi)};
        bool ok = true;
        for (const auto& o : out.qd_grid_nm) ok &= std::hypot(q[0] - o[0], q[1] - o[1]) >= p.emitter_separation_nm;
        if (!ok) continue;
        out.qd_grid_nm.push_back(q);
        e.emitters.push_back({corner[0] + q[0], corner[1] + q[1], p.qd_photons, PsfKind::gaussian, p.qd_sigma_nm, 1.0, 0.0});
    }
    return out;
}

/// One post-fabrication device crop: a nanoguide under wetting-layer light and the QD it carries.
struct DevicePreset {
    bool doped = false;
    Frame frame{256, 256, kDefaultPitchNm};
    Orientation orientation = Orientation::along_x;
    double wl_background = 50.0;
    double guide_brightness = 90.0;
    double edge_ratio = 0.6;
    double guide_width_nm = 300.0;
    double trench_offset_nm = 900.0;
    double blur_nm = 200.0;
    double qd_photons = 2e4;
    double qd_airy_scale_nm = 200.0;
    double qd_background = 20.0;
    double qd_jitter_nm = 600.0;  ///< QD placement spread about the crop center
    double delta_mean_nm = 9.0;
    double delta_std_nm = 46.0;
};

struct DeviceScenes {
    Scene wetting;
    Scene qd;
    double qd_x_nm = 0.0;
    double qd_y_nm = 0.0;
    double axis_nm = 0.0;
    double delta_nm = 0.0;  ///< QD minus guide axis, across the guide
};

inline DeviceScenes make_device(const DevicePreset& p, std::uint64_t seed, double delta_nm) {
    DeviceScenes out;
    Rng rng(derive_seed(seed, 2));
    const double cx = 0.5 * p.frame.field_of_view_x_nm(), cy = 0.5 * p.frame.field_of_view_y_nm();
    out.qd_x_nm = cx + p.qd_jitter_nm * rng.uniform(-1.0, 1.0);
    out.qd_y_nm = cy + p.qd_jitter_nm * rng.uniform(-1.0, 1.0);
    out.delta_nm = delta_nm;
    const bool along_x = p.orientation == Orientation::along_x;
    out.axis_nm = (along_x ? out.qd_y_nm : out.qd_x_nm) - delta_nm;

    Scene& w = out.wetting;
    w.mode = p.doped ? ImagingMode::doped_markers : ImagingMode::intrinsic_markers;
    w.brightness_factor = 1.0;
    w.background = BackgroundModel{0.0, 0.0, 0.0, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                                   p.wl_background};
    w.blur_sigma_nm = p.blur_nm;
    w.seed = derive_seed(seed, 0);
    WaveguideSpec g;
    g.axis_nm = out.axis_nm;
    g.orientation = p.orientation;
    g.width_nm = p.guide_width_nm;
    g.trench_edge_offsets_nm = {-p.trench_offset_nm, p.trench_offset_nm};
    g.guide_brightness = p.guide_brightness;
    g.edge_brightness = p.edge_ratio * p.guide_brightness;
    const double len = along_x ? p.frame.field_of_view_x_nm() : p.frame.field_of_view_y_nm();
    g.start_nm = 0.02 * len;
    g.end_nm = 0.98 * len;
    w.waveguides.push_back(g);

    Scene& q = out.qd;
    q.mode = p.doped ? ImagingMode::doped_emitters : ImagingMode::intrinsic_emitters;
    q.background = BackgroundModel{0.0, 0.0, 0.0, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                                   p.qd_background};
    q.seed = derive_seed(seed, 1);
    q.emitters.push_back({out.qd_x_nm, out.qd_y_nm, p.qd_photons, PsfKind::airy, p.qd_airy_scale_nm, 1.0, 0.0});
    return out;
}

/// Spectral shifts of one population of QDs (one wafer and structure type).
struct ShiftPopulation {
    std::string wafer;
    Structure structure = Structure::nanoguide;
    double mean_nm = 0.0;
    double std_nm = 0.0;
    int count = 30;
};

struct ShiftPreset {
    std::vector<ShiftPopulation> populations;
    SpectrumGrid grid{0.0, 10.0, 501};  ///< relative to the line's bulk wavelength minus 5 nm
    double fwhm_nm = 0.1;
    double amplitude = 2'000.0;
    double background = 20.0;
    std::vector<double> widths_nm{250.0, 300.0, 350.0, 400.0};
    std::vector<double> offsets_nm{0.0, 60.0, 120.0};
};

struct ShiftPair {
    ShiftRecord record;  ///< delta_nm holds the injected shift
    double bulk_nm = 0.0;
    Spectrum before;
    Spectrum after;
};

inline ShiftPair make_shift_pair(const ShiftPreset& p, const ShiftPopulation& pop, std::uint64_t seed, const std::string& id) {
    Rng rng(derive_seed(seed, 2));
    ShiftPair out;
    out.bulk_nm = rng.uniform(925.0, 945.0);
    auto& r = out.record;
    r.qd_id = id;
    r.wafer = pop.wafer;
    r.structure = pop.structure;
    if (pop.structure == Structure::nanoguide) {
        r.width_nm = p.widths_nm[static_cast<std::size_t>(rng.next() % p.widths_nm.size())];
    } else {
        r.offset_nm = p.offsets_nm[static_cast<std::size_t>(rng.next() % p.offsets_nm.size())];
        r.offset_axis = rng.uniform() < 0.5 ? "x" : "y";
    }
    r.delta_nm = rng.normal(pop.mean_nm, pop.std_nm);
    const SpectrumGrid g{out.bulk_nm - 5.0 + p.grid.lo_nm, out.bulk_nm - 5.0 + p.grid.hi_nm, p.grid.samples};
    out.before = synth_spectrum({out.bulk_nm, p.fwhm_nm, p.amplitude, p.background, 0.0}, g, derive_seed(seed, 0));
    out.after = synth_spectrum({out.bulk_nm + r.delta_nm, p.fwhm_nm, p.amplitude, p.background, 0.0}, g, derive_seed(seed, 1));
    return out;
}

/// Voltage-wavelength maps of one QD before and after nanofabrication, with an X⁺ plateau at
/// lower bias and an X⁰ plateau above it.
struct StarkPreset {
    FieldConfig field;
    double v_lo = 0.85;
    double v_hi = 1.35;
    double v_step = 0.005;
    double lambda_lo_nm = 934.0;
    double lambda_hi_nm = 936.6;
    double lambda_step_nm = 0.01;
    PlateauRidge xplus_before{{}, 0.88, 1.12, 400.0, 0.05};
    PlateauRidge x0_before{{}, 1.08, 1.32, 500.0, 0.05};
    PlateauRidge xplus_after{{}, 0.88, 1.12, 400.0, 0.05};
    PlateauRidge x0_after{{}, 1.08, 1.32, 500.0, 0.05};
    double background = 10.0;

    /// Stark model with its energy extremum at field `f_star` and wavelength `lambda_vertex`.
    static StarkModel vertex_model(double lambda_vertex_nm, double f_star, double alpha, ExcitonLabel label) {
        StarkModel m;
        m.alpha = alpha;
        m.pz = 2.0 * alpha * f_star;
        m.lambda0_nm = kHcMevNm / (kHcMevNm / lambda_vertex_nm + alpha * f_star * f_star);
        m.label = label;
        return m;
    }

    StarkPreset() {
        xplus_before.model = vertex_model(935.6, -81.0, -1.5e-3, ExcitonLabel::xplus);
        x0_before.model = vertex_model(935.0, -53.0, -2.0e-3, ExcitonLabel::x0);
        xplus_after.model = vertex_model(935.3, -81.0, -1.5e-3 * 0.85, ExcitonLabel::xplus);
        x0_after.model = vertex_model(934.7, -53.0, -2.0e-3 * 1.2, ExcitonLabel::x0);
    }

    PlateauMapSpec map_spec(bool after, std::uint64_t seed) const {
        PlateauMapSpec s;
        for (double v = v_lo; v <= v_hi + 1e-9; v += v_step) s.voltages.push_back(std::round(v * 1e6) / 1e6);
        for (double l = lambda_lo_nm; l <= lambda_hi_nm + 1e-9; l += lambda_step_nm) s.wavelengths_nm.push_back(std::round(l * 1e6) / 1e6);
        s.ridges = after ? std::vector<PlateauRidge>{xplus_after, x0_after} : std::vector<PlateauRidge>{xplus_before, x0_before};
        for (auto& r : s.ridges) r.model.field = field;
        s.background = background;
        s.seed = seed;
        return s;
    }
};

enum class PresetKind { devices, spectra, stark };

struct Preset {
    std::string name;
    PresetKind kind = PresetKind::devices;
    SquarePreset square;
    DevicePreset device;
    ShiftPreset shifts;
    StarkPreset stark;
};

inline std::vector<std::string> preset_names() { return {"fig2b", "fig2c", "fig3", "fig5"}; }

/// Calibrated synthetic settings: fig2b intrinsic wafer, fig2c doped wafer, fig3 spectral-shift
/// populations, fig5 Stark maps.
inline Preset make_preset(const std::string& name) {
    Preset p;
    p.name = name;
    if (name == "fig2b") {
        p.kind = PresetKind::devices;
    } else if (name == "fig2c") {
        p.kind = PresetKind::devices;
        p.square.doped = true;
        p.square.marker_exposure_s = 1.59;
        p.square.emitter_background = 623.0;
        p.device.doped = true;
        p.device.delta_mean_nm = 1.0;
        p.device.delta_std_nm = 33.0;
    } else if (name == "fig3") {
        p.kind = PresetKind::spectra;
        p.shifts.populations = {{"intrinsic", Structure::nanoguide, 0.8, 0.6, 30},
                                {"intrinsic", Structure::phcw, 0.1, 0.7, 30},
                                {"doped", Structure::nanoguide, -0.2, 0.3, 30},
                                {"doped", Structure::phcw, -1.1, 0.6, 30}};
    } else if (name == "fig5") {
        p.kind = PresetKind::stark;
    } else {
        throw ContractError(fmt::format("unknown preset '{}' (known: fig2b, fig2c, fig3, fig5)", name));
    }
    return p;
}

namespace detail {

template <class T>
void override_field(const nlohmann::json& j, const char* key, T& value) {
    if (j.contains(key)) value = j.at(key).get<T>();
}

}  // namespace detail

/// Applies the optional "square" and "device" override objects of a run config.
inline void apply_overrides(Preset& p, const nlohmann::json& j) {
    try {
        if (j.contains("square")) {
            const auto& s = j.at("square");
            detail::override_field(s, "rotation_deg", p.square.rotation_deg);
            detail::override_field(s, "emitters", p.square.emitters);
            detail::override_field(s, "envelope_amplitude", p.square.envelope_amplitude);
            detail::override_field(s, "marker_exposure_s", p.square.marker_exposure_s);
            detail::override_field(s, "qd_photons", p.square.qd_photons);
            detail::override_field(s, "emitter_background", p.square.emitter_background);
            detail::override_field(s, "width", p.square.frame.width);
            detail::override_field(s, "height", p.square.frame.height);
        }
        if (j.contains("device")) {
            const auto& d = j.at("device");
            detail::override_field(d, "delta_mean_nm", p.device.delta_mean_nm);
            detail::override_field(d, "delta_std_nm", p.device.delta_std_nm);
            detail::override_field(d, "guide_brightness", p.device.guide_brightness);
            detail::override_field(d, "wl_background", p.device.wl_background);
            detail::override_field(d, "qd_photons", p.device.qd_photons);
            if (d.contains("orientation")) {
                const auto o = d.at("orientation").get<std::string>();
                if (o != "along-x" && o != "along-y") throw ContractError(fmt::format("device.orientation: '{}' is not along-x or along-y", o));
                p.device.orientation = o == "along-x" ? Orientation::along_x : Orientation::along_y;
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ContractError(fmt::format("config: {}", e.what()));
    }
}

}  // namespace qdalign
