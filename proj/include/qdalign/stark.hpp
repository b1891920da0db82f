#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qdalign/csv.hpp"
#include "qdalign/error.hpp"
#include "qdalign/fitcore.hpp"
#include "qdalign/imgproc.hpp"
#include "qdalign/models.hpp"
#include "qdalign/random.hpp"

namespace qdalign {

inline constexpr double kHcEvNm = 1239.842;
inline constexpr double kHcMevNm = kHcEvNm * 1e3;

// --- field ---------------------------------------------------------------------------

/// Diode geometry: F = (V − V_i)/t. Stored as t and the built-in field V_i/t.
struct FieldConfig {
    double thickness_nm = 70.0;
    double builtin_kv_cm = 224.24;  ///< V_i/t

    double v_i() const { return builtin_kv_cm * thickness_nm * 1e-4; }
    static FieldConfig from_vi(double v_i, double thickness_nm) { return {thickness_nm, v_i * 1e4 / thickness_nm}; }

    bool operator==(const FieldConfig&) const = default;
};

/// Applied field in kV/cm (1 V/nm = 10⁴ kV/cm).
inline double field(double volts, const FieldConfig& cfg) {
    if (!(cfg.thickness_nm > 0.0)) throw ContractError("field: thickness must be positive");
    return volts * 1e4 / cfg.thickness_nm - cfg.builtin_kv_cm;
}

// --- spectra and peaks ---------------------------------------------------------------

struct Spectrum {
    std::vector<double> wavelengths_nm;
    std::vector<double> intensities;
};

inline void validate(const Spectrum& s) {
    if (s.wavelengths_nm.size() != s.intensities.size()) throw ContractError("spectrum: wavelength and intensity counts differ");
    if (s.wavelengths_nm.size() < 8) throw ContractError("spectrum: at least 8 samples required");
    for (std::size_t i = 0; i < s.wavelengths_nm.size(); ++i) {
        if (!std::isfinite(s.wavelengths_nm[i]) || !std::isfinite(s.intensities[i])) throw ContractError("spectrum: non-finite sample");
        if (i && !(s.wavelengths_nm[i] > s.wavelengths_nm[i - 1])) throw ContractError("spectrum: wavelengths must increase strictly");
    }
}

struct PeakOptions {
    int half_window = 10;  ///< samples on each side of the maximum
    bool background = true;  ///< fit a linear background (constant offset otherwise)
};

struct PeakFit {
    double lambda_nm = 0.0;
    double unc_nm = 0.0;  ///< half-width of the 95.4% interval
    double fwhm_nm = 0.0;
    double amplitude = 0.0;
    int iterations = 0;
};

namespace detail {

inline PeakFit fit_line_window(const std::vector<double>& x, const std::vector<double>& y, std::size_t peak, int half_window,
                               bool background) {
    const std::size_t n = x.size();
    if (peak == 0 || peak + 1 >= n) throw EdgeError(fmt::format("peak at the edge of the range ({:.4f} nm)", x[peak]));
    const std::size_t lo = peak > static_cast<std::size_t>(half_window) ? peak - half_window : 0;
    const std::size_t hi = std::min(n - 1, peak + static_cast<std::size_t>(half_window));
    if (hi - lo + 1 < 5) throw EdgeError("too few samples around the peak");
    std::vector<double> xs(x.begin() + lo, x.begin() + hi + 1), ys(y.begin() + lo, y.begin() + hi + 1);

    const double base = *std::min_element(ys.begin(), ys.end());
    const double top = y[peak];
    double above = 0.0;
    for (std::size_t i = 1; i < xs.size(); ++i)
        if (0.5 * (ys[i] + ys[i - 1]) > base + 0.5 * (top - base)) above += xs[i] - xs[i - 1];
    const double step = (xs.back() - xs.front()) / static_cast<double>(xs.size() - 1);
    GaussianLineModel init;
    init.amplitude = std::max(top - base, 1e-12);
    init.center = x[peak];
    init.width = std::max(above, step) / 2.3548;
    init.offset = base;
    init.reference = x[peak];

    auto pb = curve_fit_problem(xs, ys, init);
    pb.lower = Vector::Constant(GaussianLineModel::kParams, -std::numeric_limits<double>::infinity());
    pb.upper = Vector::Constant(GaussianLineModel::kParams, std::numeric_limits<double>::infinity());
    pb.lower[GaussianLineModel::kAmplitude] = 0.0;
    pb.lower[GaussianLineModel::kCenter] = xs.front();
    pb.upper[GaussianLineModel::kCenter] = xs.back();
    pb.lower[GaussianLineModel::kWidth] = 0.05 * step;
    pb.upper[GaussianLineModel::kWidth] = xs.back() - xs.front();
    pb.initial[GaussianLineModel::kWidth] = std::clamp(init.width, 0.1 * step, 0.5 * (xs.back() - xs.front()));
    if (!background) {
        pb.fixed.assign(GaussianLineModel::kParams, false);
        pb.fixed[GaussianLineModel::kSlope] = true;
    }
    const auto res = lm_fit(pb);
    const double c = res.params[GaussianLineModel::kCenter];
    if (!res.params.allFinite() || c <= xs.front() || c >= xs.back())
        throw EdgeError(fmt::format("fitted line center {:.4f} nm left the window", c));
    PeakFit out;
    out.lambda_nm = c;
    out.unc_nm = res.ci95[GaussianLineModel::kCenter];
    out.fwhm_nm = 2.3548200450309493 * res.params[GaussianLineModel::kWidth];
    out.amplitude = res.params[GaussianLineModel::kAmplitude];
    out.iterations = res.iterations;
    return out;
}

}  // namespace detail

/// Gaussian line fitted around the global maximum.
inline PeakFit fit_peak(const Spectrum& s, const PeakOptions& opt = {}) {
    validate(s);
    if (opt.half_window < 2) throw ContractError("fit_peak: half window must be at least 2");
    const auto it = std::max_element(s.intensities.begin(), s.intensities.end());
    return detail::fit_line_window(s.wavelengths_nm, s.intensities, static_cast<std::size_t>(it - s.intensities.begin()),
                                   opt.half_window, opt.background);
}

struct SpectralShift {
    double delta_nm = 0.0;
    double unc_nm = 0.0;
};

/// λ_peak(after) − λ_peak(before).
inline SpectralShift spectral_shift(const Spectrum& before, const Spectrum& after, const PeakOptions& opt = {}) {
    const auto a = fit_peak(before, opt);
    const auto b = fit_peak(after, opt);
    return {b.lambda_nm - a.lambda_nm, std::hypot(a.unc_nm, b.unc_nm)};
}

inline std::string spectrum_csv(const Spectrum& s) {
    CsvTable t;
    t.header = {"wavelength_nm", "counts"};
    for (std::size_t i = 0; i < s.wavelengths_nm.size(); ++i)
        t.rows.push_back({format_double(s.wavelengths_nm[i]), format_double(s.intensities[i])});
    return format_csv(t);
}

inline Spectrum parse_spectrum_csv(std::string_view text) {
    const auto t = parse_csv(text);
    const auto cw = t.column("wavelength_nm"), cc = t.column("counts");
    Spectrum s;
    for (const auto& r : t.rows) {
        s.wavelengths_nm.push_back(parse_double(r[cw]));
        s.intensities.push_back(parse_double(r[cc]));
    }
    try {
        validate(s);
    } catch (const ContractError& e) {
        throw FormatError(e.what());
    }
    return s;
}

// --- shift statistics ----------------------------------------------------------------

enum class Structure { nanoguide, phcw };

inline std::string to_string(Structure s) { return s == Structure::nanoguide ? "nanoguide" : "phcw"; }

inline Structure structure_from_string(const std::string& s) {
    if (s == "nanoguide") return Structure::nanoguide;
    if (s == "phcw") return Structure::phcw;
    throw FormatError(fmt::format("unknown structure '{}'", s));
}

struct ShiftRecord {
    std::string qd_id;
    std::string wafer;  ///< e.g. "intrinsic" or "doped"; part of every group key when set
    Structure structure = Structure::nanoguide;
    std::optional<double> width_nm;   ///< nanoguide width
    std::optional<double> offset_nm;  ///< unit-cell offset of a PhCW
    std::string offset_axis;          ///< "x" or "y" when offset_nm is set
    double delta_nm = 0.0;
};

enum class ShiftGrouping { structure, width, offset };

struct ShiftGroup {
    std::string key;
    std::size_t n = 0;
    double mean_nm = 0.0;
    double std_nm = std::numeric_limits<double>::quiet_NaN();  ///< sample std (n − 1); NaN for a singleton
    double mean_se_nm = std::numeric_limits<double>::quiet_NaN();
    bool std_defined = false;
};

/// Per-group mean and standard deviation. Records lacking the grouping key are skipped.
inline std::vector<ShiftGroup> shift_stats(const std::vector<ShiftRecord>& records, ShiftGrouping grouping) {
    std::map<std::tuple<std::string, int, std::string, double>, std::pair<std::string, std::vector<double>>> groups;
    for (const auto& r : records) {
        if (!std::isfinite(r.delta_nm)) throw ContractError(fmt::format("shift_stats: non-finite shift for '{}'", r.qd_id));
        const int s = static_cast<int>(r.structure);
        const std::string prefix = r.wafer.empty() ? to_string(r.structure) : r.wafer + "/" + to_string(r.structure);
        std::tuple<std::string, int, std::string, double> key{r.wafer, s, "", 0.0};
        std::string label = prefix;
        if (grouping == ShiftGrouping::width) {
            if (!r.width_nm) continue;
            std::get<3>(key) = *r.width_nm;
            label = fmt::format("{}/width={}", prefix, *r.width_nm);
        } else if (grouping == ShiftGrouping::offset) {
            if (!r.offset_nm) continue;
            std::get<2>(key) = r.offset_axis;
            std::get<3>(key) = *r.offset_nm;
            label = fmt::format("{}/{}={}", prefix, r.offset_axis.empty() ? "offset" : r.offset_axis, *r.offset_nm);
        }
        auto& g = groups[key];
        g.first = label;
        g.second.push_back(r.delta_nm);
    }
    std::vector<ShiftGroup> out;
    for (const auto& [_, g] : groups) {
        const auto& v = g.second;
        ShiftGroup sg;
        sg.key = g.first;
        sg.n = v.size();
        sg.mean_nm = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        if (v.size() >= 2) {
            double ss = 0.0;
            for (double x : v) ss += (x - sg.mean_nm) * (x - sg.mean_nm);
            sg.std_nm = std::sqrt(ss / static_cast<double>(v.size() - 1));
            sg.mean_se_nm = sg.std_nm / std::sqrt(static_cast<double>(v.size()));
            sg.std_defined = true;
        }
        out.push_back(sg);
    }
    return out;
}

inline std::string shifts_csv(const std::vector<ShiftRecord>& records) {
    CsvTable t;
    t.header = {"qd_id", "wafer", "structure", "width_nm", "offset_axis", "offset_nm", "delta_nm"};
    for (const auto& r : records)
        t.rows.push_back({r.qd_id, r.wafer, to_string(r.structure), r.width_nm ? format_double(*r.width_nm) : "", r.offset_axis,
                          r.offset_nm ? format_double(*r.offset_nm) : "", format_double(r.delta_nm)});
    return format_csv(t);
}

inline std::vector<ShiftRecord> parse_shifts_csv(std::string_view text) {
    const auto t = parse_csv(text);
    const auto id = t.column("qd_id"), wa = t.column("wafer"), st = t.column("structure"), w = t.column("width_nm"), ax = t.column("offset_axis"),
               off = t.column("offset_nm"), d = t.column("delta_nm");
    std::vector<ShiftRecord> out;
    for (const auto& row : t.rows) {
        ShiftRecord r;
        r.qd_id = row[id];
        r.wafer = row[wa];
        r.structure = structure_from_string(row[st]);
        if (!row[w].empty()) r.width_nm = parse_double(row[w]);
        r.offset_axis = row[ax];
        if (!row[off].empty()) r.offset_nm = parse_double(row[off]);
        r.delta_nm = parse_double(row[d]);
        out.push_back(r);
    }
    return out;
}

inline std::string shift_stats_csv(const std::vector<ShiftGroup>& groups) {
    CsvTable t;
    t.header = {"group", "n", "mean_nm", "std_nm", "mean_se_nm"};
    for (const auto& g : groups)
        t.rows.push_back({g.key, std::to_string(g.n), format_double(g.mean_nm), g.std_defined ? format_double(g.std_nm) : "nan",
                          g.std_defined ? format_double(g.mean_se_nm) : "nan"});
    return format_csv(t);
}

// --- plateau maps --------------------------------------------------------------------

/// Voltage × wavelength intensity grid.
struct PlateauMap {
    std::vector<double> voltages;
    std::vector<double> wavelengths_nm;
    Eigen::MatrixXd intensity;  ///< rows: voltages, columns: wavelengths
};

inline void validate(const PlateauMap& m) {
    if (m.voltages.empty() || m.wavelengths_nm.size() < 8) throw ContractError("plateau map: need ≥ 1 voltage and ≥ 8 wavelengths");
    if (m.intensity.rows() != static_cast<Eigen::Index>(m.voltages.size()) ||
        m.intensity.cols() != static_cast<Eigen::Index>(m.wavelengths_nm.size()))
        throw ContractError("plateau map: intensity grid does not match the axes");
    for (std::size_t i = 1; i < m.voltages.size(); ++i)
        if (!(m.voltages[i] > m.voltages[i - 1])) throw ContractError("plateau map: voltages must increase strictly");
    for (std::size_t i = 1; i < m.wavelengths_nm.size(); ++i)
        if (!(m.wavelengths_nm[i] > m.wavelengths_nm[i - 1])) throw ContractError("plateau map: wavelengths must increase strictly");
    if (!m.intensity.allFinite() || (m.intensity.array() < 0.0).any()) throw ContractError("plateau map: intensities must be finite and ≥ 0");
}

/// Header row: label then wavelengths; each following row: voltage then intensities.
inline std::string plateau_map_csv(const PlateauMap& m) {
    CsvTable t;
    t.header.push_back("voltage_V");
    for (double w : m.wavelengths_nm) t.header.push_back(format_double(w));
    for (std::size_t i = 0; i < m.voltages.size(); ++i) {
        std::vector<std::string> row{format_double(m.voltages[i])};
        for (Eigen::Index j = 0; j < m.intensity.cols(); ++j) row.push_back(format_double(m.intensity(static_cast<Eigen::Index>(i), j)));
        t.rows.push_back(std::move(row));
    }
    return format_csv(t);
}

inline PlateauMap parse_plateau_map_csv(std::string_view text) {
    const auto t = parse_csv(text);
    if (t.header.size() < 2) throw FormatError("plateau map csv: no wavelength columns");
    PlateauMap m;
    for (std::size_t j = 1; j < t.header.size(); ++j) m.wavelengths_nm.push_back(parse_double(t.header[j]));
    m.intensity.resize(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(m.wavelengths_nm.size()));
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        m.voltages.push_back(parse_double(t.rows[i][0]));
        for (std::size_t j = 1; j < t.rows[i].size(); ++j)
            m.intensity(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j - 1)) = parse_double(t.rows[i][j]);
    }
    try {
        validate(m);
    } catch (const ContractError& e) {
        throw FormatError(e.what());
    }
    return m;
}

enum class ExcitonLabel { x0, xplus, other };

inline std::string to_string(ExcitonLabel l) {
    switch (l) {
        case ExcitonLabel::x0: return "X0";
        case ExcitonLabel::xplus: return "Xplus";
        default: return "other";
    }
}

inline ExcitonLabel exciton_label_from_string(const std::string& s) {
    if (s == "X0") return ExcitonLabel::x0;
    if (s == "Xplus") return ExcitonLabel::xplus;
    if (s == "other") return ExcitonLabel::other;
    throw FormatError(fmt::format("unknown exciton label '{}'", s));
}

struct TracePoint {
    double volts = 0.0;
    double lambda_nm = 0.0;
    double weight = 1.0;  ///< relative; only ratios matter
};

struct PlateauTrace {
    ExcitonLabel label = ExcitonLabel::other;
    std::vector<TracePoint> points;

    double v_min() const { return points.empty() ? 0.0 : points.front().volts; }
    double v_max() const { return points.empty() ? 0.0 : points.back().volts; }
};

struct PlateauOptions {
    int max_peaks = 3;            ///< per voltage column
    double continuity_nm = 0.15;  ///< largest wavelength step between adjacent columns
    std::size_t min_points = 5;
    int half_window = 5;          ///< samples per side for each line fit
    double threshold_k = 5.0;     ///< peaks must exceed median + k·noise
    double min_fraction = 0.1;    ///< and this fraction of the column's peak height
};

/// Tracks emission lines across voltage columns. The two longest traces are labelled by onset:
/// the one appearing at lower bias is X⁺, the other X⁰. A lone trace is X⁰.
inline std::vector<PlateauTrace> extract_plateaus(const PlateauMap& map, const PlateauOptions& opt = {}) {
    validate(map);
    if (opt.max_peaks < 1 || !(opt.continuity_nm > 0.0) || opt.min_points < 1)
        throw ContractError("extract_plateaus: invalid options");
    struct Open {
        PlateauTrace trace;
        std::size_t last_col;
    };
    std::vector<Open> traces;
    const std::size_t nw = map.wavelengths_nm.size();
    for (std::size_t c = 0; c < map.voltages.size(); ++c) {
        std::vector<double> row(nw);
        for (std::size_t j = 0; j < nw; ++j) row[j] = map.intensity(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j));
        const auto [med, mad] = detail::median_mad(row);
        const double top = *std::max_element(row.begin(), row.end());
        if (!(top > med)) continue;
        const double thr = med + std::max(opt.threshold_k * 1.4826 * mad, opt.min_fraction * (top - med));
        std::vector<std::size_t> maxima;
        for (std::size_t j = 1; j + 1 < nw; ++j)
            if (row[j] > thr && row[j] > row[j - 1] && row[j] >= row[j + 1]) maxima.push_back(j);
        std::sort(maxima.begin(), maxima.end(), [&row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
        if (maxima.size() > static_cast<std::size_t>(opt.max_peaks)) maxima.resize(static_cast<std::size_t>(opt.max_peaks));

        // noise can split one line into neighbouring maxima; keep the strongest fit per line
        std::vector<TracePoint> peaks;
        std::vector<double> widths;
        for (std::size_t j : maxima) {
            try {
                const auto f = detail::fit_line_window(map.wavelengths_nm, row, j, opt.half_window, false);
                bool duplicate = false;
                for (std::size_t k = 0; k < peaks.size(); ++k) duplicate |= std::fabs(peaks[k].lambda_nm - f.lambda_nm) < widths[k];
                if (duplicate) continue;
                const double sd = std::max(0.5 * f.unc_nm, 1e-6);
                peaks.push_back({map.voltages[c], f.lambda_nm, 1.0 / (sd * sd)});
                widths.push_back(f.fwhm_nm);
            } catch (const FitError&) {
            }
        }

        // greedy nearest-first linking to traces that were extended in the previous column
        struct Cand {
            double d;
            std::size_t t, p;
        };
        std::vector<Cand> cands;
        for (std::size_t t = 0; t < traces.size(); ++t) {
            if (c == 0 || traces[t].last_col != c - 1) continue;
            for (std::size_t p = 0; p < peaks.size(); ++p) {
                const double d = std::fabs(peaks[p].lambda_nm - traces[t].trace.points.back().lambda_nm);
                if (d <= opt.continuity_nm) cands.push_back({d, t, p});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return std::tie(a.d, a.t, a.p) < std::tie(b.d, b.t, b.p); });
        std::vector<bool> t_used(traces.size(), false), p_used(peaks.size(), false);
        for (const auto& k : cands) {
            if (t_used[k.t] || p_used[k.p]) continue;
            t_used[k.t] = p_used[k.p] = true;
            traces[k.t].trace.points.push_back(peaks[k.p]);
            traces[k.t].last_col = c;
        }
        for (std::size_t p = 0; p < peaks.size(); ++p)
            if (!p_used[p]) traces.push_back({PlateauTrace{ExcitonLabel::other, {peaks[p]}}, c});
    }

    std::vector<PlateauTrace> out;
    for (auto& t : traces)
        if (t.trace.points.size() >= opt.min_points) out.push_back(std::move(t.trace));
    std::vector<std::size_t> order(out.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&out](std::size_t a, std::size_t b) { return out[a].points.size() > out[b].points.size(); });
    if (out.size() == 1) {
        out[0].label = ExcitonLabel::x0;
    } else if (out.size() >= 2) {
        auto& a = out[order[0]];
        auto& b = out[order[1]];
        const bool a_first = a.v_min() < b.v_min() || (a.v_min() == b.v_min() && a.points.front().lambda_nm < b.points.front().lambda_nm);
        (a_first ? a : b).label = ExcitonLabel::xplus;
        (a_first ? b : a).label = ExcitonLabel::x0;
    }
    std::stable_sort(out.begin(), out.end(), [](const PlateauTrace& a, const PlateauTrace& b) {
        return std::make_tuple(static_cast<int>(a.label == ExcitonLabel::other), a.v_min(), a.points.front().lambda_nm) <
               std::make_tuple(static_cast<int>(b.label == ExcitonLabel::other), b.v_min(), b.points.front().lambda_nm);
    });
    return out;
}

/// Mean wavelength change of one exciton line between two maps, over the voltages both traces
/// cover; unc is twice the standard error of that mean.
inline SpectralShift plateau_offset(const PlateauTrace& before, const PlateauTrace& after) {
    std::vector<double> d;
    std::size_t j = 0;
    for (const auto& p : before.points) {
        while (j < after.points.size() && after.points[j].volts < p.volts - 1e-9) ++j;
        if (j < after.points.size() && std::fabs(after.points[j].volts - p.volts) <= 1e-9) d.push_back(after.points[j].lambda_nm - p.lambda_nm);
    }
    if (d.empty()) throw ContractError("plateau_offset: traces share no voltage");
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    double ss = 0.0;
    for (double x : d) ss += (x - mean) * (x - mean);
    const double se = d.size() > 1 ? std::sqrt(ss / static_cast<double>(d.size() - 1) / static_cast<double>(d.size())) : 0.0;
    return {mean, 2.0 * se};
}

// --- Stark fit -----------------------------------------------------------------------

/// E(F) = hc/λ₀ − p_z·F + α·F², energies in meV, fields in kV/cm.
struct StarkModel {
    double lambda0_nm = 930.0;
    double pz = 0.0;     ///< meV per kV/cm
    double alpha = 0.0;  ///< meV per (kV/cm)²
    FieldConfig field;
    ExcitonLabel label = ExcitonLabel::other;
    Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();  ///< over (E₀ [meV], p_z, α)
    double lambda0_ci95_nm = 0.0;
    double pz_ci95 = 0.0;
    double alpha_ci95 = 0.0;
    std::size_t n_points = 0;
    double residual_rms_mev = 0.0;

    double e0_mev() const { return kHcMevNm / lambda0_nm; }
    double energy_mev(double f_kv_cm) const { return e0_mev() - pz * f_kv_cm + alpha * f_kv_cm * f_kv_cm; }
    double wavelength_nm(double volts) const { return kHcMevNm / energy_mev(qdalign::field(volts, field)); }
    /// Field of the energy extremum.
    double vertex_field() const { return pz / (2.0 * alpha); }
};

/// Weighted least squares of E = hc/λ against F. Point weights refer to wavelength and are
/// carried into energy through dE/dλ.
inline StarkModel fit_stark(const PlateauTrace& trace, const FieldConfig& cfg) {
    const std::size_t n = trace.points.size();
    if (n < 5) throw ContractError(fmt::format("fit_stark: {} points, at least 5 required", n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto& p = trace.points[i];
        if (!(p.lambda_nm > 0.0) || !(p.weight > 0.0) || !std::isfinite(p.volts) || !std::isfinite(p.weight))
            throw ContractError("fit_stark: points need positive wavelength and weight");
        if (i && !(p.volts > trace.points[i - 1].volts)) throw ContractError("fit_stark: voltages must increase strictly");
    }
    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 3);
    Eigen::VectorXd y(static_cast<Eigen::Index>(n)), sw(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto& p = trace.points[i];
        const auto k = static_cast<Eigen::Index>(i);
        const double f = field(p.volts, cfg);
        const double de_dl = kHcMevNm / (p.lambda_nm * p.lambda_nm);
        sw[k] = std::sqrt(p.weight) / de_dl;
        x.row(k) << 1.0, -f, f * f;
        y[k] = kHcMevNm / p.lambda_nm;
    }
    const Eigen::MatrixXd a = sw.asDiagonal() * x;
    const Eigen::VectorXd b = sw.asDiagonal() * y;
    const Eigen::Vector3d scale = a.colwise().norm().transpose();
    if (!(scale.minCoeff() > 0.0)) throw ConditioningError("fit_stark: zero field span");
    const Eigen::MatrixXd an = a * scale.cwiseInverse().asDiagonal();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(an, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    if (!(sv[2] > 1e-10 * sv[0]))
        throw ConditioningError(fmt::format("fit_stark: field span too narrow (condition number {:.3g})", sv[0] / sv[2]));
    const Eigen::Vector3d beta = scale.cwiseInverse().asDiagonal() * svd.solve(b);

    const Eigen::VectorXd r = b - a * beta;
    const double dof = static_cast<double>(n) - 3.0;
    const double s2 = r.squaredNorm() / dof;
    const Eigen::Matrix3d vinv = svd.matrixV() * sv.cwiseAbs2().cwiseInverse().asDiagonal() * svd.matrixV().transpose();
    const Eigen::Matrix3d cov = scale.cwiseInverse().asDiagonal() * vinv * scale.cwiseInverse().asDiagonal() * s2;

    StarkModel m;
    m.field = cfg;
    m.label = trace.label;
    m.lambda0_nm = kHcMevNm / beta[0];
    m.pz = beta[1];
    m.alpha = beta[2];
    m.covariance = cov;
    m.lambda0_ci95_nm = 2.0 * std::sqrt(std::max(cov(0, 0), 0.0)) * kHcMevNm / (beta[0] * beta[0]);
    m.pz_ci95 = 2.0 * std::sqrt(std::max(cov(1, 1), 0.0));
    m.alpha_ci95 = 2.0 * std::sqrt(std::max(cov(2, 2), 0.0));
    m.n_points = n;
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto k = static_cast<Eigen::Index>(i);
        const double e = y[k] - x.row(k).dot(beta);
        ss += e * e;
    }
    m.residual_rms_mev = std::sqrt(ss / static_cast<double>(n));
    return m;
}

struct StarkDelta {
    double d_lambda0_nm = 0.0;
    double d_pz = 0.0;
    double d_alpha = 0.0;
    double d_lambda0_ci95_nm = 0.0;
    double d_pz_ci95 = 0.0;
    double d_alpha_ci95 = 0.0;
};

/// after − before, intervals combined in quadrature.
inline StarkDelta compare_stark(const StarkModel& before, const StarkModel& after) {
    if (!(before.field == after.field)) throw ContractError("compare_stark: models use different field configurations");
    return {after.lambda0_nm - before.lambda0_nm,
            after.pz - before.pz,
            after.alpha - before.alpha,
            std::hypot(before.lambda0_ci95_nm, after.lambda0_ci95_nm),
            std::hypot(before.pz_ci95, after.pz_ci95),
            std::hypot(before.alpha_ci95, after.alpha_ci95)};
}

inline nlohmann::json to_json(const StarkModel& m) {
    nlohmann::json j;
    j["label"] = to_string(m.label);
    j["lambda0_nm"] = m.lambda0_nm;
    j["lambda0_ci95_nm"] = m.lambda0_ci95_nm;
    j["pz_meV_per_kV_cm"] = m.pz;
    j["pz_ci95"] = m.pz_ci95;
    j["alpha_meV_per_kV2_cm2"] = m.alpha;
    j["alpha_ci95"] = m.alpha_ci95;
    j["thickness_nm"] = m.field.thickness_nm;
    j["builtin_field_kV_cm"] = m.field.builtin_kv_cm;
    j["n_points"] = m.n_points;
    j["residual_rms_meV"] = m.residual_rms_mev;
    j["covariance"] = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) j["covariance"].push_back({m.covariance(r, 0), m.covariance(r, 1), m.covariance(r, 2)});
    return j;
}

inline StarkModel stark_from_json(const nlohmann::json& j) {
    try {
        StarkModel m;
        m.label = exciton_label_from_string(j.at("label").get<std::string>());
        m.lambda0_nm = j.at("lambda0_nm").get<double>();
        m.lambda0_ci95_nm = j.at("lambda0_ci95_nm").get<double>();
        m.pz = j.at("pz_meV_per_kV_cm").get<double>();
        m.pz_ci95 = j.at("pz_ci95").get<double>();
        m.alpha = j.at("alpha_meV_per_kV2_cm2").get<double>();
        m.alpha_ci95 = j.at("alpha_ci95").get<double>();
        m.field.thickness_nm = j.at("thickness_nm").get<double>();
        m.field.builtin_kv_cm = j.at("builtin_field_kV_cm").get<double>();
        m.n_points = j.at("n_points").get<std::size_t>();
        m.residual_rms_mev = j.at("residual_rms_meV").get<double>();
        const auto& c = j.at("covariance");
        for (int r = 0; r < 3; ++r)
            for (int k = 0; k < 3; ++k) m.covariance(r, k) = c.at(r).at(k).get<double>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("stark model json: {}", e.what()));
    }
}

inline nlohmann::json to_json(const StarkDelta& d) {
    return {{"d_lambda0_nm", d.d_lambda0_nm}, {"d_lambda0_ci95_nm", d.d_lambda0_ci95_nm}, {"d_pz", d.d_pz},
            {"d_pz_ci95", d.d_pz_ci95},       {"d_alpha", d.d_alpha},                     {"d_alpha_ci95", d.d_alpha_ci95}};
}

// --- generators ----------------------------------------------------------------------

/// Gaussian emission line on a linear background.
struct SpectralLine {
    double center_nm = 935.0;
    double fwhm_nm = 0.1;
    double amplitude = 1000.0;
    double background = 20.0;
    double slope_per_nm = 0.0;  ///< background slope about the grid center
};

struct SpectrumGrid {
    double lo_nm = 930.0;
    double hi_nm = 940.0;
    std::size_t samples = 501;
};

/// Noise-free when `seed` is empty, Poisson counts otherwise.
inline Spectrum synth_spectrum(const SpectralLine& line, const SpectrumGrid& grid, std::optional<std::uint64_t> seed = std::nullopt) {
    if (grid.samples < 8 || !(grid.hi_nm > grid.lo_nm) || !(line.fwhm_nm > 0.0)) throw ContractError("synth_spectrum: invalid grid or line");
    Spectrum s;
    const double mid = 0.5 * (grid.lo_nm + grid.hi_nm);
    const double w = line.fwhm_nm / 2.3548200450309493;
    std::optional<Rng> rng;
    if (seed) rng.emplace(*seed);
    for (std::size_t i = 0; i < grid.samples; ++i) {
        const double l = grid.lo_nm + (grid.hi_nm - grid.lo_nm) * static_cast<double>(i) / static_cast<double>(grid.samples - 1);
        const double u = (l - line.center_nm) / w;
        double v = line.amplitude * std::exp(-0.5 * u * u) + line.background + line.slope_per_nm * (l - mid);
        v = std::max(v, 0.0);
        if (rng) v = rng->poisson(v);
        s.wavelengths_nm.push_back(l);
        s.intensities.push_back(v);
    }
    return s;
}

/// Points on a known Stark curve, optionally with Gaussian wavelength noise.
inline PlateauTrace synth_trace(const StarkModel& m, const std::vector<double>& volts, double noise_nm = 0.0, std::uint64_t seed = 0) {
    PlateauTrace t;
    t.label = m.label;
    Rng rng(seed);
    for (double v : volts) t.points.push_back({v, m.wavelength_nm(v) + (noise_nm > 0.0 ? noise_nm * rng.normal() : 0.0), 1.0});
    return t;
}

/// One charge plateau: a Stark-shifted line visible over [v_min, v_max].
struct PlateauRidge {
    StarkModel model;
    double v_min = 0.0;
    double v_max = 1.0;
    double amplitude = 500.0;
    double fwhm_nm = 0.05;
};

struct PlateauMapSpec {
    std::vector<double> voltages;
    std::vector<double> wavelengths_nm;
    std::vector<PlateauRidge> ridges;
    double background = 10.0;
    bool shot_noise = true;
    std::uint64_t seed = 0;
};

inline PlateauMap render_plateau_map(const PlateauMapSpec& spec) {
    PlateauMap m;
    m.voltages = spec.voltages;
    m.wavelengths_nm = spec.wavelengths_nm;
    m.intensity = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(m.voltages.size()), static_cast<Eigen::Index>(m.wavelengths_nm.size()),
                                            spec.background);
    for (std::size_t i = 0; i < m.voltages.size(); ++i)
        for (const auto& r : spec.ridges) {
            if (m.voltages[i] < r.v_min || m.voltages[i] > r.v_max) continue;
            const double c = r.model.wavelength_nm(m.voltages[i]);
            const double w = r.fwhm_nm / 2.3548200450309493;
            for (std::size_t j = 0; j < m.wavelengths_nm.size(); ++j) {
                const double u = (m.wavelengths_nm[j] - c) / w;
                m.intensity(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += r.amplitude * std::exp(-0.5 * u * u);
            }
        }
    if (spec.shot_noise) {
        Rng rng(spec.seed);
        for (Eigen::Index i = 0; i < m.intensity.rows(); ++i)
            for (Eigen::Index j = 0; j < m.intensity.cols(); ++j) m.intensity(i, j) = rng.poisson(m.intensity(i, j));
    }
    validate(m);
    return m;
}

}  // namespace qdalign
