#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qdalign/csv.hpp"
#include "qdalign/image.hpp"
#include "qdalign/pipeline.hpp"
#include "qdalign/presets.hpp"
#include "qdalign/random.hpp"
#include "qdalign/stark.hpp"
#include "qdalign/synth.hpp"

namespace qdalign {

struct CorpusOptions {
    std::optional<int> n;  ///< scenes (devices, QDs per spectral population, or Stark QDs); preset default when empty
    std::uint64_t seed = 1;
    int jobs = 1;
    /// pre-fabrication grid squares written alongside the devices; by default enough squares for
    /// every device to sit on one of their QDs
    std::optional<int> squares;
};

inline int default_scene_count(PresetKind k) {
    switch (k) {
        case PresetKind::devices: return 50;
        case PresetKind::spectra: return 30;
        case PresetKind::stark: return 1;
    }
    return 0;
}

struct TruthRow {
    std::string scene_id;
    std::string feature_kind;
    double true_x_nm = 0.0;
    double true_y_nm = 0.0;
    std::string params;  ///< key=value pairs separated by ';'
    std::string rng;
};

inline const std::vector<std::string>& truth_header() {
    static const std::vector<std::string> h{"scene_id", "feature_kind", "true_x_nm", "true_y_nm", "params", "rng"};
    return h;
}

inline std::string truth_csv(const std::vector<TruthRow>& rows) {
    CsvTable t;
    t.header = truth_header();
    for (const auto& r : rows)
        t.rows.push_back({r.scene_id, r.feature_kind, format_double(r.true_x_nm), format_double(r.true_y_nm), r.params, r.rng});
    return format_csv(t);
}

inline std::vector<TruthRow> parse_truth_csv(std::string_view text) {
    const auto t = parse_csv(text);
    if (t.header != truth_header()) throw FormatError("truth csv: unexpected header");
    std::vector<TruthRow> out;
    for (const auto& r : t.rows) out.push_back({r[0], r[1], parse_double(r[2]), parse_double(r[3]), r[4], r[5]});
    return out;
}

/// Value of `key` in a "k=v;k=v" parameter string.
inline std::optional<std::string> truth_param(const std::string& params, const std::string& key) {
    std::size_t start = 0;
    while (start <= params.size()) {
        auto end = params.find(';', start);
        if (end == std::string::npos) end = params.size();
        const auto item = std::string_view(params).substr(start, end - start);
        const auto eq = item.find('=');
        if (eq != std::string_view::npos && item.substr(0, eq) == key) return std::string(item.substr(eq + 1));
        start = end + 1;
    }
    return std::nullopt;
}

inline std::string rng_tag(std::uint64_t seed) { return fmt::format("{}#{}", kRngAlgorithm, seed); }

inline nlohmann::json preset_json(const Preset& p) {
    nlohmann::json j;
    j["name"] = p.name;
    const auto& s = p.square;
    j["square"] = {{"doped", s.doped},
                   {"width", s.frame.width},
                   {"height", s.frame.height},
                   {"pitch_nm", s.frame.pitch_nm},
                   {"square_nm", s.square_nm},
                   {"arm_length_nm", s.arm_length_nm},
                   {"arm_width_nm", s.arm_width_nm},
                   {"envelope_amplitude", s.envelope_amplitude},
                   {"envelope_sigma_px", s.envelope_sigma_px},
                   {"brightness_factor", s.brightness_factor},
                   {"marker_exposure_s", s.marker_exposure_s},
                   {"blur_nm", s.blur_nm},
                   {"rotation_deg", s.rotation_deg},
                   {"emitters", s.emitters},
                   {"qd_photons", s.qd_photons},
                   {"qd_sigma_nm", s.qd_sigma_nm},
                   {"emitter_background", s.emitter_background}};
    const auto& d = p.device;
    j["device"] = {{"doped", d.doped},
                   {"width", d.frame.width},
                   {"height", d.frame.height},
                   {"orientation", to_string(d.orientation)},
                   {"wl_background", d.wl_background},
                   {"guide_brightness", d.guide_brightness},
                   {"edge_ratio", d.edge_ratio},
                   {"guide_width_nm", d.guide_width_nm},
                   {"trench_offset_nm", d.trench_offset_nm},
                   {"qd_photons", d.qd_photons},
                   {"qd_airy_scale_nm", d.qd_airy_scale_nm},
                   {"qd_background", d.qd_background},
                   {"delta_mean_nm", d.delta_mean_nm},
                   {"delta_std_nm", d.delta_std_nm}};
    return j;
}

inline nlohmann::json grid_json(const GridGeometry& g) {
    return {{"pitch_nm", g.pitch_nm},           {"origin_x_nm", g.origin_x_nm}, {"origin_y_nm", g.origin_y_nm},
            {"arm_length_nm", g.arm_length_nm}, {"arm_width_nm", g.arm_width_nm}};
}

inline GridGeometry grid_from_json(const nlohmann::json& j) {
    GridGeometry g;
    g.pitch_nm = j.value("pitch_nm", g.pitch_nm);
    g.origin_x_nm = j.value("origin_x_nm", g.origin_x_nm);
    g.origin_y_nm = j.value("origin_y_nm", g.origin_y_nm);
    g.arm_length_nm = j.value("arm_length_nm", g.arm_length_nm);
    g.arm_width_nm = j.value("arm_width_nm", g.arm_width_nm);
    return g;
}

struct CorpusSummary {
    std::filesystem::path root;
    std::vector<std::string> files;  ///< relative to root, sorted
    std::size_t truth_rows = 0;
    nlohmann::json config;  ///< run configuration for the matching analysis subcommand
};

namespace detail {

inline void write_text(const std::filesystem::path& root, const std::string& rel, const std::string& text, std::vector<std::string>& files) {
    write_file_atomic(root / rel, text);
    files.push_back(rel);
}

inline void emit_devices(const Preset& p, const CorpusOptions& opt, int n, const std::filesystem::path& root, std::vector<TruthRow>& truth,
                         std::vector<std::string>& files, nlohmann::json& cfg) {
    const int per_square = std::max(p.square.emitters, 1);
    const int squares = n > 0 ? std::max(opt.squares.value_or((n + per_square - 1) / per_square), 0) : 0;
    cfg["kind"] = "devices";
    cfg["mode"] = p.square.doped ? "doped" : "intrinsic";
    cfg["squares"] = nlohmann::json::array();
    cfg["devices"] = nlohmann::json::array();
    if (squares > 0) std::filesystem::create_directories(root / "squares");
    if (n > 0) std::filesystem::create_directories(root / "devices");

    std::vector<std::vector<TruthRow>> square_rows(static_cast<std::size_t>(squares));
    parallel_for(static_cast<std::size_t>(squares), opt.jobs, [&](std::size_t k) {
        const auto seed = derive_seed(derive_seed(opt.seed, 1), k);
        const auto sc = make_square(p.square, seed);
        auto mk = render(sc.markers, p.square.frame);
        auto em = render(sc.emitters, p.square.frame);
        const auto grid = p.square.grid();
        for (Image* img : {&mk, &em}) {
            img->set_meta("grid_pitch_nm", format_double(grid.pitch_nm));
            img->set_meta("grid_origin_x_nm", format_double(grid.origin_x_nm));
            img->set_meta("grid_origin_y_nm", format_double(grid.origin_y_nm));
        }
        const auto id = fmt::format("square_{:03}", k);
        save_image(mk, root / "squares" / (id + "_markers.pgm"));
        save_image(em, root / "squares" / (id + "_emitters.pgm"));
        auto& rows = square_rows[k];
        for (std::size_t c = 0; c < sc.markers.crosses.size(); ++c) {
            const auto& cr = sc.markers.crosses[c];
            const auto q = image_position(sc.markers, p.square.frame, cr.center_x_nm, cr.center_y_nm);
            rows.push_back({id, "cross", q[0], q[1],
                            fmt::format("node={}_{};grid_x_nm={};grid_y_nm={}", k + c % 2, c / 2, format_double((static_cast<double>(k) + c % 2) * p.square.square_nm),
                                        format_double((c / 2) * p.square.square_nm)),
                            rng_tag(sc.markers.seed)});
        }
        for (std::size_t e = 0; e < sc.emitters.emitters.size(); ++e) {
            const auto& em_spec = sc.emitters.emitters[e];
            const auto q = image_position(sc.emitters, p.square.frame, em_spec.x_nm, em_spec.y_nm);
            rows.push_back({id, "qd", q[0], q[1],
                            fmt::format("grid_x_nm={};grid_y_nm={};photons={};psf=gaussian;sigma_nm={}", format_double(static_cast<double>(k) * p.square.square_nm + sc.qd_grid_nm[e][0]),
                                        format_double(sc.qd_grid_nm[e][1]), format_double(em_spec.photons), format_double(em_spec.psf_scale_nm)),
                            rng_tag(sc.emitters.seed)});
        }
    });
    for (int k = 0; k < squares; ++k) {
        const auto id = fmt::format("square_{:03}", k);
        files.push_back("squares/" + id + "_emitters.pgm");
        files.push_back("squares/" + id + "_markers.pgm");
        for (auto& r : square_rows[static_cast<std::size_t>(k)]) truth.push_back(std::move(r));
        cfg["squares"].push_back({{"id", id},
                                  {"markers", "squares/" + id + "_markers.pgm"},
                                  {"emitters", "squares/" + id + "_emitters.pgm"},
                                  {"grid", grid_json(p.square.grid())},
                                  {"node_offset", {k, 0}}});
    }

    std::vector<double> deltas(static_cast<std::size_t>(n));
    Rng draw(derive_seed(opt.seed, 3));
    for (auto& d : deltas) d = draw.normal(p.device.delta_mean_nm, p.device.delta_std_nm);
    std::vector<std::vector<TruthRow>> device_rows(static_cast<std::size_t>(n));
    // device i carries QD (i mod E) of square (i / E) when that square exists
    std::vector<std::vector<std::array<double, 2>>> square_qds(static_cast<std::size_t>(squares));
    for (int k = 0; k < squares; ++k) square_qds[static_cast<std::size_t>(k)] = make_square(p.square, derive_seed(derive_seed(opt.seed, 1), k)).qd_grid_nm;
    parallel_for(static_cast<std::size_t>(n), opt.jobs, [&](std::size_t i) {
        const auto sc = make_device(p.device, derive_seed(derive_seed(opt.seed, 2), i), deltas[i]);
        const auto id = fmt::format("device_{:03}", i);
        auto wl = render(sc.wetting, p.device.frame);
        auto qd = render(sc.qd, p.device.frame);
        const std::size_t k = i / static_cast<std::size_t>(per_square), e = i % static_cast<std::size_t>(per_square);
        if (k < square_qds.size() && e < square_qds[k].size()) {
            const double gx = static_cast<double>(k) * p.square.square_nm + square_qds[k][e][0], gy = square_qds[k][e][1];
            for (Image* img : {&wl, &qd}) {
                img->set_meta("origin_x_nm", format_double(gx - sc.qd_x_nm));
                img->set_meta("origin_y_nm", format_double(gy - sc.qd_y_nm));
            }
        }
        save_image(wl, root / "devices" / (id + "_wl.pgm"));
        save_image(qd, root / "devices" / (id + "_qd.pgm"));
        const bool along_x = p.device.orientation == Orientation::along_x;
        const auto o = to_string(p.device.orientation);
        device_rows[i].push_back({id, "qd", sc.qd_x_nm, sc.qd_y_nm,
                                  fmt::format("delta_nm={};orientation={};psf=airy;photons={}", format_double(sc.delta_nm), o,
                                              format_double(p.device.qd_photons)),
                                  rng_tag(sc.qd.seed)});
        device_rows[i].push_back({id, "guide_axis", along_x ? sc.qd_x_nm : sc.axis_nm, along_x ? sc.axis_nm : sc.qd_y_nm,
                                  fmt::format("delta_nm={};orientation={};width_nm={}", format_double(sc.delta_nm), o,
                                              format_double(p.device.guide_width_nm)),
                                  rng_tag(sc.wetting.seed)});
    });
    for (int i = 0; i < n; ++i) {
        const auto id = fmt::format("device_{:03}", i);
        files.push_back("devices/" + id + "_qd.pgm");
        files.push_back("devices/" + id + "_wl.pgm");
        for (auto& r : device_rows[static_cast<std::size_t>(i)]) truth.push_back(std::move(r));
        cfg["devices"].push_back({{"id", id},
                                  {"wetting", "devices/" + id + "_wl.pgm"},
                                  {"qd", "devices/" + id + "_qd.pgm"},
                                  {"orientation", to_string(p.device.orientation)}});
    }
}

inline void emit_spectra(const Preset& p, const CorpusOptions& opt, int n, const std::filesystem::path& root, std::vector<TruthRow>& truth,
                         std::vector<std::string>& files, nlohmann::json& cfg) {
    cfg["kind"] = "spectra";
    cfg["spectra"] = nlohmann::json::array();
    struct Job {
        const ShiftPopulation* pop;
        std::string id;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    std::size_t k = 0;
    for (const auto& pop : p.shifts.populations)
        for (int i = 0; i < n; ++i, ++k)
            jobs.push_back({&pop, fmt::format("qd_{:04}", k), derive_seed(derive_seed(opt.seed, 4), k)});
    if (!jobs.empty()) std::filesystem::create_directories(root / "spectra");
    std::vector<ShiftPair> pairs(jobs.size());
    parallel_for(jobs.size(), opt.jobs, [&](std::size_t j) {
        pairs[j] = make_shift_pair(p.shifts, *jobs[j].pop, jobs[j].seed, jobs[j].id);
        write_file_atomic(root / "spectra" / (jobs[j].id + "_before.csv"), spectrum_csv(pairs[j].before));
        write_file_atomic(root / "spectra" / (jobs[j].id + "_after.csv"), spectrum_csv(pairs[j].after));
    });
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        const auto& r = pairs[j].record;
        files.push_back("spectra/" + r.qd_id + "_after.csv");
        files.push_back("spectra/" + r.qd_id + "_before.csv");
        std::string params = fmt::format("delta_nm={};wafer={};structure={}", format_double(r.delta_nm), r.wafer, to_string(r.structure));
        nlohmann::json entry{{"id", r.qd_id},
                             {"wafer", r.wafer},
                             {"structure", to_string(r.structure)},
                             {"before", "spectra/" + r.qd_id + "_before.csv"},
                             {"after", "spectra/" + r.qd_id + "_after.csv"}};
        if (r.width_nm) {
            params += fmt::format(";width_nm={}", format_double(*r.width_nm));
            entry["width_nm"] = *r.width_nm;
        }
        if (r.offset_nm) {
            params += fmt::format(";offset_axis={};offset_nm={}", r.offset_axis, format_double(*r.offset_nm));
            entry["offset_axis"] = r.offset_axis;
            entry["offset_nm"] = *r.offset_nm;
        }
        truth.push_back({r.qd_id, "spectral_line", pairs[j].bulk_nm, pairs[j].bulk_nm + r.delta_nm, params, rng_tag(jobs[j].seed)});
        cfg["spectra"].push_back(entry);
    }
}

inline void emit_stark(const Preset& p, const CorpusOptions& opt, int n, const std::filesystem::path& root, std::vector<TruthRow>& truth,
                       std::vector<std::string>& files, nlohmann::json& cfg) {
    cfg["kind"] = "stark";
    cfg["field"] = {{"thickness_nm", p.stark.field.thickness_nm}, {"builtin_kV_cm", p.stark.field.builtin_kv_cm}};
    cfg["maps"] = nlohmann::json::array();
    if (n > 0) std::filesystem::create_directories(root / "maps");
    parallel_for(static_cast<std::size_t>(n), opt.jobs, [&](std::size_t i) {
        const auto id = fmt::format("qd_{:03}", i);
        const auto seed = derive_seed(derive_seed(opt.seed, 5), i);
        write_file_atomic(root / "maps" / (id + "_before.csv"), plateau_map_csv(render_plateau_map(p.stark.map_spec(false, derive_seed(seed, 0)))));
        write_file_atomic(root / "maps" / (id + "_after.csv"), plateau_map_csv(render_plateau_map(p.stark.map_spec(true, derive_seed(seed, 1)))));
    });
    for (int i = 0; i < n; ++i) {
        const auto id = fmt::format("qd_{:03}", i);
        const auto seed = derive_seed(derive_seed(opt.seed, 5), static_cast<std::size_t>(i));
        files.push_back("maps/" + id + "_after.csv");
        files.push_back("maps/" + id + "_before.csv");
        cfg["maps"].push_back({{"id", id}, {"before", "maps/" + id + "_before.csv"}, {"after", "maps/" + id + "_after.csv"}});
        const std::pair<const PlateauRidge*, const PlateauRidge*> ridges[] = {{&p.stark.x0_before, &p.stark.x0_after},
                                                                              {&p.stark.xplus_before, &p.stark.xplus_after}};
        for (const auto& [b, a] : ridges)
            truth.push_back({id, "stark_" + to_string(b->model.label), b->model.lambda0_nm, a->model.lambda0_nm,
                             fmt::format("pz_before={};alpha_before={};pz_after={};alpha_after={};v_min={};v_max={}",
                                         format_double(b->model.pz), format_double(b->model.alpha), format_double(a->model.pz),
                                         format_double(a->model.alpha), format_double(b->v_min), format_double(b->v_max)),
                             rng_tag(seed)});
    }
}

}  // namespace detail

/// Writes a synthetic corpus for `preset` under `root`: images or spectra, the ground-truth table
/// (truth.csv), a run configuration for the matching analysis subcommand (config.json) and a
/// manifest listing every file. Identical options give byte-identical output.
inline CorpusSummary emit_corpus(const Preset& preset, const CorpusOptions& opt, const std::filesystem::path& root) {
    const int n = opt.n.value_or(default_scene_count(preset.kind));
    if (n < 0) throw ContractError("emit_corpus: negative scene count");
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec) throw IoError(fmt::format("emit_corpus: cannot create '{}': {}", root.string(), ec.message()));

    CorpusSummary s;
    s.root = root;
    std::vector<TruthRow> truth;
    nlohmann::json cfg;
    cfg["preset"] = preset.name;
    cfg["seed"] = opt.seed;
    switch (preset.kind) {
        case PresetKind::devices: detail::emit_devices(preset, opt, n, root, truth, s.files, cfg); break;
        case PresetKind::spectra: detail::emit_spectra(preset, opt, n, root, truth, s.files, cfg); break;
        case PresetKind::stark: detail::emit_stark(preset, opt, n, root, truth, s.files, cfg); break;
    }
    detail::write_text(root, "truth.csv", truth_csv(truth), s.files);
    detail::write_text(root, "config.json", cfg.dump(2) + "\n", s.files);
    s.truth_rows = truth.size();
    s.config = cfg;

    std::sort(s.files.begin(), s.files.end());
    nlohmann::json manifest{{"preset", preset_json(preset)},
                            {"seed", opt.seed},
                            {"scenes", n},
                            {"rng", kRngAlgorithm},
                            {"pitch_nm", preset.square.frame.pitch_nm},
                            {"truth_rows", truth.size()},
                            {"files", s.files}};
    detail::write_text(root, "manifest.json", manifest.dump(2) + "\n", s.files);
    std::sort(s.files.begin(), s.files.end());
    return s;
}

}  // namespace qdalign
