#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "qdalign/qdalign.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace qdalign;

namespace {

struct Flags {
    std::string config;
    std::string out;
    std::string preset;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    std::optional<int> n;
    std::vector<std::string> prefab;
};

struct Run {
    json cfg = json::object();
    fs::path base = ".";  ///< relative paths in the config resolve against this directory
    fs::path out;
    std::uint64_t seed = 1;
    int jobs = 1;

    fs::path path(const std::string& p) const {
        const fs::path q(p);
        return q.is_absolute() ? q : base / q;
    }
};

[[noreturn]] void config_error(const std::string& stage, const std::string& what) { throw PipelineError(stage, what, true); }

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& stage) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        config_error(stage, fmt::format("config key '{}': {}", key, e.what()));
    }
}

Run make_run(const Flags& f, const std::string& stage) {
    Run r;
    if (!f.config.empty()) {
        const fs::path p(f.config);
        if (!fs::exists(p)) config_error("config", fmt::format("config file '{}' not found", f.config));
        try {
            r.cfg = json::parse(read_file(p));
        } catch (const json::exception& e) {
            config_error("config", fmt::format("config file '{}': {}", f.config, e.what()));
        }
        if (!r.cfg.is_object()) config_error("config", "config file must hold a JSON object");
        r.base = p.parent_path().empty() ? fs::path(".") : p.parent_path();
    }
    if (!f.preset.empty()) r.cfg["preset"] = f.preset;
    if (f.n) r.cfg["n"] = *f.n;
    r.seed = f.seed ? *f.seed : get_or<std::uint64_t>(r.cfg, "seed", 1, stage);
    r.jobs = f.jobs ? *f.jobs : get_or<int>(r.cfg, "jobs", 1, stage);
    if (r.jobs <= 0) r.jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (!f.out.empty()) r.out = f.out;
    else if (r.cfg.contains("out")) r.out = r.path(get_or<std::string>(r.cfg, "out", "", stage));
    else r.out = "qdalign-out";
    std::error_code ec;
    fs::create_directories(r.out, ec);
    if (ec) config_error(stage, fmt::format("cannot create output directory '{}': {}", r.out.string(), ec.message()));
    return r;
}

void require_file(const Run& r, const json& entry, const char* key, const std::string& stage) {
    if (!entry.contains(key) || !entry.at(key).is_string()) config_error(stage, fmt::format("missing '{}' path", key));
    const auto p = r.path(entry.at(key).get<std::string>());
    if (!fs::exists(p)) config_error(stage, fmt::format("{} file '{}' not found", key, p.string()));
}

Orientation orientation_from(const std::string& s, const std::string& stage) {
    if (s == "along-x") return Orientation::along_x;
    if (s == "along-y") return Orientation::along_y;
    config_error(stage, fmt::format("orientation '{}' is not along-x or along-y", s));
}

// --- simulate ---------------------------------------------------------------------------

int cmd_simulate(const Run& r) {
    const auto name = get_or<std::string>(r.cfg, "preset", "", "simulate");
    if (name.empty()) config_error("simulate", "no preset given (--preset or config 'preset')");
    Preset p;
    try {
        p = make_preset(name);
        apply_overrides(p, r.cfg);
    } catch (const ContractError& e) {
        config_error("simulate", e.what());
    }
    CorpusOptions opt;
    if (r.cfg.contains("n")) opt.n = get_or<int>(r.cfg, "n", 0, "simulate");
    if (opt.n && *opt.n < 0) config_error("simulate", "n must be non-negative");
    if (r.cfg.contains("squares")) opt.squares = get_or<int>(r.cfg, "squares", 1, "simulate");
    opt.seed = r.seed;
    opt.jobs = r.jobs;
    const auto s = emit_corpus(p, opt, r.out);
    spdlog::info("simulate: preset {} seed {}: {} files, {} truth rows in {}", name, r.seed, s.files.size(), s.truth_rows, r.out.string());
    return 0;
}

// --- locate -----------------------------------------------------------------------------

std::optional<GridGeometry> grid_from_meta(const Image& img) {
    const auto ox = img.meta("grid_origin_x_nm"), oy = img.meta("grid_origin_y_nm");
    if (!ox || !oy) return std::nullopt;
    GridGeometry g;
    g.origin_x_nm = parse_double(*ox);
    g.origin_y_nm = parse_double(*oy);
    if (const auto pt = img.meta("grid_pitch_nm")) g.pitch_nm = parse_double(*pt);
    return g;
}

int cmd_locate(const Run& r) {
    json squares = r.cfg.value("squares", json::array());
    if (squares.empty() && (r.cfg.contains("markers") || r.cfg.contains("emitters"))) {
        json one{{"id", "square"}};
        for (const char* k : {"markers", "emitters", "grid", "node_offset"})
            if (r.cfg.contains(k)) one[k] = r.cfg[k];
        squares.push_back(one);
    }
    if (!squares.is_array() || squares.empty()) config_error("markers", "no grid square given (config 'squares' or 'markers'/'emitters')");
    for (const auto& sq : squares) {
        require_file(r, sq, "markers", "markers");
        require_file(r, sq, "emitters", "emitters");
    }
    const auto kind_s = get_or<std::string>(r.cfg, "transform", "similarity", "registration");
    if (kind_s != "similarity" && kind_s != "affine") config_error("registration", fmt::format("unknown transform '{}'", kind_s));

    CsvTable located;
    located.header = {"square_id", "emitter_id", "grid_x_nm", "grid_y_nm", "delta_nm"};
    for (const auto& sq : squares) {
        const auto id = get_or<std::string>(sq, "id", "square", "markers");
        const Image markers = load_stage_image(r.path(sq["markers"].get<std::string>()), "markers");
        const Image emitters = load_stage_image(r.path(sq["emitters"].get<std::string>()), "emitters");
        LocateOptions opt;
        opt.transform = kind_s == "affine" ? TransformKind::affine : TransformKind::similarity;
        if (sq.contains("grid")) opt.grid = grid_from_json(sq["grid"]);
        else if (auto g = grid_from_meta(markers)) opt.grid = *g;
        else config_error("markers", fmt::format("{}: no grid geometry in the config or the image header", id));

        auto res = locate(markers, emitters, opt);
        std::array<int, 2> node{0, 0};
        if (sq.contains("node_offset")) node = sq["node_offset"].get<std::array<int, 2>>();
        const double ox = node[0] * opt.grid.pitch_nm, oy = node[1] * opt.grid.pitch_nm;
        res.transform.tx_nm += ox;
        res.transform.ty_nm += oy;
        for (auto& e : res.emitters) e.global.x_nm += ox, e.global.y_nm += oy;

        const fs::path dir = squares.size() == 1 ? r.out : r.out / id;
        fs::create_directories(dir);
        write_file_atomic(dir / "markers.csv", markers_csv(res));
        write_file_atomic(dir / "emitters.csv", emitters_csv(res));
        json tj = to_json(res.transform);
        tj["square_id"] = id;
        tj["node_offset"] = node;
        tj["rotation_estimate_deg"] = res.rotation.angle_deg;
        tj["rotation_uncertainty_deg"] = res.rotation.uncertainty_deg;
        tj["resampled"] = res.resampled;
        tj["pipeline_warnings"] = res.warnings;
        write_file_atomic(dir / "transform.json", tj.dump(2) + "\n");
        for (const auto& w : res.warnings) spdlog::warn("locate {}: {}", id, w);

        double mean_delta = 0.0;
        for (std::size_t i = 0; i < res.emitters.size(); ++i) {
            const auto& e = res.emitters[i];
            mean_delta += e.global.unc_nm / static_cast<double>(res.emitters.size());
            located.rows.push_back({id, fmt::format("qd{:03}", i), format_double(e.global.x_nm), format_double(e.global.y_nm),
                                    format_double(e.global.unc_nm)});
        }
        spdlog::info("locate {}: {} crosses, {} QDs, mean delta {:.2f} nm", id, res.crosses.size(), res.emitters.size(), mean_delta);
    }
    if (squares.size() > 1) write_file_atomic(r.out / "located.csv", format_csv(located));
    return 0;
}

// --- misalign ---------------------------------------------------------------------------

std::vector<GlobalPoint> read_prefab(const fs::path& p) {
    if (!fs::exists(p)) config_error("registration", fmt::format("pre-fabrication file '{}' not found", p.string()));
    std::vector<GlobalPoint> out;
    try {
        const auto t = parse_csv(read_file(p));
        const auto cx = t.column("grid_x_nm"), cy = t.column("grid_y_nm"), cd = t.column("delta_nm");
        for (const auto& row : t.rows) {
            GlobalPoint g;
            g.x_nm = parse_double(row[cx]);
            g.y_nm = parse_double(row[cy]);
            g.unc_nm = parse_double(row[cd]);
            out.push_back(g);
        }
    } catch (const FormatError& e) {
        config_error("registration", fmt::format("{}: {}", p.string(), e.what()));
    }
    return out;
}

int cmd_misalign(const Run& r, const std::vector<std::string>& prefab_flags) {
    if (!r.cfg.contains("devices")) config_error("waveguides", "no 'devices' list in the config");
    const json devices = r.cfg["devices"];
    if (!devices.is_array()) config_error("waveguides", "'devices' must be a list");
    for (const auto& d : devices) {
        require_file(r, d, "wetting", "waveguides");
        require_file(r, d, "qd", "emitters");
    }
    const auto default_orientation = get_or<std::string>(r.cfg, "orientation", "along-x", "waveguides");
    const double bin = get_or<double>(r.cfg, "bin_width_nm", 20.0, "waveguides");
    if (!(bin > 0.0)) config_error("waveguides", "bin_width_nm must be positive");
    std::vector<fs::path> prefab;
    for (const auto& p : prefab_flags) prefab.emplace_back(p);
    if (prefab.empty() && r.cfg.contains("prefab"))
        for (const auto& p : r.cfg["prefab"]) prefab.push_back(r.path(p.get<std::string>()));

    struct Outcome {
        std::string id;
        Orientation orientation = Orientation::along_x;
        std::optional<DeviceMeasurement> m;
        std::optional<std::array<double, 2>> origin;
        std::string stage, error;
    };
    std::vector<Outcome> res(devices.size());
    for (std::size_t i = 0; i < devices.size(); ++i) {
        res[i].id = get_or<std::string>(devices[i], "id", fmt::format("device_{:03}", i), "waveguides");
        res[i].orientation = orientation_from(get_or<std::string>(devices[i], "orientation", default_orientation, "waveguides"), "waveguides");
    }
    parallel_for(devices.size(), r.jobs, [&](std::size_t i) {
        auto& o = res[i];
        try {
            const Image wl = load_stage_image(r.path(devices[i]["wetting"].get<std::string>()), "waveguides");
            const Image qd = load_stage_image(r.path(devices[i]["qd"].get<std::string>()), "emitters");
            DeviceOptions opt;
            opt.orientation = o.orientation;
            o.m = measure_device(wl, qd, opt);
            const auto ox = qd.meta("origin_x_nm"), oy = qd.meta("origin_y_nm");
            if (ox && oy) o.origin = std::array<double, 2>{parse_double(*ox), parse_double(*oy)};
        } catch (const PipelineError& e) {
            o.stage = e.stage(), o.error = e.what();
        } catch (const Error& e) {
            o.stage = "waveguides", o.error = e.what();
        }
    });

    CsvTable t;
    t.header = {"device_id", "orientation", "qd_x_nm", "qd_y_nm", "qd_unc_nm", "axis_nm", "axis_unc_nm", "delta_nm", "unc_nm"};
    std::vector<double> deltas;
    json failed = json::array();
    std::vector<GlobalPoint> post;
    std::vector<std::string> post_ids;
    for (const auto& o : res) {
        if (!o.m) {
            spdlog::warn("misalign {}: {} stage failed: {}", o.id, o.stage, o.error);
            failed.push_back({{"device_id", o.id}, {"stage", o.stage}, {"error", o.error}});
            continue;
        }
        const auto& m = *o.m;
        const bool along_x = o.orientation == Orientation::along_x;
        t.rows.push_back({o.id, to_string(o.orientation), format_double(m.qd.x_nm), format_double(m.qd.y_nm),
                          format_double(along_x ? m.qd.unc_y_nm : m.qd.unc_x_nm), format_double(m.axis.axis_nm), format_double(m.axis.unc_nm),
                          format_double(m.misalignment.delta_nm), format_double(m.misalignment.unc_nm)});
        deltas.push_back(m.misalignment.delta_nm);
        if (o.origin) {
            GlobalPoint g;
            g.x_nm = (*o.origin)[0] + m.qd.x_nm;
            g.y_nm = (*o.origin)[1] + m.qd.y_nm;
            post.push_back(g);
            post_ids.push_back(o.id);
        }
    }
    write_file_atomic(r.out / "misalignment.csv", format_csv(t));

    json summary{{"devices", devices.size()}, {"measured", deltas.size()}, {"failed", failed}};
    MisalignStats stats;
    stats.n = deltas.size();
    if (deltas.size() >= 5) {
        stats = misalign_stats(deltas);
        summary["stats"] = {{"n", stats.n},
                            {"mean_nm", stats.mean},
                            {"std_nm", stats.std_dev},
                            {"anderson_darling", stats.anderson_darling},
                            {"ad_p_value", stats.ad_p_value}};
        spdlog::info("misalign: {} devices, delta = ({:.1f} +- {:.1f}) nm", stats.n, stats.mean, stats.std_dev);
    } else if (!deltas.empty()) {
        spdlog::warn("misalign: only {} devices measured; no statistics", deltas.size());
    }
    const auto bins = histogram(deltas, bin);
    write_file_atomic(r.out / "histogram.csv", histogram_csv(bins));
    write_file_atomic(r.out / "histogram.svg", histogram_svg(bins, stats, bin));

    if (!prefab.empty()) {
        std::vector<GlobalPoint> pre;
        for (const auto& p : prefab) {
            const auto pts = read_prefab(p);
            pre.insert(pre.end(), pts.begin(), pts.end());
        }
        const double radius = get_or<double>(r.cfg, "match_radius_nm", 150.0, "registration");
        const auto c = correlate_devices(pre, post, radius);
        json unmatched = json::array();
        for (std::size_t j : c.unmatched_post) unmatched.push_back(post_ids[j]);
        for (const auto& o : res)
            if (o.m && !o.origin) unmatched.push_back(o.id);
        for (const auto& u : unmatched) spdlog::warn("misalign: device {} has no pre-fabrication match", u.get<std::string>());
        summary["correlation"] = {{"matched", c.matches.size()},
                                  {"prefab_points", pre.size()},
                                  {"unmatched_devices", unmatched},
                                  {"unmatched_prefab", c.unmatched_pre.size()},
                                  {"yield", c.yield},
                                  {"yield_error", c.yield_error}};
    }
    write_file_atomic(r.out / "misalign_summary.json", summary.dump(2) + "\n");
    return 0;
}

// --- stark ------------------------------------------------------------------------------

json trace_block(const PlateauTrace& before, const PlateauTrace& after, const FieldConfig& field) {
    const auto mb = fit_stark(before, field);
    const auto ma = fit_stark(after, field);
    json j{{"before", to_json(mb)}, {"after", to_json(ma)}, {"delta", to_json(compare_stark(mb, ma))}};
    try {
        const auto off = plateau_offset(before, after);
        j["offset_nm"] = off.delta_nm;
        j["offset_ci95_nm"] = off.unc_nm;
    } catch (const ContractError&) {
        j["offset_nm"] = nullptr;
    }
    return j;
}

int cmd_stark(const Run& r) {
    const json maps = r.cfg.value("maps", json::array());
    const json spectra = r.cfg.value("spectra", json::array());
    if (maps.empty() && spectra.empty()) config_error("stark", "no 'maps' or 'spectra' in the config");
    for (const auto& m : maps) require_file(r, m, "before", "stark"), require_file(r, m, "after", "stark");
    for (const auto& s : spectra) require_file(r, s, "before", "stark"), require_file(r, s, "after", "stark");
    FieldConfig field;
    if (r.cfg.contains("field")) {
        field.thickness_nm = get_or<double>(r.cfg["field"], "thickness_nm", field.thickness_nm, "stark");
        field.builtin_kv_cm = get_or<double>(r.cfg["field"], "builtin_kV_cm", field.builtin_kv_cm, "stark");
    }
    if (!(field.thickness_nm > 0.0)) config_error("stark", "field.thickness_nm must be positive");

    std::size_t attempted = 0, failed = 0;
    json out{{"field", {{"thickness_nm", field.thickness_nm}, {"builtin_kV_cm", field.builtin_kv_cm}, {"v_i", field.v_i()}}},
             {"qds", json::array()},
             {"errors", json::array()}};
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const auto id = get_or<std::string>(maps[i], "id", fmt::format("qd_{:03}", i), "stark");
        ++attempted;
        try {
            const auto before = extract_plateaus(parse_plateau_map_csv(read_file(r.path(maps[i]["before"].get<std::string>()))));
            const auto after = extract_plateaus(parse_plateau_map_csv(read_file(r.path(maps[i]["after"].get<std::string>()))));
            json q{{"id", id}, {"traces", json::object()}};
            for (auto label : {ExcitonLabel::x0, ExcitonLabel::xplus}) {
                auto find = [&](const std::vector<PlateauTrace>& v) -> const PlateauTrace* {
                    for (const auto& t : v)
                        if (t.label == label) return &t;
                    return nullptr;
                };
                const auto* b = find(before);
                const auto* a = find(after);
                if (!b || !a) {
                    out["errors"].push_back({{"id", id}, {"trace", to_string(label)}, {"error", "trace missing before or after"}});
                    continue;
                }
                try {
                    q["traces"][to_string(label)] = trace_block(*b, *a, field);
                } catch (const Error& e) {
                    out["errors"].push_back({{"id", id}, {"trace", to_string(label)}, {"error", e.what()}});
                }
            }
            if (q["traces"].empty()) ++failed;
            out["qds"].push_back(q);
        } catch (const Error& e) {
            ++failed;
            spdlog::warn("stark {}: {}", id, e.what());
            out["errors"].push_back({{"id", id}, {"error", e.what()}});
        }
    }

    std::vector<ShiftRecord> records;
    for (std::size_t i = 0; i < spectra.size(); ++i) {
        const auto& s = spectra[i];
        ShiftRecord rec;
        rec.qd_id = get_or<std::string>(s, "id", fmt::format("qd_{:04}", i), "stark");
        ++attempted;
        try {
            rec.wafer = get_or<std::string>(s, "wafer", "", "stark");
            rec.structure = structure_from_string(get_or<std::string>(s, "structure", "nanoguide", "stark"));
            if (s.contains("width_nm")) rec.width_nm = s["width_nm"].get<double>();
            if (s.contains("offset_nm")) rec.offset_nm = s["offset_nm"].get<double>();
            rec.offset_axis = get_or<std::string>(s, "offset_axis", "", "stark");
            const auto b = parse_spectrum_csv(read_file(r.path(s["before"].get<std::string>())));
            const auto a = parse_spectrum_csv(read_file(r.path(s["after"].get<std::string>())));
            rec.delta_nm = spectral_shift(b, a).delta_nm;
            records.push_back(rec);
        } catch (const Error& e) {
            ++failed;
            spdlog::warn("stark {}: {}", rec.qd_id, e.what());
            out["errors"].push_back({{"id", rec.qd_id}, {"error", e.what()}});
        }
    }
    if (!spectra.empty()) {
        write_file_atomic(r.out / "shifts.csv", shifts_csv(records));
        std::vector<ShiftGroup> groups;
        for (auto g : {ShiftGrouping::structure, ShiftGrouping::width, ShiftGrouping::offset}) {
            const auto v = shift_stats(records, g);
            groups.insert(groups.end(), v.begin(), v.end());
        }
        write_file_atomic(r.out / "shift_stats.csv", shift_stats_csv(groups));
        json gj = json::array();
        for (const auto& g : groups)
            gj.push_back({{"group", g.key}, {"n", g.n}, {"mean_nm", g.mean_nm}, {"std_nm", g.std_defined ? json(g.std_nm) : json(nullptr)}});
        out["shift_groups"] = gj;
    }
    write_file_atomic(r.out / "stark.json", out.dump(2) + "\n");
    spdlog::info("stark: {} items, {} failed", attempted, failed);
    return attempted > 0 && failed == attempted ? 1 : 0;
}

// --- report -----------------------------------------------------------------------------

std::string html_escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        switch (c) {
            case '<': o += "&lt;"; break;
            case '>': o += "&gt;"; break;
            case '&': o += "&amp;"; break;
            case '"': o += "&quot;"; break;
            default: o += c;
        }
    }
    return o;
}

std::string html_table(const CsvTable& t, std::size_t max_rows = 200) {
    std::string h = "<table>\n<tr>";
    for (const auto& c : t.header) h += "<th>" + html_escape(c) + "</th>";
    h += "</tr>\n";
    for (std::size_t i = 0; i < t.rows.size() && i < max_rows; ++i) {
        h += "<tr>";
        for (const auto& c : t.rows[i]) h += "<td>" + html_escape(c) + "</td>";
        h += "</tr>\n";
    }
    if (t.rows.size() > max_rows) h += fmt::format("<tr><td colspan=\"{}\">… {} more rows</td></tr>\n", t.header.size(), t.rows.size() - max_rows);
    return h + "</table>\n";
}

std::string shift_bars_svg(const CsvTable& t) {
    constexpr double W = 480, row = 22, M = 160;
    const auto ck = t.column("group"), cm = t.column("mean_nm"), cs = t.column("std_nm");
    double span = 0.5;
    for (const auto& r : t.rows) span = std::max(span, std::fabs(parse_double(r[cm])) + (r[cs] == "nan" ? 0.0 : parse_double(r[cs])));
    const double H = row * static_cast<double>(t.rows.size()) + 30;
    auto sx = [&](double v) { return M + (v / span + 1.0) * 0.5 * (W - M - 20); };
    std::string svg = fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}">)" "\n", W, H);
    svg += fmt::format("<line x1=\"{:.1f}\" y1=\"0\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"#888\"/>\n", sx(0), sx(0), H - 20);
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const double y = row * static_cast<double>(i) + 15, m = parse_double(t.rows[i][cm]);
        svg += fmt::format("<text x=\"{}\" y=\"{:.1f}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n", M - 6, y + 4, html_escape(t.rows[i][ck]));
        svg += fmt::format("<circle cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"4\" fill=\"#345\"/>\n", sx(m), y);
        if (t.rows[i][cs] != "nan") {
            const double s = parse_double(t.rows[i][cs]);
            svg += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"#345\"/>\n", sx(m - s), y, sx(m + s), y);
        }
    }
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-size=\"11\" text-anchor=\"middle\">Δλ (nm)</text>\n", sx(0), H - 5);
    return svg + "</svg>\n";
}

int cmd_report(const Run& r) {
    const fs::path dir = r.cfg.contains("results") ? r.path(r.cfg["results"].get<std::string>()) : r.out;
    auto have = [&](const char* f) { return fs::exists(dir / f); };
    std::string body;
    std::string svg;
    if (have("misalignment.csv")) {
        const auto t = parse_csv(read_file(dir / "misalignment.csv"));
        const auto cd = t.column("delta_nm");
        std::vector<double> d;
        for (const auto& row : t.rows) d.push_back(parse_double(row[cd]));
        MisalignStats st;
        st.n = d.size();
        if (d.size() >= 5) st = misalign_stats(d);
        svg = histogram_svg(histogram(d, 20.0), st, 20.0);
        body += fmt::format("<h2>Misalignment</h2>\n<p>{} devices; mean {:.1f} nm, std {:.1f} nm</p>\n", st.n, st.mean, st.std_dev);
        body += svg + html_table(t);
    }
    if (have("emitters.csv")) body += "<h2>Pre-fabrication QD positions</h2>\n" + html_table(parse_csv(read_file(dir / "emitters.csv")));
    if (have("markers.csv")) body += "<h2>Alignment crosses</h2>\n" + html_table(parse_csv(read_file(dir / "markers.csv")));
    if (have("shift_stats.csv")) {
        const auto t = parse_csv(read_file(dir / "shift_stats.csv"));
        const auto bars = shift_bars_svg(t);
        if (svg.empty()) svg = bars;
        body += "<h2>Spectral shifts</h2>\n" + bars + html_table(t);
    }
    if (have("stark.json")) {
        const auto j = json::parse(read_file(dir / "stark.json"));
        CsvTable t;
        t.header = {"qd", "trace", "lambda0_before_nm", "lambda0_after_nm", "pz_before", "pz_after", "alpha_before", "alpha_after", "offset_nm"};
        for (const auto& q : j.at("qds"))
            for (const auto& [label, tr] : q.at("traces").items())
                t.rows.push_back({q.at("id").get<std::string>(), label, fmt::format("{:.4f}", tr["before"]["lambda0_nm"].get<double>()),
                                  fmt::format("{:.4f}", tr["after"]["lambda0_nm"].get<double>()),
                                  fmt::format("{:.4g}", tr["before"]["pz_meV_per_kV_cm"].get<double>()),
                                  fmt::format("{:.4g}", tr["after"]["pz_meV_per_kV_cm"].get<double>()),
                                  fmt::format("{:.4g}", tr["before"]["alpha_meV_per_kV2_cm2"].get<double>()),
                                  fmt::format("{:.4g}", tr["after"]["alpha_meV_per_kV2_cm2"].get<double>()),
                                  tr["offset_nm"].is_null() ? "" : fmt::format("{:.3f}", tr["offset_nm"].get<double>())});
        body += "<h2>Stark fits</h2>\n" + html_table(t);
    }
    if (body.empty()) config_error("report", fmt::format("no result files found in '{}'", dir.string()));
    const std::string html = "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>qdalign report</title>\n"
                             "<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse;font-size:12px}"
                             "td,th{border:1px solid #ccc;padding:2px 6px}</style></head><body>\n<h1>qdalign report</h1>\n" +
                             body + "</body></html>\n";
    write_file_atomic(r.out / "report.html", html);
    write_file_atomic(r.out / "report.svg", svg);
    spdlog::info("report: wrote {}", (r.out / "report.html").string());
    return 0;
}

void emit_error(const std::string& stage, const std::string& what, int code) {
    std::cerr << json{{"error", what}, {"stage", stage}, {"exit_code", code}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
    auto logger = spdlog::stderr_logger_st("qdalign");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    spdlog::set_level(spdlog::level::info);
    if (const char* lvl = std::getenv("QDALIGN_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));

    CLI::App app{"Deterministic QD positioning: synthetic corpora, marker registration, misalignment and Stark analysis"};
    app.require_subcommand(1);
    Flags flags;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", flags.config, "JSON run configuration");
        sub->add_option("--out", flags.out, "output directory");
        sub->add_option("--seed", flags.seed, "random seed");
        sub->add_option("--preset", flags.preset, "fig2b, fig2c, fig3 or fig5");
        sub->add_option("--jobs", flags.jobs, "worker threads (0 = all cores)");
    };
    auto* sim = app.add_subcommand("simulate", "write a synthetic corpus with ground truth");
    common(sim);
    sim->add_option("--n", flags.n, "number of scenes");
    auto* loc = app.add_subcommand("locate", "locate QDs of a grid square in the marker frame");
    common(loc);
    auto* mis = app.add_subcommand("misalign", "measure QD-waveguide misalignment of fabricated devices");
    common(mis);
    mis->add_option("--prefab", flags.prefab, "emitters.csv or located.csv from locate, for device correlation");
    auto* stk = app.add_subcommand("stark", "fit Stark plateaus and spectral shifts");
    common(stk);
    auto* rep = app.add_subcommand("report", "HTML/SVG summary of a results directory");
    common(rep);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    std::string stage = app.get_subcommands().front()->get_name();
    try {
        const Run run = make_run(flags, stage);
        if (sim->parsed()) return cmd_simulate(run);
        if (loc->parsed()) return cmd_locate(run);
        if (mis->parsed()) return cmd_misalign(run, flags.prefab);
        if (stk->parsed()) return cmd_stark(run);
        return cmd_report(run);
    } catch (const PipelineError& e) {
        const int code = e.is_config() ? 2 : 1;
        emit_error(e.stage(), e.what(), code);
        return code;
    } catch (const ContractError& e) {
        emit_error(stage, e.what(), 2);
        return 2;
    } catch (const FormatError& e) {
        emit_error(stage, e.what(), 2);
        return 2;
    } catch (const std::exception& e) {
        emit_error(stage, e.what(), 1);
        return 1;
    }
}
