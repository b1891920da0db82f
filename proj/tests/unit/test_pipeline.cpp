#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <set>
#include <stdexcept>

#include <gtest/gtest.h>

#include "qdalign/qdalign.hpp"

using namespace qdalign;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() /
                     fmt::format("qdalign_unit_{}_{}", name, std::chrono::steady_clock::now().time_since_epoch().count());
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) { return read_file(p); }

}  // namespace

TEST(Presets, KnownNamesAndUnknownRejected) {
    for (const auto& n : preset_names()) EXPECT_EQ(make_preset(n).name, n);
    EXPECT_EQ(make_preset("fig2b").kind, PresetKind::devices);
    EXPECT_TRUE(make_preset("fig2c").square.doped);
    EXPECT_EQ(make_preset("fig3").kind, PresetKind::spectra);
    EXPECT_EQ(make_preset("fig3").shifts.populations.size(), 4u);
    EXPECT_EQ(make_preset("fig5").kind, PresetKind::stark);
    EXPECT_THROW(make_preset("fig9"), ContractError);
}

TEST(Presets, SquareEmittersStayInsideAndApart) {
    const auto p = make_preset("fig2b").square;
    const auto sc = make_square(p, 17);
    ASSERT_EQ(sc.qd_grid_nm.size(), static_cast<std::size_t>(p.emitters));
    ASSERT_EQ(sc.markers.crosses.size(), 4u);
    for (std::size_t a = 0; a < sc.qd_grid_nm.size(); ++a) {
        const auto& q = sc.qd_grid_nm[a];
        EXPECT_GE(q[0], p.emitter_inset_nm);
        EXPECT_LE(q[0], p.square_nm - p.emitter_inset_nm);
        EXPECT_GE(q[1], p.emitter_inset_nm);
        EXPECT_LE(q[1], p.square_nm - p.emitter_inset_nm);
        for (std::size_t b = a + 1; b < sc.qd_grid_nm.size(); ++b)
            EXPECT_GE(std::hypot(q[0] - sc.qd_grid_nm[b][0], q[1] - sc.qd_grid_nm[b][1]), p.emitter_separation_nm);
    }
}

TEST(Presets, DeviceAxisSitsDeltaFromTheQd) {
    auto p = make_preset("fig2b").device;
    const auto d = make_device(p, 5, 37.0);
    EXPECT_DOUBLE_EQ(d.qd_y_nm - d.axis_nm, 37.0);
    ASSERT_EQ(d.wetting.waveguides.size(), 1u);
    EXPECT_DOUBLE_EQ(d.wetting.waveguides[0].axis_nm, d.axis_nm);
    p.orientation = Orientation::along_y;
    const auto v = make_device(p, 5, -12.0);
    EXPECT_DOUBLE_EQ(v.qd_x_nm - v.axis_nm, -12.0);
}

TEST(Presets, OverridesApplyAndValidate) {
    auto p = make_preset("fig2b");
    apply_overrides(p, nlohmann::json::parse(R"({"square": {"rotation_deg": 1.5, "emitters": 4},
                                                 "device": {"delta_std_nm": 10, "orientation": "along-y"}})"));
    EXPECT_DOUBLE_EQ(p.square.rotation_deg, 1.5);
    EXPECT_EQ(p.square.emitters, 4);
    EXPECT_DOUBLE_EQ(p.device.delta_std_nm, 10.0);
    EXPECT_EQ(p.device.orientation, Orientation::along_y);
    EXPECT_THROW(apply_overrides(p, nlohmann::json::parse(R"({"device": {"orientation": "diagonal"}})")), ContractError);
}

TEST(Pipeline, ParallelForVisitsEveryIndexOnceAndRethrows) {
    std::vector<std::atomic<int>> hits(257);
    parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
    EXPECT_THROW(parallel_for(50, 3, [](std::size_t i) {
                     if (i == 20) throw std::runtime_error("boom");
                 }),
                 std::runtime_error);
    int serial = 0;
    parallel_for(5, 1, [&](std::size_t) { ++serial; });
    EXPECT_EQ(serial, 5);
}

TEST(Pipeline, RotatedPositionFollowsRotate) {
    Image img(65, 49, 59.0);
    const int sx = 44, sy = 15;
    img(sx, sy) = 1000.0;
    const double angle = 7.0;
    const Image r = rotate(img, angle);
    const auto p = rotated_position(img, angle, sx, sy);
    int bx = 0, by = 0;
    for (int y = 0; y < r.height(); ++y)
        for (int x = 0; x < r.width(); ++x)
            if (r(x, y) > r(bx, by)) bx = x, by = y;
    EXPECT_LE(std::fabs(bx - p[0]), 1.0);
    EXPECT_LE(std::fabs(by - p[1]), 1.0);
    const auto back = rotated_position(img, -angle, p[0], p[1]);
    EXPECT_NEAR(back[0], sx, 1e-9);
    EXPECT_NEAR(back[1], sy, 1e-9);
}

TEST(Pipeline, LoadStageImageTagsConfigErrors) {
    const auto dir = scratch("stage");
    try {
        load_stage_image(dir / "missing.pgm", "markers");
        FAIL() << "expected a PipelineError";
    } catch (const PipelineError& e) {
        EXPECT_EQ(e.stage(), "markers");
        EXPECT_TRUE(e.is_config());
    }
    write_file_atomic(dir / "junk.pgm", "not an image");
    try {
        load_stage_image(dir / "junk.pgm", "emitters");
        FAIL() << "expected a PipelineError";
    } catch (const PipelineError& e) {
        EXPECT_EQ(e.stage(), "emitters");
        EXPECT_TRUE(e.is_config());
    }
    fs::remove_all(dir);
}

TEST(Pipeline, LocateRecoversEveryQdOfASquare) {
    const auto p = make_preset("fig2b").square;
    const auto sc = make_square(p, 42);
    LocateOptions opt;
    opt.grid = p.grid();
    const auto r = locate(render(sc.markers, p.frame), render(sc.emitters, p.frame), opt);
    EXPECT_FALSE(r.resampled);
    EXPECT_EQ(r.crosses.size(), 4u);
    ASSERT_EQ(r.emitters.size(), sc.qd_grid_nm.size());
    for (const auto& e : r.emitters) {
        double best = 1e300;
        for (const auto& q : sc.qd_grid_nm) best = std::min(best, std::hypot(e.global.x_nm - q[0], e.global.y_nm - q[1]));
        EXPECT_LT(best, 5.0 * e.global.unc_nm);
    }

    const auto m = parse_csv(markers_csv(r));
    EXPECT_EQ(m.rows.size(), 4u);
    std::set<std::string> ids;
    for (const auto& row : m.rows) ids.insert(row[m.column("cross_id")]);
    EXPECT_EQ(ids, (std::set<std::string>{"0_0", "1_0", "0_1", "1_1"}));
    const auto t = parse_csv(emitters_csv(r));
    ASSERT_EQ(t.rows.size(), r.emitters.size());
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        EXPECT_DOUBLE_EQ(parse_double(t.rows[i][t.column("grid_x_nm")]), r.emitters[i].global.x_nm);
        EXPECT_DOUBLE_EQ(parse_double(t.rows[i][t.column("delta_nm")]), r.emitters[i].global.unc_nm);
    }
}

TEST(Pipeline, LocateResamplesLargeRotations) {
    auto p = make_preset("fig2b").square;
    p.rotation_deg = 3.0;
    const auto sc = make_square(p, 9);
    LocateOptions opt;
    opt.grid = p.grid();
    const auto r = locate(render(sc.markers, p.frame), render(sc.emitters, p.frame), opt);
    EXPECT_TRUE(r.resampled);
    EXPECT_NEAR(r.rotation.angle_deg, 3.0, 0.1);
    EXPECT_EQ(r.emitters.size(), sc.qd_grid_nm.size());
    for (const auto& e : r.emitters) {
        double best = 1e300;
        for (const auto& q : sc.qd_grid_nm) best = std::min(best, std::hypot(e.global.x_nm - q[0], e.global.y_nm - q[1]));
        EXPECT_LT(best, 60.0);
    }
}

TEST(Pipeline, LocateRejectsMismatchedImages) {
    const Image a(64, 64, 59.0), b(64, 64, 60.0);
    try {
        locate(a, b);
        FAIL() << "expected a PipelineError";
    } catch (const PipelineError& e) {
        EXPECT_EQ(e.stage(), "emitters");
        EXPECT_TRUE(e.is_config());
    }
}

TEST(Pipeline, MeasureDeviceRecoversMisalignment) {
    auto p = make_preset("fig2b").device;
    for (auto o : {Orientation::along_x, Orientation::along_y}) {
        p.orientation = o;
        const auto d = make_device(p, 77, 40.0);
        DeviceOptions opt;
        opt.orientation = o;
        const auto m = measure_device(render(d.wetting, p.frame), render(d.qd, p.frame), opt);
        EXPECT_NEAR(m.misalignment.delta_nm, 40.0, 30.0);
        EXPECT_NEAR(m.qd.x_nm, d.qd_x_nm, 20.0);
        EXPECT_NEAR(m.qd.y_nm, d.qd_y_nm, 20.0);
        EXPECT_GT(m.axis.sections.size(), 3u);
    }
}

TEST(Pipeline, MeasureDeviceWithoutQdFailsInEmitterStage) {
    const auto p = make_preset("fig2b").device;
    auto d = make_device(p, 3, 0.0);
    d.qd.emitters.clear();
    try {
        measure_device(render(d.wetting, p.frame), render(d.qd, p.frame));
        FAIL() << "expected a PipelineError";
    } catch (const PipelineError& e) {
        EXPECT_EQ(e.stage(), "emitters");
        EXPECT_FALSE(e.is_config());
    }
}

TEST(Corpus, TruthCsvRoundTripsAndParamsParse) {
    std::vector<TruthRow> rows{{"device_000", "qd", 1234.5, -6.25, "delta_nm=12.5;orientation=along-x", rng_tag(3)},
                               {"square_001", "cross", 0.0, 1e4, "node=1_0", rng_tag(4)}};
    const auto back = parse_truth_csv(truth_csv(rows));
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].scene_id, "device_000");
    EXPECT_DOUBLE_EQ(back[0].true_x_nm, 1234.5);
    EXPECT_DOUBLE_EQ(back[1].true_y_nm, 1e4);
    EXPECT_EQ(back[1].rng, rng_tag(4));
    EXPECT_EQ(truth_param(back[0].params, "delta_nm"), "12.5");
    EXPECT_EQ(truth_param(back[0].params, "orientation"), "along-x");
    EXPECT_FALSE(truth_param(back[0].params, "delta").has_value());
    EXPECT_THROW(parse_truth_csv("a,b\n1,2\n"), FormatError);
}

TEST(Corpus, EmptyCorpusHasHeaderOnlyTruth) {
    const auto dir = scratch("empty");
    CorpusOptions opt;
    opt.n = 0;
    const auto s = emit_corpus(make_preset("fig2b"), opt, dir);
    EXPECT_EQ(s.truth_rows, 0u);
    EXPECT_EQ(slurp(dir / "truth.csv"), "scene_id,feature_kind,true_x_nm,true_y_nm,params,rng\n");
    fs::remove_all(dir);
}

TEST(Corpus, DevicesAreDeterministicAndCarryTheirTruth) {
    const auto a = scratch("dev_a"), b = scratch("dev_b");
    CorpusOptions opt;
    opt.n = 3;
    opt.seed = 11;
    opt.squares = 0;
    const auto sa = emit_corpus(make_preset("fig2c"), opt, a);
    opt.jobs = 2;
    emit_corpus(make_preset("fig2c"), opt, b);
    for (const auto& f : sa.files) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;

    const auto truth = parse_truth_csv(slurp(a / "truth.csv"));
    int qds = 0;
    for (const auto& t : truth) {
        if (t.feature_kind != "qd" || t.scene_id.rfind("device_", 0) != 0) continue;
        ++qds;
        const double delta = parse_double(*truth_param(t.params, "delta_nm"));
        const auto m = measure_device(load_image(a / "devices" / (t.scene_id + "_wl.pgm")), load_image(a / "devices" / (t.scene_id + "_qd.pgm")));
        EXPECT_NEAR(m.misalignment.delta_nm, delta, 30.0) << t.scene_id;
    }
    EXPECT_EQ(qds, 3);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Corpus, SeedsChangeTheOutput) {
    const auto a = scratch("seed_a"), b = scratch("seed_b");
    CorpusOptions opt;
    opt.n = 4;
    opt.seed = 1;
    emit_corpus(make_preset("fig3"), opt, a);
    opt.seed = 2;
    emit_corpus(make_preset("fig3"), opt, b);
    EXPECT_NE(slurp(a / "truth.csv"), slurp(b / "truth.csv"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Corpus, SpectraTruthMatchesMeasuredShift) {
    const auto dir = scratch("spectra");
    CorpusOptions opt;
    opt.n = 2;
    opt.seed = 5;
    emit_corpus(make_preset("fig3"), opt, dir);
    const auto truth = parse_truth_csv(slurp(dir / "truth.csv"));
    ASSERT_EQ(truth.size(), 8u);
    for (const auto& t : truth) {
        ASSERT_EQ(t.feature_kind, "spectral_line");
        const auto before = parse_spectrum_csv(slurp(dir / "spectra" / (t.scene_id + "_before.csv")));
        const auto after = parse_spectrum_csv(slurp(dir / "spectra" / (t.scene_id + "_after.csv")));
        EXPECT_NEAR(spectral_shift(before, after).delta_nm, t.true_y_nm - t.true_x_nm, 0.01) << t.scene_id;
    }
    fs::remove_all(dir);
}

TEST(Corpus, GridJsonRoundTrips) {
    const auto g = make_preset("fig2b").square.grid();
    const auto back = grid_from_json(grid_json(g));
    EXPECT_DOUBLE_EQ(back.pitch_nm, g.pitch_nm);
    EXPECT_DOUBLE_EQ(back.origin_x_nm, g.origin_x_nm);
    EXPECT_DOUBLE_EQ(back.arm_width_nm, g.arm_width_nm);
}

TEST(SpectrumCsv, RoundTripsAndRejectsBadInput) {
    SpectralLine line;
    line.center_nm = 935.2;
    line.fwhm_nm = 0.1;
    line.amplitude = 500.0;
    const auto s = synth_spectrum(line, SpectrumGrid{934.0, 936.0, 201}, 3);
    const auto back = parse_spectrum_csv(spectrum_csv(s));
    EXPECT_EQ(back.wavelengths_nm, s.wavelengths_nm);
    EXPECT_EQ(back.intensities, s.intensities);
    EXPECT_THROW(parse_spectrum_csv("wavelength_nm,counts\n930,1\n"), FormatError);
}

TEST(Configs, ShippedConfigsNameValidPresets) {
    int seen = 0;
    for (const auto& e : fs::directory_iterator(QDALIGN_CONFIG_DIR)) {
        if (e.path().extension() != ".json") continue;
        ++seen;
        const auto j = nlohmann::json::parse(read_file(e.path()));
        auto p = make_preset(j.at("preset").get<std::string>());
        EXPECT_NO_THROW(apply_overrides(p, j)) << e.path();
        EXPECT_GE(j.value("n", 0), 0);
    }
    EXPECT_GE(seen, 4);
}
