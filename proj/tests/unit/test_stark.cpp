#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "qdalign/random.hpp"
#include "qdalign/stark.hpp"

using namespace qdalign;

namespace {

StarkModel truth(double lambda0, double pz, double alpha, ExcitonLabel label = ExcitonLabel::x0) {
    StarkModel m;
    m.lambda0_nm = lambda0;
    m.pz = pz;
    m.alpha = alpha;
    m.label = label;
    return m;
}

std::vector<double> linspace(double a, double b, std::size_t n) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
    return v;
}

// independent oracle: normal equations (XᵀWX)β = XᵀWy, solved by Cramer's rule
std::array<double, 3> normal_equations(const PlateauTrace& t, const FieldConfig& cfg) {
    double a[3][3] = {}, rhs[3] = {};
    for (const auto& p : t.points) {
        const double f = (p.volts - cfg.v_i()) * 1e4 / cfg.thickness_nm;
        const double e = 1239.842e3 / p.lambda_nm;
        const double de = 1239.842e3 / (p.lambda_nm * p.lambda_nm);
        const double w = p.weight / (de * de);
        const double x[3] = {1.0, -f, f * f};
        for (int i = 0; i < 3; ++i) {
            rhs[i] += w * x[i] * e;
            for (int j = 0; j < 3; ++j) a[i][j] += w * x[i] * x[j];
        }
    }
    auto det = [](double m[3][3]) {
        return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
               m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    };
    const double d = det(a);
    std::array<double, 3> out{};
    for (int k = 0; k < 3; ++k) {
        double m[3][3];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) m[i][j] = j == k ? rhs[i] : a[i][j];
        out[k] = det(m) / d;
    }
    return out;
}

}  // namespace

TEST(Field, PaperConstants) {
    const FieldConfig cfg;
    EXPECT_EQ(field(0.0, cfg), -224.24);
    EXPECT_NEAR(field(cfg.v_i(), cfg), 0.0, 1e-12);
    EXPECT_NEAR(cfg.v_i(), 1.56968, 1e-12);
    EXPECT_NEAR(field(0.300, cfg), (0.300 - 1.56968) / 70.0 * 1e4, 1e-9);
    EXPECT_NEAR(field(0.300, cfg), -181.4, 0.05);
    EXPECT_THROW(field(1.0, FieldConfig{0.0, 224.24}), ContractError);
}

TEST(Field, AffineInVoltage) {
    Rng rng(3);
    const auto cfg = FieldConfig::from_vi(1.2, 85.0);
    EXPECT_NEAR(field(1.2, cfg), 0.0, 1e-12);
    for (int i = 0; i < 100; ++i) {
        const double a = rng.uniform(-2, 3), b = rng.uniform(-2, 3);
        EXPECT_NEAR(field(a, cfg) - field(b, cfg), (a - b) / 85.0 * 1e4, 1e-9);
    }
}

TEST(FitPeak, SymmetricLineExact) {
    const auto s = synth_spectrum({935.0, 0.12, 800.0, 15.0, 0.0}, {930.0, 940.0, 1001});
    const auto f = fit_peak(s);
    EXPECT_NEAR(f.lambda_nm, 935.0, 1e-4);
    EXPECT_NEAR(f.fwhm_nm, 0.12, 1e-6);
    EXPECT_LT(f.unc_nm, 1e-4);
}

TEST(FitPeak, SlopedBackground) {
    const auto s = synth_spectrum({934.973, 0.15, 600.0, 200.0, 40.0}, {930.0, 940.0, 1001});
    EXPECT_NEAR(fit_peak(s).lambda_nm, 934.973, 0.01);
    // background term absorbs the slope exactly on noise-free data
    EXPECT_NEAR(fit_peak(s).lambda_nm, 934.973, 1e-6);
}

TEST(FitPeak, EdgeAndContracts) {
    Spectrum s;
    for (int i = 0; i < 20; ++i) s.wavelengths_nm.push_back(930.0 + 0.1 * i), s.intensities.push_back(100.0 - i);
    EXPECT_THROW(fit_peak(s), EdgeError);
    s.intensities.pop_back();
    EXPECT_THROW(fit_peak(s), ContractError);
    Spectrum d{{1, 2, 2, 3, 4, 5, 6, 7}, {0, 1, 2, 3, 2, 1, 0, 0}};
    EXPECT_THROW(fit_peak(d), ContractError);
}

TEST(FitPeak, UncertaintyCoverage) {
    // ci95 is a 2σ interval: ~95% of noisy fits should cover the truth
    int hits = 0;
    const int trials = 300;
    for (int t = 0; t < trials; ++t) {
        const auto s = synth_spectrum({935.0, 0.12, 300.0, 20.0, 0.0}, {930.0, 940.0, 1001}, derive_seed(5, t));
        const auto f = fit_peak(s);
        hits += std::fabs(f.lambda_nm - 935.0) <= f.unc_nm;
    }
    EXPECT_GT(hits, 0.90 * trials);
}

TEST(SpectralShift, ConstructionAndAntisymmetry) {
    const SpectrumGrid g{930.0, 940.0, 1001};
    const auto a = synth_spectrum({935.0, 0.12, 800.0, 15.0, 0.0}, g);
    const auto b = synth_spectrum({936.0, 0.12, 800.0, 15.0, 0.0}, g);
    EXPECT_DOUBLE_EQ(spectral_shift(a, a).delta_nm, 0.0);
    EXPECT_NEAR(spectral_shift(a, b).delta_nm, 1.0, 1e-4);
    const auto na = synth_spectrum({935.0, 0.12, 300.0, 20.0, 0.0}, g, 1);
    const auto nb = synth_spectrum({935.7, 0.12, 300.0, 20.0, 0.0}, g, 2);
    const auto fwd = spectral_shift(na, nb), back = spectral_shift(nb, na);
    EXPECT_DOUBLE_EQ(fwd.delta_nm, -back.delta_nm);
    EXPECT_NEAR(fwd.delta_nm, 0.7, fwd.unc_nm);
}

TEST(ShiftStats, BruteForce) {
    Rng rng(9);
    std::vector<ShiftRecord> recs;
    for (int i = 0; i < 40; ++i) {
        ShiftRecord r;
        r.qd_id = "qd" + std::to_string(i);
        r.structure = i % 3 ? Structure::nanoguide : Structure::phcw;
        if (r.structure == Structure::nanoguide) r.width_nm = (i % 2) ? 250.0 : 1000.0;
        else r.offset_nm = 10.0 * (i % 4), r.offset_axis = "x";
        r.delta_nm = rng.normal(0.8, 0.6);
        recs.push_back(r);
    }
    for (auto grouping : {ShiftGrouping::structure, ShiftGrouping::width, ShiftGrouping::offset}) {
        const auto groups = shift_stats(recs, grouping);
        std::size_t total = 0;
        for (const auto& g : groups) {
            std::vector<double> v;
            for (const auto& r : recs) {
                std::string key;
                if (grouping == ShiftGrouping::structure) key = to_string(r.structure);
                else if (grouping == ShiftGrouping::width && r.width_nm) key = to_string(r.structure) + "/width=" + fmt::format("{}", *r.width_nm);
                else if (grouping == ShiftGrouping::offset && r.offset_nm) key = to_string(r.structure) + "/x=" + fmt::format("{}", *r.offset_nm);
                if (key == g.key) v.push_back(r.delta_nm);
            }
            ASSERT_EQ(v.size(), g.n) << g.key;
            total += v.size();
            const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
            double ss = 0;
            for (double x : v) ss += (x - mean) * (x - mean);
            EXPECT_NEAR(g.mean_nm, mean, 1e-12);
            EXPECT_NEAR(g.std_nm, std::sqrt(ss / (v.size() - 1)), 1e-12);
        }
        if (grouping == ShiftGrouping::structure) EXPECT_EQ(total, recs.size());
    }
}

TEST(ShiftStats, SingletonAndCsvRoundTrip) {
    std::vector<ShiftRecord> recs{{"a", "", Structure::phcw, std::nullopt, 20.0, "y", -1.1}, {"b", "", Structure::nanoguide, 300.0, std::nullopt, "", 0.25}};
    const auto g = shift_stats(recs, ShiftGrouping::structure);
    ASSERT_EQ(g.size(), 2u);
    EXPECT_EQ(g[0].key, "nanoguide");
    EXPECT_FALSE(g[1].std_defined);
    EXPECT_TRUE(std::isnan(g[1].std_nm));
    recs[1].wafer = "doped";
    EXPECT_EQ(shift_stats(recs, ShiftGrouping::structure)[1].key, "doped/nanoguide");
    const auto back = parse_shifts_csv(shifts_csv(recs));
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].offset_axis, "y");
    EXPECT_EQ(*back[0].offset_nm, 20.0);
    EXPECT_FALSE(back[0].width_nm);
    EXPECT_EQ(back[1].delta_nm, 0.25);
    recs[0].delta_nm = std::nan("");
    EXPECT_THROW(shift_stats(recs, ShiftGrouping::structure), ContractError);
}

TEST(StarkFit, FlatTrace) {
    const auto t = synth_trace(truth(935.0, 0.0, 0.0), linspace(0.0, 2.5, 30));
    const auto m = fit_stark(t, FieldConfig{});
    EXPECT_NEAR(m.e0_mev() * 1e-3, 1.32603, 1e-5);
    EXPECT_NEAR(m.lambda0_nm, 935.0, 1e-9);
    EXPECT_NEAR(m.pz, 0.0, 1e-12);
    EXPECT_NEAR(m.alpha, 0.0, 1e-14);
}

TEST(StarkFit, NoiseFreeRecovery) {
    const auto tm = truth(930.0, 5e-3, -5e-4);
    const auto m = fit_stark(synth_trace(tm, linspace(0.0, 3.0, 200)), FieldConfig{});
    EXPECT_NEAR(m.lambda0_nm / 930.0, 1.0, 1e-4);
    EXPECT_NEAR(m.pz / 5e-3, 1.0, 1e-4);
    EXPECT_NEAR(m.alpha / -5e-4, 1.0, 1e-4);
    EXPECT_NEAR(m.vertex_field(), 5e-3 / (2 * -5e-4), 1e-6);
}

TEST(StarkFit, MatchesNormalEquations) {
    Rng rng(21);
    const FieldConfig cfg;
    for (int k = 0; k < 20; ++k) {
        auto t = synth_trace(truth(rng.uniform(920, 950), rng.uniform(-0.01, 0.01), rng.uniform(-1e-3, 1e-4)), linspace(0.2, 2.8, 50), 0.02,
                             derive_seed(21, k));
        for (auto& p : t.points) p.weight = rng.uniform(0.5, 2.0);
        const auto m = fit_stark(t, cfg);
        const auto o = normal_equations(t, cfg);
        EXPECT_NEAR(m.e0_mev() / o[0], 1.0, 1e-10);
        EXPECT_NEAR(m.pz / o[1], 1.0, 1e-10);
        EXPECT_NEAR(m.alpha / o[2], 1.0, 1e-10);
    }
}

TEST(StarkFit, WeightScaleInvariance) {
    auto t = synth_trace(truth(930.0, 5e-3, -5e-4), linspace(0.0, 3.0, 40), 0.02, 4);
    Rng rng(2);
    for (auto& p : t.points) p.weight = rng.uniform(0.1, 1.0);
    const auto a = fit_stark(t, FieldConfig{});
    for (auto& p : t.points) p.weight *= 37.0;
    const auto b = fit_stark(t, FieldConfig{});
    EXPECT_NEAR(a.pz, b.pz, 1e-12 * std::fabs(a.pz) + 1e-15);
    EXPECT_NEAR(a.alpha, b.alpha, 1e-12 * std::fabs(a.alpha));
    EXPECT_NEAR(a.pz_ci95, b.pz_ci95, 1e-9 * a.pz_ci95);
}

TEST(StarkFit, NoisyIntervalsCover) {
    const auto tm = truth(930.0, 5e-3, -5e-4);
    int hits = 0;
    for (int k = 0; k < 200; ++k) {
        const auto m = fit_stark(synth_trace(tm, linspace(0.0, 3.0, 200), 0.02, derive_seed(77, k)), FieldConfig{});
        hits += std::fabs(m.pz - tm.pz) <= m.pz_ci95;
    }
    EXPECT_GT(hits, 180);
}

TEST(StarkFit, Conditioning) {
    const auto tm = truth(930.0, 5e-3, -5e-4);
    EXPECT_THROW(fit_stark(synth_trace(tm, linspace(1.0, 1.0 + 1e-7, 6)), FieldConfig{}), ConditioningError);
    EXPECT_THROW(fit_stark(synth_trace(tm, linspace(0.0, 1.0, 4)), FieldConfig{}), ContractError);
}

TEST(StarkCompare, Deltas) {
    const auto tr = linspace(0.0, 3.0, 100);
    const auto a = fit_stark(synth_trace(truth(930.0, 5e-3, -5e-4), tr), FieldConfig{});
    const auto b = fit_stark(synth_trace(truth(928.9, 5e-3, -5e-4), tr), FieldConfig{});
    const auto same = compare_stark(a, a);
    EXPECT_EQ(same.d_lambda0_nm, 0.0);
    EXPECT_EQ(same.d_pz, 0.0);
    const auto d = compare_stark(a, b);
    EXPECT_NEAR(d.d_lambda0_nm, -1.1, 1e-6);
    EXPECT_NEAR(d.d_pz, 0.0, 1e-9);
    EXPECT_NEAR(d.d_alpha, 0.0, 1e-11);
    auto c = b;
    c.field.thickness_nm = 80.0;
    EXPECT_THROW(compare_stark(a, c), ContractError);
}

TEST(StarkJson, RoundTrip) {
    const auto m = fit_stark(synth_trace(truth(930.0, 5e-3, -5e-4), linspace(0.0, 3.0, 50), 0.02, 1), FieldConfig{});
    const auto back = stark_from_json(nlohmann::json::parse(to_json(m).dump()));
    EXPECT_EQ(back.lambda0_nm, m.lambda0_nm);
    EXPECT_EQ(back.alpha, m.alpha);
    EXPECT_EQ(back.covariance, m.covariance);
    EXPECT_EQ(back.label, m.label);
    EXPECT_THROW(stark_from_json(nlohmann::json::parse("{}")), FormatError);
}

TEST(Plateaus, ConstantRidge) {
    PlateauMapSpec spec;
    spec.voltages = linspace(0.0, 1.0, 21);
    spec.wavelengths_nm = linspace(934.0, 936.0, 201);
    spec.ridges.push_back({truth(935.0, 0.0, 0.0), 0.0, 1.0, 400.0, 0.05});
    spec.shot_noise = false;
    const auto traces = extract_plateaus(render_plateau_map(spec));
    ASSERT_EQ(traces.size(), 1u);
    EXPECT_EQ(traces[0].points.size(), 21u);
    for (const auto& p : traces[0].points) EXPECT_NEAR(p.lambda_nm, 935.0, 1e-6);
}

TEST(Plateaus, TwoRidgesLabelled) {
    // X+ visible at lower bias than X0; ridges ~0.5 nm apart
    PlateauMapSpec spec;
    spec.voltages = linspace(0.0, 2.0, 81);
    spec.wavelengths_nm = linspace(928.0, 932.0, 401);
    spec.ridges.push_back({truth(930.0, 5e-3, -5e-5, ExcitonLabel::xplus), 0.0, 1.2, 300.0, 0.05});
    spec.ridges.push_back({truth(930.5, 5e-3, -5e-5, ExcitonLabel::x0), 0.8, 2.0, 400.0, 0.05});
    spec.seed = 4;
    const auto traces = extract_plateaus(render_plateau_map(spec));
    ASSERT_EQ(traces.size(), 2u);
    EXPECT_EQ(traces[0].label, ExcitonLabel::xplus);
    EXPECT_EQ(traces[1].label, ExcitonLabel::x0);
    EXPECT_NEAR(traces[0].v_min(), 0.0, 1e-12);
    EXPECT_NEAR(traces[1].v_min(), 0.8, 1e-12);
    const auto fx = fit_stark(traces[0], FieldConfig{});
    EXPECT_NEAR(fx.lambda0_nm, 930.0, 0.01);
}

TEST(Plateaus, NoiseFreeMapRecoversParameters) {
    PlateauMapSpec spec;
    spec.voltages = linspace(0.0, 3.0, 121);
    spec.wavelengths_nm = linspace(925.0, 933.0, 1601);
    const auto tm = truth(930.0, 5e-3, -1e-4);
    spec.ridges.push_back({tm, 0.0, 3.0, 500.0, 0.05});
    spec.shot_noise = false;
    const auto traces = extract_plateaus(render_plateau_map(spec));
    ASSERT_EQ(traces.size(), 1u);
    const auto m = fit_stark(traces[0], FieldConfig{});
    EXPECT_NEAR(m.lambda0_nm / 930.0, 1.0, 1e-4);
    EXPECT_NEAR(m.pz / tm.pz, 1.0, 1e-4);
    EXPECT_NEAR(m.alpha / tm.alpha, 1.0, 1e-4);
}

TEST(Plateaus, EmptyAndCsv) {
    PlateauMapSpec spec;
    spec.voltages = linspace(0.0, 1.0, 5);
    spec.wavelengths_nm = linspace(934.0, 936.0, 50);
    spec.seed = 1;
    const auto map = render_plateau_map(spec);
    EXPECT_TRUE(extract_plateaus(map).empty());
    const auto back = parse_plateau_map_csv(plateau_map_csv(map));
    EXPECT_EQ(back.voltages, map.voltages);
    EXPECT_EQ(back.wavelengths_nm, map.wavelengths_nm);
    EXPECT_EQ(back.intensity, map.intensity);
    EXPECT_THROW(parse_plateau_map_csv("voltage_V,1,2\n0,1\n"), FormatError);
}

TEST(Plateaus, OffsetBetweenMaps) {
    PlateauTrace a, b;
    for (int i = 0; i < 10; ++i) {
        a.points.push_back({0.1 * i, 935.0 + 0.01 * i, 1.0});
        if (i >= 3) b.points.push_back({0.1 * i, 934.7 + 0.01 * i, 1.0});
    }
    const auto o = plateau_offset(a, b);
    EXPECT_NEAR(o.delta_nm, -0.3, 1e-9);
    EXPECT_NEAR(o.unc_nm, 0.0, 1e-9);
    PlateauTrace c{ExcitonLabel::x0, {{5.0, 935.0, 1.0}}};
    EXPECT_THROW(plateau_offset(a, c), ContractError);
}
