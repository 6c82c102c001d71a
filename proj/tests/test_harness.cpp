#include "hamtomo/harness.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace hamtomo;
using namespace hamtomo::testing;

namespace {

RunConfig small_config(const std::string& dir) {
    RunConfig c;
    c.n_systems = 3;
    c.N_list = {257};
    c.Ne_list = {125, 1000};
    c.seed = 11;
    c.output_dir = (std::filesystem::temp_directory_path() / dir).string();
    return c;
}

}  // namespace

TEST(Metrics, FrequencyErrorMatchesByIndexOrNearest) {
    const std::vector<double> truth{1.0, 2.0, 4.0};
    EXPECT_NEAR(frequency_error_max({1.01, 2.0, 4.0}, truth), 1.0, 1e-12);
    // Two estimates: 2.0 and 4.0 are hit, 1.0 is matched to 2.0.
    EXPECT_NEAR(frequency_error_max({2.0, 4.0}, truth), 100.0, 1e-12);
    EXPECT_TRUE(std::isnan(frequency_error_max({}, truth)));
}

TEST(Metrics, CoefficientMedianSkipsStructuralZeros) {
    Eigen::MatrixXd truth(2, 2), est(2, 2);
    truth << 1.0, 0.0, 2.0, 4.0;
    est << 1.1, 0.3, 2.0, 4.4;
    // Relative errors 10%, 0%, 10%; the zero entry is left out.
    EXPECT_NEAR(coefficient_error_median(est, truth), 10.0, 1e-9);
}

TEST(Metrics, SpearmanAgainstReferenceValues) {
    // Reference values from an independent statistics package.
    EXPECT_NEAR(spearman({1, 2, 3, 4, 5}, {2, 1, 4, 3, 5}), 0.8, 1e-12);
    EXPECT_NEAR(spearman({1, 2, 2, 3, 7}, {1, 3, 2, 4, 4}), 0.9473684210526317, 1e-12);
    EXPECT_NEAR(spearman({1, 2, 3}, {30, 20, 10}), -1.0, 1e-12);
    EXPECT_TRUE(std::isnan(spearman({1, 1, 1}, {1, 2, 3})));
}

TEST(Metrics, MedianAndMeanIgnoreMissing) {
    EXPECT_DOUBLE_EQ(median({3.0, kNaN, 1.0, 2.0}), 2.0);
    EXPECT_DOUBLE_EQ(median({4.0, 1.0}), 2.5);
    EXPECT_DOUBLE_EQ(mean({1.0, kNaN, 3.0}), 2.0);
    EXPECT_TRUE(std::isnan(median({})));
}

TEST(Metrics, ArrangementCheck) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const Hamiltonian4 H = generate_system(s);
        const LevelAssignment a = identify_levels(signal_model_of(H).frequencies);
        EXPECT_TRUE(arrangement_correct(a, H));
        EXPECT_TRUE(arrangement_correct(a.reflected(), H));
        LevelAssignment wrong = a;
        std::swap(wrong.map[0], wrong.map[5]);
        EXPECT_FALSE(arrangement_correct(wrong, H));
    }
}

TEST(Metrics, FullErrorVanishesInTheReferenceConvention) {
    const Hamiltonian4 H0 = generate_system(5);
    const Hamiltonian4 Hf = generate_system(77);
    const ReferenceFrame frame = reference_frame(H0);
    Hamiltonian4 expected = apply_gauge(Hf, GaugePhases(-frame.gauge[0], -frame.gauge[1], -frame.gauge[2]));
    if (frame.inverted) expected = energy_inversion(expected);
    EXPECT_LT(full_h_error(expected, Hf, frame), 1e-10);
    EXPECT_LT(full_h_error(energy_inversion(expected), Hf, frame), 1e-10);
    std::mt19937_64 rng(1);
    EXPECT_GT(full_h_error(apply_gauge(expected, random_gauge(rng)), Hf, frame), 1.0);
}

TEST(WorkPool, EveryIndexOnce) {
    std::vector<std::atomic<int>> hits(97);
    parallel_for(97, 4, [&](int i) { ++hits[static_cast<std::size_t>(i)]; });
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
    parallel_for(0, 4, [](int) { FAIL(); });
}

TEST(Config, JsonRoundTripAndStrictKeys) {
    RunConfig c = small_config("x");
    c.phase.enabled = true;
    c.phase.lengths = {51};
    const RunConfig back = run_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_THROW(run_config_from_json({{"n_sytems", 3}}), ValidationError);
    EXPECT_THROW(run_config_from_json({{"spectral", {{"resolution", 1}}}}), ValidationError);
    EXPECT_THROW(run_config_from_json({{"N_list", {1}}}), ValidationError);
    EXPECT_THROW(run_config_from_json({{"frequency_band", {7.0, 0.3}}}), ValidationError);
    EXPECT_THROW(run_config_from_json({{"dt", "fast"}}), ValidationError);
    const RunConfig d = run_config_from_json(io::json::object());
    EXPECT_EQ(d.band_low, 0.3);
    EXPECT_EQ(d.band_high, 7.0);
}

TEST(Pipeline, DeterministicAcrossThreadCounts) {
    RunConfig a = small_config("hamtomo_det_a");
    a.threads = 1;
    RunConfig b = small_config("hamtomo_det_b");
    b.threads = 3;
    const RunReport ra = run_pipeline(a);
    const RunReport rb = run_pipeline(b);
    ASSERT_EQ(ra.cells.size(), 6u);
    for (std::size_t i = 0; i < ra.cells.size(); ++i) EXPECT_EQ(to_json(ra.cells[i]), to_json(rb.cells[i]));
    EXPECT_EQ(tables_csv(ra), tables_csv(rb));
    write_reports(ra, a.output_dir);
    write_reports(run_pipeline(a), b.output_dir);
    EXPECT_EQ(io::read_text(std::filesystem::path(a.output_dir) / "report.json"),
              io::read_text(std::filesystem::path(b.output_dir) / "report.json"));
}

TEST(Pipeline, ScoresAgainstTruthAndSeedsDiffer) {
    const RunReport r = run_pipeline(small_config("hamtomo_score"));
    std::set<std::uint64_t> seeds;
    for (const CellResult& c : r.cells) {
        seeds.insert(c.trace_seed);
        EXPECT_EQ(c.status == CellStatus::Ok, c.frequencies == 6) << c.message;
        if (c.status == CellStatus::Ok) {
            EXPECT_LT(c.eps_wopt, 5.0);
            EXPECT_GE(c.eH, 0.0);
            EXPECT_GE(c.E_delta, 0.0);
        }
    }
    EXPECT_EQ(seeds.size(), r.cells.size());
    ASSERT_EQ(r.aggregates.size(), 2u);
    EXPECT_EQ(r.aggregates[0].systems, 3);
    EXPECT_EQ(r.aggregates[1].Ne, 1000);
}

TEST(Pipeline, DiagonalSystemHasNoPeaks) {
    RunConfig c = small_config("hamtomo_diag");
    c.Ne_list = {125};
    const RunReport r = run_pipeline(c, std::vector<Hamiltonian4>{diag_hamiltonian(-1.5, -0.2, 0.4, 1.3)});
    ASSERT_EQ(r.cells.size(), 1u);
    EXPECT_EQ(r.cells[0].status, CellStatus::NoPeaks);
    EXPECT_EQ(r.cells[0].peaks, 0);
    EXPECT_FALSE(r.any_failure());
    EXPECT_EQ(r.aggregates[0].ok, 0);
    EXPECT_NO_THROW(to_json(r).dump());
}

TEST(Pipeline, DumpsTracesThatReadBack) {
    RunConfig c = small_config("hamtomo_dump");
    c.n_systems = 1;
    c.Ne_list = {125};
    c.dump_traces = true;
    c.dump_spectrum = true;
    const RunReport r = run_pipeline(c);
    const std::filesystem::path dir(c.output_dir);
    const TraceSet ts = io::read_traces(dir / "traces" / "sys0_N257_Ne125.csv");
    EXPECT_EQ(ts.plan.seed, r.cells[0].trace_seed);
    const Estimate e = estimate_from_traces(ts, c.spectral);
    ASSERT_TRUE(e.fit);
    EXPECT_EQ(e.fit->logP, r.cells[0].logP);
    EXPECT_TRUE(std::filesystem::exists(dir / "spectra" / "sys0_N257_Ne125.csv"));
}
