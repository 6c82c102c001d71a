#include "hamtomo/experiment.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace hamtomo;
using namespace hamtomo::testing;

TEST(SamplingPlan, Validation) {
    EXPECT_THROW((SamplingPlan{0.0, 10, 10, 0}.validate()), ValidationError);
    EXPECT_THROW((SamplingPlan{0.1, 1, 10, 0}.validate()), ValidationError);
    EXPECT_THROW((SamplingPlan{0.1, 10, 0, 0}.validate()), ValidationError);
    EXPECT_NO_THROW((SamplingPlan{0.1, 2, 1, 0}.validate()));
    EXPECT_NEAR((SamplingPlan{0.1, 1025, 1, 0}.signal_length()), 102.4, 1e-12);
}

TEST(FixedBasis, DiagonalIsDeterministic) {
    const TraceSet ts = run_fixed_basis(diag_hamiltonian(0, 1, 2.5, 4.5), {0.1, 64, 37, 5});
    for (int k = 0; k < kLevels; ++k)
        for (int l = 0; l < kLevels; ++l)
            for (int n = 0; n < 64; ++n) EXPECT_EQ(ts.data(trace_index(k, l), n), k == l ? 1.0 : 0.0);
}

TEST(FixedBasis, CountsAreMultinomial) {
    std::mt19937_64 rng(3);
    const Hamiltonian4 H = random_hermitian(rng);
    const SamplingPlan plan{0.1, 300, 125, 99};
    const TraceSet ts = run_fixed_basis(H, plan);
    for (int k = 0; k < kLevels; ++k) {
        for (int n = 0; n < plan.N; ++n) {
            double sum = 0.0;
            for (int l = 0; l < kLevels; ++l) {
                const double d = ts.data(trace_index(k, l), n);
                EXPECT_GE(d, 0.0);
                EXPECT_LE(d, 1.0);
                EXPECT_NEAR(d * plan.Ne, std::round(d * plan.Ne), 1e-9);
                sum += std::round(d * plan.Ne);
            }
            EXPECT_EQ(sum, plan.Ne);
        }
    }
}

TEST(FixedBasis, ReproducibleUnderSeed) {
    std::mt19937_64 rng(4);
    const Hamiltonian4 H = random_hermitian(rng);
    const TraceSet a = run_fixed_basis(H, {0.1, 200, 250, 7});
    const TraceSet b = run_fixed_basis(H, {0.1, 200, 250, 7});
    const TraceSet c = run_fixed_basis(H, {0.1, 200, 250, 8});
    EXPECT_EQ(a.data, b.data);
    EXPECT_NE(a.data, c.data);
}

TEST(Sampling, BinomialMomentsAtHalf) {
    // Two-outcome reduction: p = (0.5, 0.5, 0, 0), Ne = 1000, 1e4 draws.
    const Vec4d p(0.5, 0.5, 0.0, 0.0);
    const int draws = 10000, Ne = 1000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < draws; ++i) {
        const double d = detail::sample_cell(p, Ne, detail::cell_seed(12345, 0, static_cast<std::uint64_t>(i)))(0);
        sum += d;
        sum2 += d * d;
    }
    const double mean = sum / draws;
    const double sd = std::sqrt(sum2 / draws - mean * mean);
    const double sd_exact = std::sqrt(0.25 / Ne);  // 0.0158
    EXPECT_NEAR(mean, 0.5, 0.005);
    EXPECT_NEAR(sd, sd_exact, 0.15 * sd_exact);
}

TEST(Sampling, RejectsInconsistentProbabilities) {
    EXPECT_THROW(detail::sample_cell(Vec4d(1.1, -0.1, 0, 0), 10, 1), NumericalError);
    EXPECT_NO_THROW(detail::sample_cell(Vec4d(1.0 + 5e-10, -5e-10, 0, 0), 10, 1));
}

TEST(Sampling, MeanAndVarianceConvergeToProbabilities) {
    std::mt19937_64 rng(6);
    const Hamiltonian4 H = random_hermitian(rng);
    const SamplingPlan base{0.1, 20, 50, 0};
    const Eigen::MatrixXd p = propagate_fixed_basis(H, base.times());
    const int seeds = 2000;
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(kTraces, base.N), sum2 = sum;
    for (int s = 0; s < seeds; ++s) {
        SamplingPlan plan = base;
        plan.seed = static_cast<std::uint64_t>(s);
        const Eigen::MatrixXd d = run_fixed_basis(H, plan).data;
        sum += d;
        sum2 += d.cwiseAbs2();
    }
    const Eigen::MatrixXd mean = sum / seeds;
    const Eigen::MatrixXd var = sum2 / seeds - mean.cwiseAbs2();
    for (int r = 0; r < kTraces; ++r) {
        for (int n = 0; n < base.N; ++n) {
            const double pr = std::clamp(p(r, n), 0.0, 1.0);
            const double pv = pr * (1 - pr) / base.Ne;
            // 5 standard errors of the mean; variance within 20% + slack.
            EXPECT_NEAR(mean(r, n), p(r, n), 5.0 * std::sqrt(pv / seeds) + 1e-12);
            EXPECT_LE(var(r, n), 1.2 * pv + 1e-12 + 5.0 * pv * std::sqrt(2.0 / seeds));
        }
    }
}

TEST(Propagation, MatchesMatrixExponential) {
    std::mt19937_64 rng(7);
    const std::vector<double> t = uniform_times(200, 0.13);
    for (int trial = 0; trial < 10; ++trial) {
        const Hamiltonian4 H = random_hermitian(rng);
        EXPECT_LT((propagate_fixed_basis(H, t) - expm_fixed_basis(H, t)).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(TwoStep, ZeroPreparationTimeReducesToFirstRow) {
    std::mt19937_64 rng(8);
    const Hamiltonian4 H0 = random_hermitian(rng), Hf = random_hermitian(rng);
    const SamplingPlan plan{0.1, 100, 200, 42};
    const TraceSet two = run_two_step(H0, 0.0, Hf, plan);
    const TraceSet fixed = run_fixed_basis(Hf, plan);
    EXPECT_EQ(two.rows(), 4);
    EXPECT_EQ(two.protocol, Protocol::Superposition);
    EXPECT_EQ(two.data, fixed.data.topRows(kLevels));
}

TEST(TwoStep, SameHamiltonianComposesEvolution) {
    std::mt19937_64 rng(9);
    const Hamiltonian4 H = random_hermitian(rng);
    const double t_star = 1.7;
    const SamplingPlan plan{0.1, 60, 1000000, 1};
    const TraceSet two = run_two_step(H, t_star, H, plan);
    std::vector<double> shifted = plan.times();
    for (double& x : shifted) x += t_star;
    const Eigen::MatrixXd p = expm_fixed_basis(H, shifted).topRows(kLevels);
    // sup-norm convergence at Ne = 1e6: 5 sigma of sqrt(0.25/1e6) is 2.5e-3.
    EXPECT_LT((two.data - p).cwiseAbs().maxCoeff(), 3e-3);
}

TEST(TwoStep, ConvergesToExactPropagation) {
    std::mt19937_64 rng(10);
    const Hamiltonian4 H0 = random_hermitian(rng), Hf = random_hermitian(rng);
    const SamplingPlan plan{0.1, 80, 1000000, 3};
    const double t_star = 2.2;
    const TraceSet two = run_two_step(H0, t_star, Hf, plan);
    const Vec4c phi = expm_propagator(H0.matrix(), t_star).col(0);
    Eigen::MatrixXd p(kLevels, plan.N);
    for (int n = 0; n < plan.N; ++n) p.col(n) = (expm_propagator(Hf.matrix(), plan.time(n)) * phi).cwiseAbs2();
    EXPECT_LT((two.data - p).cwiseAbs().maxCoeff(), 3e-3);
}

TEST(Superposition, BasisStateLimit) {
    std::mt19937_64 rng(12);
    const Hamiltonian4 H = random_hermitian(rng);
    const std::vector<double> t = uniform_times(300, 0.07);
    const Eigen::MatrixXd p = superposition_signal(H, GaugePhases{}, Vec4c(1, 0, 0, 0), t);
    EXPECT_LT((p - expm_fixed_basis(H, t).topRows(kLevels)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Superposition, InitialPopulations) {
    std::mt19937_64 rng(13);
    const Vec4c a = random_state(rng);
    const double t0[] = {0.0};
    const Eigen::MatrixXd p = superposition_signal(random_hermitian(rng), random_gauge(rng), a, t0);
    for (int l = 0; l < kLevels; ++l) EXPECT_NEAR(p(l, 0), std::norm(a(l)), 1e-12);
}

TEST(Superposition, RejectsUnnormalizedAmplitudes) {
    const double t0[] = {0.0};
    EXPECT_THROW(superposition_signal(diag_hamiltonian(0, 1, 2, 3), {}, Vec4c(1, 1, 0, 0), t0), ValidationError);
}

TEST(Superposition, GaugePhasesBecomeObservable) {
    std::mt19937_64 rng(14);
    const Hamiltonian4 H = random_hermitian(rng);
    const Vec4c balanced = Vec4c(cplx(1, 0), cplx(0, 1), cplx(-1, 0), cplx(0.6, 0.8)) / 2.0;
    const std::vector<double> t = uniform_times(100, 0.1);
    const GaugePhases g(kPi / 3, kPi / 5, kPi / 7);
    const Eigen::MatrixXd p0 = superposition_signal(H, GaugePhases{}, balanced, t);
    const Eigen::MatrixXd p1 = superposition_signal(H, g, balanced, t);
    EXPECT_LT((p0 - expm_superposition(H, GaugePhases{}, balanced, t)).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((p1 - expm_superposition(H, g, balanced, t)).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_GT((p0 - p1).cwiseAbs().maxCoeff(), 1e-2);
}

TEST(Superposition, MatchesPropagationOracleOnRandomTriples) {
    std::mt19937_64 rng(15);
    const std::vector<double> t = uniform_times(120, 0.1);
    for (int trial = 0; trial < 100; ++trial) {
        const Hamiltonian4 H = random_hermitian(rng);
        const GaugePhases g = random_gauge(rng);
        const Vec4c a = random_state(rng);
        EXPECT_LT((superposition_signal(H, g, a, t) - expm_superposition(H, g, a, t)).cwiseAbs().maxCoeff(), 1e-9);
    }
}
