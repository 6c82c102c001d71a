#include "hamtomo/control_phase.hpp"
#include "hamtomo/systems.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace hamtomo;
using namespace hamtomo::testing;

namespace {

Vec4c expm_first_state(const Hamiltonian4& H, double t) {
    return expm_propagator(H.matrix(), t).col(0);
}

// Exact two-step probabilities with the preparation done by matrix exponential.
TraceSet exact_two_step(const Hamiltonian4& H0, double t_star, const Hamiltonian4& Hf, const SamplingPlan& plan) {
    const Vec4c phi = expm_first_state(H0, t_star);
    const auto t = plan.times();
    TraceSet ts{plan, Eigen::MatrixXd(kLevels, plan.N), Protocol::Superposition};
    for (int n = 0; n < plan.N; ++n) ts.data.col(n) = (expm_propagator(Hf.matrix(), t[n]) * phi).cwiseAbs2();
    return ts;
}

}  // namespace

TEST(BalancedTime, MixerReachesBalance) {
    const Hamiltonian4 H0(Mat4c::Ones());
    const BalancedTime bt = select_balanced_time(H0);
    EXPECT_TRUE(bt.balanced());
    EXPECT_LT(bt.imbalance, 0.05);
    EXPECT_NEAR(bt.imbalance, imbalance(expm_first_state(H0, bt.t_star)), 1e-12);
}

TEST(BalancedTime, NoBetterThanDirectScan) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        const Hamiltonian4 H0 = random_hermitian(rng);
        const BalancedTime bt = select_balanced_time(H0);
        ASSERT_GE(bt.t_star, 0.0);
        ASSERT_LE(bt.t_star, 10.0);
        double scan = std::numeric_limits<double>::infinity();
        for (int i = 0; i <= 10000; ++i) scan = std::min(scan, imbalance(expm_first_state(H0, i * 1e-3)));
        EXPECT_LE(bt.imbalance, scan + 1e-3);
        EXPECT_NEAR(bt.imbalance, imbalance(expm_first_state(H0, bt.t_star)), 1e-12);
    }
}

TEST(BalancedTime, DiagonalReferenceIsDiagnosed) {
    const BalancedTime bt = select_balanced_time(diag_hamiltonian(-1.5, -0.5, 0.5, 1.5));
    EXPECT_FALSE(bt.balanced());
    EXPECT_NEAR(bt.imbalance, 1.5, 1e-12);
    EXPECT_THROW(select_balanced_time(diag_hamiltonian(0, 0, 0, 0), {0.0}), ValidationError);
}

TEST(PhaseObjective, PeriodicInEachPhase) {
    std::mt19937_64 rng(8);
    const Hamiltonian4 Ht = random_hermitian(rng);
    const Vec4c phi = random_state(rng);
    const SamplingPlan plan{0.1, 51, 5000, 1};
    const TraceSet ts = run_two_step(Hamiltonian4(Mat4c::Ones()), 0.4, Ht, plan);
    const PhaseObjective obj(Ht, phi, ts);
    Eigen::VectorXd d(3);
    d << 0.3, 2.0, 4.5;
    for (int i = 0; i < 3; ++i) {
        Eigen::VectorXd e = d;
        e(i) += kTwoPi;
        EXPECT_NEAR(obj(d), obj(e), 1e-12);
    }
}

TEST(EstimateDeltas, NoiselessRecovery) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 5; ++trial) {
        const Hamiltonian4 H0 = random_hermitian(rng);
        const Hamiltonian4 Ht = random_hermitian(rng);
        const GaugePhases g = random_gauge(rng);
        const BalancedTime bt = select_balanced_time(H0);
        const SamplingPlan plan{0.1, 51, 1, 0};
        const TraceSet ts = exact_two_step(H0, bt.t_star, apply_gauge(Ht, g), plan);
        const PhaseEstimate pe = estimate_deltas(Ht, bt.amplitudes, ts);
        EXPECT_LT(wrapped_distance(pe.deltas, g), 1e-6) << "trial " << trial;
        EXPECT_LT(pe.residual, 1e-12);
        EXPECT_GE(pe.restarts_agreeing, 2);
        EXPECT_FALSE(pe.low_confidence);
        for (int i = 0; i < 3; ++i) {
            EXPECT_GE(pe.deltas[i], 0.0);
            EXPECT_LT(pe.deltas[i], kTwoPi);
        }
    }
}

TEST(EstimateDeltas, TruthBeatsRandomProbes) {
    std::mt19937_64 rng(14);
    const Hamiltonian4 H0 = random_hermitian(rng);
    const Hamiltonian4 Ht = random_hermitian(rng);
    const BalancedTime bt = select_balanced_time(H0);
    const TraceSet ts = run_two_step(H0, bt.t_star, Ht, {0.1, 51, 5000, 3});
    const PhaseObjective obj(Ht, bt.amplitudes, ts);
    const double at_truth = obj(GaugePhases{});
    for (int i = 0; i < 1000; ++i) EXPECT_LE(at_truth, obj(random_gauge(rng)));
}

TEST(EstimateDeltas, SingleStartIsLowConfidence) {
    std::mt19937_64 rng(16);
    const Hamiltonian4 H0 = random_hermitian(rng);
    const Hamiltonian4 Ht = random_hermitian(rng);
    const BalancedTime bt = select_balanced_time(H0);
    const TraceSet ts = exact_two_step(H0, bt.t_star, Ht, {0.1, 51, 1, 0});
    PhaseEstimateOptions opt;
    opt.starts = 1;
    const PhaseEstimate pe = estimate_deltas(Ht, bt.amplitudes, ts, opt);
    EXPECT_EQ(pe.restarts_agreeing, 1);
    EXPECT_TRUE(pe.low_confidence);
    opt.starts = 0;
    EXPECT_THROW(estimate_deltas(Ht, bt.amplitudes, ts, opt), ValidationError);
    EXPECT_THROW(estimate_deltas(Ht, Vec4c(1, 1, 0, 0), ts), ValidationError);
}

TEST(FullTomography, NoiselessRecoveryOnBothBranches) {
    std::mt19937_64 rng(18);
    for (int trial = 0; trial < 3; ++trial) {
        const Hamiltonian4 H0 = random_hermitian(rng);
        const Hamiltonian4 Hf = random_hermitian(rng);
        const GaugePhases g = random_gauge(rng);
        const TwoStepExperiment exact = [&](double t_star, const SamplingPlan& plan) {
            return exact_two_step(H0, t_star, Hf, plan);
        };
        // Htilde_f = D Hf D^dag, with and without energy inversion.
        const Hamiltonian4 Ht = apply_gauge(Hf, GaugePhases(-g[0], -g[1], -g[2]));
        for (bool inv : {false, true}) {
            const TomographyResult r = full_tomography(H0, inv ? energy_inversion(Ht) : Ht, exact);
            EXPECT_EQ(r.inverted, inv);
            EXPECT_LT((r.H.matrix() - Hf.matrix()).norm() / Hf.matrix().norm(), 1e-6);
            EXPECT_GT(r.check_residual_other, 1e3 * r.check_residual);
        }
    }
}

TEST(FullTomography, OnePreparationCannotSeparateBranches) {
    // The inverted branch fits one preparation exactly with
    // delta'_j = -delta_j - 2 (arg alpha_j - arg alpha_1).
    std::mt19937_64 rng(20);
    const Hamiltonian4 H0 = random_hermitian(rng);
    const Hamiltonian4 Ht = random_hermitian(rng);
    const GaugePhases g = random_gauge(rng);
    const BalancedTime bt = select_balanced_time(H0);
    const TraceSet ts = exact_two_step(H0, bt.t_star, apply_gauge(Ht, g), {0.1, 51, 1, 0});
    const Vec4c a = bt.amplitudes;
    double d[3];
    for (int j = 1; j < kLevels; ++j) d[j - 1] = -g[j - 1] - 2.0 * (std::arg(a(j)) - std::arg(a(0)));
    const PhaseObjective flipped(energy_inversion(Ht), a, ts);
    EXPECT_LT(flipped(GaugePhases(d[0], d[1], d[2])), 1e-20);

    const BalancedTime other = alternate_balanced_time(H0, bt.t_star, 0.5);
    EXPECT_GE(std::abs(other.t_star - bt.t_star), 0.5);
    const TraceSet check = exact_two_step(H0, other.t_star, apply_gauge(Ht, g), {0.1, 51, 1, 0});
    EXPECT_GT(PhaseObjective(energy_inversion(Ht), other.amplitudes, check)(GaugePhases(d[0], d[1], d[2])), 1e-3);
}

TEST(FullTomography, UnchangedControlGivesReferencePhases) {
    const Hamiltonian4 H0 = generate_system(3);
    TomographyOptions opt;
    opt.plan.seed = 5;
    const TomographyResult r = full_tomography(H0, H0, simulated_two_step(H0, H0), opt);
    EXPECT_FALSE(r.inverted);
    EXPECT_LT(wrapped_distance(r.estimate.deltas, GaugePhases{}), 0.05);
}

TEST(FullTomography, UnbalancedReferenceThrows) {
    const Hamiltonian4 H0 = diag_hamiltonian(-1, 0, 0.2, 0.8);
    std::mt19937_64 rng(2);
    const Hamiltonian4 Hf = random_hermitian(rng);
    EXPECT_THROW(full_tomography(H0, Hf, simulated_two_step(H0, Hf)), NumericalError);
}
