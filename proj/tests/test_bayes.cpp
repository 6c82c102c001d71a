#include "hamtomo/bayes.hpp"
#include "hamtomo/spectral.hpp"
#include "hamtomo/systems.hpp"
#include "test_support.hpp"

#include <Eigen/QR>
#include <gtest/gtest.h>

using namespace hamtomo;
using namespace hamtomo::testing;

namespace {

TraceSet exact_traces(const Hamiltonian4& H, const SamplingPlan& plan) {
    const std::vector<double> t = plan.times();
    return {plan, expm_fixed_basis(H, t), Protocol::FixedBasis};
}

// Direct evaluation: the squared norm of the least-squares projection onto
// span{cos, sin, 1} replaces the orthonormalized sum of h^2.
double oracle_log_likelihood(const std::vector<double>& w, const TraceSet& ts) {
    const std::vector<double> t = ts.times();
    const int F = static_cast<int>(w.size()), M = 2 * F + 1, N = ts.plan.N;
    Eigen::MatrixXd G(N, M);
    for (int n = 0; n < N; ++n) {
        for (int m = 0; m < F; ++m) {
            G(n, 2 * m) = std::cos(w[m] * t[n]);
            G(n, 2 * m + 1) = std::sin(w[m] * t[n]);
        }
        G(n, M - 1) = 1.0;
    }
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(G);
    double acc = 0.0;
    for (int r = 0; r < ts.rows(); ++r) {
        const Eigen::VectorXd d = ts.data.row(r).transpose();
        if (d.squaredNorm() == 0.0) continue;
        const Eigen::VectorXd proj = G * qr.solve(d);
        acc += std::log10(1.0 - proj.squaredNorm() / d.squaredNorm());
    }
    return 0.5 * (M - N) * acc;
}

std::vector<double> true_frequencies(const Hamiltonian4& H) {
    const auto w = transition_frequencies(eigendecompose(H).eigenvalues);
    return {w.begin(), w.end()};
}

}  // namespace

TEST(Basis, GramAndOrthonormality) {
    const std::vector<double> t = uniform_times(200, 0.1);
    const std::vector<double> w{0.7, 1.9, 3.2};
    const BasisSet b = build_basis(w, t);
    EXPECT_EQ(b.size(), 7);
    const Eigen::MatrixXd H = b.orthonormal();
    EXPECT_LT((H * H.transpose() - Eigen::MatrixXd::Identity(7, 7)).norm(), 1e-9);
    EXPECT_LT((b.eigvecs * b.alphas.asDiagonal() * b.eigvecs.transpose() - b.gram).norm(), 1e-8);
}

TEST(Basis, RejectsBadInput) {
    const std::vector<double> t = uniform_times(200, 0.1);
    EXPECT_THROW(build_basis(std::vector<double>{1.0, 1.0}, t), DegeneracyError);
    EXPECT_THROW(build_basis(std::vector<double>{-1.0}, t), ValidationError);
    EXPECT_THROW(build_basis(std::vector<double>{1.0, 2.0}, uniform_times(4, 0.1)), ValidationError);
}

TEST(LogLikelihood, MatchesDirectProjection) {
    std::mt19937_64 rng(1);
    const Hamiltonian4 H = random_hermitian(rng);
    const TraceSet ts = run_fixed_basis(H, {0.1, 513, 250, 4});
    std::vector<double> w = true_frequencies(H);
    for (double& x : w) x += 0.01;
    const double ll = log_likelihood(w, ts);
    EXPECT_NEAR(ll, oracle_log_likelihood(w, ts), 1e-8 * std::abs(ll));
}

TEST(LogLikelihood, PermutationInvariant) {
    const TraceSet ts = run_fixed_basis(generate_system(3), {0.1, 513, 250, 5});
    std::vector<double> w{0.5, 1.2, 2.7, 3.3};
    const double ll = log_likelihood(w, ts);
    std::reverse(w.begin(), w.end());
    EXPECT_NEAR(log_likelihood(w, ts), ll, 1e-9 * std::abs(ll));
}

TEST(LogLikelihood, PeaksNearTrueFrequencies) {
    const Hamiltonian4 H = generate_system(4);
    const TraceSet ts = run_fixed_basis(H, {0.1, 1025, 250, 6});
    const std::vector<double> w = true_frequencies(H);
    const double at_truth = log_likelihood(w, ts);
    const double T = ts.signal_length();
    for (int m = 0; m < kTransitions; ++m) {
        std::vector<double> off = w;
        off[m] += kPi / T;
        EXPECT_GT(at_truth, log_likelihood(off, ts));
    }
}

TEST(Coefficients, ExactRecoveryFromNoiselessTraces) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        const Hamiltonian4 H = generate_system(100 + trial);
        const SignalModel sm = signal_model_of(H);
        const TraceSet ts = exact_traces(H, {0.1, 401, 1, 0});
        const ModelFit fit = estimate_coefficients(sm.frequencies, ts);
        ASSERT_EQ(fit.num_frequencies(), kTransitions);
        for (int m = 0; m < kTransitions; ++m) EXPECT_DOUBLE_EQ(fit.frequencies[m], sm.frequencies[m]);
        EXPECT_LT((fit.a - sm.a).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_LT((fit.b - sm.b).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_LT((fit.c - sm.c).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_LT(fit.sigma2.maxCoeff(), 1e-12);
    }
}

TEST(Coefficients, SymmetryOfFixedBasisFit) {
    const TraceSet ts = run_fixed_basis(generate_system(7), {0.1, 513, 100, 8});
    const ModelFit fit = estimate_coefficients(std::vector<double>{0.9, 2.0, 4.1}, ts);
    for (int k = 0; k < kLevels; ++k)
        for (int l = 0; l < kLevels; ++l)
            for (int m = 0; m < 3; ++m) {
                EXPECT_EQ(fit.a(trace_index(k, l), m), fit.a(trace_index(l, k), m));
                EXPECT_EQ(fit.b(trace_index(k, l), m), -fit.b(trace_index(l, k), m));
                EXPECT_EQ(fit.da(trace_index(k, l), m), fit.da(trace_index(l, k), m));
            }
}

TEST(Coefficients, UncertaintiesAreCalibrated) {
    const Hamiltonian4 H = generate_system(9);
    const SignalModel sm = signal_model_of(H);
    double z2 = 0.0;
    int count = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const TraceSet ts = run_fixed_basis(H, {0.1, 1025, 250, seed});
        const ModelFit fit = estimate_coefficients(sm.frequencies, ts);
        for (int k = 0; k < kLevels; ++k)
            for (int l = k + 1; l < kLevels; ++l)
                for (int m = 0; m < kTransitions; ++m) {
                    const int r = trace_index(k, l);
                    z2 += std::pow((fit.a(r, m) - sm.a(r, m)) / fit.da(r, m), 2);
                    z2 += std::pow((fit.b(r, m) - sm.b(r, m)) / fit.db(r, m), 2);
                    count += 2;
                }
    }
    // Binomial noise is heteroscedastic, so only rough calibration is expected.
    const double rms = std::sqrt(z2 / count);
    EXPECT_GT(rms, 0.6);
    EXPECT_LT(rms, 1.5);
}

TEST(Optimizer, ConvergesFromOffsetSeeds) {
    const Hamiltonian4 H = generate_system(12);
    const std::vector<double> w = true_frequencies(H);
    const SamplingPlan plan{0.1, 2049, 250, 13};
    const TraceSet ts = run_fixed_basis(H, plan);
    const double T = plan.signal_length();
    std::vector<double> seed = w;
    for (int m = 0; m < kTransitions; ++m) seed[m] += (m % 2 ? 0.3 : -0.3) * kPi / T;
    const ModelFit fit = optimize_frequencies(seed, ts);
    EXPECT_TRUE(fit.converged);
    for (int m = 0; m < kTransitions; ++m) EXPECT_NEAR(fit.frequencies[m], w[m], 0.02 * kPi / T);
    EXPECT_GE(fit.logP, log_likelihood(w, ts));
}

TEST(Degenerate, SplitsAMergedPeak) {
    // Levels chosen so that w23 and w12 differ by 0.009.
    const Vec4d lambda(0.0, 0.4326, 0.8562, 5.8608);
    std::mt19937_64 rng(21);
    const Hamiltonian4 H = hamiltonian_with_spectrum(lambda, rng);
    const std::vector<double> w = true_frequencies(H);
    const SamplingPlan plan{0.1, 1025, 250, 22};
    const TraceSet ts = run_fixed_basis(H, plan);
    // Five-frequency seed: the merged pair sits at its midpoint.
    std::vector<double> five{0.5 * (w[0] + w[1]), w[2], w[3], w[4], w[5]};
    const ModelFit f5 = optimize_frequencies(five, ts);
    ASSERT_EQ(f5.num_frequencies(), 5);
    const ModelFit f6 = refine_degenerate(f5, ts);
    ASSERT_EQ(f6.num_frequencies(), 6);
    EXPECT_GT(f6.logP, f5.logP);
    EXPECT_NEAR(f6.frequencies[0], w[0], 0.003);
    EXPECT_NEAR(f6.frequencies[1], w[1], 0.003);
}

TEST(Degenerate, RecoversAnUnresolvedPairAtLowNoise) {
    // Split of 2 pi / (5 T), well under the spectral resolution.
    const SamplingPlan plan{0.1, 1025, 1000000, 31};
    const double split = kTwoPi / (5.0 * plan.signal_length());
    const Vec4d lambda(0.0, 0.43, 0.86 + split, 5.86);
    std::mt19937_64 rng(31);
    const Hamiltonian4 H = hamiltonian_with_spectrum(lambda, rng);
    const std::vector<double> w = true_frequencies(H);
    const TraceSet ts = run_fixed_basis(H, plan);
    const PowerSpectrum spec = power_spectrum(ts, 8.0, 0.5);
    PeakOptions po;
    po.interpolate = false;
    const auto peaks = find_peaks(spec, default_floor(spec, po), 6, po);
    ASSERT_EQ(peaks.size(), 5u);
    const ModelFit f5 = optimize_frequencies(peaks, ts);
    const RefinementResult rr = refine_degenerate_detailed(f5, ts);
    ASSERT_EQ(rr.best.num_frequencies(), 6);
    EXPECT_NEAR(rr.best.frequencies[0], w[0], 0.05 * split);
    EXPECT_NEAR(rr.best.frequencies[1], w[1], 0.05 * split);
    // Monotone model selection.
    EXPECT_GT(rr.best.logP, f5.logP);
    for (const auto& c : rr.candidates) EXPECT_LE(c.fit.logP, rr.best.logP);
}

TEST(Degenerate, SixResolvedFrequenciesAreLeftAlone) {
    const Hamiltonian4 H = generate_system(5);
    const TraceSet ts = run_fixed_basis(H, {0.1, 1025, 250, 6});
    const ModelFit f6 = estimate_coefficients(true_frequencies(H), ts);
    const RefinementResult rr = refine_degenerate_detailed(f6, ts);
    EXPECT_EQ(rr.best.frequencies, f6.frequencies);
    EXPECT_TRUE(rr.candidates.empty());
}

TEST(Degenerate, SumRuleSeedFindsAToneHiddenInASidelobe) {
    // The weakest transition sits on the shoulder of a strong neighbour and
    // outside its split window; it equals the sum of two other transitions.
    SystemOptions so;
    so.min_separation = kTwoPi / 102.4;
    const Hamiltonian4 H = generate_system(2003, so);
    const std::vector<double> w = true_frequencies(H);
    const SamplingPlan plan{0.1, 1025, 125, 93};
    const TraceSet ts = run_fixed_basis(H, plan);
    const PowerSpectrum spec = power_spectrum(ts, 8.0, 0.5);
    PeakOptions po;
    po.interpolate = false;
    const auto peaks = find_peaks(spec, default_floor(spec, po), 6, po);
    ASSERT_EQ(peaks.size(), 5u);
    const ModelFit f5 = optimize_frequencies(peaks, ts);
    DegenerateOptions no_rules;
    no_rules.sum_rule_seeds = false;
    const ModelFit split_only = refine_degenerate(f5, ts, no_rules);
    const ModelFit f6 = refine_degenerate(f5, ts);
    ASSERT_EQ(f6.num_frequencies(), 6);
    EXPECT_GE(f6.logP, split_only.logP);
    for (int m = 0; m < 6; ++m) EXPECT_NEAR(f6.frequencies[m], w[m], kPi / plan.signal_length());
}
