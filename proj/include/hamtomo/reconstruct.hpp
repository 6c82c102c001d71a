// reconstruct.hpp: from six fitted frequencies and their per-trace
// coefficients back to a Hamiltonian, up to the basis-phase gauge.
//
// Stages: level identification from frequency sum rules, phase differences
// Delta_{kl;uv} = atan2(b, a), refinement of the phase sum rules, rank-1
// completion of M_kl = s s^T for the overlap magnitudes, and assembly.

#pragma once

#include "hamtomo/bayes.hpp"
#include "hamtomo/bfgs.hpp"
#include "hamtomo/core_model.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <random>
#include <string>
#include <vector>

namespace hamtomo {

// ---------------------------------------------------------------- levels

// Index of a level pair (u < v) in kAllPairs.
constexpr int pair_index(int u, int v) noexcept {
    constexpr int table[kLevels][kLevels] = {{-1, 0, 1, 2}, {0, -1, 3, 4}, {1, 3, -1, 5}, {2, 4, 5, -1}};
    return table[u][v];
}

inline constexpr int kArrangements = 5;

// Sorted-frequency index of w12, w23, w34, w13, w24 for each arrangement
// (w14 is always the largest). Reflected level schemes give the same table.
inline constexpr std::array<std::array<int, 5>, kArrangements> kArrangementSlots{{
    {0, 1, 2, 3, 4},
    {0, 2, 1, 3, 4},
    {1, 0, 2, 3, 4},
    {1, 0, 3, 2, 4},
    {0, 1, 3, 2, 4},
}};

// Frequency index -> level pair for arrangement s (1-based).
inline std::array<TransitionPair, kTransitions> arrangement_map(int s) {
    if (s < 1 || s > kArrangements) throw ValidationError("arrangement_map: arrangement must be in 1..5");
    const auto& slot = kArrangementSlots[static_cast<std::size_t>(s - 1)];
    std::array<TransitionPair, kTransitions> map{};
    map[static_cast<std::size_t>(slot[0])] = {0, 1};
    map[static_cast<std::size_t>(slot[1])] = {1, 2};
    map[static_cast<std::size_t>(slot[2])] = {2, 3};
    map[static_cast<std::size_t>(slot[3])] = {0, 2};
    map[static_cast<std::size_t>(slot[4])] = {1, 3};
    map[5] = {0, 3};
    return map;
}

// Sum rules w12+w23+w34-w14, w12+w23-w13, w23+w34-w24 written on the sorted
// frequency vector.
inline Eigen::Matrix<double, 3, kTransitions> arrangement_matrix(int s) {
    const auto map = arrangement_map(s);
    std::array<int, kTransitions> slot_of_pair{};
    for (int m = 0; m < kTransitions; ++m) slot_of_pair[pair_index(map[m].first, map[m].second)] = m;
    auto at = [&](int u, int v) { return slot_of_pair[pair_index(u, v)]; };
    Eigen::Matrix<double, 3, kTransitions> A = Eigen::Matrix<double, 3, kTransitions>::Zero();
    A(0, at(0, 1)) += 1; A(0, at(1, 2)) += 1; A(0, at(2, 3)) += 1; A(0, at(0, 3)) -= 1;
    A(1, at(0, 1)) += 1; A(1, at(1, 2)) += 1; A(1, at(0, 2)) -= 1;
    A(2, at(1, 2)) += 1; A(2, at(2, 3)) += 1; A(2, at(1, 3)) -= 1;
    return A;
}

struct LevelThresholds {
    double ratio = 0.1;         // best residual must be below ratio * runner-up
    double absolute = 6.0;      // and below absolute * (pi/T)^2
};

struct LevelAssignment {
    int arrangement = 1;
    std::array<TransitionPair, kTransitions> map{};  // frequency index -> (u, v)
    std::array<double, kArrangements> residuals{};
    bool inverted = false;      // map describes the reflected level scheme
    bool ambiguous = false;
    bool not_four_level = false;

    // Frequency index of the transition (u, v), u < v.
    int slot(int u, int v) const {
        for (int m = 0; m < kTransitions; ++m)
            if (map[m].first == u && map[m].second == v) return m;
        throw ValidationError("LevelAssignment::slot: pair not present");
    }

    // The same frequencies read on the energy-reflected scheme, u -> 3 - u.
    LevelAssignment reflected() const {
        LevelAssignment r = *this;
        for (auto& p : r.map) p = {3 - p.second, 3 - p.first};
        r.inverted = !inverted;
        return r;
    }
};

// T <= 0 skips the absolute threshold.
inline LevelAssignment identify_levels(std::span<const double> freqs, double T = 0.0,
                                       const LevelThresholds& th = {}) {
    if (freqs.size() != kTransitions) throw ValidationError("identify_levels: need six frequencies");
    Eigen::Matrix<double, kTransitions, 1> w;
    for (int m = 0; m < kTransitions; ++m) {
        w(m) = freqs[static_cast<std::size_t>(m)];
        if (!(w(m) > 0.0)) throw ValidationError("identify_levels: frequencies must be positive");
        if (m > 0 && !(w(m) > w(m - 1))) throw ValidationError("identify_levels: frequencies must be ascending and distinct");
    }
    LevelAssignment out;
    for (int s = 1; s <= kArrangements; ++s) out.residuals[s - 1] = (arrangement_matrix(s) * w).squaredNorm();
    const auto best = std::min_element(out.residuals.begin(), out.residuals.end());
    out.arrangement = static_cast<int>(best - out.residuals.begin()) + 1;
    out.map = arrangement_map(out.arrangement);
    double runner_up = std::numeric_limits<double>::infinity();
    for (int s = 0; s < kArrangements; ++s)
        if (s != out.arrangement - 1) runner_up = std::min(runner_up, out.residuals[s]);
    out.ambiguous = !(*best < th.ratio * runner_up);
    if (T > 0.0) out.not_four_level = !(*best < th.absolute * (kPi / T) * (kPi / T));
    return out;
}

// ---------------------------------------------------------------- phases

using PairArray = std::array<double, kTransitions>;  // indexed by kAllPairs

// Delta_12 + Delta_23 - Delta_13, Delta_13 + Delta_34 - Delta_14 and
// Delta_12 + Delta_24 - Delta_14 vanish mod 2 pi for Delta_{uv} = theta_v - theta_u.
inline const Eigen::Matrix<double, 3, kTransitions>& phase_constraint_matrix() {
    static const Eigen::Matrix<double, 3, kTransitions> A = [] {
        Eigen::Matrix<double, 3, kTransitions> m = Eigen::Matrix<double, 3, kTransitions>::Zero();
        m(0, pair_index(0, 1)) = 1; m(0, pair_index(1, 2)) = 1; m(0, pair_index(0, 2)) = -1;
        m(1, pair_index(0, 2)) = 1; m(1, pair_index(2, 3)) = 1; m(1, pair_index(0, 3)) = -1;
        m(2, pair_index(0, 1)) = 1; m(2, pair_index(1, 3)) = 1; m(2, pair_index(0, 3)) = -1;
        return m;
    }();
    return A;
}

// The same constraints on the sorted-frequency ordering of an arrangement.
inline Eigen::Matrix<double, 3, kTransitions> phase_constraint_matrix(const LevelAssignment& assign) {
    Eigen::Matrix<double, 3, kTransitions> out;
    for (int m = 0; m < kTransitions; ++m)
        out.col(m) = phase_constraint_matrix().col(pair_index(assign.map[m].first, assign.map[m].second));
    return out;
}

// ||e||^2 with e_s the distance of (A Delta)_s to the nearest multiple of 2 pi.
inline double constraint_violation(const PairArray& delta) {
    const Eigen::Map<const Eigen::Matrix<double, kTransitions, 1>> d(delta.data());
    const Eigen::Vector3d x = phase_constraint_matrix() * d;
    double v = 0.0;
    for (int s = 0; s < 3; ++s) v += std::pow(wrap_pi(x(s)), 2);
    return v;
}

struct PhaseTable {
    std::array<PairArray, kTraces> delta{};      // in (-pi, pi]
    std::array<PairArray, kTraces> variance{};   // propagated from the coefficient uncertainties
    std::array<double, kTraces> violation{};
    double max_violation = 0.0;                  // max over all (k, l)
    int vanishing = 0;                           // entries with a = b = 0 (Delta set to 0)

    double& at(int k, int l, int u, int v) { return delta[trace_index(k, l)][pair_index(u, v)]; }
    double at(int k, int l, int u, int v) const { return delta[trace_index(k, l)][pair_index(u, v)]; }

    void update_violations() {
        max_violation = 0.0;
        for (int r = 0; r < kTraces; ++r) {
            violation[r] = constraint_violation(delta[r]);
            max_violation = std::max(max_violation, violation[r]);
        }
    }
};

inline PhaseTable extract_phases(const ModelFit& fit, const LevelAssignment& assign) {
    if (fit.num_frequencies() != kTransitions || fit.a.rows() != kTraces)
        throw ValidationError("extract_phases: need a six-frequency fit of the sixteen fixed-basis traces");
    PhaseTable t;
    for (int r = 0; r < kTraces; ++r) {
        for (int m = 0; m < kTransitions; ++m) {
            const int p = pair_index(assign.map[m].first, assign.map[m].second);
            const double a = fit.a(r, m), b = fit.b(r, m);
            const double n2 = a * a + b * b;
            if (n2 == 0.0) {
                t.delta[r][p] = 0.0;
                t.variance[r][p] = std::numeric_limits<double>::infinity();
                ++t.vanishing;
                continue;
            }
            t.delta[r][p] = std::atan2(b, a);
            const double da = fit.da.size() ? fit.da(r, m) : 0.0;
            const double db = fit.db.size() ? fit.db(r, m) : 0.0;
            t.variance[r][p] = (b * b * da * da + a * a * db * db) / (n2 * n2);
        }
    }
    t.update_violations();
    return t;
}

struct PhaseRefineOptions {
    double tether = 1e-6;  // weight of the pull toward the initial phases
};

// Per trace k < l, with the wrap integers n = round(A Delta0 / 2 pi) held
// fixed, solves  min ||A Delta - 2 pi n||^2 + tether * sum_i w_i (Delta_i - Delta0_i)^2
// with w the inverse phase variances normalized to mean 1. The objective at
// the solution is at most its value at Delta0, so the violation cannot grow.
// Diagonal traces get Delta = 0 and l > k is mirrored as -Delta_{kl}.
inline PhaseTable refine_phases(const PhaseTable& in, const PhaseRefineOptions& opt = {}) {
    using Vec6 = Eigen::Matrix<double, kTransitions, 1>;
    using Mat6 = Eigen::Matrix<double, kTransitions, kTransitions>;
    const auto& A = phase_constraint_matrix();
    PhaseTable out = in;
    for (int k = 0; k < kLevels; ++k) {
        out.delta[trace_index(k, k)].fill(0.0);
        for (int l = k + 1; l < kLevels; ++l) {
            const int r = trace_index(k, l);
            const Vec6 d0 = Eigen::Map<const Vec6>(in.delta[r].data());
            const Eigen::Vector3d x = A * d0;
            Eigen::Vector3d target;
            for (int s = 0; s < 3; ++s) target(s) = kTwoPi * std::round(x(s) / kTwoPi);

            Vec6 w;
            double vmax = 0.0;
            for (int i = 0; i < kTransitions; ++i)
                if (std::isfinite(in.variance[r][i])) vmax = std::max(vmax, in.variance[r][i]);
            const double vfloor = std::max(1e-12 * vmax, 1e-300);
            for (int i = 0; i < kTransitions; ++i) {
                const double v = in.variance[r][i];
                w(i) = std::isfinite(v) ? 1.0 / std::max(v, vfloor) : 0.0;
            }
            if (w.sum() > 0.0) w *= kTransitions / w.sum();
            else w.setOnes();
            w = w.cwiseMax(1e-12);  // keeps the system positive definite

            // Solved for the correction so that a consistent table is left exactly as is.
            const Eigen::Vector3d miss = target - x;
            Vec6 d = d0;
            if (miss.squaredNorm() > 0.0) {
                const Mat6 lhs = A.transpose() * A + opt.tether * Mat6(w.asDiagonal());
                d += lhs.ldlt().solve(A.transpose() * miss);
            }
            for (int i = 0; i < kTransitions; ++i) {
                out.delta[r][i] = wrap_pi(d(i));
                out.delta[trace_index(l, k)][i] = wrap_pi(-d(i));
            }
        }
    }
    out.update_violations();
    return out;
}

// ---------------------------------------------------------------- rank-1 completion

struct SVectors {
    std::array<Vec4d, kTraces> s{};                   // per trace, indexed by level
    std::array<double, kTraces> completion_residual{};
    std::array<double, kTraces> dominance{};          // largest eigenvalue / trace of completed M
    std::array<bool, kTraces> low_confidence{};       // residual > 1e-6, dominance < 0.9, or a negative entry
};

struct CompletionOptions {
    int starts = 8;
    double residual_flag = 1e-6;
    double dominance_flag = 0.9;
    double negative_clamp = 1e-6;
};

struct CompletionResult {
    Vec4d diagonal;
    double residual = 0.0;
};

// Chooses the diagonal g of a symmetric 4x4 matrix with off-diagonal P so as
// to minimize sum_{m != n} (g_m g_n - P_mn^2)^2 with 0 <= g <= c. The box is
// built in by g = c sin^2(u).
inline CompletionResult complete_diagonal(const Mat4d& P, double c, const CompletionOptions& opt = {}) {
    const Mat4d P2 = P.cwiseAbs2();
    auto residual = [&](const Vec4d& g) {
        double e = 0.0;
        for (int m = 0; m < kLevels; ++m)
            for (int n = 0; n < kLevels; ++n)
                if (m != n) e += std::pow(g(m) * g(n) - P2(m, n), 2);
        return e;
    };
    if (!(c > 0.0)) return {Vec4d::Zero(), residual(Vec4d::Zero())};

    auto to_g = [&](const Eigen::VectorXd& u) {
        Vec4d g;
        for (int m = 0; m < kLevels; ++m) g(m) = c * std::pow(std::sin(u(m)), 2);
        return g;
    };
    auto f = [&](const Eigen::VectorXd& u) { return residual(to_g(u)); };
    auto grad = [&](const Eigen::VectorXd& u) {
        const Vec4d g = to_g(u);
        Eigen::VectorXd out(kLevels);
        for (int m = 0; m < kLevels; ++m) {
            double dg = 0.0;
            for (int n = 0; n < kLevels; ++n)
                if (n != m) dg += 4.0 * (g(m) * g(n) - P2(m, n)) * g(n);
            out(m) = dg * c * std::sin(2.0 * u(m));
        }
        return out;
    };
    auto to_u = [&](const Vec4d& g) {
        Eigen::VectorXd u(kLevels);
        for (int m = 0; m < kLevels; ++m) u(m) = std::asin(std::sqrt(std::clamp(g(m) / c, 0.0, 1.0)));
        return u;
    };

    // Seed from g_m = P_mn P_mr / P_nr, the exact value for a rank-1 matrix.
    std::vector<Vec4d> seeds;
    Vec4d closed;
    for (int m = 0; m < kLevels; ++m) {
        std::vector<double> est;
        for (int n = 0; n < kLevels; ++n)
            for (int r = n + 1; r < kLevels; ++r)
                if (n != m && r != m && std::abs(P(n, r)) > 1e-12 * c)
                    est.push_back(std::abs(P(m, n) * P(m, r) / P(n, r)));
        if (est.empty()) {
            closed(m) = 0.5 * c;
        } else {
            std::nth_element(est.begin(), est.begin() + static_cast<std::ptrdiff_t>(est.size() / 2), est.end());
            closed(m) = est[est.size() / 2];
        }
    }
    // Interior points only: u = 0 or pi/2 is a stationary point of the parametrization.
    seeds.push_back(closed.cwiseMax(1e-3 * c).cwiseMin((1.0 - 1e-3) * c));
    seeds.push_back(Vec4d::Constant(0.5 * c));
    seeds.push_back(Vec4d::Constant(0.25 * c));
    std::mt19937_64 rng(0xC0FFEE);
    std::uniform_real_distribution<double> U(0.02, 0.98);
    while (static_cast<int>(seeds.size()) < std::max(opt.starts, 1))
        seeds.push_back(Vec4d(U(rng), U(rng), U(rng), U(rng)) * c);
    seeds.resize(static_cast<std::size_t>(std::max(opt.starts, 1)));

    BfgsOptions bo;
    bo.grad_tol = 1e-16;
    bo.rel_f_tol = 1e-15;
    bo.max_iterations = 500;
    CompletionResult best{closed.cwiseMax(0.0).cwiseMin(c), residual(closed.cwiseMax(0.0).cwiseMin(c))};
    for (const Vec4d& g0 : seeds) {
        const BfgsResult r = bfgs_minimize(f, grad, to_u(g0), bo);
        if (r.f < best.residual) best = {to_g(r.x), r.f};
    }
    return best;
}

// Completed matrix M_kl for trace (k, l): off-diagonals a cos Delta + b sin Delta.
inline Mat4d completion_offdiagonal(const ModelFit& fit, const PhaseTable& table, const LevelAssignment& assign,
                                    int r) {
    Mat4d P = Mat4d::Zero();
    for (int m = 0; m < kTransitions; ++m) {
        const auto [u, v] = assign.map[m];
        const double d = table.delta[r][pair_index(u, v)];
        P(u, v) = P(v, u) = fit.a(r, m) * std::cos(d) + fit.b(r, m) * std::sin(d);
    }
    return P;
}

inline SVectors complete_rank1(const ModelFit& fit, const PhaseTable& table, const LevelAssignment& assign,
                               const CompletionOptions& opt = {}) {
    SVectors out;
    for (int k = 0; k < kLevels; ++k) {
        for (int l = k; l < kLevels; ++l) {
            const int r = trace_index(k, l);
            const double c = fit.c(r);
            Mat4d M = completion_offdiagonal(fit, table, assign, r);
            const CompletionResult cr = complete_diagonal(M, c, opt);
            M.diagonal() = cr.diagonal;
            Vec4d s = Vec4d::Zero();
            double dominance = 0.0;
            bool flag = cr.residual > opt.residual_flag;
            if (c > 0.0 && M.trace() > 0.0) {
                Eigen::SelfAdjointEigenSolver<Mat4d> es(M);
                s = es.eigenvectors().col(kLevels - 1);
                dominance = es.eigenvalues()(kLevels - 1) / M.trace();
                if (s.sum() < 0.0) s = -s;
                s *= std::sqrt(c);
                for (int v = 0; v < kLevels; ++v) {
                    if (s(v) < 0.0) {
                        if (-s(v) < opt.negative_clamp) s(v) = 0.0;
                        else flag = true;
                    }
                }
                if (s.squaredNorm() > 0.0) s *= std::sqrt(c) / s.norm();
            } else {
                flag = true;
            }
            flag = flag || dominance < opt.dominance_flag;
            for (int idx : {r, trace_index(l, k)}) {
                out.s[idx] = s;
                out.completion_residual[idx] = cr.residual;
                out.dominance[idx] = dominance;
                out.low_confidence[idx] = flag;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------- assembly

struct ReconstructOptions {
    LevelThresholds levels{};
    PhaseRefineOptions refine{};
    CompletionOptions completion{};
    bool refine_phases = true;
};

struct Reconstruction {
    Hamiltonian4 H;
    LevelAssignment assignment;
    PhaseTable phases_initial;
    PhaseTable phases;            // after refinement
    SVectors svectors;
    Vec4d lambda_tilde;
    double constraint_violation = 0.0;  // max over (k, l) before refinement
    int low_confidence_pairs = 0;
    std::vector<std::string> warnings;
};

inline Reconstruction reconstruct(const ModelFit& fit, const ReconstructOptions& opt = {}) {
    if (fit.num_frequencies() != kTransitions)
        throw ValidationError("reconstruct: need a six-frequency fit");
    Reconstruction rec;
    rec.assignment = identify_levels(fit.frequencies, fit.signal_length, opt.levels);
    if (rec.assignment.not_four_level)
        rec.warnings.push_back("level identification: no arrangement fits; may not be a four-level system");
    if (rec.assignment.ambiguous)
        rec.warnings.push_back("level identification: ambiguous arrangement; more data required");
    rec.phases_initial = extract_phases(fit, rec.assignment);
    rec.constraint_violation = rec.phases_initial.max_violation;
    if (rec.phases_initial.vanishing > 0) rec.warnings.push_back("vanishing transition amplitude");
    rec.phases = opt.refine_phases ? refine_phases(rec.phases_initial, opt.refine) : rec.phases_initial;
    rec.svectors = complete_rank1(fit, rec.phases, rec.assignment, opt.completion);
    for (int k = 0; k < kLevels; ++k)
        for (int l = k; l < kLevels; ++l) rec.low_confidence_pairs += rec.svectors.low_confidence[trace_index(k, l)];
    if (rec.low_confidence_pairs > 0) rec.warnings.push_back("rank-1 completion: low-confidence pairs");

    const auto& w = fit.frequencies;
    const auto& as = rec.assignment;
    rec.lambda_tilde = lambda_tilde_from(w[as.slot(0, 1)], w[as.slot(0, 2)], w[as.slot(0, 3)]);
    std::array<Vec4d, kTraces> delta1{};
    for (int r = 0; r < kTraces; ++r)
        delta1[r] = Vec4d(0.0, rec.phases.delta[r][pair_index(0, 1)], rec.phases.delta[r][pair_index(0, 2)],
                          rec.phases.delta[r][pair_index(0, 3)]);
    rec.H = assemble_Htilde(rec.lambda_tilde, rec.svectors.s, delta1);
    return rec;
}

// ---------------------------------------------------------------- error metric

inline double op_norm(const Mat4c& m) {
    return Eigen::JacobiSVD<Mat4c>(m).singularValues()(0);
}

struct GaugeError {
    double relative = 0.0;
    bool inverted = false;  // the energy-inverted image of H_est matched better
    GaugePhases gauge;      // applied to the chosen branch of H_est
};

// Aligns the first-row phases of H_est to H_act by D = diag(1, e^{i d}),
// d_1l = arg H_act(1,l) - arg H_est(1,l), and compares traceless parts in the
// operator norm. Takes the better of H_est and its energy inversion. A
// first-row entry below 1e-9 ||H_act|| leaves its phase free; it is then
// scanned over 64 points.
inline GaugeError gauge_compensated_error_detailed(const Hamiltonian4& H_est, const Hamiltonian4& H_act) {
    const double norm = H_act.op_norm();
    if (!(norm > 0.0)) throw ValidationError("gauge_compensated_error: H_act must be nonzero");
    const Mat4c A = H_act.traceless().matrix();
    const double tiny = 1e-9 * norm;
    GaugeError best{std::numeric_limits<double>::infinity(), false, {}};
    for (bool inv : {false, true}) {
        const Hamiltonian4 B = inv ? energy_inversion(H_est) : H_est;
        const Mat4c E = B.traceless().matrix();
        std::array<std::vector<double>, 3> choices;
        for (int l = 1; l < kLevels; ++l) {
            if (std::abs(A(0, l)) > tiny && std::abs(E(0, l)) > tiny) {
                choices[l - 1] = {std::arg(A(0, l)) - std::arg(E(0, l))};
            } else {
                for (int j = 0; j < 64; ++j) choices[l - 1].push_back(kTwoPi * j / 64.0);
            }
        }
        for (double d2 : choices[0])
            for (double d3 : choices[1])
                for (double d4 : choices[2]) {
                    const GaugePhases g(d2, d3, d4);
                    const Mat4c D = g.matrix();
                    const double err = op_norm(D.adjoint() * E * D - A) / norm;
                    if (err < best.relative) best = {err, inv, g};
                }
    }
    return best;
}

inline double gauge_compensated_error(const Hamiltonian4& H_est, const Hamiltonian4& H_act) {
    return gauge_compensated_error_detailed(H_est, H_act).relative;
}

}  // namespace hamtomo
