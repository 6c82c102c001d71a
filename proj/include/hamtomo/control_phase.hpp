// control_phase.hpp: gauge phases of a target Hamiltonian relative to a
// reference: balanced superposition preparation under the reference, then a
// least-squares fit of the three basis phases to two-step traces.

#pragma once

#include "hamtomo/bfgs.hpp"
#include "hamtomo/core_model.hpp"
#include "hamtomo/experiment.hpp"

#include <functional>
#include <random>
#include <string>

namespace hamtomo {

struct BalanceOptions {
    double t_max = 10.0;
    double grid_step = 0.01;       // scan step; a tenth of the default sampling step
    double golden_tol = 1e-9;
    double max_imbalance = 0.5;    // above this the reference cannot balance |1>
};

struct BalancedTime {
    double t_star = 0.0;
    double imbalance = 0.0;
    Vec4c amplitudes = Vec4c::Zero();  // exp(-i t_star H0)|1>
    std::string diagnostic;            // empty when balanced
    bool balanced() const { return diagnostic.empty(); }
};

// sum_j | |alpha_j|^2 - 1/4 |
inline double imbalance(const Vec4c& alphas) {
    double s = 0.0;
    for (int j = 0; j < kLevels; ++j) s += std::abs(std::norm(alphas(j)) - 0.25);
    return s;
}

inline Vec4c evolve_first_state(const Propagator& prop, double t) {
    Vec4c e1 = Vec4c::Zero();
    e1(0) = 1.0;
    return prop.evolve(e1, t);
}

namespace detail {

// Grid scan of the imbalance of exp(-itH0)|1> on [0, t_max], skipping
// |t - exclude_at| < exclude_radius, then golden section on the two cells
// around the best grid point.
inline BalancedTime balanced_search(const Propagator& prop, const BalanceOptions& opt, double exclude_at,
                                    double exclude_radius) {
    if (!(opt.t_max > 0.0)) throw ValidationError("select_balanced_time: t_max must be > 0");
    if (!(opt.grid_step > 0.0)) throw ValidationError("select_balanced_time: grid_step must be > 0");
    auto f = [&](double t) { return imbalance(evolve_first_state(prop, t)); };

    const int steps = static_cast<int>(std::ceil(opt.t_max / opt.grid_step));
    const double h = opt.t_max / steps;
    int best = -1;
    double best_val = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= steps; ++i) {
        if (std::abs(i * h - exclude_at) < exclude_radius) continue;
        const double v = f(i * h);
        if (v < best_val) {
            best_val = v;
            best = i;
        }
    }
    if (best < 0) throw ValidationError("select_balanced_time: no admissible time in [0, t_max]");

    double a = std::max(0.0, (best - 1) * h), b = std::min(opt.t_max, (best + 1) * h);
    const double r = 0.5 * (std::sqrt(5.0) - 1.0);
    double x1 = b - r * (b - a), x2 = a + r * (b - a);
    double f1 = f(x1), f2 = f(x2);
    while (b - a > opt.golden_tol) {
        if (f1 <= f2) {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        }
    }
    BalancedTime out;
    out.t_star = best * h;
    out.imbalance = best_val;
    const double tm = 0.5 * (a + b);
    const double vm = f(tm);
    if (vm <= best_val && std::abs(tm - exclude_at) >= exclude_radius) {
        out.t_star = tm;
        out.imbalance = vm;
    }
    out.amplitudes = evolve_first_state(prop, out.t_star);
    if (out.imbalance > opt.max_imbalance)
        out.diagnostic = "reference Hamiltonian cannot balance from |1>: min imbalance " +
                         std::to_string(out.imbalance);
    return out;
}

}  // namespace detail

inline BalancedTime select_balanced_time(const Hamiltonian4& H0, const BalanceOptions& opt = {}) {
    return detail::balanced_search(Propagator(H0), opt, 0.0, 0.0);
}

// Best preparation time at least `separation` away from t_star.
inline BalancedTime alternate_balanced_time(const Hamiltonian4& H0, double t_star, double separation,
                                            const BalanceOptions& opt = {}) {
    return detail::balanced_search(Propagator(H0), opt, t_star, separation);
}

struct PhaseEstimateOptions {
    int starts = 8;
    std::uint64_t seed = 0xde17a;
    double fd_step = 1e-5;       // rad
    double agree_tol = 1e-3;     // rad, on the wrapped difference
    int min_agreeing = 2;
    BfgsOptions bfgs{};
};

struct PhaseEstimate {
    GaugePhases deltas;
    double residual = 0.0;
    int restarts_agreeing = 0;
    int starts = 0;
    bool low_confidence = false;
};

// e(delta) = sum_l || p_l(delta) - d_l ||^2 with p_l from the closed-form
// superposition signal of H~_f.
class PhaseObjective {
public:
    PhaseObjective(const Hamiltonian4& Htilde_f, const Vec4c& phi0, const TraceSet& traces)
        : es_(eigendecompose(Htilde_f)), phi0_(phi0), data_(traces.data), times_(traces.times()) {
        if (traces.rows() != kLevels) throw ValidationError("PhaseObjective: expected four superposition traces");
        if (std::abs(phi0.squaredNorm() - 1.0) > 1e-9) throw ValidationError("PhaseObjective: Phi0 not normalized");
    }

    double operator()(const GaugePhases& g) const {
        return (superposition_signal(es_, g, phi0_, times_) - data_).squaredNorm();
    }
    double operator()(const Eigen::VectorXd& d) const { return (*this)(GaugePhases(d(0), d(1), d(2))); }

private:
    EigenSystem es_;
    Vec4c phi0_;
    Eigen::MatrixXd data_;
    std::vector<double> times_;
};

inline double wrapped_distance(const GaugePhases& a, const GaugePhases& b) {
    double m = 0.0;
    for (int i = 0; i < 3; ++i) m = std::max(m, std::abs(wrap_pi(a[i] - b[i])));
    return m;
}

// Local quasi-Newton minimization of e(delta) from uniformly random starts.
inline PhaseEstimate estimate_deltas(const Hamiltonian4& Htilde_f, const Vec4c& phi0, const TraceSet& traces,
                                     const PhaseEstimateOptions& opt = {}) {
    if (opt.starts < 1) throw ValidationError("estimate_deltas: starts must be >= 1");
    const PhaseObjective obj(Htilde_f, phi0, traces);
    BfgsOptions bo = opt.bfgs;
    bo.fd_step = opt.fd_step;
    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> u(0.0, kTwoPi);

    std::vector<std::pair<double, GaugePhases>> ends;
    for (int s = 0; s < opt.starts; ++s) {
        Eigen::VectorXd x0(3);
        for (int i = 0; i < 3; ++i) x0(i) = u(rng);
        const BfgsResult r = bfgs_minimize_fd(obj, x0, bo);
        ends.emplace_back(r.f, GaugePhases(r.x(0), r.x(1), r.x(2)));
    }
    const auto best = std::min_element(ends.begin(), ends.end(),
                                       [](const auto& a, const auto& b) { return a.first < b.first; });
    PhaseEstimate out;
    out.deltas = best->second;
    out.residual = obj(out.deltas);
    out.starts = opt.starts;
    for (const auto& e : ends)
        if (wrapped_distance(e.second, out.deltas) < opt.agree_tol) ++out.restarts_agreeing;
    out.low_confidence = out.restarts_agreeing < opt.min_agreeing;
    return out;
}

// Runs the two-step experiment: prepare exp(-i t_star H0)|1>, switch to the
// target, measure at the plan times. Four traces.
using TwoStepExperiment = std::function<TraceSet(double t_star, const SamplingPlan& plan)>;

struct TomographyOptions {
    SamplingPlan plan{0.1, 51, 5000, 0};
    BalanceOptions balance{};
    PhaseEstimateOptions phases{};
    // A single preparation cannot tell H~_f from its energy inversion; a
    // second preparation at another balanced time decides between them.
    bool branch_check = true;
    double check_separation = 0.5;  // minimum distance of the check time from t_star
};

struct TomographyResult {
    Hamiltonian4 H;           // D^dag H~_f D on the chosen branch
    BalancedTime preparation;
    PhaseEstimate estimate;
    bool inverted = false;    // the energy-inverted image of H~_f was chosen
    BalancedTime check_preparation;
    double check_residual = 0.0;        // chosen branch on the check traces
    double check_residual_other = 0.0;  // rejected branch on the check traces
};

// Fits the gauge phases of both branches of H~_f to traces from the balanced
// preparation; the branch check then keeps the one that predicts the check
// traces better. Without the check the given branch is kept.
inline TomographyResult full_tomography(const Hamiltonian4& H0_est, const Hamiltonian4& Htilde_f,
                                        const TwoStepExperiment& experiment, const TomographyOptions& opt = {}) {
    TomographyResult out;
    out.preparation = select_balanced_time(H0_est, opt.balance);
    if (!out.preparation.balanced()) throw NumericalError("full_tomography: " + out.preparation.diagnostic);
    const TraceSet traces = experiment(out.preparation.t_star, opt.plan);
    const Vec4c phi0 = out.preparation.amplitudes;
    const PhaseEstimate direct = estimate_deltas(Htilde_f, phi0, traces, opt.phases);
    const Hamiltonian4 inv = energy_inversion(Htilde_f);

    if (opt.branch_check) {
        const PhaseEstimate flipped = estimate_deltas(inv, phi0, traces, opt.phases);
        out.check_preparation = alternate_balanced_time(H0_est, out.preparation.t_star, opt.check_separation,
                                                        opt.balance);
        SamplingPlan check_plan = opt.plan;
        check_plan.seed = detail::splitmix64(opt.plan.seed ^ 0xb7a9c4e1ULL);
        const TraceSet check = experiment(out.check_preparation.t_star, check_plan);
        const Vec4c phi1 = out.check_preparation.amplitudes;
        const double r_direct = PhaseObjective(Htilde_f, phi1, check)(direct.deltas);
        const double r_flipped = PhaseObjective(inv, phi1, check)(flipped.deltas);
        out.inverted = r_flipped < r_direct;
        out.check_residual = std::min(r_direct, r_flipped);
        out.check_residual_other = std::max(r_direct, r_flipped);
        out.estimate = out.inverted ? flipped : direct;
    } else {
        out.estimate = direct;
    }
    out.H = apply_gauge(out.inverted ? inv : Htilde_f, out.estimate.deltas);
    return out;
}

// Simulated two-step experiment on a ground-truth pair (H0, Hf).
inline TwoStepExperiment simulated_two_step(const Hamiltonian4& H0, const Hamiltonian4& Hf) {
    return [H0, Hf](double t_star, const SamplingPlan& plan) { return run_two_step(H0, t_star, Hf, plan); };
}

}  // namespace hamtomo
