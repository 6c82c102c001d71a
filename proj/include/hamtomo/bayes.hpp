// bayes.hpp: Bayesian multi-sinusoid estimation (Bretthorst-style): the
// amplitudes and noise variance of every trace are marginalized so the
// posterior depends on the frequencies alone.
//
// For F frequencies the model has M = 2F+1 basis functions
//   g_{2m}(t) = cos(w_m t),  g_{2m+1}(t) = sin(w_m t),  g_{2F}(t) = 1.
// With G = g g^T = E diag(alpha) E^T, the orthonormal basis is
// H = diag(alpha)^{-1/2} E^T g, the projections are h = H d, and
//   log10 P(w|d) = (M - N)/2 * sum_kl log10[1 - M<h^2>_kl / (N <d^2>_kl)].

#pragma once

#include "hamtomo/bfgs.hpp"
#include "hamtomo/common.hpp"
#include "hamtomo/experiment.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace hamtomo {

struct BasisSet {
    std::vector<double> frequencies;
    Eigen::MatrixXd functions;  // M x N
    Eigen::MatrixXd gram;       // M x M
    Eigen::VectorXd alphas;     // eigenvalues of gram, ascending
    Eigen::MatrixXd eigvecs;    // columns e_m

    int size() const { return static_cast<int>(functions.rows()); }
    // H_m(t_n), M x N.
    Eigen::MatrixXd orthonormal() const {
        return alphas.cwiseSqrt().cwiseInverse().asDiagonal() * eigvecs.transpose() * functions;
    }
};

inline BasisSet build_basis(std::span<const double> frequencies, std::span<const double> times) {
    const int F = static_cast<int>(frequencies.size());
    const int M = 2 * F + 1;
    const auto N = static_cast<Eigen::Index>(times.size());
    if (M > N) throw ValidationError("build_basis: need 2F+1 <= N");
    for (double w : frequencies)
        if (!(w > 0.0) || !std::isfinite(w)) throw ValidationError("build_basis: frequencies must be positive");
    BasisSet b;
    b.frequencies.assign(frequencies.begin(), frequencies.end());
    b.functions.resize(M, N);
    for (int m = 0; m < F; ++m) {
        for (Eigen::Index n = 0; n < N; ++n) {
            const double x = frequencies[static_cast<std::size_t>(m)] * times[static_cast<std::size_t>(n)];
            b.functions(2 * m, n) = std::cos(x);
            b.functions(2 * m + 1, n) = std::sin(x);
        }
    }
    b.functions.row(M - 1).setOnes();
    b.gram.noalias() = b.functions * b.functions.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(b.gram);
    if (es.info() != Eigen::Success) throw NumericalError("build_basis: eigensolver failed");
    b.alphas = es.eigenvalues();
    b.eigvecs = es.eigenvectors();
    if (!(b.alphas(0) > 1e-12 * b.alphas(M - 1))) {
        throw DegeneracyError("build_basis: Gram matrix is numerically singular (frequencies too close)");
    }
    return b;
}

namespace detail {

struct Projections {
    Eigen::MatrixXd h;    // rows traces, cols M
    Eigen::VectorXd d2;   // sum_n d^2 per trace  (= N <d^2>)
    Eigen::VectorXd h2;   // sum_m h^2 per trace  (= M <h^2>)
};

inline Projections project(const BasisSet& basis, const Eigen::MatrixXd& data) {
    Projections p;
    const Eigen::MatrixXd y = data * basis.functions.transpose();
    p.h = y * basis.eigvecs * basis.alphas.cwiseSqrt().cwiseInverse().asDiagonal();
    p.d2 = data.rowwise().squaredNorm();
    p.h2 = p.h.rowwise().squaredNorm();
    return p;
}

struct LogLikelihood {
    double value = 0.0;
    bool clamped = false;
};

// Traces with no signal at all (sum d^2 == 0) carry no information and are skipped.
inline LogLikelihood log_likelihood_from(const Projections& p, int M, int N) {
    LogLikelihood out;
    double acc = 0.0;
    for (Eigen::Index r = 0; r < p.d2.size(); ++r) {
        if (p.d2(r) <= 0.0) continue;
        double bracket = 1.0 - p.h2(r) / p.d2(r);
        if (bracket <= 1e-300) {
            bracket = 1e-300;
            out.clamped = true;
        }
        acc += std::log10(bracket);
    }
    out.value = 0.5 * (M - N) * acc;
    return out;
}

}  // namespace detail

inline double log_likelihood(std::span<const double> frequencies, const TraceSet& traces) {
    const auto times = traces.times();
    const BasisSet basis = build_basis(frequencies, times);
    return detail::log_likelihood_from(detail::project(basis, traces.data), basis.size(), traces.plan.N).value;
}

struct ModelFit {
    std::vector<double> frequencies;  // ascending
    double logP = 0.0;
    Eigen::MatrixXd a, b;    // traces x F, same normalization as SignalModel (p = c + 2 sum a cos + b sin)
    Eigen::VectorXd c;
    Eigen::MatrixXd da, db;  // one-sigma uncertainties
    Eigen::VectorXd dc;
    Eigen::VectorXd sigma2;  // <sigma^2> per trace
    int N = 0;
    double signal_length = 0.0;
    bool converged = true;
    bool overfit = false;          // some <sigma^2> came out negative and was clamped
    bool likelihood_clamped = false;

    int num_frequencies() const { return static_cast<int>(frequencies.size()); }
};

// Posterior means <x> = E diag(alpha)^{-1/2} h, noise variances
// <sigma^2> = (N<d^2> - M<h^2>) / (N - M - 1), and
// Var(x_m) = <sigma^2> sum_m' e_mm'^2 / alpha_m'. The cos/sin coefficients
// are halved to match the 2a cos + 2b sin normalization; for the 16-trace
// protocol a is then symmetrized and b antisymmetrized in (k, l).
inline ModelFit estimate_coefficients(std::span<const double> frequencies, const TraceSet& traces) {
    std::vector<double> w(frequencies.begin(), frequencies.end());
    std::sort(w.begin(), w.end());
    const auto times = traces.times();
    const BasisSet basis = build_basis(w, times);
    const detail::Projections proj = detail::project(basis, traces.data);
    const int F = static_cast<int>(w.size());
    const int M = basis.size();
    const int N = traces.plan.N;
    const int R = traces.rows();

    ModelFit fit;
    fit.frequencies = w;
    fit.N = N;
    fit.signal_length = traces.signal_length();
    const auto ll = detail::log_likelihood_from(proj, M, N);
    fit.logP = ll.value;
    fit.likelihood_clamped = ll.clamped;

    const Eigen::MatrixXd X = proj.h * basis.alphas.cwiseSqrt().cwiseInverse().asDiagonal() * basis.eigvecs.transpose();
    const Eigen::VectorXd var_unit = basis.eigvecs.cwiseAbs2() * basis.alphas.cwiseInverse();
    fit.sigma2.resize(R);
    const double dof = static_cast<double>(N - (M + 1));
    for (int r = 0; r < R; ++r) {
        double s2 = dof > 0 ? (proj.d2(r) - proj.h2(r)) / dof : 0.0;
        if (s2 < 0.0) {
            s2 = 0.0;
            fit.overfit = true;
        }
        fit.sigma2(r) = s2;
    }
    fit.a.resize(R, F);
    fit.b.resize(R, F);
    fit.da.resize(R, F);
    fit.db.resize(R, F);
    fit.c.resize(R);
    fit.dc.resize(R);
    for (int r = 0; r < R; ++r) {
        for (int m = 0; m < F; ++m) {
            fit.a(r, m) = 0.5 * X(r, 2 * m);
            fit.b(r, m) = 0.5 * X(r, 2 * m + 1);
            fit.da(r, m) = 0.5 * std::sqrt(fit.sigma2(r) * var_unit(2 * m));
            fit.db(r, m) = 0.5 * std::sqrt(fit.sigma2(r) * var_unit(2 * m + 1));
        }
        fit.c(r) = X(r, M - 1);
        fit.dc(r) = std::sqrt(fit.sigma2(r) * var_unit(M - 1));
    }
    if (R == kTraces) {
        for (int k = 0; k < kLevels; ++k) {
            for (int l = k; l < kLevels; ++l) {
                const int kl = trace_index(k, l), lk = trace_index(l, k);
                for (int m = 0; m < F; ++m) {
                    const double as = 0.5 * (fit.a(kl, m) + fit.a(lk, m));
                    const double bs = 0.5 * (fit.b(kl, m) - fit.b(lk, m));
                    const double das = 0.5 * std::hypot(fit.da(kl, m), fit.da(lk, m));
                    const double dbs = 0.5 * std::hypot(fit.db(kl, m), fit.db(lk, m));
                    fit.a(kl, m) = fit.a(lk, m) = as;
                    fit.b(kl, m) = bs;
                    fit.b(lk, m) = -bs;
                    fit.da(kl, m) = fit.da(lk, m) = das;
                    fit.db(kl, m) = fit.db(lk, m) = dbs;
                }
            }
        }
    }
    return fit;
}

// A fit carrying the exact model coefficients and zero uncertainties.
inline ModelFit exact_fit(const SignalModel& model, double signal_length = 0.0) {
    ModelFit fit;
    fit.frequencies.assign(model.frequencies.begin(), model.frequencies.end());
    fit.a = model.a;
    fit.b = model.b;
    fit.c = model.c;
    fit.da = Eigen::MatrixXd::Zero(kTraces, kTransitions);
    fit.db = fit.da;
    fit.dc = Eigen::VectorXd::Zero(kTraces);
    fit.sigma2 = Eigen::VectorXd::Zero(kTraces);
    fit.signal_length = signal_length;
    return fit;
}

// Evaluates -log10 P on the scaled variables u = w T, caching the constant data terms.
class NegLogLikelihood {
public:
    explicit NegLogLikelihood(const TraceSet& traces)
        : traces_(traces), times_(traces.times()), T_(traces.signal_length()) {}

    double scale() const { return T_; }

    // +inf when the basis is degenerate or a frequency is not positive.
    double operator()(const Eigen::VectorXd& u) const {
        std::vector<double> w(static_cast<std::size_t>(u.size()));
        for (Eigen::Index i = 0; i < u.size(); ++i) {
            w[static_cast<std::size_t>(i)] = u(i) / T_;
            if (!(w[static_cast<std::size_t>(i)] > 0.0)) return std::numeric_limits<double>::infinity();
        }
        try {
            const BasisSet basis = build_basis(w, times_);
            return -detail::log_likelihood_from(detail::project(basis, traces_.data), basis.size(), traces_.plan.N)
                        .value;
        } catch (const NumericalError&) {
            return std::numeric_limits<double>::infinity();
        }
    }

private:
    const TraceSet& traces_;
    std::vector<double> times_;
    double T_;
};

struct FrequencyOptions {
    int restarts = 5;              // extra starts jittered from the seed
    double jitter = 0.5;           // half-width of the jitter in units of pi/T
    std::uint64_t jitter_seed = 0x5eed;
    double fd_step = 1e-6;         // in units of 2 pi / T
    double grad_tol = 1e-7;        // on d logP / d w
    double rel_f_tol = 1e-12;
    double max_step = kPi;         // per BFGS step, in units of 1/T
    int max_iterations = 200;
};

namespace detail {

inline BfgsResult maximize_from(const NegLogLikelihood& nll, const std::vector<double>& start,
                                const FrequencyOptions& opt) {
    const double T = nll.scale();
    Eigen::VectorXd u(static_cast<Eigen::Index>(start.size()));
    for (std::size_t i = 0; i < start.size(); ++i) u(static_cast<Eigen::Index>(i)) = start[i] * T;
    BfgsOptions bo;
    bo.max_iterations = opt.max_iterations;
    bo.fd_step = opt.fd_step * kTwoPi;
    bo.grad_tol = opt.grad_tol / T;
    bo.rel_f_tol = opt.rel_f_tol;
    bo.max_step = opt.max_step;
    return bfgs_minimize_fd(nll, u, bo);
}

}  // namespace detail

// Local maximization of log P from the seed plus jittered restarts; the best
// end point wins. `converged` reports whether the winning run met a
// convergence criterion.
inline ModelFit optimize_frequencies(std::span<const double> seed, const TraceSet& traces,
                                     const FrequencyOptions& opt = {}) {
    if (seed.empty()) throw ValidationError("optimize_frequencies: empty seed");
    const NegLogLikelihood nll(traces);
    const double T = nll.scale();
    std::vector<double> start(seed.begin(), seed.end());
    std::sort(start.begin(), start.end());

    std::mt19937_64 rng(opt.jitter_seed);
    std::uniform_real_distribution<double> jit(-opt.jitter * kPi / T, opt.jitter * kPi / T);
    std::optional<BfgsResult> best;
    for (int run = 0; run <= opt.restarts; ++run) {
        std::vector<double> s = start;
        if (run > 0)
            for (double& w : s) w = std::max(w + jit(rng), 1e-3 / T);
        BfgsResult r = detail::maximize_from(nll, s, opt);
        if (!std::isfinite(r.f)) continue;
        if (!best || r.f < best->f) best = std::move(r);
    }
    if (!best) throw NumericalError("optimize_frequencies: no start produced a finite likelihood");
    std::vector<double> w(static_cast<std::size_t>(best->x.size()));
    for (Eigen::Index i = 0; i < best->x.size(); ++i) w[static_cast<std::size_t>(i)] = best->x(i) / T;
    ModelFit fit = estimate_coefficients(w, traces);
    fit.converged = best->converged && !best->line_search_failed;
    return fit;
}

struct DegenerateOptions {
    int grid = 21;               // points per axis of the I_m x I_m scan
    double half_width = 10.0;    // I_m = [w_m - half_width/T, w_m + half_width/T]
    int max_frequencies = kTransitions;
    // Also seed an added frequency at |w_i +- w_j| of the incumbent (a weak
    // transition hidden in a sidelobe still obeys the level sum rules). Seeds
    // within pi/T of an incumbent are skipped; the best few by log P are optimized.
    bool sum_rule_seeds = true;
    int sum_rule_optimized = 3;
    bool swap_weakest = true;
    FrequencyOptions optimizer{};
};

struct DegenerateCandidate {
    int split_index = -1;  // which frequency of the incumbent was split; -1 for a sum-rule seed
    ModelFit fit;
};

struct RefinementResult {
    ModelFit best;
    std::vector<DegenerateCandidate> candidates;  // every candidate examined, all rounds
    bool swapped = false;                         // the weakest-line swap pass won
};

namespace detail {

// One round: every split of the incumbent plus the sum-rule seeds, each
// optimized. Returns the best (F+1)-model found, if any.
inline std::optional<DegenerateCandidate> split_round(const std::vector<double>& inc, const TraceSet& traces,
                                                      const NegLogLikelihood& nll, const DegenerateOptions& opt,
                                                      std::vector<DegenerateCandidate>& log) {
    const double T = nll.scale();
    const int F = static_cast<int>(inc.size());
    std::optional<DegenerateCandidate> winner;
    auto offer = [&](DegenerateCandidate cand) {
        if (!winner || cand.fit.logP > winner->fit.logP) winner = cand;
        log.push_back(std::move(cand));
    };
    for (int m = 0; m < F; ++m) {
        const double lo = inc[static_cast<std::size_t>(m)] - opt.half_width / T;
        const double step = 2.0 * opt.half_width / T / (opt.grid - 1);
        double best_val = std::numeric_limits<double>::infinity();
        std::vector<double> best_w;
        for (int i = 0; i < opt.grid; ++i) {
            for (int j = i + 1; j < opt.grid; ++j) {
                std::vector<double> w;
                for (int q = 0; q < F; ++q)
                    if (q != m) w.push_back(inc[static_cast<std::size_t>(q)]);
                w.push_back(lo + i * step);
                w.push_back(lo + j * step);
                Eigen::VectorXd u(static_cast<Eigen::Index>(w.size()));
                for (std::size_t q = 0; q < w.size(); ++q) u(static_cast<Eigen::Index>(q)) = w[q] * T;
                const double val = nll(u);
                if (val < best_val) {
                    best_val = val;
                    best_w = w;
                }
            }
        }
        if (best_w.empty()) continue;
        offer({m, optimize_frequencies(best_w, traces, opt.optimizer)});
    }
    if (opt.sum_rule_seeds) {
        std::vector<std::pair<double, double>> seeds;  // (nll, added frequency)
        auto consider = [&](double w) {
            if (!(w > 0.0)) return;
            for (double v : inc)
                if (std::abs(v - w) < kPi / T) return;
            for (const auto& sd : seeds)
                if (std::abs(sd.second - w) < kPi / T) return;
            Eigen::VectorXd u(F + 1);
            for (int q = 0; q < F; ++q) u(q) = inc[static_cast<std::size_t>(q)] * T;
            u(F) = w * T;
            seeds.emplace_back(nll(u), w);
        };
        for (int i = 0; i < F; ++i)
            for (int j = i + 1; j < F; ++j) {
                consider(inc[static_cast<std::size_t>(i)] + inc[static_cast<std::size_t>(j)]);
                consider(inc[static_cast<std::size_t>(j)] - inc[static_cast<std::size_t>(i)]);
            }
        std::sort(seeds.begin(), seeds.end());
        const auto keep = std::min<std::size_t>(seeds.size(), static_cast<std::size_t>(std::max(opt.sum_rule_optimized, 0)));
        for (std::size_t q = 0; q < keep; ++q) {
            if (!std::isfinite(seeds[q].first)) break;
            std::vector<double> w = inc;
            w.push_back(seeds[q].second);
            offer({-1, optimize_frequencies(w, traces, opt.optimizer)});
        }
    }
    return winner;
}

// Index of the line with the smallest total power over all traces.
inline int weakest_line(const ModelFit& f) {
    const Eigen::VectorXd power = (f.a.array().square() + f.b.array().square()).colwise().sum().transpose();
    Eigen::Index idx = 0;
    power.minCoeff(&idx);
    return static_cast<int>(idx);
}

}  // namespace detail

// Splits each frequency of an F < max model into a pair scanned on a coarse
// grid over I_m x I_m (w < w' only; the surface is symmetric about w = w'),
// refines the best grid point by optimize_frequencies, adds the sum-rule
// candidates, and accepts the best (F+1)-model if it beats the incumbent.
// Repeats until F reaches the maximum or no split wins.
//
// When splits were added, a spurious periodogram peak can still hold one of
// the slots while a true doublet stays merged. A final pass drops the weakest
// line and runs one more round from the remaining F-1 lines.
inline RefinementResult refine_degenerate_detailed(const ModelFit& start, const TraceSet& traces,
                                                   const DegenerateOptions& opt = {}) {
    RefinementResult out{start, {}};
    const NegLogLikelihood nll(traces);
    while (out.best.num_frequencies() < opt.max_frequencies) {
        auto winner = detail::split_round(out.best.frequencies, traces, nll, opt, out.candidates);
        if (!winner || !(winner->fit.logP > out.best.logP)) break;
        out.best = winner->fit;
    }
    if (opt.swap_weakest && out.best.num_frequencies() > start.num_frequencies() && out.best.num_frequencies() > 2) {
        std::vector<double> reduced = out.best.frequencies;
        reduced.erase(reduced.begin() + detail::weakest_line(out.best));
        const ModelFit base = optimize_frequencies(reduced, traces, opt.optimizer);
        auto winner = detail::split_round(base.frequencies, traces, nll, opt, out.candidates);
        if (winner && winner->fit.logP > out.best.logP) {
            out.best = winner->fit;
            out.swapped = true;
        }
    }
    return out;
}

inline ModelFit refine_degenerate(const ModelFit& start, const TraceSet& traces, const DegenerateOptions& opt = {}) {
    return refine_degenerate_detailed(start, traces, opt).best;
}

}  // namespace hamtomo
