// experiment.hpp: projection-noise Monte Carlo for the fixed-basis and the
// two-step (superposition) protocols, plus the closed-form expansion of the
// superposition-state probabilities.
//
// Random numbers: every (k, n) cell seeds its own std::mt19937_64 from
// splitmix64(seed, k, n); a cell's four-outcome multinomial is drawn as
// conditional binomials with std::binomial_distribution. Runs are
// bit-reproducible within one standard library implementation.

#pragma once

#include "hamtomo/common.hpp"
#include "hamtomo/core_model.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace hamtomo {

inline constexpr std::string_view kRngAlgorithm =
    "mt19937_64 per (k,n) cell seeded by splitmix64(seed,k,n); multinomial via conditional "
    "binomials";

struct SamplingPlan {
    double dt = 0.1;
    int N = 1025;
    int Ne = 250;
    std::uint64_t seed = 0;

    double signal_length() const { return (N - 1) * dt; }
    double time(int n) const { return n * dt; }

    std::vector<double> times() const {
        std::vector<double> t(static_cast<std::size_t>(N));
        for (int n = 0; n < N; ++n) t[static_cast<std::size_t>(n)] = time(n);
        return t;
    }

    void validate() const {
        if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("SamplingPlan: dt must be > 0");
        if (N < 2) throw ValidationError("SamplingPlan: N must be >= 2");
        if (Ne < 1) throw ValidationError("SamplingPlan: Ne must be >= 1");
    }
};

enum class Protocol { FixedBasis, Superposition };

inline std::string_view to_string(Protocol p) {
    return p == Protocol::FixedBasis ? "fixed-basis" : "superposition";
}

struct TraceSet {
    SamplingPlan plan;
    Eigen::MatrixXd data;  // rows: traces (16 for fixed-basis, 4 for superposition); cols: times
    Protocol protocol = Protocol::FixedBasis;

    std::vector<double> times() const { return plan.times(); }
    double signal_length() const { return plan.signal_length(); }
    int rows() const { return static_cast<int>(data.rows()); }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t cell_seed(std::uint64_t seed, std::uint64_t k, std::uint64_t n) {
    return splitmix64(splitmix64(splitmix64(seed) ^ k) ^ n);
}

// Checks the 1e-9 tolerance, clamps, draws counts / Ne.
inline Vec4d sample_cell(const Vec4d& p_raw, int Ne, std::uint64_t seed) {
    Vec4d p;
    for (int l = 0; l < kLevels; ++l) {
        if (p_raw(l) < -1e-9 || p_raw(l) > 1.0 + 1e-9 || !std::isfinite(p_raw(l))) {
            throw NumericalError("sampling: outcome probability outside [0,1] beyond round-off");
        }
        p(l) = std::clamp(p_raw(l), 0.0, 1.0);
    }
    std::mt19937_64 rng(seed);
    Vec4d out;
    int remaining = Ne;
    double mass = p.sum();
    for (int l = 0; l < kLevels - 1; ++l) {
        int count = 0;
        if (remaining > 0 && mass > 0.0) {
            const double q = std::clamp(p(l) / mass, 0.0, 1.0);
            std::binomial_distribution<int> bin(remaining, q);
            count = bin(rng);
        }
        out(l) = count;
        remaining -= count;
        mass -= p(l);
    }
    out(kLevels - 1) = remaining;
    return out / static_cast<double>(Ne);
}

}  // namespace detail

// Direct unitary propagation exp(-iHt) from Eigen's Hermitian solver; this
// path is independent of the phase-fixed signal model.
class Propagator {
public:
    explicit Propagator(const Hamiltonian4& H) {
        Eigen::SelfAdjointEigenSolver<Mat4c> es(H.matrix());
        if (es.info() != Eigen::Success) throw NumericalError("Propagator: eigensolver failed");
        lambda_ = es.eigenvalues();
        V_ = es.eigenvectors();
    }

    Mat4c unitary(double t) const {
        Vec4c ph;
        for (int v = 0; v < kLevels; ++v) ph(v) = std::polar(1.0, -lambda_(v) * t);
        return V_ * ph.asDiagonal() * V_.adjoint();
    }

    Vec4c evolve(const Vec4c& psi, double t) const { return unitary(t) * psi; }

private:
    Vec4d lambda_;
    Mat4c V_;
};

// p_kl(t) = |<l|exp(-iHt)|k>|^2 by direct propagation; rows k*4+l.
inline Eigen::MatrixXd propagate_fixed_basis(const Hamiltonian4& H, std::span<const double> times) {
    const Propagator prop(H);
    Eigen::MatrixXd out(kTraces, static_cast<Eigen::Index>(times.size()));
    for (std::size_t n = 0; n < times.size(); ++n) {
        const Mat4c U = prop.unitary(times[n]);
        for (int k = 0; k < kLevels; ++k)
            for (int l = 0; l < kLevels; ++l)
                out(trace_index(k, l), static_cast<Eigen::Index>(n)) = std::norm(U(l, k));
    }
    return out;
}

inline TraceSet run_fixed_basis(const Hamiltonian4& H, const SamplingPlan& plan) {
    plan.validate();
    const auto times = plan.times();
    const Eigen::MatrixXd p = propagate_fixed_basis(H, times);
    TraceSet ts{plan, Eigen::MatrixXd(kTraces, plan.N), Protocol::FixedBasis};
    for (int k = 0; k < kLevels; ++k) {
        for (int n = 0; n < plan.N; ++n) {
            const Vec4d pk = p.block<kLevels, 1>(trace_index(k, 0), n);
            const Vec4d d = detail::sample_cell(pk, plan.Ne, detail::cell_seed(plan.seed, k, n));
            ts.data.block<kLevels, 1>(trace_index(k, 0), n) = d;
        }
    }
    return ts;
}

// Prepare exp(-i t_star H0)|1>, switch to Hf, measure at plan times. Four traces.
inline TraceSet run_two_step(const Hamiltonian4& H0, double t_star, const Hamiltonian4& Hf,
                             const SamplingPlan& plan) {
    plan.validate();
    if (!(t_star >= 0.0)) throw ValidationError("run_two_step: t_star must be >= 0");
    Vec4c e1 = Vec4c::Zero();
    e1(0) = 1.0;
    const Vec4c phi = t_star == 0.0 ? e1 : Propagator(H0).evolve(e1, t_star);
    const Propagator prop(Hf);
    TraceSet ts{plan, Eigen::MatrixXd(kLevels, plan.N), Protocol::Superposition};
    for (int n = 0; n < plan.N; ++n) {
        const Vec4c psi = prop.unitary(plan.time(n)) * phi;
        const Vec4d p = psi.cwiseAbs2();
        ts.data.col(n) = detail::sample_cell(p, plan.Ne, detail::cell_seed(plan.seed, 0, n));
    }
    return ts;
}

// Closed-form expansion of p_l(t) = |<l| exp(-i H~ t) D |Phi>|^2 in the
// eigendata of H~: a constant part plus one cosine per transition w_uv with
// phase offsets built from psi_m = arg(alpha_m) + delta_1m and the
// eigenvector phases theta_{ml;u}. Rows are outcomes l.
inline Eigen::MatrixXd superposition_signal(const EigenSystem& es, const GaugePhases& g, const Vec4c& alphas,
                                            std::span<const double> times) {
    if (std::abs(alphas.squaredNorm() - 1.0) > 1e-9) {
        throw ValidationError("superposition_signal: amplitudes are not normalized");
    }
    Vec4d amp, psi;
    for (int m = 0; m < kLevels; ++m) {
        amp(m) = std::abs(alphas(m));
        psi(m) = std::arg(alphas(m)) + (m == 0 ? 0.0 : g[m - 1]);
    }
    // s(l, m, u) = r_lu r_mu; theta(l, m, u) = phi_lu - phi_mu
    auto s = [&](int l, int m, int u) { return es.r(l, u) * es.r(m, u); };
    auto theta = [&](int l, int m, int u) { return es.phi(l, u) - es.phi(m, u); };

    Eigen::MatrixXd out(kLevels, static_cast<Eigen::Index>(times.size()));
    for (int l = 0; l < kLevels; ++l) {
        double constant = 0.0;
        for (int u = 0; u < kLevels; ++u) {
            for (int m = 0; m < kLevels; ++m) constant += amp(m) * amp(m) * s(l, m, u) * s(l, m, u);
            for (int m = 0; m < kLevels; ++m)
                for (int n = 0; n < m; ++n)
                    constant += 2.0 * amp(m) * amp(n) * s(l, m, u) * s(l, n, u) *
                                std::cos(psi(m) - psi(n) + theta(l, m, u) - theta(l, n, u));
        }
        // Each transition u<v contributes K cos(w t) + L sin(w t).
        std::array<double, kTransitions> K{}, L{}, w{};
        for (int i = 0; i < kTransitions; ++i) {
            const auto [u, v] = kAllPairs[i];
            w[i] = es.eigenvalues(v) - es.eigenvalues(u);
            for (int m = 0; m < kLevels; ++m) {
                for (int n = 0; n < kLevels; ++n) {
                    const double weight = 2.0 * amp(m) * amp(n) * s(l, m, v) * s(l, n, u);
                    const double offset = (psi(m) - psi(n)) + theta(l, m, v) - theta(l, n, u);
                    K[i] += weight * std::cos(offset);
                    L[i] += weight * std::sin(offset);
                }
            }
        }
        for (std::size_t t = 0; t < times.size(); ++t) {
            double p = constant;
            for (int i = 0; i < kTransitions; ++i) {
                p += K[i] * std::cos(w[i] * times[t]) + L[i] * std::sin(w[i] * times[t]);
            }
            out(l, static_cast<Eigen::Index>(t)) = p;
        }
    }
    return out;
}

inline Eigen::MatrixXd superposition_signal(const Hamiltonian4& Htilde, const GaugePhases& g,
                                            const Vec4c& alphas, std::span<const double> times) {
    return superposition_signal(eigendecompose(Htilde), g, alphas, times);
}

}  // namespace hamtomo
