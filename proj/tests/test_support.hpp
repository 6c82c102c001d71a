// Shared helpers for the unit and acceptance suites. The oracles here use
// Eigen's Pade matrix exponential so they stay independent of the
// eigendecomposition paths used by the library.
#pragma once

#include "hamtomo/core_model.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <random>
#include <span>

namespace hamtomo::testing {

// Hermitian with i.i.d. Gaussian entries (GUE-like), traceless.
inline Hamiltonian4 random_hermitian(std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Mat4c m;
    for (int r = 0; r < kLevels; ++r)
        for (int c = 0; c < kLevels; ++c) m(r, c) = cplx(g(rng), g(rng));
    Mat4c h = 0.5 * (m + m.adjoint());
    h -= (h.trace() / 4.0) * Mat4c::Identity();
    return Hamiltonian4::hermitized(h);
}

inline GaugePhases random_gauge(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, kTwoPi);
    return {u(rng), u(rng), u(rng)};
}

inline Vec4c random_state(std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    Vec4c a;
    for (int i = 0; i < kLevels; ++i) a(i) = cplx(g(rng), g(rng));
    return a.normalized();
}

inline Mat4c expm_propagator(const Mat4c& H, double t) {
    const Mat4c A = cplx(0.0, -t) * H;
    return A.exp();
}

// |<l|exp(-iHt)|k>|^2 via matrix exponential; rows k*4+l.
inline Eigen::MatrixXd expm_fixed_basis(const Hamiltonian4& H, std::span<const double> times) {
    Eigen::MatrixXd out(kTraces, static_cast<Eigen::Index>(times.size()));
    for (std::size_t n = 0; n < times.size(); ++n) {
        const Mat4c U = expm_propagator(H.matrix(), times[n]);
        for (int k = 0; k < kLevels; ++k)
            for (int l = 0; l < kLevels; ++l)
                out(trace_index(k, l), static_cast<Eigen::Index>(n)) = std::norm(U(l, k));
    }
    return out;
}

// |<l| D^dag exp(-i H~ t) D |Phi>|^2 via matrix exponential.
inline Eigen::MatrixXd expm_superposition(const Hamiltonian4& Ht, const GaugePhases& g, const Vec4c& phi,
                                          std::span<const double> times) {
    const Mat4c D = g.matrix();
    Eigen::MatrixXd out(kLevels, static_cast<Eigen::Index>(times.size()));
    for (std::size_t n = 0; n < times.size(); ++n) {
        const Vec4c psi = D.adjoint() * expm_propagator(Ht.matrix(), times[n]) * D * phi;
        out.col(static_cast<Eigen::Index>(n)) = psi.cwiseAbs2();
    }
    return out;
}

inline std::vector<double> uniform_times(int N, double dt) {
    std::vector<double> t(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) t[static_cast<std::size_t>(n)] = n * dt;
    return t;
}

inline Hamiltonian4 diag_hamiltonian(double a, double b, double c, double d) {
    Mat4c m = Mat4c::Zero();
    m(0, 0) = a;
    m(1, 1) = b;
    m(2, 2) = c;
    m(3, 3) = d;
    return Hamiltonian4(m);
}

// sigma_x (x) I: couples |1>-|3> and |2>-|4>.
inline Hamiltonian4 sigma_x_identity() {
    Mat4c m = Mat4c::Zero();
    m(0, 2) = m(2, 0) = m(1, 3) = m(3, 1) = 1.0;
    return Hamiltonian4(m);
}

}  // namespace hamtomo::testing
