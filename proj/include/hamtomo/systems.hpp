// systems.hpp: random test Hamiltonians with a prescribed transition band.

#pragma once

#include "hamtomo/core_model.hpp"

#include <Eigen/QR>

#include <cstdint>
#include <random>

namespace hamtomo {

struct SystemOptions {
    double band_low = 0.3;
    double band_high = 7.0;
    double min_separation = 1e-3;   // between any two of the six frequencies
    bool near_degenerate = false;   // require some pair closer than near_threshold
    double near_threshold = 0.01;
    double near_floor = 1e-6;
    int max_draws = 100000;
};

// Haar unitary: QR of a complex Ginibre matrix with the phases of diag(R) removed.
inline Mat4c haar_unitary(std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    Mat4c z;
    for (int r = 0; r < kLevels; ++r)
        for (int c = 0; c < kLevels; ++c) z(r, c) = cplx(g(rng), g(rng)) / std::sqrt(2.0);
    Eigen::HouseholderQR<Mat4c> qr(z);
    Mat4c q = qr.householderQ();
    const Mat4c R = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int c = 0; c < kLevels; ++c) {
        const double mag = std::abs(R(c, c));
        if (mag > 0.0) q.col(c) *= R(c, c) / mag;
    }
    return q;
}

inline std::array<double, kTransitions> transition_frequencies(const Vec4d& lambda) {
    std::array<double, kTransitions> w{};
    for (int i = 0; i < kTransitions; ++i) w[i] = lambda(kAllPairs[i].second) - lambda(kAllPairs[i].first);
    std::sort(w.begin(), w.end());
    return w;
}

inline double min_frequency_separation(const std::array<double, kTransitions>& sorted_w) {
    double m = std::numeric_limits<double>::infinity();
    for (int i = 0; i + 1 < kTransitions; ++i) m = std::min(m, sorted_w[i + 1] - sorted_w[i]);
    return m;
}

// Traceless Hamiltonian with the given eigenvalues in a Haar-random basis.
inline Hamiltonian4 hamiltonian_with_spectrum(const Vec4d& lambda, std::mt19937_64& rng) {
    const Mat4c U = haar_unitary(rng);
    const Vec4d centered = lambda.array() - lambda.mean();
    return Hamiltonian4::hermitized(U * centered.cast<cplx>().asDiagonal() * U.adjoint());
}

inline Hamiltonian4 generate_system(std::uint64_t seed, const SystemOptions& opt = {}) {
    if (!(opt.band_low > 0.0 && opt.band_high > opt.band_low)) {
        throw ValidationError("generate_system: invalid frequency band");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, opt.band_high);
    for (int draw = 0; draw < opt.max_draws; ++draw) {
        Vec4d lambda(u(rng), u(rng), u(rng), u(rng));
        std::sort(lambda.data(), lambda.data() + kLevels);
        const auto w = transition_frequencies(lambda);
        if (w.front() < opt.band_low || w.back() > opt.band_high) continue;
        const double sep = min_frequency_separation(w);
        if (opt.near_degenerate) {
            if (sep >= opt.near_threshold || sep < opt.near_floor) continue;
        } else if (sep < opt.min_separation) {
            continue;
        }
        return hamiltonian_with_spectrum(lambda, rng);
    }
    throw ValidationError("generate_system: rejection sampling exceeded max_draws");
}

}  // namespace hamtomo
