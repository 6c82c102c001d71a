// common.hpp: shared types, index helpers and error classes for the
// four-level Hamiltonian tomography toolkit.

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>

namespace hamtomo {

using cplx = std::complex<double>;
using Mat4c = Eigen::Matrix4cd;
using Mat4d = Eigen::Matrix4d;
using Vec4c = Eigen::Vector4cd;
using Vec4d = Eigen::Vector4d;

inline constexpr int kLevels = 4;
inline constexpr int kTransitions = 6;
inline constexpr int kTraces = 16;
inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Trace (k, l) is stored at row k*4 + l, both 0-based.
constexpr int trace_index(int k, int l) noexcept { return k * kLevels + l; }
constexpr int trace_row(int idx) noexcept { return idx / kLevels; }
constexpr int trace_col(int idx) noexcept { return idx % kLevels; }

// Input rejected before any numerics ran (CLI exit code 1).
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A numerical stage could not produce a trustworthy result (CLI exit code 2).
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Two transition frequencies coincide, so the generic signal model does not apply.
struct DegeneracyError : NumericalError {
    using NumericalError::NumericalError;
};

// Wrap to (-pi, pi].
inline double wrap_pi(double x) {
    double y = std::remainder(x, kTwoPi);
    if (y <= -kPi) y += kTwoPi;
    return y;
}

// Wrap to [0, 2pi).
inline double wrap_2pi(double x) {
    double y = std::fmod(x, kTwoPi);
    if (y < 0) y += kTwoPi;
    if (y >= kTwoPi) y -= kTwoPi;
    return y;
}

}  // namespace hamtomo
