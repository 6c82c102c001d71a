// core_model.hpp: exact four-level model: Hermitian eigensystem, the
// multi-sinusoid signal model of the 16 fixed-basis traces, assembly of the
// gauge-fixed Hamiltonian and the diagonal U(1) gauge algebra.
//
// Phase conventions used throughout the library:
//   z_{kl;v}   = <l|xi_v><xi_v|k> = s_{kl;v} exp(i theta_{kl;v}),
//   s_{kl;v}   = r_{kv} r_{lv},   theta_{kl;v} = phi_{lv} - phi_{kv},
//   Delta_{kl;uv} = theta_{kl;v} - theta_{kl;u},
//   p_kl(t)    = c_kl + 2 sum_{u<v} [a_{kl;uv} cos(w_uv t) + b_{kl;uv} sin(w_uv t)],
//   a + i b    = z_{kl;v} conj(z_{kl;u}) = s_u s_v exp(i Delta_{kl;uv}).
// With these signs the model reproduces |<l|exp(-iHt)|k>|^2 exactly.

#pragma once

#include "hamtomo/common.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <span>
#include <sstream>
#include <utility>
#include <vector>

namespace hamtomo {

// 4x4 complex Hermitian generator (hbar = 1).
class Hamiltonian4 {
public:
    Hamiltonian4() : m_(Mat4c::Zero()) {}

    // Rejects matrices whose Hermitian defect exceeds `tol` (absolute, entrywise).
    explicit Hamiltonian4(const Mat4c& m, double tol = 1e-12) : m_(m) {
        if (!m.allFinite()) throw ValidationError("Hamiltonian4: non-finite entry");
        const double defect = (m - m.adjoint()).cwiseAbs().maxCoeff();
        if (defect > tol) {
            std::ostringstream os;
            os << "Hamiltonian4: matrix is not Hermitian (max |H - H^dag| = " << defect << ")";
            throw ValidationError(os.str());
        }
        m_ = 0.5 * (m + m.adjoint());
    }

    // Averages with the adjoint; for assembled estimates that are Hermitian only approximately.
    static Hamiltonian4 hermitized(const Mat4c& m) {
        Hamiltonian4 h;
        h.m_ = 0.5 * (m + m.adjoint());
        return h;
    }

    const Mat4c& matrix() const noexcept { return m_; }
    cplx operator()(int row, int col) const { return m_(row, col); }

    double trace() const { return m_.trace().real(); }

    Hamiltonian4 traceless() const {
        Hamiltonian4 h;
        h.m_ = m_ - (trace() / kLevels) * Mat4c::Identity();
        return h;
    }

    // Largest singular value.
    double op_norm() const {
        Eigen::SelfAdjointEigenSolver<Mat4c> es(m_, Eigen::EigenvaluesOnly);
        return es.eigenvalues().cwiseAbs().maxCoeff();
    }

private:
    Mat4c m_;
};

struct EigenSystem {
    Vec4d eigenvalues;  // ascending
    Mat4c vectors;      // column v is |xi_v>
    Mat4d r;            // r(k, v) = |<k|xi_v>|
    Mat4d phi;          // phi(k, v) = arg <k|xi_v>, in (-pi, pi]
};

// Largest-magnitude component of each eigenvector made real positive; ties
// (within 1e-12) go to the lowest index.
inline EigenSystem eigendecompose(const Hamiltonian4& H) {
    Eigen::SelfAdjointEigenSolver<Mat4c> es(H.matrix());
    if (es.info() != Eigen::Success) throw NumericalError("eigendecompose: solver failed");
    EigenSystem out;
    out.eigenvalues = es.eigenvalues();
    out.vectors = es.eigenvectors();
    for (int v = 0; v < kLevels; ++v) {
        int best = 0;
        double best_mag = std::abs(out.vectors(0, v));
        for (int k = 1; k < kLevels; ++k) {
            const double mag = std::abs(out.vectors(k, v));
            if (mag > best_mag + 1e-12) {
                best = k;
                best_mag = mag;
            }
        }
        const cplx rot = std::conj(out.vectors(best, v)) / best_mag;
        out.vectors.col(v) *= rot;
        out.vectors(best, v) = cplx(std::abs(out.vectors(best, v)), 0.0);
        out.vectors.col(v).normalize();
    }
    for (int k = 0; k < kLevels; ++k) {
        for (int v = 0; v < kLevels; ++v) {
            out.r(k, v) = std::abs(out.vectors(k, v));
            out.phi(k, v) = std::arg(out.vectors(k, v));
        }
    }
    return out;
}

// z_{kl;v} = <l|xi_v><xi_v|k> for trace index kl.
inline cplx transition_weight(const EigenSystem& es, int k, int l, int v) {
    return es.vectors(l, v) * std::conj(es.vectors(k, v));
}

using TransitionPair = std::pair<int, int>;  // (u, v), 0-based levels, u < v

// Level pairs in the canonical order (1,2),(1,3),(1,4),(2,3),(2,4),(3,4).
inline constexpr std::array<TransitionPair, kTransitions> kAllPairs{
    TransitionPair{0, 1}, TransitionPair{0, 2}, TransitionPair{0, 3},
    TransitionPair{1, 2}, TransitionPair{1, 3}, TransitionPair{2, 3}};

struct SignalModel {
    std::array<double, kTransitions> frequencies{};           // ascending
    std::array<TransitionPair, kTransitions> transitions{};   // frequency index -> level pair
    Eigen::Matrix<double, kTraces, kTransitions> a;
    Eigen::Matrix<double, kTraces, kTransitions> b;
    Eigen::Matrix<double, kTraces, 1> c;
};

// Builds the model from an eigensystem without the distinct-frequency check.
inline SignalModel signal_model_from_eigensystem(const EigenSystem& es) {
    SignalModel m;
    std::array<std::pair<double, TransitionPair>, kTransitions> freq;
    for (int i = 0; i < kTransitions; ++i) {
        const auto [u, v] = kAllPairs[i];
        freq[i] = {es.eigenvalues(v) - es.eigenvalues(u), kAllPairs[i]};
    }
    std::stable_sort(freq.begin(), freq.end(),
                     [](const auto& x, const auto& y) { return x.first < y.first; });
    for (int i = 0; i < kTransitions; ++i) {
        m.frequencies[i] = freq[i].first;
        m.transitions[i] = freq[i].second;
    }
    for (int k = 0; k < kLevels; ++k) {
        for (int l = 0; l < kLevels; ++l) {
            const int idx = trace_index(k, l);
            double c = 0.0;
            for (int v = 0; v < kLevels; ++v) c += std::norm(transition_weight(es, k, l, v));
            m.c(idx) = c;
            for (int i = 0; i < kTransitions; ++i) {
                const auto [u, v] = m.transitions[i];
                const cplx w = transition_weight(es, k, l, v) * std::conj(transition_weight(es, k, l, u));
                m.a(idx, i) = w.real();
                m.b(idx, i) = w.imag();
            }
        }
    }
    return m;
}

// Throws DegeneracyError when two transition frequencies agree within
// rel_tol * (largest frequency), or a frequency is not positive.
inline SignalModel signal_model_of(const Hamiltonian4& H, double rel_tol = 1e-9) {
    const EigenSystem es = eigendecompose(H);
    SignalModel m = signal_model_from_eigensystem(es);
    const double scale = std::max(m.frequencies.back(), 1e-300);
    if (m.frequencies.front() <= rel_tol * scale) {
        throw DegeneracyError("signal_model_of: degenerate eigenvalues (zero transition frequency)");
    }
    for (int i = 0; i + 1 < kTransitions; ++i) {
        if (m.frequencies[i + 1] - m.frequencies[i] <= rel_tol * scale) {
            const auto [u1, v1] = m.transitions[i];
            const auto [u2, v2] = m.transitions[i + 1];
            std::ostringstream os;
            os << "signal_model_of: transition frequencies w" << u1 + 1 << v1 + 1 << " and w" << u2 + 1
               << v2 + 1 << " coincide (" << m.frequencies[i] << ")";
            throw DegeneracyError(os.str());
        }
    }
    return m;
}

// Rows are traces (k*4+l), columns are times. Values are not clamped.
inline Eigen::MatrixXd evaluate_traces(const SignalModel& model, std::span<const double> times) {
    Eigen::MatrixXd out(kTraces, static_cast<Eigen::Index>(times.size()));
    for (std::size_t n = 0; n < times.size(); ++n) {
        Eigen::Matrix<double, kTransitions, 1> cw, sw;
        for (int i = 0; i < kTransitions; ++i) {
            cw(i) = std::cos(model.frequencies[i] * times[n]);
            sw(i) = std::sin(model.frequencies[i] * times[n]);
        }
        out.col(static_cast<Eigen::Index>(n)) = model.c + 2.0 * (model.a * cw + model.b * sw);
    }
    return out;
}

// Traceless eigenvalues from the transitions out of level 1 (w11 = 0).
inline Vec4d lambda_tilde_from(double w12, double w13, double w14) {
    const double shift = (w12 + w13 + w14) / 4.0;
    return Vec4d(-shift, w12 - shift, w13 - shift, w14 - shift);
}

// <l|H~|k> = sum_v lambda~_v s_{kl;v} exp(i Delta_{kl;1v}); Delta1[kl](0) is ignored (= 0).
inline Hamiltonian4 assemble_Htilde(const Vec4d& lambda_tilde,
                                    const std::array<Vec4d, kTraces>& s,
                                    const std::array<Vec4d, kTraces>& Delta1) {
    Mat4c m = Mat4c::Zero();
    for (int k = 0; k < kLevels; ++k) {
        for (int l = 0; l < kLevels; ++l) {
            const int idx = trace_index(k, l);
            cplx acc = lambda_tilde(0) * s[idx](0);
            for (int v = 1; v < kLevels; ++v) {
                acc += lambda_tilde(v) * s[idx](v) * std::polar(1.0, Delta1[idx](v));
            }
            m(l, k) = acc;
        }
    }
    return Hamiltonian4::hermitized(m);
}

// The three basis-state phases delta_12, delta_13, delta_14, kept in [0, 2pi).
class GaugePhases {
public:
    GaugePhases() = default;
    GaugePhases(double d12, double d13, double d14) : d_{wrap_2pi(d12), wrap_2pi(d13), wrap_2pi(d14)} {}

    double delta12() const noexcept { return d_[0]; }
    double delta13() const noexcept { return d_[1]; }
    double delta14() const noexcept { return d_[2]; }
    double operator[](int i) const { return d_[static_cast<std::size_t>(i)]; }

    // D = diag(1, e^{i d12}, e^{i d13}, e^{i d14}).
    Vec4c diagonal() const {
        return Vec4c(1.0, std::polar(1.0, d_[0]), std::polar(1.0, d_[1]), std::polar(1.0, d_[2]));
    }
    Mat4c matrix() const { return diagonal().asDiagonal(); }

private:
    std::array<double, 3> d_{0.0, 0.0, 0.0};
};

// D^dag H D.
inline Hamiltonian4 apply_gauge(const Hamiltonian4& H, const GaugePhases& g) {
    const Vec4c d = g.diagonal();
    Mat4c m = H.matrix();
    for (int r = 0; r < kLevels; ++r)
        for (int c = 0; c < kLevels; ++c) m(r, c) *= std::conj(d(r)) * d(c);
    return Hamiltonian4::hermitized(m);
}

// -conj(H): produces the same fixed-basis statistics as H.
inline Hamiltonian4 energy_inversion(const Hamiltonian4& H) {
    return Hamiltonian4::hermitized(-H.matrix().conjugate());
}

}  // namespace hamtomo
