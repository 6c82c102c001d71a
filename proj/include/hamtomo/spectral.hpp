// spectral.hpp: combined power spectrum of the measured traces and peak
// detection, used to seed the likelihood optimization.

#pragma once

#include "hamtomo/common.hpp"
#include "hamtomo/experiment.hpp"

#include <fftw3.h>

#include <algorithm>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

namespace hamtomo {

struct PowerSpectrum {
    Eigen::VectorXd omegas;       // uniform grid from 0, rad/time
    Eigen::VectorXd values;       // C(w) = sum_kl C_kl(w)
    Eigen::MatrixXd per_trace;    // rows: traces; empty unless requested
    double signal_length = 0.0;   // T = (N-1) dt
    bool zero_padded = false;     // false: the plain N-point DFT grid
    double spacing() const { return omegas.size() > 1 ? omegas(1) - omegas(0) : 0.0; }
};

namespace detail {
// FFTW planning is not thread-safe.
inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace detail

// C_kl(w) = |(1/N) sum_n d_kl;n exp(i w t_n)|^2 on a grid of spacing
// pi / (T * resolution_factor) up to omega_max (capped at the Nyquist
// frequency pi/dt), computed by a zero-padded real FFT.
inline PowerSpectrum power_spectrum(const TraceSet& traces, double omega_max, double resolution_factor = 4.0,
                                    bool keep_per_trace = false) {
    if (!(omega_max > 0.0)) throw ValidationError("power_spectrum: omega_max must be > 0");
    if (!(resolution_factor >= 0.5)) throw ValidationError("power_spectrum: resolution_factor must be >= 0.5");
    const SamplingPlan& plan = traces.plan;
    const int N = plan.N;
    const double T = plan.signal_length();
    // At resolution_factor 0.5 this is the plain N-point DFT grid.
    const auto nfft = std::max(N, static_cast<int>(std::lround(2.0 * (N - 1) * resolution_factor)));
    const double dw = kTwoPi / (nfft * plan.dt);
    const double w_cap = std::min(omega_max, kPi / plan.dt);
    const int bins = std::min(static_cast<int>(std::floor(w_cap / dw + 1e-9)) + 1, nfft / 2 + 1);

    PowerSpectrum out;
    out.signal_length = T;
    out.zero_padded = nfft != N;
    out.omegas = Eigen::VectorXd::LinSpaced(bins, 0.0, (bins - 1) * dw);
    out.values = Eigen::VectorXd::Zero(bins);
    if (keep_per_trace) out.per_trace = Eigen::MatrixXd::Zero(traces.rows(), bins);

    std::unique_ptr<double, decltype(&fftw_free)> in(static_cast<double*>(fftw_malloc(sizeof(double) * nfft)),
                                                     &fftw_free);
    std::unique_ptr<fftw_complex, decltype(&fftw_free)> spec(
        static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (nfft / 2 + 1))), &fftw_free);
    fftw_plan p;
    {
        std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
        p = fftw_plan_dft_r2c_1d(nfft, in.get(), spec.get(), FFTW_ESTIMATE);
    }
    const double norm = 1.0 / (static_cast<double>(N) * N);
    for (int r = 0; r < traces.rows(); ++r) {
        std::fill(in.get(), in.get() + nfft, 0.0);
        for (int n = 0; n < N; ++n) in.get()[n] = traces.data(r, n);
        fftw_execute(p);
        for (int j = 0; j < bins; ++j) {
            const double c = (spec.get()[j][0] * spec.get()[j][0] + spec.get()[j][1] * spec.get()[j][1]) * norm;
            out.values(j) += c;
            if (keep_per_trace) out.per_trace(r, j) = c;
        }
    }
    {
        std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(p);
    }
    return out;
}

struct PeakOptions {
    double dead_zone = 0.1;  // ignore w below this (the DC peak is not a transition)
    // A local maximum is discarded as a sidelobe when its power is below
    // sidelobe_ratio * sum_j P_j / (dw_j T / 2)^2 over the stronger peaks j
    // (the 1/x^2 envelope of the rectangular-window leakage). 0 disables.
    double sidelobe_ratio = 2.0;
    bool interpolate = true;  // 3-point parabola through log C around each maximum
};

// Robust noise floor: median(C) + 5 MAD(C) over the grid outside the dead zone.
inline double default_floor(const PowerSpectrum& spec, const PeakOptions& opt = {}) {
    std::vector<double> v;
    for (Eigen::Index j = 0; j < spec.values.size(); ++j)
        if (spec.omegas(j) >= opt.dead_zone) v.push_back(spec.values(j));
    if (v.empty()) return 0.0;
    auto median = [](std::vector<double> x) {
        const auto mid = x.begin() + static_cast<std::ptrdiff_t>(x.size() / 2);
        std::nth_element(x.begin(), mid, x.end());
        return *mid;
    };
    const double med = median(v);
    for (double& x : v) x = std::abs(x - med);
    return med + 5.0 * median(v);
}

// Ascending list of at most max_peaks peak frequencies (the strongest are
// kept), each refined by a 3-point parabola through log C. May be empty.
inline std::vector<double> find_peaks(const PowerSpectrum& spec, double floor, int max_peaks,
                                      const PeakOptions& opt = {}) {
    if (floor < 0.0) throw ValidationError("find_peaks: floor must be >= 0");
    const Eigen::Index n = spec.values.size();
    struct Peak {
        double omega;
        double power;
    };
    std::vector<Peak> cands;
    for (Eigen::Index j = 1; j + 1 < n; ++j) {
        const double c = spec.values(j);
        if (spec.omegas(j) < opt.dead_zone || c <= floor) continue;
        if (!(c > spec.values(j - 1) && c >= spec.values(j + 1))) continue;
        double w = spec.omegas(j);
        const double l0 = std::log(std::max(spec.values(j - 1), 1e-300));
        const double l1 = std::log(c);
        const double l2 = std::log(std::max(spec.values(j + 1), 1e-300));
        const double den = l0 - 2.0 * l1 + l2;
        if (opt.interpolate && den < 0.0) {
            const double shift = 0.5 * (l0 - l2) / den;
            if (std::abs(shift) <= 0.5) w += shift * spec.spacing();
        }
        cands.push_back({w, c});
    }
    std::sort(cands.begin(), cands.end(), [](const Peak& a, const Peak& b) { return a.power > b.power; });

    // On a zero-padded grid the DC peak leaks into the whole band and masks
    // like any stronger peak. On the plain DFT grid a constant leaks nothing.
    std::vector<Peak> kept;
    const Peak dc{0.0, n > 0 ? spec.values(0) : 0.0};
    const double half_T = 0.5 * spec.signal_length;
    auto leak = [&](const Peak& c, const Peak& s) {
        const double x = (c.omega - s.omega) * half_T;
        return s.power / std::max(x * x, 1.0);
    };
    for (const Peak& c : cands) {
        bool drop = false;
        if (opt.sidelobe_ratio > 0.0) {
            double envelope = spec.zero_padded ? leak(c, dc) : 0.0;
            for (const Peak& s : kept) envelope += leak(c, s);
            drop = c.power < opt.sidelobe_ratio * envelope;
        }
        if (!drop) kept.push_back(c);
        if (static_cast<int>(kept.size()) == max_peaks) break;
    }
    std::vector<double> out;
    for (const Peak& p : kept) out.push_back(p.omega);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace hamtomo
