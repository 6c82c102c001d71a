// harness.hpp: batch pipeline over random systems and (N, Ne) cells:
// simulate, seed from the spectrum, optimize, refine, reconstruct, score
// against the ground truth. Optional phase stage against a reference system.

#pragma once

#include "hamtomo/bayes.hpp"
#include "hamtomo/control_phase.hpp"
#include "hamtomo/io.hpp"
#include "hamtomo/reconstruct.hpp"
#include "hamtomo/spectral.hpp"
#include "hamtomo/systems.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <thread>

namespace hamtomo {

// ---------------------------------------------------------------- config

struct SpectralSettings {
    double omega_max = 8.0;
    double resolution_factor = 0.5;  // plain DFT grid
    bool interpolate = false;
    double sidelobe_ratio = 2.0;
    double dead_zone = 0.1;

    PeakOptions peak_options() const {
        PeakOptions p;
        p.dead_zone = dead_zone;
        p.sidelobe_ratio = sidelobe_ratio;
        p.interpolate = interpolate;
        return p;
    }
};

struct PhaseStageConfig {
    bool enabled = false;
    std::uint64_t reference_system = 5;  // generate_system seed of the reference
    int prior_N = 16385;
    int prior_Ne = 1000;
    std::vector<int> lengths{51, 201};   // N of the two-step traces
    int Ne = 5000;
};

struct RunConfig {
    int n_systems = 20;
    std::vector<int> N_list{1025, 4097};
    std::vector<int> Ne_list{125, 250};
    double dt = 0.1;
    std::uint64_t seed = 1;
    double band_low = 0.3;
    double band_high = 7.0;
    double min_separation = 1e-3;
    bool near_degenerate = false;
    std::string output_dir = "hamtomo_out";
    bool refine_degenerate = true;
    bool reconstruct = true;
    bool dump_spectrum = false;
    bool dump_traces = false;
    int threads = 0;  // 0: hardware concurrency
    SpectralSettings spectral{};
    PhaseStageConfig phase{};

    SystemOptions system_options() const {
        SystemOptions s;
        s.band_low = band_low;
        s.band_high = band_high;
        s.min_separation = min_separation;
        s.near_degenerate = near_degenerate;
        return s;
    }

    void validate() const {
        if (n_systems < 0) throw ValidationError("config: n_systems must be >= 0");
        if (N_list.empty() || Ne_list.empty()) throw ValidationError("config: N_list and Ne_list must be non-empty");
        for (int N : N_list)
            if (N < 2) throw ValidationError("config: every N must be >= 2");
        for (int Ne : Ne_list)
            if (Ne < 1) throw ValidationError("config: every Ne must be >= 1");
        if (!(dt > 0.0)) throw ValidationError("config: dt must be > 0");
        if (!(band_low > 0.0 && band_high > band_low)) throw ValidationError("config: invalid frequency_band");
        if (threads < 0) throw ValidationError("config: threads must be >= 0");
        if (!(spectral.omega_max > 0.0) || !(spectral.resolution_factor >= 0.5))
            throw ValidationError("config: invalid spectral settings");
        if (phase.enabled) {
            if (phase.prior_N < 2 || phase.prior_Ne < 1 || phase.Ne < 1 || phase.lengths.empty())
                throw ValidationError("config: invalid phase settings");
            for (int n : phase.lengths)
                if (n < 2) throw ValidationError("config: phase lengths must be >= 2");
        }
    }
};

namespace detail {

template <class T>
void read_opt(const io::json& j, const char* key, T& out) {
    if (j.contains(key)) out = io::get_field<T>(j, key);
}

inline void check_keys(const io::json& j, std::initializer_list<const char*> allowed, const char* where) {
    if (!j.is_object()) throw ValidationError(std::string(where) + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const bool ok = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return it.key() == a; });
        if (!ok) throw ValidationError(std::string(where) + ": unknown key '" + it.key() + "'");
    }
}

}  // namespace detail

inline RunConfig run_config_from_json(const io::json& j) {
    detail::check_keys(j,
                       {"n_systems", "N_list", "Ne_list", "dt", "seed", "frequency_band", "min_separation",
                        "near_degenerate", "output_dir", "stages", "dump_spectrum", "dump_traces", "threads",
                        "spectral", "phase"},
                       "config");
    RunConfig c;
    detail::read_opt(j, "n_systems", c.n_systems);
    detail::read_opt(j, "N_list", c.N_list);
    detail::read_opt(j, "Ne_list", c.Ne_list);
    detail::read_opt(j, "dt", c.dt);
    detail::read_opt(j, "seed", c.seed);
    if (j.contains("frequency_band")) {
        const auto band = io::get_field<std::vector<double>>(j, "frequency_band");
        if (band.size() != 2) throw ValidationError("config: frequency_band must be [low, high]");
        c.band_low = band[0];
        c.band_high = band[1];
    }
    detail::read_opt(j, "min_separation", c.min_separation);
    detail::read_opt(j, "near_degenerate", c.near_degenerate);
    detail::read_opt(j, "output_dir", c.output_dir);
    detail::read_opt(j, "dump_spectrum", c.dump_spectrum);
    detail::read_opt(j, "dump_traces", c.dump_traces);
    detail::read_opt(j, "threads", c.threads);
    if (j.contains("stages")) {
        const io::json& s = j["stages"];
        detail::check_keys(s, {"refine_degenerate", "reconstruct", "phase"}, "config.stages");
        detail::read_opt(s, "refine_degenerate", c.refine_degenerate);
        detail::read_opt(s, "reconstruct", c.reconstruct);
        detail::read_opt(s, "phase", c.phase.enabled);
    }
    if (j.contains("spectral")) {
        const io::json& s = j["spectral"];
        detail::check_keys(s, {"omega_max", "resolution_factor", "interpolate", "sidelobe_ratio", "dead_zone"},
                           "config.spectral");
        detail::read_opt(s, "omega_max", c.spectral.omega_max);
        detail::read_opt(s, "resolution_factor", c.spectral.resolution_factor);
        detail::read_opt(s, "interpolate", c.spectral.interpolate);
        detail::read_opt(s, "sidelobe_ratio", c.spectral.sidelobe_ratio);
        detail::read_opt(s, "dead_zone", c.spectral.dead_zone);
    }
    if (j.contains("phase")) {
        const io::json& s = j["phase"];
        detail::check_keys(s, {"reference_system", "prior_N", "prior_Ne", "lengths", "Ne"}, "config.phase");
        detail::read_opt(s, "reference_system", c.phase.reference_system);
        detail::read_opt(s, "prior_N", c.phase.prior_N);
        detail::read_opt(s, "prior_Ne", c.phase.prior_Ne);
        detail::read_opt(s, "lengths", c.phase.lengths);
        detail::read_opt(s, "Ne", c.phase.Ne);
    }
    c.validate();
    return c;
}

inline io::json to_json(const RunConfig& c) {
    return {{"n_systems", c.n_systems},
            {"N_list", c.N_list},
            {"Ne_list", c.Ne_list},
            {"dt", c.dt},
            {"seed", c.seed},
            {"frequency_band", {c.band_low, c.band_high}},
            {"min_separation", c.min_separation},
            {"near_degenerate", c.near_degenerate},
            {"output_dir", c.output_dir},
            {"stages", {{"refine_degenerate", c.refine_degenerate}, {"reconstruct", c.reconstruct}, {"phase", c.phase.enabled}}},
            {"dump_spectrum", c.dump_spectrum},
            {"dump_traces", c.dump_traces},
            {"threads", c.threads},
            {"spectral",
             {{"omega_max", c.spectral.omega_max},
              {"resolution_factor", c.spectral.resolution_factor},
              {"interpolate", c.spectral.interpolate},
              {"sidelobe_ratio", c.spectral.sidelobe_ratio},
              {"dead_zone", c.spectral.dead_zone}}},
            {"phase",
             {{"reference_system", c.phase.reference_system},
              {"prior_N", c.phase.prior_N},
              {"prior_Ne", c.phase.prior_Ne},
              {"lengths", c.phase.lengths},
              {"Ne", c.phase.Ne}}}};
}

// ---------------------------------------------------------------- seeds

inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x6a09e667f3bcc909ULL;
    for (std::uint64_t p : parts) h = detail::splitmix64(h ^ p);
    return h;
}

inline std::uint64_t system_seed(std::uint64_t seed, int system) {
    return mix_seed({seed, static_cast<std::uint64_t>(system)});
}

inline std::uint64_t cell_trace_seed(std::uint64_t seed, int system, int N, int Ne) {
    return mix_seed({seed, static_cast<std::uint64_t>(system), static_cast<std::uint64_t>(N),
                     static_cast<std::uint64_t>(Ne)});
}

// ---------------------------------------------------------------- estimation

struct Estimate {
    std::vector<double> peaks;
    std::optional<ModelFit> fit;   // empty when no peak was found
    bool refined = false;          // refine_degenerate added frequencies
    std::optional<Reconstruction> reconstruction;
    std::string reconstruct_error;
};

// Spectral seed, log P maximization, degenerate refinement when fewer than
// six peaks, then reconstruction when six frequencies are available.
inline Estimate estimate_from_traces(const TraceSet& traces, const SpectralSettings& spectral = {},
                                     bool refine = true, bool do_reconstruct = true,
                                     PowerSpectrum* spectrum_out = nullptr) {
    Estimate e;
    PowerSpectrum spec = power_spectrum(traces, spectral.omega_max, spectral.resolution_factor);
    const PeakOptions po = spectral.peak_options();
    e.peaks = find_peaks(spec, default_floor(spec, po), kTransitions, po);
    if (spectrum_out) *spectrum_out = std::move(spec);
    if (e.peaks.empty()) return e;
    ModelFit fit = optimize_frequencies(e.peaks, traces);
    if (refine && fit.num_frequencies() < kTransitions) {
        const int before = fit.num_frequencies();
        fit = refine_degenerate(fit, traces);
        e.refined = fit.num_frequencies() > before;
    }
    e.fit = std::move(fit);
    if (do_reconstruct && e.fit->num_frequencies() == kTransitions) {
        try {
            e.reconstruction = reconstruct(*e.fit);
        } catch (const std::exception& ex) {
            e.reconstruct_error = ex.what();
        }
    }
    return e;
}

// ---------------------------------------------------------------- metrics

// Relative errors in percent; each true frequency is matched by index when
// the counts agree, else to the nearest estimate.
inline double frequency_error_max(const std::vector<double>& est, const std::vector<double>& truth) {
    if (est.empty() || truth.empty()) return std::numeric_limits<double>::quiet_NaN();
    double m = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        double w = 0.0;
        if (est.size() == truth.size()) {
            w = est[i];
        } else {
            w = *std::min_element(est.begin(), est.end(), [&](double a, double b) {
                return std::abs(a - truth[i]) < std::abs(b - truth[i]);
            });
        }
        m = std::max(m, std::abs(w - truth[i]) / truth[i]);
    }
    return 100.0 * m;
}

inline double median(std::vector<double> v) {
    v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(const std::vector<double>& v) {
    double s = 0.0;
    int n = 0;
    for (double x : v)
        if (!std::isnan(x)) {
            s += x;
            ++n;
        }
    return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

// Median over entries of |x_est - x_true| / |x_true| in percent, skipping
// structural zeros of the truth.
inline double coefficient_error_median(const Eigen::MatrixXd& est, const Eigen::MatrixXd& truth,
                                       double zero_tol = 1e-9) {
    if (est.rows() != truth.rows() || est.cols() != truth.cols()) return std::numeric_limits<double>::quiet_NaN();
    std::vector<double> v;
    for (Eigen::Index r = 0; r < truth.rows(); ++r)
        for (Eigen::Index c = 0; c < truth.cols(); ++c)
            if (std::abs(truth(r, c)) > zero_tol) v.push_back(100.0 * std::abs(est(r, c) - truth(r, c)) / std::abs(truth(r, c)));
    return median(v);
}

// Average ranks, ties shared.
inline std::vector<double> ranks(const std::vector<double>& x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
        for (std::size_t q = i; q <= j; ++q) r[idx[q]] = 0.5 * static_cast<double>(i + j) + 1.0;
        i = j + 1;
    }
    return r;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    const std::vector<double> rx = ranks(x), ry = ranks(y);
    const double mx = mean(rx), my = mean(ry);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    return sxx > 0.0 && syy > 0.0 ? sxy / std::sqrt(sxx * syy) : std::numeric_limits<double>::quiet_NaN();
}

// The level assignment is right when every frequency slot names the true
// transition, on the given scheme or on its reflection.
inline bool arrangement_correct(const LevelAssignment& est, const Hamiltonian4& truth) {
    const Vec4d lambda = eigendecompose(truth).eigenvalues;
    std::array<std::pair<double, TransitionPair>, kTransitions> w{};
    for (int i = 0; i < kTransitions; ++i)
        w[i] = {lambda(kAllPairs[i].second) - lambda(kAllPairs[i].first), kAllPairs[i]};
    std::sort(w.begin(), w.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    bool direct = true, reflected = true;
    for (int m = 0; m < kTransitions; ++m) {
        const TransitionPair p = w[m].second;
        direct = direct && est.map[m] == p;
        reflected = reflected && est.map[m] == TransitionPair{3 - p.second, 3 - p.first};
    }
    return direct || reflected;
}

// ---------------------------------------------------------------- results

enum class CellStatus { Ok, NoPeaks, Incomplete, NumericalError, ValidationError };

inline std::string_view to_string(CellStatus s) {
    switch (s) {
        case CellStatus::Ok: return "ok";
        case CellStatus::NoPeaks: return "no_peaks";
        case CellStatus::Incomplete: return "incomplete";
        case CellStatus::NumericalError: return "numerical_error";
        case CellStatus::ValidationError: return "validation_error";
    }
    return "unknown";
}

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct CellResult {
    int system = 0;
    int N = 0;
    int Ne = 0;
    std::uint64_t trace_seed = 0;
    CellStatus status = CellStatus::Ok;
    std::string message;
    int peaks = 0;
    int frequencies = 0;
    bool refined = false;
    double eps_w0 = kNaN;      // percent
    double eps_wopt = kNaN;
    double eps_a = kNaN;
    double eps_b = kNaN;
    double eps_c = kNaN;
    double sigma2 = kNaN;      // mean over traces
    double logP = kNaN;
    double eH = kNaN;          // percent, gauge compensated
    double E_delta = kNaN;     // constraint violation before refinement
    int arrangement = 0;
    bool arrangement_ok = false;
    std::vector<std::string> warnings;
};

// Scores one simulated data set against its ground truth.
inline CellResult score_cell(const Hamiltonian4& H, const TraceSet& traces, const RunConfig& cfg,
                             PowerSpectrum* spectrum_out = nullptr) {
    CellResult r;
    r.N = traces.plan.N;
    r.Ne = traces.plan.Ne;
    r.trace_seed = traces.plan.seed;
    const Estimate e = estimate_from_traces(traces, cfg.spectral, cfg.refine_degenerate, cfg.reconstruct, spectrum_out);
    r.peaks = static_cast<int>(e.peaks.size());
    if (!e.fit) {
        r.status = CellStatus::NoPeaks;
        r.message = "no spectral peak above the noise floor";
        return r;
    }
    const SignalModel truth = signal_model_of(H);
    const std::vector<double> true_w(truth.frequencies.begin(), truth.frequencies.end());
    const ModelFit& f = *e.fit;
    r.frequencies = f.num_frequencies();
    r.refined = e.refined;
    r.logP = f.logP;
    r.sigma2 = f.sigma2.mean();
    r.eps_w0 = frequency_error_max(e.peaks, true_w);
    r.eps_wopt = frequency_error_max(f.frequencies, true_w);
    if (r.frequencies == kTransitions) {
        r.eps_a = coefficient_error_median(f.a, truth.a);
        r.eps_b = coefficient_error_median(f.b, truth.b);
        r.eps_c = coefficient_error_median(f.c, truth.c);
    }
    if (r.frequencies != kTransitions) {
        r.status = CellStatus::Incomplete;
        r.message = "fewer than six frequencies after refinement";
        return r;
    }
    if (!cfg.reconstruct) return r;
    if (!e.reconstruction) {
        r.status = CellStatus::NumericalError;
        r.message = "reconstruction failed: " + e.reconstruct_error;
        return r;
    }
    const Reconstruction& rec = *e.reconstruction;
    r.eH = 100.0 * gauge_compensated_error(rec.H, H);
    r.E_delta = rec.constraint_violation;
    r.arrangement = rec.assignment.arrangement;
    r.arrangement_ok = arrangement_correct(rec.assignment, H);
    r.warnings = rec.warnings;
    return r;
}

struct Aggregate {
    int N = 0;
    int Ne = 0;
    int systems = 0;
    int ok = 0;
    int failed = 0;       // numerical or validation errors
    int six_peaks = 0;
    double eps_w0_mean = kNaN;
    double eps_wopt_mean = kNaN;
    double eps_a_median = kNaN;
    double eps_b_median = kNaN;
    double eps_c_median = kNaN;
    double sigma2_mean = kNaN;
    double eH_median = kNaN;
    double eH_mean = kNaN;
    int above_1pct = 0;
    int above_5pct = 0;
    int arrangements_ok = 0;
    double spearman_E_eH = kNaN;
};

inline Aggregate aggregate(const std::vector<CellResult>& cells, int N, int Ne) {
    Aggregate a;
    a.N = N;
    a.Ne = Ne;
    std::vector<double> w0, wopt, ea, eb, ec, s2, eH, Ed, eH_paired;
    for (const CellResult& c : cells) {
        if (c.N != N || c.Ne != Ne) continue;
        ++a.systems;
        a.ok += c.status == CellStatus::Ok;
        a.failed += c.status == CellStatus::NumericalError || c.status == CellStatus::ValidationError;
        a.six_peaks += c.peaks == kTransitions;
        w0.push_back(c.eps_w0);
        wopt.push_back(c.eps_wopt);
        ea.push_back(c.eps_a);
        eb.push_back(c.eps_b);
        ec.push_back(c.eps_c);
        s2.push_back(c.sigma2);
        eH.push_back(c.eH);
        if (!std::isnan(c.eH)) {
            a.above_1pct += c.eH > 1.0;
            a.above_5pct += c.eH > 5.0;
            a.arrangements_ok += c.arrangement_ok;
            Ed.push_back(c.E_delta);
            eH_paired.push_back(c.eH);
        }
    }
    a.eps_w0_mean = mean(w0);
    a.eps_wopt_mean = mean(wopt);
    a.eps_a_median = median(ea);
    a.eps_b_median = median(eb);
    a.eps_c_median = median(ec);
    a.sigma2_mean = mean(s2);
    a.eH_median = median(eH);
    a.eH_mean = mean(eH);
    a.spearman_E_eH = spearman(Ed, eH_paired);
    return a;
}

// ---------------------------------------------------------------- phase stage

// The reconstruction convention fixes the reference's gauge; this is the map
// from the lab frame into that convention, found on noiseless data.
struct ReferenceFrame {
    GaugePhases gauge;
    bool inverted = false;
};

inline ReferenceFrame reference_frame(const Hamiltonian4& H0) {
    const GaugeError ge = gauge_compensated_error_detailed(reconstruct(exact_fit(signal_model_of(H0))).H, H0);
    return {ge.gauge, ge.inverted};
}

// Error of a full-tomography estimate against the truth expressed in the
// reference convention; the global energy sign stays free.
inline double full_h_error(const Hamiltonian4& H_est, const Hamiltonian4& Hf, const ReferenceFrame& frame) {
    Hamiltonian4 ref = apply_gauge(Hf, GaugePhases(-frame.gauge[0], -frame.gauge[1], -frame.gauge[2]));
    if (frame.inverted) ref = energy_inversion(ref);
    const Mat4c A = ref.traceless().matrix();
    double best = std::numeric_limits<double>::infinity();
    for (bool inv : {false, true}) {
        const Hamiltonian4 B = inv ? energy_inversion(H_est) : H_est;
        best = std::min(best, op_norm(B.traceless().matrix() - A) / ref.op_norm());
    }
    return 100.0 * best;
}

struct PhaseCellResult {
    int length = 0;
    double error = kNaN;   // percent
    bool inverted = false;
    int restarts_agreeing = 0;
    bool low_confidence = false;
    double t_star = kNaN;
};

struct PhaseSystemResult {
    int system = 0;
    CellStatus status = CellStatus::Ok;
    std::string message;
    double prior_eH = kNaN;
    std::vector<PhaseCellResult> runs;
};

struct PhaseReport {
    bool enabled = false;
    CellStatus reference_status = CellStatus::Ok;
    std::string reference_message;
    double reference_eH = kNaN;
    std::vector<PhaseSystemResult> systems;
    std::vector<std::pair<int, double>> median_by_length;
};

struct RunReport {
    RunConfig config;
    std::vector<CellResult> cells;
    std::vector<Aggregate> aggregates;
    PhaseReport phase;

    bool any_failure() const {
        for (const CellResult& c : cells)
            if (c.status == CellStatus::NumericalError || c.status == CellStatus::ValidationError) return true;
        if (phase.enabled && phase.reference_status != CellStatus::Ok) return true;
        for (const PhaseSystemResult& s : phase.systems)
            if (s.status == CellStatus::NumericalError || s.status == CellStatus::ValidationError) return true;
        return false;
    }
};

// ---------------------------------------------------------------- work pool

// Runs task(i) for i in [0, n) on `threads` workers; results are placed by
// index so the output does not depend on scheduling.
inline void parallel_for(int n, int threads, const std::function<void(int)>& task) {
    if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    threads = std::min(threads, std::max(n, 1));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int i = next++; i < n; i = next++) task(i);
    };
    std::vector<std::thread> pool;
    for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();
}

namespace detail {

template <class F>
void guarded(CellStatus& status, std::string& message, F&& f) {
    try {
        f();
    } catch (const ValidationError& e) {
        status = CellStatus::ValidationError;
        message = e.what();
    } catch (const std::exception& e) {
        status = CellStatus::NumericalError;
        message = e.what();
    }
}

inline std::string cell_name(int system, int N, int Ne) {
    return "sys" + std::to_string(system) + "_N" + std::to_string(N) + "_Ne" + std::to_string(Ne);
}

}  // namespace detail

inline PhaseReport run_phase_stage(const std::vector<Hamiltonian4>& systems, const RunConfig& cfg) {
    PhaseReport rep;
    rep.enabled = true;
    const PhaseStageConfig& pc = cfg.phase;
    const Hamiltonian4 H0 = generate_system(pc.reference_system, cfg.system_options());
    std::optional<Hamiltonian4> H0_est;
    detail::guarded(rep.reference_status, rep.reference_message, [&] {
        const TraceSet ts = run_fixed_basis(H0, {cfg.dt, pc.prior_N, pc.prior_Ne, mix_seed({cfg.seed, 0x7ef0ULL})});
        const Estimate e = estimate_from_traces(ts, cfg.spectral, true, true);
        if (!e.reconstruction) throw NumericalError("reference system could not be reconstructed");
        H0_est = e.reconstruction->H;
        rep.reference_eH = 100.0 * gauge_compensated_error(*H0_est, H0);
    });
    rep.systems.resize(systems.size());
    if (!H0_est) return rep;
    const ReferenceFrame frame = reference_frame(H0);

    parallel_for(static_cast<int>(systems.size()), cfg.threads, [&](int i) {
        PhaseSystemResult& out = rep.systems[static_cast<std::size_t>(i)];
        out.system = i;
        const Hamiltonian4& Hf = systems[static_cast<std::size_t>(i)];
        detail::guarded(out.status, out.message, [&] {
            const SamplingPlan prior{cfg.dt, pc.prior_N, pc.prior_Ne, cell_trace_seed(cfg.seed, i, pc.prior_N, pc.prior_Ne)};
            const Estimate e = estimate_from_traces(run_fixed_basis(Hf, prior), cfg.spectral, true, true);
            if (!e.reconstruction) {
                out.status = CellStatus::Incomplete;
                out.message = "target could not be reconstructed from the prior data";
                return;
            }
            out.prior_eH = 100.0 * gauge_compensated_error(e.reconstruction->H, Hf);
            for (int len : pc.lengths) {
                TomographyOptions to;
                to.plan = {cfg.dt, len, pc.Ne, mix_seed({cfg.seed, static_cast<std::uint64_t>(i),
                                                          static_cast<std::uint64_t>(len), 0x9a5eULL})};
                const TomographyResult tr = full_tomography(*H0_est, e.reconstruction->H, simulated_two_step(H0, Hf), to);
                out.runs.push_back({len, full_h_error(tr.H, Hf, frame), tr.inverted, tr.estimate.restarts_agreeing,
                                    tr.estimate.low_confidence, tr.preparation.t_star});
            }
        });
    });
    for (int len : pc.lengths) {
        std::vector<double> v;
        for (const PhaseSystemResult& s : rep.systems)
            for (const PhaseCellResult& r : s.runs)
                if (r.length == len) v.push_back(r.error);
        rep.median_by_length.emplace_back(len, median(v));
    }
    return rep;
}

// Runs every (system, N, Ne) cell. Systems are drawn from the config unless
// given explicitly.
inline RunReport run_pipeline(const RunConfig& cfg, std::optional<std::vector<Hamiltonian4>> given = std::nullopt) {
    cfg.validate();
    std::vector<Hamiltonian4> systems;
    if (given) {
        systems = *given;
    } else {
        for (int i = 0; i < cfg.n_systems; ++i) systems.push_back(generate_system(system_seed(cfg.seed, i), cfg.system_options()));
    }
    RunReport rep;
    rep.config = cfg;
    struct Task {
        int system, N, Ne;
    };
    std::vector<Task> tasks;
    for (int N : cfg.N_list)
        for (int Ne : cfg.Ne_list)
            for (int i = 0; i < static_cast<int>(systems.size()); ++i) tasks.push_back({i, N, Ne});
    rep.cells.resize(tasks.size());
    const std::filesystem::path out_dir(cfg.output_dir);

    parallel_for(static_cast<int>(tasks.size()), cfg.threads, [&](int t) {
        const Task& task = tasks[static_cast<std::size_t>(t)];
        CellResult& r = rep.cells[static_cast<std::size_t>(t)];
        const std::uint64_t seed = cell_trace_seed(cfg.seed, task.system, task.N, task.Ne);
        CellStatus status = CellStatus::Ok;
        std::string message;
        detail::guarded(status, message, [&] {
            const Hamiltonian4& H = systems[static_cast<std::size_t>(task.system)];
            const TraceSet ts = run_fixed_basis(H, {cfg.dt, task.N, task.Ne, seed});
            const std::string name = detail::cell_name(task.system, task.N, task.Ne);
            if (cfg.dump_traces) io::write_traces(out_dir / "traces" / (name + ".csv"), ts);
            PowerSpectrum spec;
            r = score_cell(H, ts, cfg, cfg.dump_spectrum ? &spec : nullptr);
            if (cfg.dump_spectrum) io::write_text(out_dir / "spectra" / (name + ".csv"), io::spectrum_csv(spec));
        });
        r.system = task.system;
        r.N = task.N;
        r.Ne = task.Ne;
        r.trace_seed = seed;
        if (status != CellStatus::Ok) {
            r.status = status;
            r.message = message;
        }
    });
    for (int N : cfg.N_list)
        for (int Ne : cfg.Ne_list) rep.aggregates.push_back(aggregate(rep.cells, N, Ne));
    if (cfg.phase.enabled) rep.phase = run_phase_stage(systems, cfg);
    return rep;
}

// ---------------------------------------------------------------- reports

namespace detail {

inline io::json num(double x) { return std::isnan(x) ? io::json(nullptr) : io::json(x); }

inline std::string csv_num(double x) { return std::isnan(x) ? std::string() : io::fmt(x); }

}  // namespace detail

inline io::json to_json(const CellResult& c) {
    return {{"system", c.system},
            {"N", c.N},
            {"Ne", c.Ne},
            {"trace_seed", c.trace_seed},
            {"status", std::string(to_string(c.status))},
            {"message", c.message},
            {"peaks", c.peaks},
            {"frequencies", c.frequencies},
            {"refined", c.refined},
            {"eps_max_omega0", detail::num(c.eps_w0)},
            {"eps_max_omega_opt", detail::num(c.eps_wopt)},
            {"eps_med_a", detail::num(c.eps_a)},
            {"eps_med_b", detail::num(c.eps_b)},
            {"eps_med_c", detail::num(c.eps_c)},
            {"sigma2_mean", detail::num(c.sigma2)},
            {"logP", detail::num(c.logP)},
            {"relative_H_error", detail::num(c.eH)},
            {"constraint_violation", detail::num(c.E_delta)},
            {"arrangement", c.arrangement},
            {"arrangement_correct", c.arrangement_ok},
            {"warnings", c.warnings}};
}

inline io::json to_json(const Aggregate& a) {
    return {{"N", a.N},
            {"Ne", a.Ne},
            {"systems", a.systems},
            {"ok", a.ok},
            {"failed", a.failed},
            {"six_peaks", a.six_peaks},
            {"eps_max_omega0_mean", detail::num(a.eps_w0_mean)},
            {"eps_max_omega_opt_mean", detail::num(a.eps_wopt_mean)},
            {"eps_med_a", detail::num(a.eps_a_median)},
            {"eps_med_b", detail::num(a.eps_b_median)},
            {"eps_med_c", detail::num(a.eps_c_median)},
            {"sigma2_mean", detail::num(a.sigma2_mean)},
            {"relative_H_error_median", detail::num(a.eH_median)},
            {"relative_H_error_mean", detail::num(a.eH_mean)},
            {"above_1pct", a.above_1pct},
            {"above_5pct", a.above_5pct},
            {"arrangements_correct", a.arrangements_ok},
            {"spearman_constraint_vs_error", detail::num(a.spearman_E_eH)}};
}

inline io::json to_json(const PhaseReport& p) {
    io::json systems = io::json::array();
    for (const PhaseSystemResult& s : p.systems) {
        io::json runs = io::json::array();
        for (const PhaseCellResult& r : s.runs)
            runs.push_back({{"N", r.length},
                            {"full_H_error", detail::num(r.error)},
                            {"inverted", r.inverted},
                            {"restarts_agreeing", r.restarts_agreeing},
                            {"low_confidence", r.low_confidence},
                            {"t_star", detail::num(r.t_star)}});
        systems.push_back({{"system", s.system},
                           {"status", std::string(to_string(s.status))},
                           {"message", s.message},
                           {"prior_relative_H_error", detail::num(s.prior_eH)},
                           {"runs", runs}});
    }
    io::json medians = io::json::array();
    for (const auto& [len, m] : p.median_by_length) medians.push_back({{"N", len}, {"median_full_H_error", detail::num(m)}});
    return {{"enabled", p.enabled},
            {"reference_status", std::string(to_string(p.reference_status))},
            {"reference_message", p.reference_message},
            {"reference_relative_H_error", detail::num(p.reference_eH)},
            {"medians", medians},
            {"systems", systems}};
}

inline io::json to_json(const RunReport& r) {
    io::json cells = io::json::array();
    for (const CellResult& c : r.cells) cells.push_back(to_json(c));
    io::json aggs = io::json::array();
    for (const Aggregate& a : r.aggregates) aggs.push_back(to_json(a));
    io::json j = {{"schema_version", io::kSchemaVersion}, {"config", to_json(r.config)}, {"aggregates", aggs}, {"cells", cells}};
    if (r.phase.enabled) j["phase"] = to_json(r.phase);
    return j;
}

// One row per (N, Ne) cell, laid out like the error tables.
inline std::string tables_csv(const RunReport& r) {
    std::string out =
        "N,Ne,systems,ok,failed,six_peaks,eps_max_omega0_mean,eps_max_omega_opt_mean,eps_med_a,eps_med_b,eps_med_c,"
        "sigma2_mean,relative_H_error_median,relative_H_error_mean,above_1pct,above_5pct,arrangements_correct,"
        "spearman_constraint_vs_error\n";
    using detail::csv_num;
    for (const Aggregate& a : r.aggregates) {
        out += std::to_string(a.N) + "," + std::to_string(a.Ne) + "," + std::to_string(a.systems) + "," +
               std::to_string(a.ok) + "," + std::to_string(a.failed) + "," + std::to_string(a.six_peaks) + "," +
               csv_num(a.eps_w0_mean) + "," + csv_num(a.eps_wopt_mean) + "," + csv_num(a.eps_a_median) + "," +
               csv_num(a.eps_b_median) + "," + csv_num(a.eps_c_median) + "," + csv_num(a.sigma2_mean) + "," +
               csv_num(a.eH_median) + "," + csv_num(a.eH_mean) + "," + std::to_string(a.above_1pct) + "," +
               std::to_string(a.above_5pct) + "," + std::to_string(a.arrangements_ok) + "," +
               csv_num(a.spearman_E_eH) + "\n";
    }
    return out;
}

inline std::string systems_csv(const RunReport& r) {
    std::string out =
        "system,N,Ne,status,peaks,frequencies,refined,eps_max_omega0,eps_max_omega_opt,eps_med_a,eps_med_b,eps_med_c,"
        "sigma2_mean,relative_H_error,constraint_violation,arrangement,arrangement_correct\n";
    using detail::csv_num;
    for (const CellResult& c : r.cells) {
        out += std::to_string(c.system) + "," + std::to_string(c.N) + "," + std::to_string(c.Ne) + "," +
               std::string(to_string(c.status)) + "," + std::to_string(c.peaks) + "," + std::to_string(c.frequencies) +
               "," + (c.refined ? "1" : "0") + "," + csv_num(c.eps_w0) + "," + csv_num(c.eps_wopt) + "," +
               csv_num(c.eps_a) + "," + csv_num(c.eps_b) + "," + csv_num(c.eps_c) + "," + csv_num(c.sigma2) + "," +
               csv_num(c.eH) + "," + csv_num(c.E_delta) + "," + std::to_string(c.arrangement) + "," +
               (c.arrangement_ok ? "1" : "0") + "\n";
    }
    return out;
}

inline void write_reports(const RunReport& r, const std::filesystem::path& dir) {
    io::write_json(dir / "report.json", to_json(r));
    io::write_text(dir / "tables.csv", tables_csv(r));
    io::write_text(dir / "systems.csv", systems_csv(r));
}

}  // namespace hamtomo
