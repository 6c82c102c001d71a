// hamtomo command-line front end. Exit codes: 0 success, 1 validation or
// usage error, 2 numerical failure (a report is still written when possible).

#include "hamtomo/harness.hpp"

#include "CLI11.hpp"

#include <iomanip>
#include <iostream>

using namespace hamtomo;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

void emit(const io::json& j, const std::string& out) {
    if (out.empty()) std::cout << j.dump(2) << "\n";
    else io::write_json(out, j);
}

RunConfig load_config(const std::string& path) {
    return path.empty() ? RunConfig{} : run_config_from_json(io::read_json(path));
}

SystemOptions band_options(const std::vector<double>& band, bool near_degenerate) {
    SystemOptions s;
    if (band.size() != 2) throw ValidationError("--band takes two values");
    s.band_low = band[0];
    s.band_high = band[1];
    s.near_degenerate = near_degenerate;
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hamiltonian tomography of four-level systems from projective-measurement traces"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "Random traceless Hamiltonian with transitions in a band");
    std::uint64_t gen_seed = 0;
    std::vector<double> gen_band{0.3, 7.0};
    bool gen_near = false;
    std::string gen_out;
    gen->add_option("--seed", gen_seed, "Generator seed")->required();
    gen->add_option("--band", gen_band, "Transition band low high")->expected(2);
    gen->add_flag("--near-degenerate", gen_near, "Require a pair of transitions closer than 0.01");
    gen->add_option("--out", gen_out, "Output JSON (stdout if omitted)");

    // simulate
    auto* sim = app.add_subcommand("simulate", "Simulate measurement traces");
    std::uint64_t sim_seed = 0;
    std::string sim_h, sim_ref, sim_out;
    int sim_N = 1025, sim_Ne = 250;
    double sim_dt = 0.1, sim_tstar = -1.0;
    std::vector<double> sim_band{0.3, 7.0};
    sim->add_option("--seed", sim_seed, "Trace seed; also the system seed when --hamiltonian is omitted")->required();
    sim->add_option("--hamiltonian", sim_h, "Hamiltonian JSON (evolution during measurement)");
    sim->add_option("--reference", sim_ref, "Reference Hamiltonian JSON; selects the two-step protocol");
    sim->add_option("--t-star", sim_tstar, "Preparation time under the reference (default: balanced time)");
    sim->add_option("--N", sim_N, "Samples per trace");
    sim->add_option("--Ne", sim_Ne, "Repetitions per sample");
    sim->add_option("--dt", sim_dt, "Sampling step");
    sim->add_option("--band", sim_band, "Band for generated systems")->expected(2);
    sim->add_option("--out", sim_out, "Output CSV; the plan goes to a .json sidecar")->required();

    // estimate
    auto* est = app.add_subcommand("estimate", "Frequencies and coefficients from fixed-basis traces");
    std::string est_traces, est_config, est_out, est_spec;
    bool est_no_refine = false;
    est->add_option("--traces", est_traces, "Trace CSV with .json sidecar")->required();
    est->add_option("--config", est_config, "Run config JSON (spectral settings)");
    est->add_option("--out", est_out, "ModelFit JSON (stdout if omitted)");
    est->add_option("--dump-spectrum", est_spec, "Write the power spectrum CSV here");
    est->add_flag("--no-refine", est_no_refine, "Skip degenerate-frequency refinement");

    // reconstruct
    auto* rec = app.add_subcommand("reconstruct", "Hamiltonian from a six-frequency ModelFit");
    std::string rec_fit, rec_out;
    rec->add_option("--fit", rec_fit, "ModelFit JSON")->required();
    rec->add_option("--out", rec_out, "Reconstruction report JSON (stdout if omitted)");

    // phase-estimate
    auto* ph = app.add_subcommand("phase-estimate", "Gauge phases of a target relative to a reference");
    std::string ph_ref, ph_target, ph_traces, ph_check, ph_out;
    ph->add_option("--reference", ph_ref, "Estimated reference Hamiltonian JSON")->required();
    ph->add_option("--target", ph_target, "Reconstructed target Hamiltonian JSON");
    ph->add_option("--traces", ph_traces, "Two-step traces at the balanced time");
    ph->add_option("--check-traces", ph_check, "Two-step traces at the check time (branch selection)");
    ph->add_option("--out", ph_out, "Output JSON (stdout if omitted)");

    // pipeline
    auto* pipe = app.add_subcommand("pipeline", "Batch run over random systems and (N, Ne) cells");
    std::string pipe_config, pipe_out;
    std::uint64_t pipe_seed = 0;
    bool pipe_dump_spec = false, pipe_dump_traces = false;
    auto* pipe_seed_opt = pipe->add_option("--seed", pipe_seed, "Master seed (overrides the config)");
    pipe->add_option("--config", pipe_config, "Run config JSON");
    pipe->add_option("--out", pipe_out, "Output directory (overrides the config)");
    pipe->add_flag("--dump-spectrum", pipe_dump_spec, "Write per-cell spectra");
    pipe->add_flag("--dump-traces", pipe_dump_traces, "Write per-cell traces");

    // report
    auto* rep = app.add_subcommand("report", "Print the aggregate table of a report.json");
    std::string rep_in, rep_out;
    rep->add_option("--in", rep_in, "report.json")->required();
    rep->add_option("--out", rep_out, "Also write the tables CSV here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (*gen) {
            emit(io::to_json(generate_system(gen_seed, band_options(gen_band, gen_near))), gen_out);
        } else if (*sim) {
            const Hamiltonian4 H = sim_h.empty() ? generate_system(sim_seed, band_options(sim_band, false))
                                                 : io::hamiltonian_from_json(io::read_json(sim_h));
            const SamplingPlan plan{sim_dt, sim_N, sim_Ne, sim_seed};
            plan.validate();
            if (sim_ref.empty()) {
                io::write_traces(sim_out, run_fixed_basis(H, plan));
            } else {
                const Hamiltonian4 H0 = io::hamiltonian_from_json(io::read_json(sim_ref));
                double t = sim_tstar;
                if (t < 0.0) {
                    const BalancedTime bt = select_balanced_time(H0);
                    if (!bt.balanced()) throw NumericalError(bt.diagnostic);
                    t = bt.t_star;
                }
                io::write_traces(sim_out, run_two_step(H0, t, H, plan), {{"t_star", t}});
            }
        } else if (*est) {
            const RunConfig cfg = load_config(est_config);
            const TraceSet ts = io::read_traces(est_traces);
            if (ts.protocol != Protocol::FixedBasis) throw ValidationError("estimate: expected fixed-basis traces");
            PowerSpectrum spec;
            const Estimate e = estimate_from_traces(ts, cfg.spectral, cfg.refine_degenerate && !est_no_refine,
                                                    false, &spec);
            if (!est_spec.empty()) io::write_text(est_spec, io::spectrum_csv(spec));
            if (!e.fit) {
                std::cerr << "estimate: no spectral peak above the noise floor\n";
                return kExitNumerical;
            }
            io::json j = io::to_json(*e.fit);
            j["peaks"] = e.peaks;
            j["refined"] = e.refined;
            emit(j, est_out);
            if (e.fit->num_frequencies() != kTransitions) {
                std::cerr << "estimate: only " << e.fit->num_frequencies() << " frequencies resolved\n";
                return kExitNumerical;
            }
        } else if (*rec) {
            const Reconstruction r = reconstruct(io::model_fit_from_json(io::read_json(rec_fit)));
            emit(io::to_json(r), rec_out);
        } else if (*ph) {
            const Hamiltonian4 H0 = io::hamiltonian_from_json(io::read_json(ph_ref));
            const TomographyOptions opt;
            const BalancedTime bt = select_balanced_time(H0, opt.balance);
            if (!bt.balanced()) throw NumericalError(bt.diagnostic);
            const BalancedTime check = alternate_balanced_time(H0, bt.t_star, opt.check_separation, opt.balance);
            if (ph_traces.empty()) {
                // Preparation plan only: the times at which to run the two-step experiment.
                emit({{"t_star", bt.t_star}, {"imbalance", bt.imbalance}, {"check_t", check.t_star},
                      {"check_imbalance", check.imbalance}},
                     ph_out);
                return kExitOk;
            }
            if (ph_target.empty()) throw ValidationError("phase-estimate: --target is required with --traces");
            const Hamiltonian4 Ht = io::hamiltonian_from_json(io::read_json(ph_target));
            const TraceSet main_ts = io::read_traces(ph_traces);
            std::optional<TraceSet> check_ts;
            if (!ph_check.empty()) check_ts = io::read_traces(ph_check);
            for (const TraceSet* ts : std::initializer_list<const TraceSet*>{&main_ts, check_ts ? &*check_ts : nullptr})
                if (ts && ts->protocol != Protocol::Superposition)
                    throw ValidationError("phase-estimate: expected superposition traces");
            const TwoStepExperiment from_files = [&](double t, const SamplingPlan&) -> TraceSet {
                if (std::abs(t - bt.t_star) < 1e-9) return main_ts;
                if (check_ts && std::abs(t - check.t_star) < 1e-9) return *check_ts;
                throw ValidationError("phase-estimate: no traces for preparation time " + io::fmt(t));
            };
            TomographyOptions run = opt;
            run.branch_check = check_ts.has_value();
            emit(io::to_json(full_tomography(H0, Ht, from_files, run)), ph_out);
        } else if (*pipe) {
            RunConfig cfg = load_config(pipe_config);
            if (*pipe_seed_opt) cfg.seed = pipe_seed;
            if (!pipe_out.empty()) cfg.output_dir = pipe_out;
            cfg.dump_spectrum = cfg.dump_spectrum || pipe_dump_spec;
            cfg.dump_traces = cfg.dump_traces || pipe_dump_traces;
            const RunReport r = run_pipeline(cfg);
            write_reports(r, cfg.output_dir);
            std::cout << tables_csv(r);
            if (r.any_failure()) {
                std::cerr << "pipeline: some cells failed; see report.json\n";
                return kExitNumerical;
            }
        } else if (*rep) {
            const io::json j = io::read_json(rep_in);
            if (io::get_field<int>(j, "schema_version") != io::kSchemaVersion)
                throw ValidationError("report: unsupported schema_version");
            const auto& aggs = io::get_field<io::json>(j, "aggregates");
            std::ostringstream table;
            table << std::left << std::setw(7) << "N" << std::setw(6) << "Ne" << std::setw(10) << "eps_w0%"
                  << std::setw(11) << "eps_wopt%" << std::setw(9) << "eps_a%" << std::setw(9) << "eps_c%"
                  << std::setw(9) << "med_eH%" << std::setw(6) << ">1%" << std::setw(6) << ">5%" << "ok\n";
            auto cell = [](const io::json& v) {
                std::ostringstream s;
                if (v.is_null()) s << "-";
                else s << std::setprecision(4) << v.get<double>();
                return s.str();
            };
            for (const auto& a : aggs) {
                table << std::left << std::setw(7) << a["N"].get<int>() << std::setw(6) << a["Ne"].get<int>()
                      << std::setw(10) << cell(a["eps_max_omega0_mean"]) << std::setw(11)
                      << cell(a["eps_max_omega_opt_mean"]) << std::setw(9) << cell(a["eps_med_a"]) << std::setw(9)
                      << cell(a["eps_med_c"]) << std::setw(9) << cell(a["relative_H_error_median"]) << std::setw(6)
                      << a["above_1pct"].get<int>() << std::setw(6) << a["above_5pct"].get<int>()
                      << a["ok"].get<int>() << "/" << a["systems"].get<int>() << "\n";
            }
            if (j.contains("phase"))
                for (const auto& m : j["phase"]["medians"])
                    table << "phase stage N=" << m["N"].get<int>() << " median full-H error "
                          << cell(m["median_full_H_error"]) << "%\n";
            std::cout << table.str();
            if (!rep_out.empty()) {
                std::string csv = "N,Ne,eps_max_omega0_mean,eps_max_omega_opt_mean,eps_med_a,eps_med_b,eps_med_c,"
                                  "relative_H_error_median,above_1pct,above_5pct\n";
                for (const auto& a : aggs) {
                    auto f = [](const io::json& v) { return v.is_null() ? std::string() : io::fmt(v.get<double>()); };
                    csv += std::to_string(a["N"].get<int>()) + "," + std::to_string(a["Ne"].get<int>()) + "," +
                           f(a["eps_max_omega0_mean"]) + "," + f(a["eps_max_omega_opt_mean"]) + "," +
                           f(a["eps_med_a"]) + "," + f(a["eps_med_b"]) + "," + f(a["eps_med_c"]) + "," +
                           f(a["relative_H_error_median"]) + "," + std::to_string(a["above_1pct"].get<int>()) + "," +
                           std::to_string(a["above_5pct"].get<int>()) + "\n";
                }
                io::write_text(rep_out, csv);
            }
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const io::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    }
    return kExitOk;
}
