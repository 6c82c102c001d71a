// io.hpp: JSON and CSV (de)serialization. Levels and trace indices are
// 1-based in files and 0-based in memory.

#pragma once

#include "hamtomo/bayes.hpp"
#include "hamtomo/control_phase.hpp"
#include "hamtomo/core_model.hpp"
#include "hamtomo/experiment.hpp"
#include "hamtomo/reconstruct.hpp"
#include "hamtomo/spectral.hpp"

#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace hamtomo::io {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot write " + path.string());
    f << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline json read_json(const std::filesystem::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// Round-trip exact decimal form of a double.
inline std::string fmt(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

template <class T>
T get_field(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) throw ValidationError(std::string("missing field '") + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("field '") + key + "': " + e.what());
    }
}

inline json matrix_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Eigen::MatrixXd matrix_from(const json& j, Eigen::Index rows, Eigen::Index cols, const char* what) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
        throw ValidationError(std::string(what) + ": expected " + std::to_string(rows) + " rows");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const json& row = j[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
            throw ValidationError(std::string(what) + ": expected " + std::to_string(cols) + " columns");
        for (Eigen::Index c = 0; c < cols; ++c) {
            if (!row[static_cast<std::size_t>(c)].is_number())
                throw ValidationError(std::string(what) + ": non-numeric entry");
            m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
        }
    }
    return m;
}

inline Eigen::VectorXd vector_from(const json& j, const char* what) {
    if (!j.is_array()) throw ValidationError(std::string(what) + ": expected an array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw ValidationError(std::string(what) + ": non-numeric entry");
        v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    }
    return v;
}

inline json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// ---- Hamiltonian4: {"re": 4x4, "im": 4x4}, row-major ----

inline json to_json(const Hamiltonian4& H) {
    return {{"re", matrix_json(H.matrix().real())}, {"im", matrix_json(H.matrix().imag())}};
}

inline Hamiltonian4 hamiltonian_from_json(const json& j, double tol = 1e-9) {
    if (!j.is_object()) throw ValidationError("Hamiltonian: expected an object with 're' and 'im'");
    const Eigen::MatrixXd re = matrix_from(get_field<json>(j, "re"), kLevels, kLevels, "Hamiltonian re");
    const Eigen::MatrixXd im = matrix_from(get_field<json>(j, "im"), kLevels, kLevels, "Hamiltonian im");
    Mat4c m;
    for (int r = 0; r < kLevels; ++r)
        for (int c = 0; c < kLevels; ++c) m(r, c) = cplx(re(r, c), im(r, c));
    if (!m.allFinite()) throw ValidationError("Hamiltonian: non-finite entry");
    const double scale = std::max(1.0, m.norm());
    if ((m - m.adjoint()).norm() > tol * scale) throw ValidationError("Hamiltonian: matrix is not Hermitian");
    return Hamiltonian4::hermitized(m);
}

// ---- traces: CSV t,k,l,d plus a sidecar JSON with the plan ----

inline json plan_json(const TraceSet& ts) {
    return {{"schema_version", kSchemaVersion},
            {"protocol", std::string(to_string(ts.protocol))},
            {"dt", ts.plan.dt},
            {"N", ts.plan.N},
            {"Ne", ts.plan.Ne},
            {"seed", ts.plan.seed},
            {"rng", std::string(kRngAlgorithm)}};
}

// Fixed-basis rows are (k, l); superposition rows use k = 0 (the prepared state).
inline std::string traces_csv(const TraceSet& ts) {
    std::string out = "t,k,l,d\n";
    const bool fixed = ts.protocol == Protocol::FixedBasis;
    for (int n = 0; n < ts.plan.N; ++n) {
        for (int r = 0; r < ts.rows(); ++r) {
            const int k = fixed ? r / kLevels + 1 : 0;
            const int l = fixed ? r % kLevels + 1 : r + 1;
            out += fmt(ts.plan.time(n)) + "," + std::to_string(k) + "," + std::to_string(l) + "," +
                   fmt(ts.data(r, n)) + "\n";
        }
    }
    return out;
}

inline void write_traces(const std::filesystem::path& csv_path, const TraceSet& ts, const json& extra = {}) {
    write_text(csv_path, traces_csv(ts));
    json side = plan_json(ts);
    if (extra.is_object())
        for (auto it = extra.begin(); it != extra.end(); ++it) side[it.key()] = it.value();
    std::filesystem::path side_path = csv_path;
    side_path.replace_extension(".json");
    write_json(side_path, side);
}

inline SamplingPlan plan_from_json(const json& j) {
    SamplingPlan p;
    p.dt = get_field<double>(j, "dt");
    p.N = get_field<int>(j, "N");
    p.Ne = get_field<int>(j, "Ne");
    p.seed = j.contains("seed") ? get_field<std::uint64_t>(j, "seed") : 0;
    p.validate();
    return p;
}

// Rejects wrong headers, missing or repeated cells, times off the plan grid,
// and values that are not multiples of 1/Ne within 1e-12.
inline TraceSet parse_traces(const std::string& csv, const json& sidecar) {
    const SamplingPlan plan = plan_from_json(sidecar);
    const std::string proto = get_field<std::string>(sidecar, "protocol");
    Protocol protocol;
    if (proto == to_string(Protocol::FixedBasis)) protocol = Protocol::FixedBasis;
    else if (proto == to_string(Protocol::Superposition)) protocol = Protocol::Superposition;
    else throw ValidationError("traces: unknown protocol '" + proto + "'");
    const bool fixed = protocol == Protocol::FixedBasis;
    const int rows = fixed ? kTraces : kLevels;

    TraceSet ts{plan, Eigen::MatrixXd::Constant(rows, plan.N, std::numeric_limits<double>::quiet_NaN()), protocol};
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("traces: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "t,k,l,d") throw ValidationError("traces: header must be 't,k,l,d'");
    int line_no = 1;
    long count = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        double t = 0.0, d = 0.0;
        int k = 0, l = 0;
        char tail = 0;
        if (std::sscanf(line.c_str(), "%lf,%d,%d,%lf%c", &t, &k, &l, &d, &tail) != 4)
            throw ValidationError("traces: malformed line " + std::to_string(line_no));
        const int n = static_cast<int>(std::lround(t / plan.dt));
        if (n < 0 || n >= plan.N || std::abs(t - plan.time(n)) > 1e-9 * std::max(1.0, std::abs(t)))
            throw ValidationError("traces: time off the sampling grid on line " + std::to_string(line_no));
        const bool ok_index = fixed ? (k >= 1 && k <= kLevels && l >= 1 && l <= kLevels)
                                    : (k == 0 && l >= 1 && l <= kLevels);
        if (!ok_index) throw ValidationError("traces: bad (k,l) on line " + std::to_string(line_no));
        const double scaled = d * plan.Ne;
        if (!(d >= 0.0 && d <= 1.0) || std::abs(d - std::round(scaled) / plan.Ne) > 1e-12)
            throw ValidationError("traces: value is not a multiple of 1/Ne on line " + std::to_string(line_no));
        const int r = fixed ? (k - 1) * kLevels + (l - 1) : l - 1;
        if (!std::isnan(ts.data(r, n))) throw ValidationError("traces: repeated cell on line " + std::to_string(line_no));
        ts.data(r, n) = d;
        ++count;
    }
    if (count != static_cast<long>(rows) * plan.N) throw ValidationError("traces: missing cells");
    return ts;
}

inline TraceSet read_traces(const std::filesystem::path& csv_path) {
    std::filesystem::path side_path = csv_path;
    side_path.replace_extension(".json");
    return parse_traces(read_text(csv_path), read_json(side_path));
}

// ---- spectrum dump ----

inline std::string spectrum_csv(const PowerSpectrum& s) {
    std::string out = "omega,C\n";
    for (Eigen::Index j = 0; j < s.omegas.size(); ++j) out += fmt(s.omegas(j)) + "," + fmt(s.values(j)) + "\n";
    return out;
}

// ---- ModelFit ----

inline json to_json(const ModelFit& f) {
    return {{"schema_version", kSchemaVersion},
            {"frequencies", f.frequencies},
            {"logP", f.logP},
            {"a", matrix_json(f.a)},
            {"b", matrix_json(f.b)},
            {"c", vector_json(f.c)},
            {"da", matrix_json(f.da)},
            {"db", matrix_json(f.db)},
            {"dc", vector_json(f.dc)},
            {"sigma2", vector_json(f.sigma2)},
            {"N", f.N},
            {"signal_length", f.signal_length},
            {"converged", f.converged},
            {"overfit", f.overfit},
            {"likelihood_clamped", f.likelihood_clamped}};
}

inline ModelFit model_fit_from_json(const json& j) {
    ModelFit f;
    f.frequencies = get_field<std::vector<double>>(j, "frequencies");
    const auto F = static_cast<Eigen::Index>(f.frequencies.size());
    if (F < 1) throw ValidationError("ModelFit: no frequencies");
    for (std::size_t i = 0; i < f.frequencies.size(); ++i) {
        if (!(f.frequencies[i] > 0.0)) throw ValidationError("ModelFit: frequencies must be > 0");
        if (i > 0 && !(f.frequencies[i] > f.frequencies[i - 1]))
            throw ValidationError("ModelFit: frequencies must be strictly ascending");
    }
    f.c = vector_from(get_field<json>(j, "c"), "ModelFit c");
    const Eigen::Index R = f.c.size();
    f.a = matrix_from(get_field<json>(j, "a"), R, F, "ModelFit a");
    f.b = matrix_from(get_field<json>(j, "b"), R, F, "ModelFit b");
    f.da = matrix_from(get_field<json>(j, "da"), R, F, "ModelFit da");
    f.db = matrix_from(get_field<json>(j, "db"), R, F, "ModelFit db");
    f.dc = vector_from(get_field<json>(j, "dc"), "ModelFit dc");
    f.sigma2 = vector_from(get_field<json>(j, "sigma2"), "ModelFit sigma2");
    if (f.dc.size() != R || f.sigma2.size() != R) throw ValidationError("ModelFit: inconsistent trace counts");
    f.logP = get_field<double>(j, "logP");
    f.N = get_field<int>(j, "N");
    f.signal_length = get_field<double>(j, "signal_length");
    f.converged = get_field<bool>(j, "converged");
    f.overfit = get_field<bool>(j, "overfit");
    f.likelihood_clamped = get_field<bool>(j, "likelihood_clamped");
    return f;
}

// ---- reconstruction report ----

inline json to_json(const Reconstruction& rec) {
    json map = json::array();
    for (const auto& [u, v] : rec.assignment.map) map.push_back({u + 1, v + 1});
    json completion = json::array();
    for (int k = 0; k < kLevels; ++k)
        for (int l = k; l < kLevels; ++l) {
            const int r = trace_index(k, l);
            completion.push_back({{"k", k + 1},
                                  {"l", l + 1},
                                  {"residual", rec.svectors.completion_residual[r]},
                                  {"dominance", rec.svectors.dominance[r]},
                                  {"low_confidence", rec.svectors.low_confidence[r]}});
        }
    return {{"schema_version", kSchemaVersion},
            {"H", to_json(rec.H)},
            {"arrangement", rec.assignment.arrangement},
            {"map", map},
            {"arrangement_residuals", rec.assignment.residuals},
            {"inverted", rec.assignment.inverted},
            {"ambiguous", rec.assignment.ambiguous},
            {"not_four_level", rec.assignment.not_four_level},
            {"lambda_tilde", vector_json(rec.lambda_tilde)},
            {"constraint_violation", rec.constraint_violation},
            {"constraint_violation_refined", rec.phases.max_violation},
            {"vanishing_phases", rec.phases_initial.vanishing},
            {"completion", completion},
            {"low_confidence_pairs", rec.low_confidence_pairs},
            {"warnings", rec.warnings}};
}

// ---- phase estimation ----

inline json to_json(const PhaseEstimate& p) {
    return {{"deltas", {p.deltas[0], p.deltas[1], p.deltas[2]}},
            {"residual", p.residual},
            {"restarts_agreeing", p.restarts_agreeing},
            {"starts", p.starts},
            {"low_confidence", p.low_confidence}};
}

inline json to_json(const TomographyResult& r) {
    return {{"schema_version", kSchemaVersion},
            {"H", to_json(r.H)},
            {"estimate", to_json(r.estimate)},
            {"t_star", r.preparation.t_star},
            {"imbalance", r.preparation.imbalance},
            {"inverted", r.inverted},
            {"check_t", r.check_preparation.t_star},
            {"check_residual", r.check_residual},
            {"check_residual_other", r.check_residual_other}};
}

}  // namespace hamtomo::io
