#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ski/crn_study.hpp"
#include "ski/design.hpp"
#include "ski/desim.hpp"
#include "ski/errors.hpp"
#include "ski/estimation.hpp"
#include "ski/io.hpp"
#include "ski/metamodel.hpp"
#include "ski/parallel.hpp"
#include "ski/random.hpp"

namespace ski {

namespace fs = std::filesystem;
using nlohmann::json;

struct NamedSpace {
    std::string name;
    DesignSpace space;
};

struct ExperimentConfig {
    std::vector<NamedSpace> spaces;
    Index k = 10;
    Index ell = 5;
    std::uint64_t design_seed = 11;
    TwoStageConfig budget;
    LineConfig line;
    StreamMode sim_streams = StreamMode::Independent;
    std::vector<Method> methods{Method::SK, Method::GPR, Method::SKI};
    Index K = 50;
    int R = 10;
    std::uint64_t eval_seed = 5;
    std::uint64_t run_seed = 1;
    GroundTruthConfig ground_truth;
    std::string out_dir = "out";
    std::string cache_dir;  // defaults to <out_dir>/cache
    bool write_datasets = false;
    unsigned threads = 1;
};

namespace detail {

/// Reads `key` from `obj` if present, reporting type errors with the key path.
template <typename T>
void read_opt(const json& obj, const char* key, T& out, const std::string& path) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path + "." + key + " has the wrong type");
    }
}

inline void check_keys(const json& obj, const std::vector<std::string>& allowed, const std::string& path) {
    if (!obj.is_object()) throw ConfigError(path + " must be an object");
    for (const auto& [k, v] : obj.items())
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
            throw ConfigError("unknown key " + path + "." + k);
}

inline std::vector<double> read_vec(const json& obj, const char* key, const std::string& path) {
    try {
        return obj.at(key).get<std::vector<double>>();
    } catch (const json::exception&) {
        throw ConfigError(path + "." + key + " must be an array of numbers");
    }
}

/// Line number of the first occurrence of "key" in the text, for messages
/// about semantically invalid values.
inline int line_of_key(const std::string& text, const std::string& key) {
    const auto pos = text.find("\"" + key + "\"");
    if (pos == std::string::npos) return 0;
    return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n'));
}

}  // namespace detail

inline FitConfig parse_fit_config(const json& f, const std::string& path = "fit") {
    detail::check_keys(f, {"starts", "tolerance", "max_iterations", "seed", "isotropic"}, path);
    FitConfig c;
    detail::read_opt(f, "starts", c.starts, path);
    detail::read_opt(f, "tolerance", c.tolerance, path);
    detail::read_opt(f, "max_iterations", c.max_iterations, path);
    detail::read_opt(f, "seed", c.seed, path);
    detail::read_opt(f, "isotropic", c.isotropic, path);
    if (c.starts < 1 || c.max_iterations < 1 || !(c.tolerance > 0.0)) throw ConfigError(path + " values out of range");
    return c;
}

inline QuadratureConfig parse_quadrature(const json& q) {
    detail::check_keys(q, {"scheme", "gl_nodes", "sobol_points"}, "quadrature");
    QuadratureConfig c;
    std::string scheme = "auto";
    detail::read_opt(q, "scheme", scheme, "quadrature");
    if (scheme == "auto") c.scheme = QuadratureScheme::Auto;
    else if (scheme == "gauss_legendre") c.scheme = QuadratureScheme::GaussLegendre;
    else if (scheme == "sobol") c.scheme = QuadratureScheme::Sobol;
    else throw ConfigError("quadrature.scheme must be auto, gauss_legendre or sobol");
    detail::read_opt(q, "gl_nodes", c.gl_nodes, "quadrature");
    detail::read_opt(q, "sobol_points", c.sobol_points, "quadrature");
    c.validate();
    return c;
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
    const json j = io::parse_json(text);
    ExperimentConfig c;
    try {
        detail::check_keys(j, {"spaces", "design", "budget", "line", "fit", "methods", "evaluation", "quadrature",
                               "output", "threads", "seed", "comment"},
                           "config");
        if (!j.contains("spaces") || !j["spaces"].is_array() || j["spaces"].empty())
            throw ConfigError("config.spaces must be a non-empty array", detail::line_of_key(text, "spaces"));
        for (const auto& s : j["spaces"]) {
            detail::check_keys(s, {"name", "lo", "hi"}, "spaces[]");
            NamedSpace ns;
            ns.name = s.value("name", "space" + std::to_string(c.spaces.size() + 1));
            const auto lo = detail::read_vec(s, "lo", "spaces[]");
            const auto hi = detail::read_vec(s, "hi", "spaces[]");
            ns.space.lo = Eigen::Map<const Eigen::VectorXd>(lo.data(), static_cast<Index>(lo.size()));
            ns.space.hi = Eigen::Map<const Eigen::VectorXd>(hi.data(), static_cast<Index>(hi.size()));
            try {
                ns.space.validate();
            } catch (const InputError& e) {
                throw ConfigError(std::string("space ") + ns.name + ": " + e.what(), detail::line_of_key(text, "lo"));
            }
            if (ns.space.dim() != 2 * kStations)
                throw ConfigError("space " + ns.name + " must have 6 coordinates", detail::line_of_key(text, "lo"));
            c.spaces.push_back(ns);
        }
        if (j.contains("design")) {
            const json& d = j["design"];
            detail::check_keys(d, {"k", "ell", "seed"}, "design");
            detail::read_opt(d, "k", c.k, "design");
            detail::read_opt(d, "ell", c.ell, "design");
            detail::read_opt(d, "seed", c.design_seed, "design");
            if (c.k < 1 || c.ell < 1 || c.ell > c.k)
                throw ConfigError("design needs k >= 1 and 1 <= ell <= k", detail::line_of_key(text, "design"));
        }
        if (j.contains("budget")) {
            const json& b = j["budget"];
            detail::check_keys(b, {"N", "n0", "real_budget", "real_n0"}, "budget");
            detail::read_opt(b, "N", c.budget.budget, "budget");
            detail::read_opt(b, "n0", c.budget.n0, "budget");
            detail::read_opt(b, "real_budget", c.budget.real_budget, "budget");
            detail::read_opt(b, "real_n0", c.budget.real_n0, "budget");
            if (c.budget.n0 < 2 || c.budget.real_n0 < 2 || c.budget.budget < c.k * c.budget.n0 ||
                c.budget.real_budget < c.ell * c.budget.real_n0)
                throw ConfigError("budget must satisfy N >= k*n0, real_budget >= ell*real_n0, n0 >= 2",
                                  detail::line_of_key(text, "budget"));
        }
        if (j.contains("line")) {
            const json& l = j["line"];
            detail::check_keys(l, {"arrival_rate", "capacity", "horizon", "simulation_streams"}, "line");
            detail::read_opt(l, "arrival_rate", c.line.arrival_rate, "line");
            detail::read_opt(l, "horizon", c.line.horizon, "line");
            if (l.contains("capacity")) {
                const auto cap = l["capacity"].get<std::vector<int>>();
                if (cap.size() != kStations) throw ConfigError("line.capacity needs 3 entries", detail::line_of_key(text, "capacity"));
                for (int s = 0; s < kStations; ++s) c.line.capacity[static_cast<std::size_t>(s)] = cap[static_cast<std::size_t>(s)];
            }
            std::string mode = "independent";
            detail::read_opt(l, "simulation_streams", mode, "line");
            if (mode == "independent") c.sim_streams = StreamMode::Independent;
            else if (mode == "crn") c.sim_streams = StreamMode::Crn;
            else throw ConfigError("line.simulation_streams must be independent or crn",
                                   detail::line_of_key(text, "simulation_streams"));
            if (!(c.line.arrival_rate > 0.0) || !(c.line.horizon > 0.0))
                throw ConfigError("line rates and horizon must be > 0", detail::line_of_key(text, "line"));
        }
        if (j.contains("fit")) c.budget.fit = parse_fit_config(j["fit"]);
        if (j.contains("quadrature")) c.budget.quad = parse_quadrature(j["quadrature"]);
        if (j.contains("methods")) {
            c.methods.clear();
            for (const auto& m : j["methods"]) {
                try {
                    c.methods.push_back(parse_method(m.get<std::string>()));
                } catch (const std::exception&) {
                    throw ConfigError("unknown method " + m.dump(), detail::line_of_key(text, "methods"));
                }
            }
            if (c.methods.empty()) throw ConfigError("methods must not be empty", detail::line_of_key(text, "methods"));
        }
        if (j.contains("evaluation")) {
            const json& e = j["evaluation"];
            detail::check_keys(e, {"K", "R", "seed", "ground_truth"}, "evaluation");
            detail::read_opt(e, "K", c.K, "evaluation");
            detail::read_opt(e, "R", c.R, "evaluation");
            detail::read_opt(e, "seed", c.eval_seed, "evaluation");
            if (e.contains("ground_truth")) {
                const json& g = e["ground_truth"];
                detail::check_keys(g, {"rel_se", "batch", "max_replications", "seed"}, "evaluation.ground_truth");
                detail::read_opt(g, "rel_se", c.ground_truth.rel_se, "evaluation.ground_truth");
                detail::read_opt(g, "batch", c.ground_truth.batch, "evaluation.ground_truth");
                detail::read_opt(g, "max_replications", c.ground_truth.max_replications, "evaluation.ground_truth");
                detail::read_opt(g, "seed", c.ground_truth.seed, "evaluation.ground_truth");
            }
            if (c.K < 1 || c.R < 1) throw ConfigError("evaluation needs K >= 1 and R >= 1", detail::line_of_key(text, "evaluation"));
        }
        if (j.contains("output")) {
            const json& o = j["output"];
            detail::check_keys(o, {"dir", "cache_dir", "write_datasets"}, "output");
            detail::read_opt(o, "dir", c.out_dir, "output");
            detail::read_opt(o, "cache_dir", c.cache_dir, "output");
            detail::read_opt(o, "write_datasets", c.write_datasets, "output");
        }
        detail::read_opt(j, "seed", c.run_seed, "config");
        detail::read_opt(j, "threads", c.threads, "config");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid value: ") + e.what());
    }
    return c;
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
    return parse_experiment_config(io::read_file(path));
}

struct EmseRow {
    std::string space;
    int N = 0;
    Method method = Method::SKI;
    double emse = 0.0;
    double std_error = 0.0;
    int macro_replications = 0;
    int failures = 0;
};

struct PredictionRecord {
    std::string space;
    int rep = 0;
    Method method = Method::SKI;
    Index point = 0;
    double mean = 0.0;
    double mse = 0.0;
};

struct ExperimentResult {
    std::vector<EmseRow> table;
    std::vector<PredictionRecord> predictions;
};

/// Ground truth at the prediction points, cached on disk by a hash of
/// everything that determines it.
inline GroundTruth cached_ground_truth(const PointSet& pts, const LineConfig& line, const GroundTruthConfig& cfg,
                                       const fs::path& cache_dir, unsigned threads) {
    std::string key = "gt-v1|" + io::fmt(line.arrival_rate) + "|" + io::fmt(line.horizon);
    for (int s = 0; s < kStations; ++s) key += "|" + std::to_string(line.capacity[static_cast<std::size_t>(s)]);
    key += "|" + io::fmt(cfg.rel_se) + "|" + std::to_string(cfg.batch) + "|" + std::to_string(cfg.max_replications) +
           "|" + std::to_string(cfg.seed);
    for (Index i = 0; i < pts.size(); ++i)
        for (Index p = 0; p < pts.dim(); ++p) key += "|" + io::fmt(pts.matrix()(i, p));
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(io::fnv1a(key)));
    const fs::path file = cache_dir / (std::string("ground_truth_") + hex + ".csv");
    if (fs::exists(file)) {
        const io::Table t = io::read_table(file);
        if (static_cast<Index>(t.rows.size()) == pts.size()) {
            GroundTruth gt{Eigen::VectorXd(pts.size()), Eigen::VectorXd(pts.size()), Eigen::VectorXi(pts.size())};
            for (std::size_t r = 0; r < t.rows.size(); ++r) {
                gt.estimate(static_cast<Index>(r)) = t.number(r, "z");
                gt.std_error(static_cast<Index>(r)) = t.number(r, "std_error");
                gt.replications(static_cast<Index>(r)) = static_cast<int>(t.number(r, "replications"));
            }
            return gt;
        }
    }
    GroundTruth gt = ground_truth(pts, SystemModel::Real, line, cfg, threads);
    io::Table t;
    t.header = {"point", "z", "std_error", "replications"};
    for (Index i = 0; i < pts.size(); ++i)
        t.rows.push_back({io::fmt(static_cast<long long>(i)), io::fmt(gt.estimate(i)), io::fmt(gt.std_error(i)),
                          io::fmt(static_cast<long long>(gt.replications(i)))});
    io::write_table(file, t);
    return gt;
}

/// Fit for one method on a macro-replication's data. SK-i reuses the fit from
/// the two-stage design.
inline FitReport fit_for_method(Method m, const TwoStageResult& ts, const FitConfig& fit) {
    if (m == Method::SKI) return ts.fit;
    return fit_mle(ts.data, BasisSpec::constant(), fit, m);
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    const fs::path out(cfg.out_dir);
    const fs::path cache = cfg.cache_dir.empty() ? out / "cache" : fs::path(cfg.cache_dir);
    fs::create_directories(out);
    ExperimentResult result;

    for (std::size_t si = 0; si < cfg.spaces.size(); ++si) {
        const NamedSpace& ns = cfg.spaces[si];
        const PointSet design = lhs(ns.space, cfg.k, stream_seed(cfg.design_seed, {si, 1}));
        const std::vector<Index> obs = choose_observations(cfg.k, cfg.ell, stream_seed(cfg.design_seed, {si, 2}));
        const PointSet preds = lhs(ns.space, cfg.K, stream_seed(cfg.eval_seed, {si, 3}));
        io::write_table(out / (ns.name + "_design.csv"), io::points_table(design));
        {
            io::Table t;
            t.header = {"obs", "design_index"};
            for (std::size_t j = 0; j < obs.size(); ++j)
                t.rows.push_back({std::to_string(j), std::to_string(obs[j])});
            io::write_table(out / (ns.name + "_observations.csv"), t);
        }
        io::write_table(out / (ns.name + "_prediction_points.csv"), io::points_table(preds));

        const GroundTruth gt = cached_ground_truth(preds, cfg.line, cfg.ground_truth, cache, cfg.threads);
        io::write_table(out / (ns.name + "_ground_truth.csv"), [&] {
            io::Table t;
            t.header = {"point", "z", "std_error"};
            for (Index i = 0; i < preds.size(); ++i)
                t.rows.push_back({io::fmt(static_cast<long long>(i)), io::fmt(gt.estimate(i)), io::fmt(gt.std_error(i))});
            return t;
        }());

        const auto sim_lines = prepare_lines(design, SystemModel::Inadequate, cfg.line);
        const auto real_lines = prepare_lines(design.subset(obs), SystemModel::Real, cfg.line);

        const std::size_t nm = cfg.methods.size();
        const auto R = static_cast<std::size_t>(cfg.R);
        std::vector<std::vector<std::optional<std::vector<PredictionResult>>>> preds_by(R);
        std::vector<std::vector<FitReport>> fits_by(R);
        std::vector<std::vector<std::string>> errors_by(R);
        std::vector<std::optional<Dataset>> data_by(R);

        parallel_for(R, cfg.threads, [&](std::size_t r) {
            const std::uint64_t sim_master = stream_seed(cfg.run_seed, {si, r, 0x51});
            const std::uint64_t real_master = stream_seed(cfg.run_seed, {si, r, 0x7e});
            const ReplicationSource sim = [&](Index i, int count, int first) {
                return replicate(sim_lines[static_cast<std::size_t>(i)], cfg.sim_streams, sim_master,
                                 static_cast<std::uint64_t>(i), count, first);
            };
            const ReplicationSource real = [&](Index j, int count, int first) {
                return replicate(real_lines[static_cast<std::size_t>(j)], StreamMode::Independent, real_master,
                                 static_cast<std::uint64_t>(j), count, first);
            };
            preds_by[r].resize(nm);
            fits_by[r].resize(nm);
            errors_by[r].resize(nm);
            TwoStageResult ts;
            try {
                ts = two_stage(sim, real, design, obs, ns.space, cfg.budget);
            } catch (const Error& e) {
                for (std::size_t m = 0; m < nm; ++m) errors_by[r][m] = std::string("two-stage design failed: ") + e.what();
                return;
            }
            data_by[r] = ts.data;
            for (std::size_t m = 0; m < nm; ++m) {
                try {
                    FitReport fit = fit_for_method(cfg.methods[m], ts, cfg.budget.fit);
                    std::vector<PredictionResult> p;
                    p.reserve(static_cast<std::size_t>(preds.size()));
                    for (Index i = 0; i < preds.size(); ++i) p.push_back(plugin_predict(fit, ts.data, preds[i]));
                    preds_by[r][m] = std::move(p);
                    fits_by[r][m] = std::move(fit);
                } catch (const Error& e) {
                    errors_by[r][m] = e.what();
                }
            }
        });

        io::Table fits_t;
        fits_t.header = {"rep", "method", "parameter", "value"};
        io::Table pred_t;
        pred_t.header = {"rep", "method", "point", "mean", "mse", "truth"};
        io::Table err_t;
        err_t.header = {"rep", "method", "message"};
        for (std::size_t m = 0; m < nm; ++m) {
            EmseRow row;
            row.space = ns.name;
            row.N = cfg.budget.budget;
            row.method = cfg.methods[m];
            std::vector<double> per_rep;
            for (std::size_t r = 0; r < R; ++r) {
                if (!preds_by[r][m]) {
                    ++row.failures;
                    std::string msg = errors_by[r][m];
                    std::replace(msg.begin(), msg.end(), ',', ';');
                    std::replace(msg.begin(), msg.end(), '\n', ' ');
                    err_t.rows.push_back({std::to_string(r), to_string(cfg.methods[m]), msg});
                    continue;
                }
                double acc = 0.0;
                const auto& p = *preds_by[r][m];
                for (Index i = 0; i < preds.size(); ++i) {
                    const double e = p[static_cast<std::size_t>(i)].mean - gt.estimate(i);
                    acc += e * e;
                    pred_t.rows.push_back({std::to_string(r), to_string(cfg.methods[m]), std::to_string(i),
                                           io::fmt(p[static_cast<std::size_t>(i)].mean),
                                           io::fmt(p[static_cast<std::size_t>(i)].mse), io::fmt(gt.estimate(i))});
                    result.predictions.push_back({ns.name, static_cast<int>(r), cfg.methods[m], i,
                                                  p[static_cast<std::size_t>(i)].mean, p[static_cast<std::size_t>(i)].mse});
                }
                per_rep.push_back(acc / static_cast<double>(preds.size()));
                for (const auto& [name, value] : fits_by[r][m].estimated_parameters())
                    fits_t.rows.push_back({std::to_string(r), to_string(cfg.methods[m]), name, io::fmt(value)});
                fits_t.rows.push_back({std::to_string(r), to_string(cfg.methods[m]), "loglik", io::fmt(fits_by[r][m].loglik)});
                fits_t.rows.push_back({std::to_string(r), to_string(cfg.methods[m]), "converged",
                                       fits_by[r][m].converged ? "1" : "0"});
            }
            row.macro_replications = static_cast<int>(per_rep.size());
            if (!per_rep.empty()) {
                double mean = 0.0;
                for (double v : per_rep) mean += v;
                mean /= static_cast<double>(per_rep.size());
                double ss = 0.0;
                for (double v : per_rep) ss += (v - mean) * (v - mean);
                row.emse = mean;
                row.std_error = per_rep.size() > 1 ? std::sqrt(ss / (per_rep.size() - 1) / per_rep.size()) : 0.0;
            } else {
                row.emse = std::numeric_limits<double>::quiet_NaN();
                row.std_error = std::numeric_limits<double>::quiet_NaN();
            }
            result.table.push_back(row);
        }
        io::write_table(out / (ns.name + "_fits.csv"), fits_t);
        io::write_table(out / (ns.name + "_predictions.csv"), pred_t);
        if (!err_t.rows.empty()) io::write_table(out / (ns.name + "_errors.csv"), err_t);
        if (cfg.write_datasets)
            for (std::size_t r = 0; r < R; ++r)
                if (data_by[r]) io::write_dataset(out / (ns.name + "_dataset_rep" + std::to_string(r) + ".csv"), *data_by[r]);
    }

    io::Table t;
    t.header = {"design_space", "N", "method", "emse", "std_error", "macro_replications", "failures"};
    for (const auto& r : result.table)
        t.rows.push_back({r.space, std::to_string(r.N), to_string(r.method), io::fmt(r.emse), io::fmt(r.std_error),
                          std::to_string(r.macro_replications), std::to_string(r.failures)});
    io::write_table(out / "emse.csv", t);
    return result;
}

// ---- CRN sweep config ----

inline SweepConfig parse_sweep_config(const std::string& text) {
    const json j = io::parse_json(text);
    SweepConfig c;
    try {
        detail::check_keys(j, {"omegas", "thetas", "sigma_eps_sq", "sigma_zeta_sq", "instances", "macro_replications",
                               "replications", "tau_m_sq", "tau_w_sq", "design_points", "obs_stride",
                               "prediction_points", "seed", "threads", "output", "comment"},
                           "config");
        if (j.contains("omegas")) c.omegas = detail::read_vec(j, "omegas", "config");
        if (j.contains("thetas")) c.thetas = detail::read_vec(j, "thetas", "config");
        if (j.contains("sigma_eps_sq")) c.sigma_eps_sqs = detail::read_vec(j, "sigma_eps_sq", "config");
        if (j.contains("sigma_zeta_sq")) c.sigma_zeta_sqs = detail::read_vec(j, "sigma_zeta_sq", "config");
        detail::read_opt(j, "instances", c.instances, "config");
        detail::read_opt(j, "macro_replications", c.macro_replications, "config");
        detail::read_opt(j, "replications", c.replications, "config");
        detail::read_opt(j, "tau_m_sq", c.tau_m_sq, "config");
        detail::read_opt(j, "tau_w_sq", c.tau_w_sq, "config");
        detail::read_opt(j, "design_points", c.design_points, "config");
        detail::read_opt(j, "obs_stride", c.obs_stride, "config");
        detail::read_opt(j, "prediction_points", c.prediction_points, "config");
        detail::read_opt(j, "seed", c.seed, "config");
        detail::read_opt(j, "threads", c.threads, "config");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid value: ") + e.what());
    }
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(e.what(), detail::line_of_key(text, "omegas"));
    }
    return c;
}

/// Writes the sweep table plus one (omega, ratio) curve file per cell.
inline void write_sweep_outputs(const fs::path& dir, const std::vector<SweepRow>& rows) {
    io::write_table(dir / "crn_sweep.csv", io::sweep_table(rows));
    std::map<std::tuple<double, double, double>, io::Table> curves;
    for (const auto& r : rows) {
        auto& t = curves[{r.theta, r.sigma_eps_sq, r.sigma_zeta_sq}];
        if (t.header.empty()) t.header = {"omega", "ratio", "ratio_se"};
        t.rows.push_back({io::fmt(r.omega), r.failed ? "nan" : io::fmt(r.ratio_mean), r.failed ? "nan" : io::fmt(r.ratio_se)});
    }
    auto short_num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", v);
        return std::string(buf);
    };
    for (const auto& [key, t] : curves) {
        const auto& [theta, se, sz] = key;
        io::write_table(dir / "curves" /
                            ("theta" + short_num(theta) + "_eps" + short_num(se) + "_zeta" + short_num(sz) + ".csv"),
                        t);
    }
}

}  // namespace ski
