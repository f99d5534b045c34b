// Command-line front end: experiments, CRN sweeps, the two-point analyzer,
// and file-level fit/predict.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ski/crn_study.hpp"
#include "ski/design.hpp"
#include "ski/desim.hpp"
#include "ski/estimation.hpp"
#include "ski/experiment.hpp"
#include "ski/io.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    unsigned threads = 0;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
    auto* opt = cmd->add_option("--config", c.config, "configuration file (JSON)");
    if (config_required) opt->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "override the master seed");
    cmd->add_option("--out", c.out, "output directory or file");
    cmd->add_option("--threads", c.threads, "worker threads")->check(CLI::Range(1u, 1024u));
}

int cmd_run_experiment(const Common& c) {
    ski::ExperimentConfig cfg = ski::load_experiment_config(c.config);
    if (c.seed) cfg.run_seed = *c.seed;
    if (!c.out.empty()) cfg.out_dir = c.out;
    if (c.threads) cfg.threads = c.threads;
    const auto res = ski::run_experiment(cfg);
    std::printf("%-10s %6s %-4s %14s %12s %5s\n", "space", "N", "method", "EMSE", "std_error", "fail");
    for (const auto& r : res.table)
        std::printf("%-10s %6d %-6s %14.6g %12.4g %5d\n", r.space.c_str(), r.N, ski::to_string(r.method).c_str(), r.emse,
                    r.std_error, r.failures);
    std::printf("wrote %s\n", (fs::path(cfg.out_dir) / "emse.csv").c_str());
    return 0;
}

int cmd_crn_sweep(const Common& c) {
    const std::string text = ski::io::read_file(c.config);
    ski::SweepConfig cfg = ski::parse_sweep_config(text);
    if (c.seed) cfg.seed = *c.seed;
    if (c.threads) cfg.threads = c.threads;
    std::string out = c.out;
    if (out.empty()) {
        const auto j = ski::io::parse_json(text);
        out = j.contains("output") ? j["output"].get<std::string>() : std::string("out_sweep");
    }
    const auto rows = ski::synthetic_sweep(cfg);
    ski::write_sweep_outputs(out, rows);
    std::printf("%8s %8s %8s %6s %10s %10s\n", "theta", "eps_sq", "zeta_sq", "omega", "ratio", "se");
    for (const auto& r : rows)
        if (r.omega == cfg.omegas.back() || std::abs(r.omega - 0.9) < 1e-12)
            std::printf("%8g %8g %8g %6g %10.4f %10.4f%s\n", r.theta, r.sigma_eps_sq, r.sigma_zeta_sq, r.omega,
                        r.ratio_mean, r.ratio_se, r.failed ? "  FAILED" : "");
    std::printf("wrote %s\n", (fs::path(out) / "crn_sweep.csv").c_str());
    return 0;
}

struct TwoPointArgs {
    ski::TwoPointModel m;
    double omega_min = 0.0;
    double omega_max = 1.0;
    int points = 101;
    std::string curve;
};

int cmd_two_point(const TwoPointArgs& a) {
    if (a.omega_min > a.omega_max) throw CLI::ValidationError("--omega-min must not exceed --omega-max");
    const ski::RegimeReport rep = ski::classify_regime(a.m);
    std::printf("regime: %s\n", ski::to_string(rep.regime).c_str());
    std::printf("threshold_low: %.17g\n", rep.threshold_low);
    std::printf("threshold_high: %.17g\n", rep.threshold_high);
    if (rep.omega_star) std::printf("omega_star: %.17g\n", *rep.omega_star);
    if (!a.curve.empty()) {
        ski::io::Table t;
        t.header = {"omega", "mse"};
        for (int i = 0; i < a.points; ++i) {
            ski::TwoPointModel m = a.m;
            m.omega = a.points == 1 ? a.omega_min : a.omega_min + (a.omega_max - a.omega_min) * i / (a.points - 1);
            t.rows.push_back({ski::io::fmt(m.omega), ski::io::fmt(ski::mse_two_point(m))});
        }
        ski::io::write_table(a.curve, t);
        std::printf("wrote %s\n", a.curve.c_str());
    }
    return 0;
}

int cmd_fit(const Common& c, const std::string& data_path, const std::string& method) {
    ski::FitConfig fit;
    if (!c.config.empty()) {
        const auto j = ski::io::parse_json(ski::io::read_file(c.config));
        if (j.contains("fit")) fit = ski::parse_fit_config(j["fit"]);
    }
    if (c.seed) fit.seed = *c.seed;
    if (c.threads) fit.threads = c.threads;
    const ski::Dataset data = ski::io::read_dataset(data_path);
    const ski::FitReport rep = ski::fit_mle(data, ski::BasisSpec::constant(), fit, ski::parse_method(method));
    const std::string out = c.out.empty() ? std::string("model.json") : c.out;
    ski::io::save_model(out, rep, data);
    std::printf("method: %s\nloglik: %.10g\nconverged: %s\niterations: %d\n", ski::to_string(rep.kind).c_str(),
                rep.loglik, rep.converged ? "yes" : "no", rep.iterations);
    for (const auto& [name, value] : rep.estimated_parameters()) std::printf("%s: %.10g\n", name.c_str(), value);
    std::printf("wrote %s\n", out.c_str());
    return 0;
}

int cmd_predict(const std::string& model_path, const std::string& points_path, const std::string& out) {
    const ski::io::LoadedModel m = ski::io::load_model(model_path);
    const ski::PointSet pts = ski::io::parse_points(ski::io::read_table(points_path));
    if (pts.dim() != m.data.dim())
        throw ski::InputError("points have dimension " + std::to_string(pts.dim()) + " but the model has " +
                              std::to_string(m.data.dim()));
    ski::io::Table t = ski::io::points_table(pts);
    t.header.push_back("mean");
    t.header.push_back("mse");
    for (ski::Index i = 0; i < pts.size(); ++i) {
        const auto p = ski::plugin_predict(m.report, m.data, pts[i]);
        t.rows[static_cast<std::size_t>(i)].push_back(ski::io::fmt(p.mean));
        t.rows[static_cast<std::size_t>(i)].push_back(ski::io::fmt(p.mse));
    }
    if (out.empty()) {
        std::fputs(t.to_string().c_str(), stdout);
    } else {
        ski::io::write_table(out, t);
        std::printf("wrote %s\n", out.c_str());
    }
    return 0;
}

int cmd_ground_truth(const Common& c) {
    ski::ExperimentConfig cfg = ski::load_experiment_config(c.config);
    if (c.seed) cfg.ground_truth.seed = *c.seed;
    if (!c.out.empty()) cfg.out_dir = c.out;
    if (c.threads) cfg.threads = c.threads;
    const fs::path out(cfg.out_dir);
    const fs::path cache = cfg.cache_dir.empty() ? out / "cache" : fs::path(cfg.cache_dir);
    for (std::size_t si = 0; si < cfg.spaces.size(); ++si) {
        const auto& ns = cfg.spaces[si];
        const ski::PointSet preds = ski::lhs(ns.space, cfg.K, ski::stream_seed(cfg.eval_seed, {si, 3}));
        const auto gt = ski::cached_ground_truth(preds, cfg.line, cfg.ground_truth, cache, cfg.threads);
        ski::io::Table t = ski::io::points_table(preds);
        t.header.insert(t.header.end(), {"z", "std_error", "replications"});
        for (ski::Index i = 0; i < preds.size(); ++i) {
            auto& row = t.rows[static_cast<std::size_t>(i)];
            row.push_back(ski::io::fmt(gt.estimate(i)));
            row.push_back(ski::io::fmt(gt.std_error(i)));
            row.push_back(std::to_string(gt.replications(i)));
        }
        ski::io::write_table(out / (ns.name + "_ground_truth_points.csv"), t);
        std::printf("%s: %lld points, mean z %.6g\n", ns.name.c_str(), static_cast<long long>(preds.size()),
                    gt.estimate.mean());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stochastic kriging with real observations: experiments and analysis"};
    app.require_subcommand(1);

    Common run_c, sweep_c, fit_c, gt_c;
    auto* run = app.add_subcommand("run-experiment", "design, simulate, fit, predict and score every method");
    add_common(run, run_c, true);

    auto* sweep = app.add_subcommand("crn-sweep", "EMSE ratio sweep over CRN correlation on synthetic surfaces");
    add_common(sweep, sweep_c, true);

    TwoPointArgs tp;
    auto* two = app.add_subcommand("two-point", "classify how MSE varies with CRN correlation in the two-point model");
    two->add_option("--rho", tp.m.rho, "scale between simulation and reality (nonzero)");
    two->add_option("--tau-m-sq", tp.m.tau_m_sq, "spatial variance of M")->check(CLI::PositiveNumber);
    two->add_option("--tau-w-sq", tp.m.tau_w_sq, "spatial variance of W")->check(CLI::NonNegativeNumber);
    two->add_option("--v", tp.m.v, "variance of each averaged simulation error")->check(CLI::PositiveNumber);
    two->add_option("--r0", tp.m.r0, "correlation between prediction and design points")->check(CLI::Range(0.0, 1.0));
    two->add_option("--r12", tp.m.r12, "correlation between the two design points")->check(CLI::Range(0.0, 1.0));
    two->add_option("--sigma-zeta-sq", tp.m.sigma_zeta_sq, "observation-error variance")->check(CLI::NonNegativeNumber);
    two->add_option("--omega-min", tp.omega_min, "curve start")->check(CLI::Range(0.0, 1.0));
    two->add_option("--omega-max", tp.omega_max, "curve end")->check(CLI::Range(0.0, 1.0));
    two->add_option("--points", tp.points, "curve points")->check(CLI::Range(1, 1000000));
    two->add_option("--curve", tp.curve, "write MSE*(omega) to this file");

    std::string data_path, method = "SKI";
    auto* fit = app.add_subcommand("fit", "maximum-likelihood fit of a dataset file");
    add_common(fit, fit_c, false);
    fit->add_option("--data", data_path, "dataset file (kind,point,x1..xd,value)")->required()->check(CLI::ExistingFile);
    fit->add_option("--method", method, "SKI, SK or GPR");

    std::string model_path, points_path, pred_out;
    auto* predict = app.add_subcommand("predict", "predict at points with a saved model");
    predict->add_option("--model", model_path, "model file")->required()->check(CLI::ExistingFile);
    predict->add_option("--points", points_path, "points file (x1..xd)")->required()->check(CLI::ExistingFile);
    predict->add_option("--out", pred_out, "output file (stdout when omitted)");

    auto* gt = app.add_subcommand("ground-truth", "high-effort real-system estimates at the prediction points");
    add_common(gt, gt_c, true);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) return cmd_run_experiment(run_c);
        if (*sweep) return cmd_crn_sweep(sweep_c);
        if (*two) return cmd_two_point(tp);
        if (*fit) return cmd_fit(fit_c, data_path, method);
        if (*predict) return cmd_predict(model_path, points_path, pred_out);
        if (*gt) return cmd_ground_truth(gt_c);
    } catch (const CLI::Error& e) {
        return app.exit(e);
    } catch (const ski::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ski::InputError& e) {
        std::fprintf(stderr, "input error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
