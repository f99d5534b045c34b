#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ski/errors.hpp"
#include "ski/kernels.hpp"
#include "ski/linalg.hpp"
#include "ski/metamodel.hpp"
#include "ski/parallel.hpp"
#include "ski/random.hpp"

namespace ski {

/// Two design points x1, x2 with CRN-correlated averaged errors v * [[1, w], [w, 1]],
/// one noisy observation at x1, and a prediction point with correlation r0 to
/// both design points in both fields.
struct TwoPointModel {
    double rho = 1.0;
    double tau_m_sq = 1.0;
    double tau_w_sq = 1.0;
    double v = 1.0;
    double r0 = 0.5;
    double r12 = 0.5;
    double sigma_zeta_sq = 0.1;
    double omega = 0.0;

    void validate() const {
        if (rho == 0.0 || !std::isfinite(rho)) throw InputError("two-point model needs rho != 0");
        if (!(tau_m_sq > 0.0) || !(tau_w_sq >= 0.0)) throw InputError("two-point model needs tau_M^2 > 0, tau_W^2 >= 0");
        if (!(v > 0.0)) throw InputError("two-point model needs v > 0");
        if (!(r0 > 0.0) || r0 > 1.0) throw InputError("two-point model needs 0 < r0 <= 1");
        if (!(r12 >= 0.0) || r12 > 1.0) throw InputError("two-point model needs 0 <= r12 <= 1");
        if (!(sigma_zeta_sq >= 0.0)) throw InputError("two-point model needs sigma_zeta^2 >= 0");
        if (!(omega >= 0.0) || omega > 1.0) throw InputError("omega must lie in [0, 1]");
    }
};

/// Closed-form MSE*(omega) of the SK-i predictor.
inline double mse_two_point(const TwoPointModel& m) {
    m.validate();
    const double tm = m.tau_m_sq, tw = m.tau_w_sq, v = m.v, r12 = m.r12, w = m.omega;
    const double rho2 = m.rho * m.rho;
    const double a = (tm + v) * (tm + v) - (tm * r12 + v * w) * (tm * r12 + v * w);
    const double b = (rho2 * tm + tw + m.sigma_zeta_sq) * a -
                     rho2 * tm * tm * ((tm + v) * (1.0 + r12 * r12) - 2.0 * r12 * (tm * r12 + v * w));
    if (!(b > 0.0)) throw NumericError("two-point covariance is not positive definite (B <= 0)", b);
    const double den = tm * (1.0 + r12) + v * (1.0 + w);
    const double r02 = m.r0 * m.r0;
    const double inner = rho2 * tm + tw - rho2 * tm * tm * (1.0 + r12) / den;
    return rho2 * tm + tw - 2.0 * rho2 * tm * tm * r02 / den - r02 * inner * inner * a / b;
}

/// dMSE*/domega has the sign of -H(omega); H is strictly increasing in omega.
inline double h_function(const TwoPointModel& m, double omega) {
    const double tm = m.tau_m_sq, tw = m.tau_w_sq, v = m.v, r12 = m.r12, w = omega;
    const double rho2 = m.rho * m.rho;
    const double a = (tm + v) * (tm + v) - (tm * r12 + v * w) * (tm * r12 + v * w);
    const double c = rho2 * tm * v * (1.0 + w) + tw * (tm * (1.0 + r12) + v * (1.0 + w));
    const double d = m.sigma_zeta_sq * a + rho2 * tm * tm * v * (1.0 - r12) * (r12 - w);
    return (tm + v) * (tm * r12 + v * w) * (1.0 - r12) * (1.0 - r12) * c * c -
           (1.0 - r12) * (tm * (1.0 - r12) + v * (1.0 - w)) * c * d - d * d;
}

enum class Regime { Decreasing, Increasing, IncreaseThenDecrease };

inline std::string to_string(Regime r) {
    switch (r) {
        case Regime::Decreasing: return "Decreasing";
        case Regime::Increasing: return "Increasing";
        case Regime::IncreaseThenDecrease: return "IncreaseThenDecrease";
    }
    return "?";
}

struct RegimeReport {
    Regime regime = Regime::Decreasing;
    double threshold_low = 0.0;
    double threshold_high = 0.0;
    std::optional<double> omega_star;
};

inline double regime_threshold_low(const TwoPointModel& m) {
    return m.tau_m_sq * m.tau_w_sq * m.r12 * (1.0 - m.r12) / (m.tau_m_sq * (1.0 - m.r12) + m.v);
}

inline double regime_threshold_high(const TwoPointModel& m) {
    return m.tau_w_sq * m.r12 + m.v * (m.rho * m.rho + m.tau_w_sq / m.tau_m_sq);
}

/// Shape of MSE*(omega) on [0, 1]; omega is ignored.
inline RegimeReport classify_regime(TwoPointModel m) {
    m.omega = 0.0;
    m.validate();
    RegimeReport rep;
    rep.threshold_low = regime_threshold_low(m);
    rep.threshold_high = regime_threshold_high(m);
    if (m.sigma_zeta_sq <= rep.threshold_low) {
        rep.regime = Regime::Decreasing;
    } else if (m.sigma_zeta_sq >= rep.threshold_high) {
        rep.regime = Regime::Increasing;
    } else {
        rep.regime = Regime::IncreaseThenDecrease;
        double lo = 0.0, hi = 1.0;
        while (hi - lo > 1e-10) {
            const double mid = 0.5 * (lo + hi);
            (h_function(m, mid) < 0.0 ? lo : hi) = mid;
        }
        rep.omega_star = 0.5 * (lo + hi);
    }
    return rep;
}

/// The same model as a generic two-design-point, one-observation SK-i instance
/// in the plane. Needs r12 > 0 and r0 <= r12^(1/4) for the geometry to exist.
struct TwoPointInstance {
    SkiParams params;
    NoiseModel noise;
    Dataset data;
    Point x0;
};

inline TwoPointInstance induced_instance(const TwoPointModel& m) {
    m.validate();
    if (!(m.r12 > 0.0)) throw InputError("the planar instance needs r12 > 0");
    if (m.r0 > std::pow(m.r12, 0.25) * (1.0 + 1e-14))
        throw InputError("the planar instance needs r0 <= r12^(1/4)");
    const double theta = 1.0;
    const double a2 = -std::log(m.r12) / (4.0 * theta);
    const double b2 = std::max(0.0, -std::log(m.r0) / theta - a2);
    const double a = std::sqrt(a2), b = std::sqrt(b2);

    TwoPointInstance inst;
    inst.params.rho = m.rho;
    inst.params.beta = Eigen::VectorXd::Zero(1);
    inst.params.gamma = Eigen::VectorXd::Zero(1);
    inst.params.kernel_m = KernelSpec::isotropic(m.tau_m_sq, theta);
    inst.params.kernel_w = KernelSpec::isotropic(m.tau_w_sq, theta);
    inst.params.sigma_zeta_sq = m.sigma_zeta_sq;
    Eigen::MatrixXd corr(2, 2);
    corr << 1.0, m.omega, m.omega, 1.0;
    inst.noise = NoiseModel{Eigen::VectorXd::Constant(2, m.v), corr};
    inst.data = Dataset::from_summary(PointSet{{a, b}, {-a, b}}, Eigen::VectorXd::Zero(2), Eigen::VectorXi::Ones(2),
                                      {0}, Eigen::VectorXd::Zero(1));
    inst.x0 = Eigen::Vector2d(0.0, 0.0);
    return inst;
}

struct SweepConfig {
    std::vector<double> omegas{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    std::vector<double> thetas{5.0, 10.0, 20.0, 30.0};
    std::vector<double> sigma_eps_sqs{1.0, 10.0};
    std::vector<double> sigma_zeta_sqs{0.01, 0.1, 10.0};
    int instances = 20;
    int macro_replications = 20;
    int replications = 10;
    double tau_m_sq = 1.0;
    double tau_w_sq = 1.0;
    int design_points = 11;    // equally spaced on [0, 1]
    int obs_stride = 2;        // every second design point is observed
    int prediction_points = 100;  // x0 = i / prediction_points, i = 1..prediction_points
    std::uint64_t seed = 20240601;
    unsigned threads = 1;

    void validate() const {
        if (omegas.empty() || omegas.front() != 0.0) throw ConfigError("the omega grid must start at 0");
        for (double w : omegas)
            if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("omega values must lie in [0, 1]");
        if (thetas.empty() || sigma_eps_sqs.empty() || sigma_zeta_sqs.empty())
            throw ConfigError("sweep grids must be non-empty");
        if (instances < 1 || macro_replications < 1 || replications < 1) throw ConfigError("sweep counts must be >= 1");
        if (design_points < 2 || obs_stride < 1 || prediction_points < 1) throw ConfigError("sweep geometry is invalid");
    }
};

struct SweepRow {
    double omega = 0.0;
    double theta = 0.0;
    double sigma_eps_sq = 0.0;
    double sigma_zeta_sq = 0.0;
    double ratio_mean = 0.0;
    double ratio_se = 0.0;
    int n_instances = 0;
    bool failed = false;
};

/// EMSE(omega) / EMSE(0) of the known-parameter SK-i predictor on random 1-D
/// surfaces Y = M, Z = M + W, averaged over instances. The surface and error
/// draws of an instance depend only on (seed, theta, instance), so every omega
/// and every noise level sees the same randomness.
inline std::vector<SweepRow> synthetic_sweep(const SweepConfig& cfg) {
    cfg.validate();
    const int kd = cfg.design_points;
    const int np = cfg.prediction_points;
    const int reps = cfg.replications;

    // Unique grid: design points and prediction points, merged by value.
    std::vector<double> grid;
    auto index_of = [&grid](double x) {
        for (std::size_t i = 0; i < grid.size(); ++i)
            if (std::abs(grid[i] - x) < 1e-12) return static_cast<Index>(i);
        grid.push_back(x);
        return static_cast<Index>(grid.size() - 1);
    };
    std::vector<Index> design_idx, pred_idx;
    for (int i = 0; i < kd; ++i) design_idx.push_back(index_of(static_cast<double>(i) / (kd - 1)));
    for (int i = 1; i <= np; ++i) pred_idx.push_back(index_of(static_cast<double>(i) / np));
    std::vector<Index> obs_index;
    for (int i = 0; i < kd; i += cfg.obs_stride) obs_index.push_back(i);
    const Index ell = static_cast<Index>(obs_index.size());

    Eigen::MatrixXd design_m(kd, 1), pred_m(np, 1), grid_m(static_cast<Index>(grid.size()), 1);
    for (int i = 0; i < kd; ++i) design_m(i, 0) = grid[static_cast<std::size_t>(design_idx[static_cast<std::size_t>(i)])];
    for (int i = 0; i < np; ++i) pred_m(i, 0) = grid[static_cast<std::size_t>(pred_idx[static_cast<std::size_t>(i)])];
    for (std::size_t i = 0; i < grid.size(); ++i) grid_m(static_cast<Index>(i), 0) = grid[i];
    const PointSet design(design_m), preds(pred_m), all(grid_m);

    const std::size_t nt = cfg.thetas.size(), ne = cfg.sigma_eps_sqs.size(), nz = cfg.sigma_zeta_sqs.size(),
                      nw = cfg.omegas.size();
    auto cell_id = [&](std::size_t t, std::size_t e, std::size_t z) { return (t * ne + e) * nz + z; };

    // Weights V^{-1} C per (cell, omega), shared by all instances.
    std::vector<std::vector<Eigen::MatrixXd>> weights(nt * ne * nz, std::vector<Eigen::MatrixXd>(nw));
    std::vector<bool> failed(nt * ne * nz, false);
    parallel_for(nt * ne * nz, cfg.threads, [&](std::size_t c) {
        const std::size_t t = c / (ne * nz), e = (c / nz) % ne, z = c % nz;
        SkiParams p;
        p.rho = 1.0;
        p.kernel_m = KernelSpec::isotropic(cfg.tau_m_sq, cfg.thetas[t]);
        p.kernel_w = KernelSpec::isotropic(cfg.tau_w_sq, cfg.thetas[t]);
        p.sigma_zeta_sq = cfg.sigma_zeta_sqs[z];
        const Dataset data = Dataset::from_summary(design, Eigen::VectorXd::Zero(kd), Eigen::VectorXi::Constant(kd, reps),
                                                   obs_index, Eigen::VectorXd::Zero(ell));
        try {
            for (std::size_t wi = 0; wi < nw; ++wi) {
                const double w = cfg.omegas[wi];
                Eigen::MatrixXd corr = Eigen::MatrixXd::Constant(kd, kd, w);
                corr.diagonal().setOnes();
                const FittedModel model(p, NoiseModel{Eigen::VectorXd::Constant(kd, cfg.sigma_eps_sqs[e]), corr}, data);
                weights[c][wi] = model.ski_weights(preds);
            }
        } catch (const NumericError&) {
            failed[c] = true;
        }
    });

    // ratios[cell][omega][instance]
    std::vector<std::vector<std::vector<double>>> ratios(
        nt * ne * nz, std::vector<std::vector<double>>(nw, std::vector<double>(static_cast<std::size_t>(cfg.instances))));

    parallel_for(nt * static_cast<std::size_t>(cfg.instances), cfg.threads, [&](std::size_t job) {
        const std::size_t t = job / static_cast<std::size_t>(cfg.instances);
        const std::size_t inst = job % static_cast<std::size_t>(cfg.instances);
        Rng rng = make_rng(cfg.seed, {0x5eeULL, t, inst});

        const KernelSpec km = KernelSpec::isotropic(cfg.tau_m_sq, cfg.thetas[t]);
        const KernelSpec kw = KernelSpec::isotropic(cfg.tau_w_sq, cfg.thetas[t]);
        const SpdFactor lm(cfg.tau_m_sq * corr_matrix(km, all));
        const SpdFactor lw(cfg.tau_w_sq * corr_matrix(kw, all));
        const Eigen::VectorXd m = lm.lower() * standard_normals(rng, all.size());
        const Eigen::VectorXd wf = lw.lower() * standard_normals(rng, all.size());
        const Eigen::VectorXd zf = m + wf;

        Eigen::VectorXd y_design(kd), z_obs(ell), z_pred(np);
        for (int i = 0; i < kd; ++i) y_design(i) = m(design_idx[static_cast<std::size_t>(i)]);
        for (Index j = 0; j < ell; ++j) z_obs(j) = zf(design_idx[static_cast<std::size_t>(obs_index[static_cast<std::size_t>(j)])]);
        for (int i = 0; i < np; ++i) z_pred(i) = zf(pred_idx[static_cast<std::size_t>(i)]);

        // Standardized draws per macro-replication: common factor, idiosyncratic
        // errors per (replication, point), observation errors.
        struct Draw {
            Eigen::VectorXd common;
            Eigen::MatrixXd idio;
            Eigen::VectorXd obs;
        };
        std::vector<Draw> draws;
        for (int r = 0; r < cfg.macro_replications; ++r) {
            Draw d;
            d.common = standard_normals(rng, reps);
            d.idio = Eigen::MatrixXd(reps, kd);
            for (int j = 0; j < reps; ++j) d.idio.row(j) = standard_normals(rng, kd).transpose();
            d.obs = standard_normals(rng, ell);
            draws.push_back(std::move(d));
        }

        for (std::size_t e = 0; e < ne; ++e)
            for (std::size_t z = 0; z < nz; ++z) {
                const std::size_t c = cell_id(t, e, z);
                if (failed[c]) continue;
                const double se = std::sqrt(cfg.sigma_eps_sqs[e]);
                const double sz = std::sqrt(cfg.sigma_zeta_sqs[z]);
                std::vector<double> emse(nw, 0.0);
                for (std::size_t wi = 0; wi < nw; ++wi) {
                    const double w = cfg.omegas[wi];
                    const double a = std::sqrt(w), b = std::sqrt(1.0 - w);
                    double acc = 0.0;
                    Eigen::VectorXd data(kd + ell);
                    for (const Draw& d : draws) {
                        // eps_j(x_i) = sqrt(w) xi_0j + sqrt(1-w) xi_ij, averaged over replications.
                        const Eigen::VectorXd eps_bar =
                            se * (a * d.common.mean() * Eigen::VectorXd::Ones(kd) + b * d.idio.colwise().mean().transpose());
                        data.head(kd) = y_design + eps_bar;
                        data.tail(ell) = z_obs + sz * d.obs;
                        const Eigen::VectorXd pred = weights[c][wi].transpose() * data;
                        acc += (pred - z_pred).squaredNorm() / np;
                    }
                    emse[wi] = acc / cfg.macro_replications;
                }
                for (std::size_t wi = 0; wi < nw; ++wi) ratios[c][wi][inst] = emse[wi] / emse[0];
            }
    });

    std::vector<SweepRow> rows;
    for (std::size_t t = 0; t < nt; ++t)
        for (std::size_t e = 0; e < ne; ++e)
            for (std::size_t z = 0; z < nz; ++z) {
                const std::size_t c = cell_id(t, e, z);
                for (std::size_t wi = 0; wi < nw; ++wi) {
                    SweepRow row;
                    row.omega = cfg.omegas[wi];
                    row.theta = cfg.thetas[t];
                    row.sigma_eps_sq = cfg.sigma_eps_sqs[e];
                    row.sigma_zeta_sq = cfg.sigma_zeta_sqs[z];
                    row.failed = failed[c];
                    if (!failed[c]) {
                        const auto& v = ratios[c][wi];
                        const double n = static_cast<double>(v.size());
                        double mean = 0.0;
                        for (double x : v) mean += x;
                        mean /= n;
                        double ss = 0.0;
                        for (double x : v) ss += (x - mean) * (x - mean);
                        row.ratio_mean = mean;
                        row.ratio_se = v.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
                        row.n_instances = static_cast<int>(v.size());
                    }
                    rows.push_back(row);
                }
            }
    return rows;
}

}  // namespace ski
