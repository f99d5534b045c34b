#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ski/errors.hpp"
#include "ski/kernels.hpp"
#include "ski/linalg.hpp"

namespace ski {

enum class Method { SK, GPR, SKI };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::SK: return "SK";
        case Method::GPR: return "GPR";
        case Method::SKI: return "SKI";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "SK") return Method::SK;
    if (s == "GPR") return Method::GPR;
    if (s == "SKI" || s == "SK-i") return Method::SKI;
    throw InputError("unknown method '" + s + "' (expected SK, GPR or SKI)");
}

/// Design points plus the indices of those where the real system is observed.
struct Geometry {
    PointSet design;
    std::vector<Index> obs_index;

    [[nodiscard]] Index k() const noexcept { return design.size(); }
    [[nodiscard]] Index ell() const noexcept { return static_cast<Index>(obs_index.size()); }
    [[nodiscard]] PointSet obs_points() const { return design.subset(obs_index); }

    void validate() const {
        if (design.size() == 0) throw InputError("at least one design point is required");
        std::vector<Index> sorted = obs_index;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw InputError("observation indices must be distinct");
        for (Index i : obs_index)
            if (i < 0 || i >= design.size())
                throw InputError("observation index " + std::to_string(i) + " is not a design point");
    }
};

/// Simulation replications at every design point and real-system observations
/// at a subset of them. Observation j was taken at design point obs_index[j].
struct Dataset {
    PointSet design;
    std::vector<std::vector<double>> replications;  // empty when built from summaries
    Eigen::VectorXd ybar;
    Eigen::VectorXi counts;
    std::vector<Index> obs_index;
    Eigen::VectorXd z;

    static Dataset from_replications(PointSet design, std::vector<std::vector<double>> reps,
                                     std::vector<Index> obs_index = {}, Eigen::VectorXd z = Eigen::VectorXd()) {
        Dataset d;
        if (static_cast<Index>(reps.size()) != design.size())
            throw InputError("need one replication list per design point");
        d.ybar.resize(design.size());
        d.counts.resize(design.size());
        for (Index i = 0; i < design.size(); ++i) {
            const auto& r = reps[static_cast<std::size_t>(i)];
            if (r.empty()) throw InputError("design point " + std::to_string(i) + " has no replications");
            double s = 0.0;
            for (double v : r) s += v;
            d.ybar(i) = s / static_cast<double>(r.size());
            d.counts(i) = static_cast<int>(r.size());
        }
        d.design = std::move(design);
        d.replications = std::move(reps);
        d.obs_index = std::move(obs_index);
        d.z = std::move(z);
        d.validate();
        return d;
    }

    static Dataset from_summary(PointSet design, Eigen::VectorXd ybar, Eigen::VectorXi counts,
                                std::vector<Index> obs_index = {}, Eigen::VectorXd z = Eigen::VectorXd()) {
        Dataset d;
        d.design = std::move(design);
        d.ybar = std::move(ybar);
        d.counts = std::move(counts);
        d.obs_index = std::move(obs_index);
        d.z = std::move(z);
        d.validate();
        return d;
    }

    [[nodiscard]] Index k() const noexcept { return design.size(); }
    [[nodiscard]] Index ell() const noexcept { return static_cast<Index>(obs_index.size()); }
    [[nodiscard]] Index dim() const noexcept { return design.dim(); }
    [[nodiscard]] bool has_replications() const noexcept { return !replications.empty(); }
    [[nodiscard]] PointSet obs_points() const { return design.subset(obs_index); }
    [[nodiscard]] Geometry geometry() const { return Geometry{design, obs_index}; }

    [[nodiscard]] Dataset without_observations() const {
        Dataset d = *this;
        d.obs_index.clear();
        d.z.resize(0);
        return d;
    }

    void validate() const {
        geometry().validate();
        if (ybar.size() != k() || counts.size() != k())
            throw InputError("dataset needs one mean and one replication count per design point");
        for (Index i = 0; i < k(); ++i)
            if (counts(i) < 1) throw InputError("design point " + std::to_string(i) + " has n_i < 1");
        if (z.size() != ell())
            throw InputError("dataset has " + std::to_string(z.size()) + " observations but " +
                             std::to_string(ell()) + " observation indices");
    }
};

/// Trend bases: f for the simulation surface, g for the discrepancy.
struct BasisSpec {
    using Fn = std::function<Eigen::VectorXd(const Point&)>;

    Fn f;
    Index f_dim = 1;
    Fn g;
    Index g_dim = 1;

    static BasisSpec constant() {
        const Fn one = [](const Point&) { return Eigen::VectorXd::Ones(1); };
        return BasisSpec{one, 1, one, 1};
    }

    [[nodiscard]] Eigen::MatrixXd f_matrix(const PointSet& pts) const { return eval(f, f_dim, pts); }
    [[nodiscard]] Eigen::MatrixXd g_matrix(const PointSet& pts) const { return eval(g, g_dim, pts); }

private:
    static Eigen::MatrixXd eval(const Fn& fn, Index dim, const PointSet& pts) {
        Eigen::MatrixXd m(pts.size(), dim);
        for (Index i = 0; i < pts.size(); ++i) {
            const Eigen::VectorXd v = fn(pts[i]);
            if (v.size() != dim) throw InputError("basis function returned wrong dimension");
            m.row(i) = v.transpose();
        }
        return m;
    }
};

/// Xi = (rho, beta, gamma, tau_M^2, tau_W^2, theta_M, theta_W, sigma_zeta^2).
struct SkiParams {
    double rho = 1.0;
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(1);
    Eigen::VectorXd gamma = Eigen::VectorXd::Zero(1);
    KernelSpec kernel_m;
    KernelSpec kernel_w;
    double sigma_zeta_sq = 0.0;

    [[nodiscard]] double prior_variance() const {
        return rho * rho * kernel_m.spatial_variance + kernel_w.spatial_variance;
    }

    void validate(Index dim, const BasisSpec& basis) const {
        if (!std::isfinite(rho)) throw InputError("rho must be finite");
        if (!(kernel_m.spatial_variance > 0.0)) throw InputError("tau_M^2 must be > 0");
        kernel_m.validate(dim);
        kernel_w.validate(dim);
        if (!(sigma_zeta_sq >= 0.0)) throw InputError("sigma_zeta^2 must be >= 0");
        if (beta.size() != basis.f_dim) throw InputError("beta does not match the f basis dimension");
        if (gamma.size() != basis.g_dim) throw InputError("gamma does not match the g basis dimension");
    }
};

/// Per-point simulation-error variances and optional CRN correlation of the
/// averaged errors (identity when absent).
struct NoiseModel {
    Eigen::VectorXd sigma_eps_sq;
    std::optional<Eigen::MatrixXd> crn_corr;

    static NoiseModel independent(Eigen::VectorXd s) { return NoiseModel{std::move(s), std::nullopt}; }

    static NoiseModel homoskedastic(Index k, double s) { return independent(Eigen::VectorXd::Constant(k, s)); }

    /// Covariance of the averaged errors: sqrt(s_i s_j / (n_i n_j)) * corr_ij.
    [[nodiscard]] Eigen::MatrixXd averaged_cov(const Eigen::VectorXi& counts) const {
        const Index k = sigma_eps_sq.size();
        if (counts.size() != k) throw InputError("noise model and dataset disagree on k");
        Eigen::VectorXd sd(k);
        for (Index i = 0; i < k; ++i) {
            if (!(sigma_eps_sq(i) >= 0.0)) throw InputError("simulation variances must be >= 0");
            sd(i) = std::sqrt(sigma_eps_sq(i) / counts(i));
        }
        if (!crn_corr) return sd.array().square().matrix().asDiagonal();
        const auto& c = *crn_corr;
        if (c.rows() != k || c.cols() != k) throw InputError("CRN correlation matrix must be k x k");
        return sd.asDiagonal() * c * sd.asDiagonal();
    }
};

/// (k + ell) x (k + ell) covariance of (ybar, z) with its factorization.
struct JointCov {
    Eigen::MatrixXd V;
    Index k = 0;
    Index ell = 0;
    SpdFactor factor;

    [[nodiscard]] auto V11() const { return V.topLeftCorner(k, k); }
    [[nodiscard]] auto V12() const { return V.topRightCorner(k, ell); }
    [[nodiscard]] auto V22() const { return V.bottomRightCorner(ell, ell); }
};

/// Unfactorized joint covariance for given parameters, simulation-noise
/// covariance and geometry.
inline Eigen::MatrixXd joint_covariance_matrix(const SkiParams& p, const Eigen::MatrixXd& sim_noise_cov,
                                               const PointSet& design, const PointSet& obs) {
    const Index k = design.size();
    const Index ell = obs.size();
    const double tm = p.kernel_m.spatial_variance;
    const double tw = p.kernel_w.spatial_variance;
    Eigen::MatrixXd v(k + ell, k + ell);
    v.topLeftCorner(k, k) = tm * corr_matrix(p.kernel_m, design) + sim_noise_cov;
    if (ell > 0) {
        const Eigen::MatrixXd cross = p.rho * tm * corr_matrix(p.kernel_m, design, obs);
        v.topRightCorner(k, ell) = cross;
        v.bottomLeftCorner(ell, k) = cross.transpose();
        Eigen::MatrixXd v22 = p.rho * p.rho * tm * corr_matrix(p.kernel_m, obs) + tw * corr_matrix(p.kernel_w, obs);
        v22.diagonal().array() += p.sigma_zeta_sq;
        v.bottomRightCorner(ell, ell) = v22;
    }
    return v;
}

inline JointCov assemble_joint_cov(const SkiParams& params, const NoiseModel& noise, const Dataset& data) {
    data.validate();
    JointCov jc;
    jc.k = data.k();
    jc.ell = data.ell();
    jc.V = joint_covariance_matrix(params, noise.averaged_cov(data.counts), data.design, data.obs_points());
    jc.factor.compute(jc.V);
    return jc;
}

struct PredictionResult {
    Method method = Method::SKI;
    double mean = 0.0;
    double mse = 0.0;
    Point at;
};

/// Decomposition of MSE*_SK(for Z) - MSE*_SK-i into the squared bias of the SK
/// predictor and the remaining quadratic-form terms.
struct SkGap {
    double bias_sq = 0.0;
    double extra_var_terms = 0.0;

    [[nodiscard]] double total() const noexcept { return bias_sq + extra_var_terms; }
};

/// Known-parameter SK-i model with the joint covariance factorized once.
/// Immutable after construction; all prediction methods are const.
class FittedModel {
public:
    FittedModel(SkiParams params, NoiseModel noise, Dataset data, BasisSpec basis = BasisSpec::constant())
        : params_(std::move(params)), noise_(std::move(noise)), data_(std::move(data)), basis_(std::move(basis)) {
        data_.validate();
        params_.validate(data_.dim(), basis_);
        obs_ = data_.obs_points();
        joint_ = assemble_joint_cov(params_, noise_, data_);

        const Index k = data_.k();
        const Index ell = data_.ell();
        F_ = basis_.f_matrix(data_.design);
        Fl_ = basis_.f_matrix(obs_);
        G_ = basis_.g_matrix(obs_);

        residual_.resize(k + ell);
        residual_.head(k) = data_.ybar - F_ * params_.beta;
        if (ell > 0) residual_.tail(ell) = data_.z - params_.rho * Fl_ * params_.beta - G_ * params_.gamma;
        alpha_ = joint_.factor.solve_vec(residual_);

        v11_factor_.compute(joint_.V11());
        alpha_sim_ = v11_factor_.solve_vec(residual_.head(k));
        if (ell > 0) {
            v22_factor_.compute(joint_.V22());
            alpha_obs_ = v22_factor_.solve_vec(residual_.tail(ell));
        }
    }

    [[nodiscard]] const SkiParams& params() const noexcept { return params_; }
    [[nodiscard]] const NoiseModel& noise() const noexcept { return noise_; }
    [[nodiscard]] const Dataset& data() const noexcept { return data_; }
    [[nodiscard]] const BasisSpec& basis() const noexcept { return basis_; }
    [[nodiscard]] const JointCov& joint_cov() const noexcept { return joint_; }

    /// Covariance between Z(x0) and the stacked data (ybar, z).
    [[nodiscard]] Eigen::VectorXd cross_cov(const Point& x0) const {
        const Index k = data_.k();
        const Index ell = data_.ell();
        const double tm = params_.kernel_m.spatial_variance;
        const double tw = params_.kernel_w.spatial_variance;
        Eigen::VectorXd c(k + ell);
        c.head(k) = params_.rho * tm * corr_vector(params_.kernel_m, data_.design, x0);
        if (ell > 0)
            c.tail(ell) = params_.rho * params_.rho * tm * corr_vector(params_.kernel_m, obs_, x0) +
                          tw * corr_vector(params_.kernel_w, obs_, x0);
        return c;
    }

    [[nodiscard]] double prior_mean_z(const Point& x0) const {
        return params_.rho * basis_.f(x0).dot(params_.beta) + basis_.g(x0).dot(params_.gamma);
    }

    [[nodiscard]] PredictionResult predict_ski(const Point& x0) const {
        check_point(x0);
        const Eigen::VectorXd c = cross_cov(x0);
        PredictionResult r{Method::SKI, prior_mean_z(x0) + c.dot(alpha_), 0.0, x0};
        r.mse = params_.prior_variance() - joint_.factor.quad_form(c);
        return r;
    }

    /// SK prediction of the simulation surface Y(x0) from ybar alone; mse is
    /// measured against Y(x0).
    [[nodiscard]] PredictionResult predict_sk(const Point& x0) const {
        check_point(x0);
        const double tm = params_.kernel_m.spatial_variance;
        const Eigen::VectorXd s = tm * corr_vector(params_.kernel_m, data_.design, x0);
        PredictionResult r{Method::SK, basis_.f(x0).dot(params_.beta) + s.dot(alpha_sim_), 0.0, x0};
        r.mse = tm - v11_factor_.quad_form(s);
        return r;
    }

    [[nodiscard]] PredictionResult predict_gpr(const Point& x0) const {
        check_point(x0);
        PredictionResult r{Method::GPR, prior_mean_z(x0), params_.prior_variance(), x0};
        if (data_.ell() > 0) {
            const Eigen::VectorXd c2 = cross_cov(x0).tail(data_.ell());
            r.mean += c2.dot(alpha_obs_);
            r.mse -= v22_factor_.quad_form(c2);
        }
        return r;
    }

    /// E[(Z(x0) - Yhat(x0))^2]: MSE of the SK predictor when used for Z.
    [[nodiscard]] double mse_sk_for_z(const Point& x0) const {
        check_point(x0);
        const double b = sk_bias(x0);
        const double q = sim_quad(x0);
        return b * b + params_.prior_variance() + (1.0 - 2.0 * params_.rho) * q;
    }

    /// MSE*_GPR - MSE*_SK-i via the Schur complement of V22.
    [[nodiscard]] double mse_gap_gpr(const Point& x0) const {
        check_point(x0);
        const Index k = data_.k();
        const Index ell = data_.ell();
        const Eigen::VectorXd c = cross_cov(x0);
        Eigen::VectorXd u = c.head(k);
        Eigen::MatrixXd s = joint_.V11();
        if (ell > 0) {
            const Eigen::MatrixXd v12 = joint_.V12();
            u -= v12 * v22_factor_.solve_vec(c.tail(ell));
            s -= v12 * v22_factor_.solve(v12.transpose());
        }
        const SpdFactor sf(symmetrize(s));
        return sf.quad_form(u);
    }

    /// MSE*_SK(for Z) - MSE*_SK-i via the Schur complement of V11.
    [[nodiscard]] SkGap mse_gap_sk(const Point& x0) const {
        check_point(x0);
        const Index ell = data_.ell();
        SkGap gap;
        const double b = sk_bias(x0);
        gap.bias_sq = b * b;
        const double d = params_.rho - 1.0;
        gap.extra_var_terms = d * d * sim_quad(x0);
        if (ell > 0) {
            const Index k = data_.k();
            const Eigen::VectorXd c = cross_cov(x0);
            const Eigen::MatrixXd v12 = joint_.V12();
            const Eigen::VectorXd u = c.tail(ell) - v12.transpose() * v11_factor_.solve_vec(c.head(k));
            const Eigen::MatrixXd t = Eigen::MatrixXd(joint_.V22()) - v12.transpose() * v11_factor_.solve(v12);
            const SpdFactor tf(symmetrize(t));
            gap.extra_var_terms += tf.quad_form(u);
        }
        return gap;
    }

    /// V^{-1} C(x0) for every prediction point, one column per point. The SK-i
    /// predictor is prior_mean_z(x0) + column^T (data - E[data]).
    [[nodiscard]] Eigen::MatrixXd ski_weights(const PointSet& x0s) const {
        Eigen::MatrixXd c(data_.k() + data_.ell(), x0s.size());
        for (Index j = 0; j < x0s.size(); ++j) c.col(j) = cross_cov(x0s[j]);
        return joint_.factor.solve(c);
    }

private:
    void check_point(const Point& x0) const {
        if (x0.size() != data_.dim())
            throw InputError("prediction point has dimension " + std::to_string(x0.size()) + ", expected " +
                             std::to_string(data_.dim()));
    }

    [[nodiscard]] double sk_bias(const Point& x0) const {
        return (params_.rho - 1.0) * basis_.f(x0).dot(params_.beta) + basis_.g(x0).dot(params_.gamma);
    }

    // Sigma_M(x0, .)^T V11^{-1} Sigma_M(x0, .)
    [[nodiscard]] double sim_quad(const Point& x0) const {
        const Eigen::VectorXd s = params_.kernel_m.spatial_variance * corr_vector(params_.kernel_m, data_.design, x0);
        return v11_factor_.quad_form(s);
    }

    SkiParams params_;
    NoiseModel noise_;
    Dataset data_;
    BasisSpec basis_;
    PointSet obs_;
    JointCov joint_;
    Eigen::MatrixXd F_, Fl_, G_;
    Eigen::VectorXd residual_, alpha_, alpha_sim_, alpha_obs_;
    SpdFactor v11_factor_, v22_factor_;
};

inline PredictionResult predict_ski(const SkiParams& params, const NoiseModel& noise, const Dataset& data,
                                    const Point& x0, const BasisSpec& basis = BasisSpec::constant()) {
    return FittedModel(params, noise, data, basis).predict_ski(x0);
}

/// Uses only beta, kernel_m and the simulation part of `data`.
inline PredictionResult predict_sk(const SkiParams& params, const NoiseModel& noise, const Dataset& data,
                                   const Point& x0, const BasisSpec& basis = BasisSpec::constant()) {
    return FittedModel(params, noise, data.without_observations(), basis).predict_sk(x0);
}

inline PredictionResult predict_gpr(const SkiParams& params, const NoiseModel& noise, const Dataset& data,
                                    const Point& x0, const BasisSpec& basis = BasisSpec::constant()) {
    return FittedModel(params, noise, data, basis).predict_gpr(x0);
}

inline double mse_gap_gpr(const SkiParams& params, const NoiseModel& noise, const Dataset& data, const Point& x0,
                          const BasisSpec& basis = BasisSpec::constant()) {
    return FittedModel(params, noise, data, basis).mse_gap_gpr(x0);
}

inline SkGap mse_gap_sk(const SkiParams& params, const NoiseModel& noise, const Dataset& data, const Point& x0,
                        const BasisSpec& basis = BasisSpec::constant()) {
    return FittedModel(params, noise, data, basis).mse_gap_sk(x0);
}

enum class ProbeKind {
    InflateSimulationNoise,   // sigma_eps^2(x_index) *= factor
    InflateObservationNoise,  // sigma_zeta^2 *= factor
    ScaleReplications,        // n_i *= factor at every point
    AddDesignPoint,           // append `point` with variance `sigma_eps_sq` and `replications`
    AddObservation,           // observe the real system at design point `index`
};

struct Probe {
    ProbeKind kind = ProbeKind::InflateObservationNoise;
    Index index = 0;
    double factor = 10.0;
    Point point;
    double sigma_eps_sq = 1.0;
    int replications = 1;
};

struct ProbeResult {
    double mse_before = 0.0;
    double mse_after = 0.0;
};

/// SK-i MSE at x0 before and after a single perturbation of the model or data.
inline ProbeResult monotonicity_probe(const SkiParams& params, const NoiseModel& noise, const Dataset& data,
                                      const Point& x0, const Probe& probe,
                                      const BasisSpec& basis = BasisSpec::constant()) {
    ProbeResult out;
    out.mse_before = predict_ski(params, noise, data, x0, basis).mse;

    SkiParams p2 = params;
    NoiseModel n2 = noise;
    Dataset d2 = data;
    d2.replications.clear();
    switch (probe.kind) {
        case ProbeKind::InflateSimulationNoise:
            if (probe.index < 0 || probe.index >= data.k()) throw InputError("probe index out of range");
            n2.sigma_eps_sq(probe.index) *= probe.factor;
            break;
        case ProbeKind::InflateObservationNoise:
            p2.sigma_zeta_sq *= probe.factor;
            break;
        case ProbeKind::ScaleReplications:
            for (Index i = 0; i < d2.k(); ++i)
                d2.counts(i) = std::max(1, static_cast<int>(std::lround(d2.counts(i) * probe.factor)));
            break;
        case ProbeKind::AddDesignPoint: {
            if (noise.crn_corr) throw InputError("cannot append a design point to a CRN noise model");
            d2.design.append(probe.point);
            d2.ybar.conservativeResize(d2.k());
            d2.ybar(d2.k() - 1) = 0.0;
            d2.counts.conservativeResize(d2.k());
            d2.counts(d2.k() - 1) = probe.replications;
            n2.sigma_eps_sq.conservativeResize(d2.k());
            n2.sigma_eps_sq(d2.k() - 1) = probe.sigma_eps_sq;
            break;
        }
        case ProbeKind::AddObservation: {
            if (std::find(d2.obs_index.begin(), d2.obs_index.end(), probe.index) != d2.obs_index.end())
                throw InputError("design point is already observed");
            d2.obs_index.push_back(probe.index);
            d2.z.conservativeResize(d2.ell());
            d2.z(d2.ell() - 1) = 0.0;
            break;
        }
    }
    out.mse_after = predict_ski(p2, n2, d2, x0, basis).mse;
    return out;
}

}  // namespace ski
