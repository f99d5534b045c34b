#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <ceres/ceres.h>

#include "ski/errors.hpp"
#include "ski/kernels.hpp"
#include "ski/linalg.hpp"
#include "ski/metamodel.hpp"
#include "ski/parallel.hpp"
#include "ski/random.hpp"

namespace ski {

/// Per-point sample variance of the simulation replications (divisor n_i - 1).
inline Eigen::VectorXd sample_variances(const Dataset& data) {
    if (!data.has_replications()) throw InputError("sample variances need raw replications");
    Eigen::VectorXd out(data.k());
    for (Index i = 0; i < data.k(); ++i) {
        const auto& r = data.replications[static_cast<std::size_t>(i)];
        if (r.size() < 2)
            throw InputError("design point " + std::to_string(i) + " has " + std::to_string(r.size()) +
                             " replication(s); the sample variance needs at least 2");
        double mean = 0.0;
        for (double v : r) mean += v;
        mean /= static_cast<double>(r.size());
        double ss = 0.0;
        for (double v : r) ss += (v - mean) * (v - mean);
        out(i) = ss / static_cast<double>(r.size() - 1);
    }
    return out;
}

/// Which parameters are free and how they are ordered in flat vectors:
/// beta, gamma, rho, tau_M^2, tau_W^2, theta_M, theta_W, sigma_zeta^2.
/// SK fits (beta, tau_M^2, theta_M) on the simulation outputs alone; GPR fits
/// (gamma, tau_W^2, theta_W, sigma_zeta^2) on the observations alone with rho = 0.
class ParameterLayout {
public:
    enum Block { Beta, Gamma, Rho, TauM, TauW, ThetaM, ThetaW, SigmaZeta, NumBlocks };

    ParameterLayout(Method kind, Index f_dim, Index g_dim, Index ntheta_m, Index ntheta_w) : kind_(kind) {
        const bool ski = kind == Method::SKI;
        const bool sk = kind == Method::SK;
        const bool gpr = kind == Method::GPR;
        sizes_[Beta] = (ski || sk) ? f_dim : 0;
        sizes_[Gamma] = (ski || gpr) ? g_dim : 0;
        sizes_[Rho] = ski ? 1 : 0;
        sizes_[TauM] = (ski || sk) ? 1 : 0;
        sizes_[TauW] = (ski || gpr) ? 1 : 0;
        sizes_[ThetaM] = (ski || sk) ? ntheta_m : 0;
        sizes_[ThetaW] = (ski || gpr) ? ntheta_w : 0;
        sizes_[SigmaZeta] = (ski || gpr) ? 1 : 0;
        Index off = 0;
        for (int b = 0; b < NumBlocks; ++b) {
            offsets_[b] = off;
            off += sizes_[b];
        }
        size_ = off;
    }

    [[nodiscard]] Method kind() const noexcept { return kind_; }
    [[nodiscard]] Index size() const noexcept { return size_; }
    [[nodiscard]] Index offset(Block b) const noexcept { return offsets_[b]; }
    [[nodiscard]] Index block_size(Block b) const noexcept { return sizes_[b]; }
    [[nodiscard]] bool has(Block b) const noexcept { return sizes_[b] > 0; }

    /// Log-transformed blocks (variances and lengthscales).
    [[nodiscard]] static bool is_positive(Block b) noexcept {
        return b == TauM || b == TauW || b == ThetaM || b == ThetaW || b == SigmaZeta;
    }

    [[nodiscard]] Block block_of(Index i) const {
        for (int b = NumBlocks - 1; b >= 0; --b)
            if (sizes_[b] > 0 && i >= offsets_[b]) return static_cast<Block>(b);
        throw InputError("parameter index out of range");
    }

    [[nodiscard]] std::vector<std::string> names() const {
        static const char* base[] = {"beta", "gamma", "rho", "tau_m_sq", "tau_w_sq", "theta_m", "theta_w",
                                     "sigma_zeta_sq"};
        std::vector<std::string> out;
        for (int b = 0; b < NumBlocks; ++b)
            for (Index j = 0; j < sizes_[b]; ++j)
                out.push_back(sizes_[b] > 1 || b == Beta || b == Gamma || b == ThetaM || b == ThetaW
                                  ? std::string(base[b]) + "[" + std::to_string(j) + "]"
                                  : std::string(base[b]));
        return out;
    }

    [[nodiscard]] Eigen::VectorXd pack(const SkiParams& p) const {
        Eigen::VectorXd v(size_);
        if (has(Beta)) v.segment(offsets_[Beta], sizes_[Beta]) = p.beta;
        if (has(Gamma)) v.segment(offsets_[Gamma], sizes_[Gamma]) = p.gamma;
        if (has(Rho)) v(offsets_[Rho]) = p.rho;
        if (has(TauM)) v(offsets_[TauM]) = p.kernel_m.spatial_variance;
        if (has(TauW)) v(offsets_[TauW]) = p.kernel_w.spatial_variance;
        if (has(ThetaM)) v.segment(offsets_[ThetaM], sizes_[ThetaM]) = p.kernel_m.lengthscales;
        if (has(ThetaW)) v.segment(offsets_[ThetaW], sizes_[ThetaW]) = p.kernel_w.lengthscales;
        if (has(SigmaZeta)) v(offsets_[SigmaZeta]) = p.sigma_zeta_sq;
        return v;
    }

    /// Overwrites the free parameters of `base` with the values in `v`.
    [[nodiscard]] SkiParams unpack(const Eigen::VectorXd& v, SkiParams base) const {
        if (has(Beta)) base.beta = v.segment(offsets_[Beta], sizes_[Beta]);
        if (has(Gamma)) base.gamma = v.segment(offsets_[Gamma], sizes_[Gamma]);
        if (has(Rho)) base.rho = v(offsets_[Rho]);
        if (has(TauM)) base.kernel_m.spatial_variance = v(offsets_[TauM]);
        if (has(TauW)) base.kernel_w.spatial_variance = v(offsets_[TauW]);
        if (has(ThetaM)) base.kernel_m.lengthscales = v.segment(offsets_[ThetaM], sizes_[ThetaM]);
        if (has(ThetaW)) base.kernel_w.lengthscales = v.segment(offsets_[ThetaW], sizes_[ThetaW]);
        if (has(SigmaZeta)) base.sigma_zeta_sq = v(offsets_[SigmaZeta]);
        return base;
    }

    [[nodiscard]] Eigen::VectorXd to_transformed(const Eigen::VectorXd& natural) const {
        Eigen::VectorXd t = natural;
        for (Index i = 0; i < size_; ++i)
            if (is_positive(block_of(i))) t(i) = std::log(natural(i));
        return t;
    }

    [[nodiscard]] Eigen::VectorXd to_natural(const Eigen::VectorXd& transformed) const {
        Eigen::VectorXd n = transformed;
        for (Index i = 0; i < size_; ++i)
            if (is_positive(block_of(i))) n(i) = std::exp(transformed(i));
        return n;
    }

    /// Chain rule from a natural-space gradient to the transformed space.
    [[nodiscard]] Eigen::VectorXd transformed_gradient(const Eigen::VectorXd& natural,
                                                       const Eigen::VectorXd& grad) const {
        Eigen::VectorXd g = grad;
        for (Index i = 0; i < size_; ++i)
            if (is_positive(block_of(i))) g(i) *= natural(i);
        return g;
    }

private:
    Method kind_;
    Index sizes_[NumBlocks]{};
    Index offsets_[NumBlocks]{};
    Index size_ = 0;
};

inline ParameterLayout layout_for(Method kind, const SkiParams& p, const BasisSpec& basis) {
    return ParameterLayout(kind, basis.f_dim, basis.g_dim, p.kernel_m.num_lengthscales(),
                           p.kernel_w.num_lengthscales());
}

/// Log-likelihood of the stacked data and its gradient in natural parameters,
/// ordered by the layout of `kind`.
struct LikelihoodState {
    SkiParams params;
    double loglik = 0.0;
    Eigen::VectorXd gradient;
    std::vector<std::string> names;
};

namespace detail {

/// Rows of the stacked data that enter a given model: all simulation means for
/// SK and SK-i, all observations for GPR and SK-i.
struct ActiveBlocks {
    bool sim = true;
    bool obs = true;
};

inline ActiveBlocks active_blocks(Method kind, const Dataset& data) {
    return ActiveBlocks{kind != Method::GPR, kind != Method::SK && data.ell() > 0};
}

}  // namespace detail

inline LikelihoodState loglik_and_grad(const SkiParams& params, const Eigen::VectorXd& sigma_eps_hat,
                                       const Dataset& data, const BasisSpec& basis = BasisSpec::constant(),
                                       Method kind = Method::SKI) {
    const auto act = detail::active_blocks(kind, data);
    const Index ks = act.sim ? data.k() : 0;
    const Index ls = act.obs ? data.ell() : 0;
    const Index n = ks + ls;
    if (n == 0) throw InputError("likelihood needs at least one data value");
    if (act.sim && sigma_eps_hat.size() != data.k())
        throw InputError("need one simulation variance per design point");

    const double rho = kind == Method::GPR ? 0.0 : (kind == Method::SK ? 1.0 : params.rho);
    const double tm = params.kernel_m.spatial_variance;
    const double tw = params.kernel_w.spatial_variance;
    const PointSet obs = data.obs_points();

    Eigen::MatrixXd Rk, Rkl, Rl, Rw;
    if (act.sim) Rk = corr_matrix(params.kernel_m, data.design);
    if (act.sim && act.obs) Rkl = corr_matrix(params.kernel_m, data.design, obs);
    if (act.obs) {
        Rl = corr_matrix(params.kernel_m, obs);
        Rw = corr_matrix(params.kernel_w, obs);
    }

    Eigen::MatrixXd V = Eigen::MatrixXd::Zero(n, n);
    if (act.sim) {
        V.topLeftCorner(ks, ks) = tm * Rk;
        for (Index i = 0; i < ks; ++i) V(i, i) += sigma_eps_hat(i) / data.counts(i);
    }
    if (act.sim && act.obs) {
        V.block(0, ks, ks, ls) = rho * tm * Rkl;
        V.block(ks, 0, ls, ks) = rho * tm * Rkl.transpose();
    }
    if (act.obs) {
        V.bottomRightCorner(ls, ls) = rho * rho * tm * Rl + tw * Rw;
        V.bottomRightCorner(ls, ls).diagonal().array() += params.sigma_zeta_sq;
    }
    const SpdFactor factor(V);

    const Eigen::MatrixXd F = basis.f_matrix(data.design);
    const Eigen::MatrixXd Fl = basis.f_matrix(obs);
    const Eigen::MatrixXd G = basis.g_matrix(obs);
    Eigen::VectorXd r(n);
    if (act.sim) r.head(ks) = data.ybar - F * params.beta;
    if (act.obs) {
        r.tail(ls) = data.z - G * params.gamma;
        if (kind != Method::GPR) r.tail(ls) -= rho * Fl * params.beta;
    }
    const Eigen::VectorXd alpha = factor.solve_vec(r);
    const Eigen::MatrixXd Vinv = factor.inverse();

    LikelihoodState st;
    st.params = params;
    st.loglik = -0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi) - 0.5 * factor.log_det() -
                0.5 * r.dot(alpha);

    const ParameterLayout layout = layout_for(kind, params, basis);
    st.names = layout.names();
    st.gradient = Eigen::VectorXd::Zero(layout.size());

    // -1/2 tr(V^{-1} D) + 1/2 alpha^T D alpha for a symmetric derivative D.
    auto cov_term = [&](const Eigen::MatrixXd& D) {
        return -0.5 * Vinv.cwiseProduct(D).sum() + 0.5 * alpha.dot(D * alpha);
    };
    auto embed = [&](const Eigen::MatrixXd& d11, const Eigen::MatrixXd& d12, const Eigen::MatrixXd& d22) {
        Eigen::MatrixXd D = Eigen::MatrixXd::Zero(n, n);
        if (act.sim && d11.size() > 0) D.topLeftCorner(ks, ks) = d11;
        if (act.sim && act.obs && d12.size() > 0) {
            D.block(0, ks, ks, ls) = d12;
            D.block(ks, 0, ls, ks) = d12.transpose();
        }
        if (act.obs && d22.size() > 0) D.bottomRightCorner(ls, ls) = d22;
        return D;
    };
    const Eigen::MatrixXd none;

    if (layout.has(ParameterLayout::Beta)) {
        Eigen::MatrixXd Hb(n, basis.f_dim);
        if (act.sim) Hb.topRows(ks) = F;
        if (act.obs) Hb.bottomRows(ls) = rho * Fl;
        st.gradient.segment(layout.offset(ParameterLayout::Beta), basis.f_dim) = Hb.transpose() * alpha;
    }
    if (layout.has(ParameterLayout::Gamma) && act.obs) {
        st.gradient.segment(layout.offset(ParameterLayout::Gamma), basis.g_dim) = G.transpose() * alpha.tail(ls);
    }
    if (layout.has(ParameterLayout::Rho)) {
        double g = 0.0;
        if (act.obs) {
            const Eigen::MatrixXd D = embed(none, act.sim ? Eigen::MatrixXd(tm * Rkl) : none, 2.0 * rho * tm * Rl);
            g = cov_term(D) + (Fl * params.beta).dot(alpha.tail(ls));
        }
        st.gradient(layout.offset(ParameterLayout::Rho)) = g;
    }
    if (layout.has(ParameterLayout::TauM)) {
        const Eigen::MatrixXd D = embed(act.sim ? Rk : none, act.sim && act.obs ? Eigen::MatrixXd(rho * Rkl) : none,
                                        act.obs ? Eigen::MatrixXd(rho * rho * Rl) : none);
        st.gradient(layout.offset(ParameterLayout::TauM)) = cov_term(D);
    }
    if (layout.has(ParameterLayout::TauW) && act.obs) {
        st.gradient(layout.offset(ParameterLayout::TauW)) = cov_term(embed(none, none, Rw));
    }
    if (layout.has(ParameterLayout::ThetaM)) {
        for (Index p = 0; p < layout.block_size(ParameterLayout::ThetaM); ++p) {
            Eigen::MatrixXd d11, d12, d22;
            if (act.sim) d11 = tm * corr_matrix_dtheta(params.kernel_m, data.design, data.design, p);
            if (act.sim && act.obs) d12 = rho * tm * corr_matrix_dtheta(params.kernel_m, data.design, obs, p);
            if (act.obs) d22 = rho * rho * tm * corr_matrix_dtheta(params.kernel_m, obs, obs, p);
            st.gradient(layout.offset(ParameterLayout::ThetaM) + p) = cov_term(embed(d11, d12, d22));
        }
    }
    if (layout.has(ParameterLayout::ThetaW) && act.obs) {
        for (Index p = 0; p < layout.block_size(ParameterLayout::ThetaW); ++p) {
            const Eigen::MatrixXd d22 = tw * corr_matrix_dtheta(params.kernel_w, obs, obs, p);
            st.gradient(layout.offset(ParameterLayout::ThetaW) + p) = cov_term(embed(none, none, d22));
        }
    }
    if (layout.has(ParameterLayout::SigmaZeta) && act.obs) {
        st.gradient(layout.offset(ParameterLayout::SigmaZeta)) =
            cov_term(embed(none, none, Eigen::MatrixXd::Identity(ls, ls)));
    }
    return st;
}

struct FitConfig {
    int starts = 8;
    double tolerance = 1e-6;
    int max_iterations = 500;
    std::uint64_t seed = 1;
    bool isotropic = true;
    unsigned threads = 1;
};

struct FitReport {
    Method kind = Method::SKI;
    SkiParams fitted;
    Eigen::VectorXd sigma_eps_hat;
    bool converged = false;
    int iterations = 0;
    double final_gradient_norm = 0.0;
    int restarts_used = 0;
    int best_start = 0;
    double loglik = -std::numeric_limits<double>::infinity();
    BasisSpec basis = BasisSpec::constant();

    /// Names and values of the parameters this fit estimated.
    [[nodiscard]] std::vector<std::pair<std::string, double>> estimated_parameters() const {
        const ParameterLayout layout = layout_for(kind, fitted, basis);
        const auto names = layout.names();
        const Eigen::VectorXd v = layout.pack(fitted);
        std::vector<std::pair<std::string, double>> out;
        for (std::size_t i = 0; i < names.size(); ++i) out.emplace_back(names[i], v(static_cast<Index>(i)));
        return out;
    }
};

namespace detail {

inline double sample_var(const Eigen::VectorXd& v) {
    if (v.size() < 2) return 0.0;
    const double m = v.mean();
    return (v.array() - m).square().sum() / static_cast<double>(v.size() - 1);
}

inline Eigen::VectorXd median_distance_theta(const PointSet& pts, bool isotropic) {
    const Index d = pts.dim();
    const Index n = pts.size();
    auto median_of = [](std::vector<double> v) {
        if (v.empty()) return 1.0;
        std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
        return v[v.size() / 2];
    };
    if (isotropic) {
        std::vector<double> dist;
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < i; ++j) dist.push_back((pts[i] - pts[j]).norm());
        const double m = median_of(dist);
        return Eigen::VectorXd::Constant(1, m > 0.0 ? 1.0 / (m * m) : 1.0);
    }
    Eigen::VectorXd theta(d);
    for (Index p = 0; p < d; ++p) {
        std::vector<double> dist;
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < i; ++j) dist.push_back(std::abs(pts.matrix()(i, p) - pts.matrix()(j, p)));
        const double m = median_of(dist);
        theta(p) = m > 0.0 ? 1.0 / (m * m) : 1.0;
    }
    return theta;
}

/// Generalized least squares for (beta, gamma) at fixed covariance parameters.
inline void gls_trend(SkiParams& p, const Eigen::VectorXd& sigma_eps_hat, const Dataset& data,
                      const BasisSpec& basis, Method kind) {
    const auto act = active_blocks(kind, data);
    const Index ks = act.sim ? data.k() : 0;
    const Index ls = act.obs ? data.ell() : 0;
    const double rho = kind == Method::GPR ? 0.0 : (kind == Method::SK ? 1.0 : p.rho);
    const PointSet obs = data.obs_points();
    SkiParams q = p;
    q.rho = rho;
    Eigen::MatrixXd sim_noise = Eigen::MatrixXd::Zero(data.k(), data.k());
    if (act.sim)
        for (Index i = 0; i < data.k(); ++i) sim_noise(i, i) = sigma_eps_hat(i) / data.counts(i);
    const Eigen::MatrixXd full = joint_covariance_matrix(q, sim_noise, data.design, act.obs ? obs : PointSet());
    Eigen::MatrixXd V(ks + ls, ks + ls);
    if (act.sim) V.topLeftCorner(ks, ks) = full.topLeftCorner(ks, ks);
    if (act.sim && act.obs) {
        V.topRightCorner(ks, ls) = full.topRightCorner(ks, ls);
        V.bottomLeftCorner(ls, ks) = full.bottomLeftCorner(ls, ks);
    }
    if (act.obs) V.bottomRightCorner(ls, ls) = full.bottomRightCorner(ls, ls);

    const Index pb = kind == Method::GPR ? 0 : basis.f_dim;
    const Index pg = kind == Method::SK ? 0 : basis.g_dim;
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(ks + ls, pb + pg);
    Eigen::VectorXd y(ks + ls);
    if (act.sim) {
        H.topLeftCorner(ks, pb) = basis.f_matrix(data.design);
        y.head(ks) = data.ybar;
    }
    if (act.obs) {
        if (pb > 0) H.bottomLeftCorner(ls, pb) = rho * basis.f_matrix(obs);
        if (pg > 0) H.bottomRightCorner(ls, pg) = basis.g_matrix(obs);
        y.tail(ls) = data.z;
    }
    const SpdFactor f(V);
    const Eigen::MatrixXd VH = f.solve(H);
    const Eigen::VectorXd b = (H.transpose() * VH).ldlt().solve(VH.transpose() * y);
    if (pb > 0) p.beta = b.head(pb);
    if (pg > 0) p.gamma = b.tail(pg);
}

/// Negative log-likelihood in transformed coordinates, scaled for the solver.
class NegLogLikelihood final : public ceres::FirstOrderFunction {
public:
    NegLogLikelihood(const Dataset& data, const Eigen::VectorXd& sigma_eps_hat, const BasisSpec& basis,
                     const ParameterLayout& layout, const SkiParams& base, double scale, Eigen::VectorXd lower,
                     Eigen::VectorXd upper)
        : data_(data), sigma_(sigma_eps_hat), basis_(basis), layout_(layout), base_(base), scale_(scale),
          lower_(std::move(lower)), upper_(std::move(upper)) {}

    bool Evaluate(const double* x, double* cost, double* gradient) const override {
        const Eigen::Map<const Eigen::VectorXd> t(x, layout_.size());
        if ((t.array() < lower_.array()).any() || (t.array() > upper_.array()).any()) return false;
        try {
            const Eigen::VectorXd nat = layout_.to_natural(t);
            const SkiParams p = layout_.unpack(nat, base_);
            const LikelihoodState st = loglik_and_grad(p, sigma_, data_, basis_, layout_.kind());
            if (!std::isfinite(st.loglik)) return false;
            *cost = -st.loglik / scale_;
            if (gradient) {
                const Eigen::VectorXd g = layout_.transformed_gradient(nat, st.gradient);
                if (!g.allFinite()) return false;
                for (Index i = 0; i < layout_.size(); ++i) gradient[i] = -g(i) / scale_;
            }
            return true;
        } catch (const Error&) {
            return false;
        }
    }

    int NumParameters() const override { return static_cast<int>(layout_.size()); }

private:
    const Dataset& data_;
    const Eigen::VectorXd& sigma_;
    const BasisSpec& basis_;
    ParameterLayout layout_;
    SkiParams base_;
    double scale_;
    Eigen::VectorXd lower_, upper_;
};

struct StartOutcome {
    bool ok = false;
    Eigen::VectorXd transformed;
    double loglik = -std::numeric_limits<double>::infinity();
    int iterations = 0;
    double grad_norm = std::numeric_limits<double>::infinity();
};

}  // namespace detail

/// Heuristic starting point: GLS trend at a median-distance kernel guess,
/// residual variance split evenly between M and W, rho = 1, and
/// sigma_zeta^2 at 10% of the observation variance.
inline SkiParams initial_guess(const Dataset& data, const Eigen::VectorXd& sigma_eps_hat, const BasisSpec& basis,
                               Method kind, bool isotropic) {
    SkiParams p;
    p.rho = kind == Method::GPR ? 0.0 : 1.0;
    p.beta = Eigen::VectorXd::Zero(basis.f_dim);
    p.gamma = Eigen::VectorXd::Zero(basis.g_dim);
    const Eigen::VectorXd theta = detail::median_distance_theta(data.design, isotropic);

    Eigen::VectorXd pooled(data.k() + data.ell());
    pooled << data.ybar, data.z;
    double s2 = detail::sample_var(kind == Method::GPR ? data.z : (kind == Method::SK ? data.ybar : pooled));
    if (!(s2 > 0.0)) s2 = 1.0;

    p.kernel_m = KernelSpec::anisotropic(kind == Method::SKI ? 0.5 * s2 : s2, theta);
    p.kernel_w = KernelSpec::anisotropic(kind == Method::SKI ? 0.5 * s2 : s2, theta);
    const double zvar = detail::sample_var(data.z);
    p.sigma_zeta_sq = 0.1 * (zvar > 0.0 ? zvar : s2);
    if (kind == Method::SK) {
        p.kernel_w.spatial_variance = 0.0;
        p.sigma_zeta_sq = 0.0;
    }
    if (kind == Method::GPR) p.kernel_m.spatial_variance = s2;

    detail::gls_trend(p, sigma_eps_hat, data, basis, kind);

    // Re-estimate the spatial variance from GLS residuals.
    Eigen::VectorXd res(0);
    if (kind != Method::GPR) {
        res.conservativeResize(data.k());
        res = data.ybar - basis.f_matrix(data.design) * p.beta;
    }
    if (kind != Method::SK && data.ell() > 0) {
        const PointSet obs = data.obs_points();
        Eigen::VectorXd rz = data.z - basis.g_matrix(obs) * p.gamma;
        if (kind == Method::SKI) rz -= p.rho * basis.f_matrix(obs) * p.beta;
        Eigen::VectorXd all(res.size() + rz.size());
        all << res, rz;
        res = all;
    }
    double r2 = res.size() > 0 ? res.squaredNorm() / static_cast<double>(res.size()) : 0.0;
    if (!(r2 > 1e-12 * s2)) r2 = s2;
    if (kind == Method::SKI) {
        p.kernel_m.spatial_variance = 0.5 * r2;
        p.kernel_w.spatial_variance = 0.5 * r2;
    } else if (kind == Method::SK) {
        p.kernel_m.spatial_variance = r2;
    } else {
        p.kernel_w.spatial_variance = r2;
    }
    return p;
}

/// Maximum-likelihood fit of the parameters of `kind` given per-point simulation
/// variances, by BFGS on the log-likelihood in transformed coordinates from
/// several starting points.
inline FitReport fit_mle_with_variances(const Dataset& data, const Eigen::VectorXd& sigma_eps_hat,
                                        const BasisSpec& basis, const FitConfig& config, Method kind) {
    data.validate();
    if (kind == Method::GPR && data.ell() == 0) throw InputError("GPR needs at least one observation");
    if (kind == Method::SKI && data.ell() == 0) kind = Method::SK;
    if (config.starts < 1) throw InputError("fit needs at least one start");

    const SkiParams start0 = initial_guess(data, sigma_eps_hat, basis, kind, config.isotropic);
    const ParameterLayout layout = layout_for(kind, start0, basis);
    const Eigen::VectorXd t0 = layout.to_transformed(layout.pack(start0));

    // Box on transformed coordinates; evaluations outside it are rejected.
    Eigen::VectorXd lower = Eigen::VectorXd::Constant(layout.size(), -1e6);
    Eigen::VectorXd upper = Eigen::VectorXd::Constant(layout.size(), 1e6);
    for (Index i = 0; i < layout.size(); ++i) {
        switch (layout.block_of(i)) {
            case ParameterLayout::TauM:
            case ParameterLayout::TauW:
                lower(i) = t0(i) - 25.0;
                upper(i) = t0(i) + 12.0;
                break;
            case ParameterLayout::ThetaM:
            case ParameterLayout::ThetaW:
                lower(i) = t0(i) - 14.0;
                upper(i) = t0(i) + 14.0;
                break;
            case ParameterLayout::SigmaZeta:
                lower(i) = t0(i) - 30.0;
                upper(i) = t0(i) + 12.0;
                break;
            default:
                break;
        }
    }

    const double scale0 = [&] {
        try {
            return 1.0 + std::abs(loglik_and_grad(start0, sigma_eps_hat, data, basis, kind).loglik);
        } catch (const Error&) {
            return 1.0;
        }
    }();

    std::vector<detail::StartOutcome> outcomes(static_cast<std::size_t>(config.starts));
    parallel_for(outcomes.size(), config.threads, [&](std::size_t s) {
        Eigen::VectorXd t = t0;
        if (s > 0) {
            Rng rng = make_rng(config.seed, {0xf17ULL, s});
            std::normal_distribution<double> normal(0.0, 1.0);
            const double ysd = std::sqrt(std::max(start0.kernel_m.spatial_variance + start0.kernel_w.spatial_variance,
                                                  1e-12));
            for (Index i = 0; i < layout.size(); ++i) {
                switch (layout.block_of(i)) {
                    case ParameterLayout::Beta:
                    case ParameterLayout::Gamma: t(i) += 0.5 * ysd * normal(rng); break;
                    case ParameterLayout::Rho: t(i) += 0.5 * normal(rng); break;
                    default: t(i) += normal(rng); break;
                }
            }
        }
        detail::StartOutcome out;
        auto* fn = new detail::NegLogLikelihood(data, sigma_eps_hat, basis, layout, start0, scale0, lower, upper);
        ceres::GradientProblem problem(fn);
        double cost0 = 0.0;
        if (!fn->Evaluate(t.data(), &cost0, nullptr)) {
            outcomes[s] = out;
            return;
        }
        ceres::GradientProblemSolver::Options opts;
        opts.line_search_direction_type = ceres::BFGS;
        opts.max_num_iterations = config.max_iterations;
        opts.gradient_tolerance = config.tolerance;
        opts.function_tolerance = 1e-14;
        opts.parameter_tolerance = 1e-14;
        opts.logging_type = ceres::SILENT;
        ceres::GradientProblemSolver::Summary summary;
        ceres::Solve(opts, problem, t.data(), &summary);
        try {
            const Eigen::VectorXd nat = layout.to_natural(t);
            const LikelihoodState st =
                loglik_and_grad(layout.unpack(nat, start0), sigma_eps_hat, data, basis, kind);
            if (std::isfinite(st.loglik)) {
                out.ok = true;
                out.transformed = t;
                out.loglik = st.loglik;
                out.iterations = static_cast<int>(summary.iterations.size());
                out.grad_norm = layout.transformed_gradient(nat, st.gradient).lpNorm<Eigen::Infinity>();
            }
        } catch (const Error&) {
        }
        outcomes[s] = out;
    });

    int best = -1;
    for (std::size_t s = 0; s < outcomes.size(); ++s)
        if (outcomes[s].ok && (best < 0 || outcomes[s].loglik > outcomes[static_cast<std::size_t>(best)].loglik))
            best = static_cast<int>(s);
    if (best < 0) throw FitError("no start produced a finite log-likelihood");

    const auto& b = outcomes[static_cast<std::size_t>(best)];
    FitReport rep;
    rep.kind = kind;
    rep.fitted = layout.unpack(layout.to_natural(b.transformed), start0);
    if (kind == Method::SK) {
        rep.fitted.rho = 1.0;
        rep.fitted.kernel_w.spatial_variance = 0.0;
        rep.fitted.sigma_zeta_sq = 0.0;
    }
    if (kind == Method::GPR) rep.fitted.rho = 0.0;
    rep.sigma_eps_hat = sigma_eps_hat;
    rep.loglik = b.loglik;
    rep.iterations = b.iterations;
    rep.final_gradient_norm = b.grad_norm;
    rep.converged = b.grad_norm <= config.tolerance * (1.0 + std::abs(b.loglik));
    rep.restarts_used = config.starts;
    rep.best_start = best;
    rep.basis = basis;
    return rep;
}

/// Estimate per-point simulation variances from the replications, then fit by
/// maximum likelihood. With no observations the SK parameter subset is fitted.
inline FitReport fit_mle(const Dataset& data, const BasisSpec& basis, const FitConfig& config,
                         Method kind = Method::SKI) {
    Eigen::VectorXd s2;
    if (kind == Method::GPR && !data.has_replications())
        s2 = Eigen::VectorXd::Zero(data.k());
    else
        s2 = sample_variances(data);
    return fit_mle_with_variances(data, s2, basis, config, kind);
}

/// Standard errors from the inverse observed information, by central
/// differences of the analytic gradient. Order follows the fit's layout.
inline Eigen::VectorXd standard_errors(const FitReport& rep, const Dataset& data) {
    const ParameterLayout layout = layout_for(rep.kind, rep.fitted, rep.basis);
    const Eigen::VectorXd x = layout.pack(rep.fitted);
    const Index n = layout.size();
    Eigen::MatrixXd hess(n, n);
    for (Index i = 0; i < n; ++i) {
        const double h = 1e-5 * std::max(1.0, std::abs(x(i)));
        Eigen::VectorXd xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        const auto gp = loglik_and_grad(layout.unpack(xp, rep.fitted), rep.sigma_eps_hat, data, rep.basis, rep.kind);
        const auto gm = loglik_and_grad(layout.unpack(xm, rep.fitted), rep.sigma_eps_hat, data, rep.basis, rep.kind);
        hess.col(i) = (gp.gradient - gm.gradient) / (2.0 * h);
    }
    const Eigen::MatrixXd info = -symmetrize(hess);
    const Eigen::MatrixXd cov = info.completeOrthogonalDecomposition().pseudoInverse();
    Eigen::VectorXd se(n);
    for (Index i = 0; i < n; ++i) se(i) = cov(i, i) > 0.0 ? std::sqrt(cov(i, i)) : std::numeric_limits<double>::quiet_NaN();
    return se;
}

/// Plug-in prediction with estimated parameters. The mse adds the trend
/// correction d^T [H^T V^{-1} H]^{-1} d to the known-parameter MSE.
inline PredictionResult plugin_predict(const FitReport& rep, const Dataset& data, const Point& x0) {
    data.validate();
    if (x0.size() != data.dim()) throw InputError("prediction point has the wrong dimension");
    const SkiParams& p = rep.fitted;
    const BasisSpec& basis = rep.basis;
    const auto act = detail::active_blocks(rep.kind, data);
    const Index ks = act.sim ? data.k() : 0;
    const Index ls = act.obs ? data.ell() : 0;
    const double rho = rep.kind == Method::GPR ? 0.0 : (rep.kind == Method::SK ? 1.0 : p.rho);
    const double tm = p.kernel_m.spatial_variance;
    const double tw = p.kernel_w.spatial_variance;
    const PointSet obs = data.obs_points();

    Eigen::MatrixXd sim_noise = Eigen::MatrixXd::Zero(data.k(), data.k());
    if (act.sim) {
        if (rep.sigma_eps_hat.size() != data.k()) throw InputError("fit report does not match the dataset");
        for (Index i = 0; i < data.k(); ++i) sim_noise(i, i) = rep.sigma_eps_hat(i) / data.counts(i);
    }
    SkiParams q = p;
    q.rho = rho;
    const Eigen::MatrixXd full = joint_covariance_matrix(q, sim_noise, data.design, act.obs ? obs : PointSet());
    Eigen::MatrixXd V(ks + ls, ks + ls);
    Eigen::VectorXd C(ks + ls), y(ks + ls);
    const Index pb = rep.kind == Method::GPR ? 0 : basis.f_dim;
    const Index pg = rep.kind == Method::SK ? 0 : basis.g_dim;
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(ks + ls, pb + pg);
    Eigen::VectorXd h0(pb + pg), b(pb + pg);
    double prior_var = 0.0;
    if (rep.kind == Method::SK) {
        // SK targets the simulation surface; its covariance with the data is Sigma_M.
        V = full.topLeftCorner(ks, ks);
        C = tm * corr_vector(p.kernel_m, data.design, x0);
        prior_var = tm;
    } else {
        if (act.sim) V.topLeftCorner(ks, ks) = full.topLeftCorner(ks, ks);
        if (act.sim && act.obs) {
            V.topRightCorner(ks, ls) = full.topRightCorner(ks, ls);
            V.bottomLeftCorner(ls, ks) = full.bottomLeftCorner(ls, ks);
        }
        if (act.obs) V.bottomRightCorner(ls, ls) = full.bottomRightCorner(ls, ls);
        if (act.sim) C.head(ks) = rho * tm * corr_vector(p.kernel_m, data.design, x0);
        if (act.obs) C.tail(ls) = rho * rho * tm * corr_vector(p.kernel_m, obs, x0) + tw * corr_vector(p.kernel_w, obs, x0);
        prior_var = rho * rho * tm + tw;
    }
    if (act.sim) {
        H.topLeftCorner(ks, pb) = basis.f_matrix(data.design);
        y.head(ks) = data.ybar;
    }
    if (act.obs) {
        if (pb > 0) H.bottomLeftCorner(ls, pb) = rho * basis.f_matrix(obs);
        if (pg > 0) H.bottomRightCorner(ls, pg) = basis.g_matrix(obs);
        y.tail(ls) = data.z;
    }
    if (pb > 0) {
        h0.head(pb) = (rep.kind == Method::SK ? 1.0 : rho) * basis.f(x0);
        b.head(pb) = p.beta;
    }
    if (pg > 0) {
        h0.tail(pg) = basis.g(x0);
        b.tail(pg) = p.gamma;
    }

    const SpdFactor vf(V);
    const Eigen::VectorXd VinvC = vf.solve_vec(C);
    PredictionResult out;
    out.method = rep.kind;
    out.at = x0;
    out.mean = h0.dot(b) + VinvC.dot(y - H * b);

    const Eigen::MatrixXd VinvH = vf.solve(H);
    const Eigen::MatrixXd HtVH = symmetrize(H.transpose() * VinvH);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(HtVH);
    if (lu.rank() < HtVH.rows())
        throw NumericError("trend information matrix is singular (basis rank " + std::to_string(lu.rank()) + " of " +
                           std::to_string(HtVH.rows()) + ")");
    const Eigen::VectorXd d = h0 - H.transpose() * VinvC;
    const double correction = d.dot(HtVH.ldlt().solve(d));
    out.mse = prior_var - C.dot(VinvC) + correction;
    return out;
}

/// Known-parameter model assembled from a fit, for the exact predictors.
inline FittedModel to_fitted_model(const FitReport& rep, const Dataset& data) {
    return FittedModel(rep.fitted, NoiseModel::independent(rep.sigma_eps_hat), data, rep.basis);
}

}  // namespace ski
