#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss.hpp>
#include <boost/random/sobol.hpp>

#include "ski/errors.hpp"
#include "ski/estimation.hpp"
#include "ski/kernels.hpp"
#include "ski/linalg.hpp"
#include "ski/metamodel.hpp"
#include "ski/random.hpp"

namespace ski {

/// Axis-aligned box in R^d.
struct DesignSpace {
    Eigen::VectorXd lo;
    Eigen::VectorXd hi;

    static DesignSpace unit(Index d) { return {Eigen::VectorXd::Zero(d), Eigen::VectorXd::Ones(d)}; }

    [[nodiscard]] Index dim() const noexcept { return lo.size(); }

    void validate() const {
        if (lo.size() == 0 || lo.size() != hi.size()) throw InputError("design space bounds are malformed");
        for (Index p = 0; p < lo.size(); ++p)
            if (!(lo(p) < hi(p))) throw InputError("design space needs lo < hi in every coordinate");
    }

    /// Maps a point of the unit cube into the box.
    [[nodiscard]] Point from_unit(const Eigen::VectorXd& u) const {
        return lo.array() + u.array() * (hi - lo).array();
    }

    [[nodiscard]] bool contains(const Point& x) const {
        return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
    }
};

inline PointSet lhs(const DesignSpace& space, Index k, std::uint64_t seed) {
    space.validate();
    if (k <= 0) throw InputError("LHS needs k >= 1");
    Rng rng = make_rng(seed, {0x1e5ULL});
    const Index d = space.dim();
    Eigen::MatrixXd pts(k, d);
    std::vector<Index> perm(static_cast<std::size_t>(k));
    for (Index p = 0; p < d; ++p) {
        std::iota(perm.begin(), perm.end(), Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        for (Index i = 0; i < k; ++i) {
            const double u = (static_cast<double>(perm[static_cast<std::size_t>(i)]) + open_uniform(rng)) /
                             static_cast<double>(k);
            pts(i, p) = space.lo(p) + u * (space.hi(p) - space.lo(p));
        }
    }
    return PointSet(std::move(pts));
}

/// Uniformly chosen ell of the k design points, without replacement, in
/// increasing index order.
inline std::vector<Index> choose_observations(Index k, Index ell, std::uint64_t seed) {
    if (ell < 0 || ell > k) throw InputError("need 0 <= ell <= k observation locations");
    std::vector<Index> idx(static_cast<std::size_t>(k));
    std::iota(idx.begin(), idx.end(), Index{0});
    Rng rng = make_rng(seed, {0x0b5ULL});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(ell));
    std::sort(idx.begin(), idx.end());
    return idx;
}

enum class QuadratureScheme { Auto, GaussLegendre, Sobol };

struct QuadratureConfig {
    QuadratureScheme scheme = QuadratureScheme::Auto;
    int gl_nodes = 32;  // per dimension; one of 8, 16, 32, 64
    int sobol_points = 1 << 14;

    [[nodiscard]] QuadratureScheme resolve(Index d) const {
        if (scheme != QuadratureScheme::Auto) return scheme;
        return d <= 2 ? QuadratureScheme::GaussLegendre : QuadratureScheme::Sobol;
    }

    void validate() const {
        if (gl_nodes != 8 && gl_nodes != 16 && gl_nodes != 32 && gl_nodes != 64)
            throw ConfigError("gauss-legendre node count must be 8, 16, 32 or 64");
        if (sobol_points < 2) throw ConfigError("sobol point count must be >= 2");
    }
};

/// Nodes in the box with weights summing to one, so sums are averages over
/// the box under the uniform distribution.
struct QuadratureRule {
    PointSet nodes;
    Eigen::VectorXd weights;
};

namespace detail {

template <unsigned N>
void gauss_legendre_unit(std::vector<double>& x, std::vector<double>& w) {
    using G = boost::math::quadrature::gauss<double, N>;
    const auto& a = G::abscissa();
    const auto& wt = G::weights();
    x.clear();
    w.clear();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == 0.0) {
            x.push_back(0.5);
            w.push_back(0.5 * wt[i]);
            continue;
        }
        x.push_back(0.5 * (1.0 - a[i]));
        w.push_back(0.5 * wt[i]);
        x.push_back(0.5 * (1.0 + a[i]));
        w.push_back(0.5 * wt[i]);
    }
}

inline void gauss_legendre_unit(int n, std::vector<double>& x, std::vector<double>& w) {
    switch (n) {
        case 4: gauss_legendre_unit<4>(x, w); break;
        case 8: gauss_legendre_unit<8>(x, w); break;
        case 16: gauss_legendre_unit<16>(x, w); break;
        case 32: gauss_legendre_unit<32>(x, w); break;
        case 64: gauss_legendre_unit<64>(x, w); break;
        default: throw ConfigError("unsupported gauss-legendre node count " + std::to_string(n));
    }
}

}  // namespace detail

inline QuadratureRule gauss_legendre_rule(const DesignSpace& space, int nodes_per_dim) {
    space.validate();
    std::vector<double> x1, w1;
    detail::gauss_legendre_unit(nodes_per_dim, x1, w1);
    const Index d = space.dim();
    const Index m = static_cast<Index>(x1.size());
    Index total = 1;
    for (Index p = 0; p < d; ++p) total *= m;
    Eigen::MatrixXd pts(total, d);
    Eigen::VectorXd w(total);
    Eigen::VectorXd u(d);
    for (Index q = 0; q < total; ++q) {
        Index rem = q;
        double wq = 1.0;
        for (Index p = 0; p < d; ++p) {
            const Index j = rem % m;
            rem /= m;
            u(p) = x1[static_cast<std::size_t>(j)];
            wq *= w1[static_cast<std::size_t>(j)];
        }
        pts.row(q) = space.from_unit(u).transpose();
        w(q) = wq;
    }
    return {PointSet(std::move(pts)), std::move(w)};
}

/// First n points of the Sobol sequence (skipping the origin), equal weights.
inline QuadratureRule sobol_rule(const DesignSpace& space, int n) {
    space.validate();
    const Index d = space.dim();
    boost::random::sobol eng(static_cast<std::size_t>(d));
    eng.discard(static_cast<std::uintmax_t>(d));
    Eigen::MatrixXd pts(n, d);
    Eigen::VectorXd u(d);
    constexpr double scale = 0x1p-64;
    for (int q = 0; q < n; ++q) {
        for (Index p = 0; p < d; ++p) u(p) = static_cast<double>(eng()) * scale;
        pts.row(q) = space.from_unit(u).transpose();
    }
    return {PointSet(std::move(pts)), Eigen::VectorXd::Constant(n, 1.0 / n)};
}

/// Main rule and a cheaper companion used to estimate the integration error.
inline std::pair<QuadratureRule, QuadratureRule> quadrature_rules(const DesignSpace& space,
                                                                  const QuadratureConfig& cfg) {
    cfg.validate();
    if (cfg.resolve(space.dim()) == QuadratureScheme::GaussLegendre)
        return {gauss_legendre_rule(space, cfg.gl_nodes), gauss_legendre_rule(space, cfg.gl_nodes / 2)};
    return {sobol_rule(space, cfg.sobol_points), sobol_rule(space, cfg.sobol_points / 2)};
}

/// G_ij = average over the box of C_i(x0) C_j(x0).
struct ImseMomentMatrix {
    Eigen::MatrixXd G;
    double error_estimate = 0.0;
};

/// Rows are C(x0)^T at each of the given points.
inline Eigen::MatrixXd cross_cov_rows(const SkiParams& p, const Geometry& geom, const PointSet& x0s) {
    const Index k = geom.k();
    const Index ell = geom.ell();
    const double tm = p.kernel_m.spatial_variance;
    const double tw = p.kernel_w.spatial_variance;
    Eigen::MatrixXd c(x0s.size(), k + ell);
    c.leftCols(k) = p.rho * tm * corr_matrix(p.kernel_m, x0s, geom.design);
    if (ell > 0) {
        const PointSet obs = geom.obs_points();
        c.rightCols(ell) = p.rho * p.rho * tm * corr_matrix(p.kernel_m, x0s, obs) + tw * corr_matrix(p.kernel_w, x0s, obs);
    }
    return c;
}

inline Eigen::MatrixXd moment_matrix(const SkiParams& p, const Geometry& geom, const QuadratureRule& rule) {
    const Eigen::MatrixXd c = cross_cov_rows(p, geom, rule.nodes);
    return symmetrize(c.transpose() * rule.weights.asDiagonal() * c);
}

inline ImseMomentMatrix imse_moment_matrix(const SkiParams& params, const Geometry& geom, const DesignSpace& space,
                                           const QuadratureConfig& quad = {}) {
    geom.validate();
    if (space.dim() != geom.design.dim()) throw InputError("design space and design points differ in dimension");
    const auto [fine, coarse] = quadrature_rules(space, quad);
    ImseMomentMatrix out;
    out.G = moment_matrix(params, geom, fine);
    out.error_estimate = (out.G - moment_matrix(params, geom, coarse)).cwiseAbs().maxCoeff();
    return out;
}

inline Eigen::MatrixXd joint_cov_for_counts(const SkiParams& params, const NoiseModel& noise, const Geometry& geom,
                                            const Eigen::VectorXi& counts) {
    return joint_covariance_matrix(params, noise.averaged_cov(counts), geom.design, geom.obs_points());
}

/// Average of MSE*(x0; n) over the box, in closed form through G.
inline double imse(const Eigen::VectorXi& counts, const SkiParams& params, const NoiseModel& noise,
                   const Geometry& geom, const Eigen::MatrixXd& G) {
    if ((counts.array() < 1).any()) throw InputError("replication counts must be >= 1");
    const SpdFactor f(joint_cov_for_counts(params, noise, geom, counts));
    return params.prior_variance() - G.cwiseProduct(f.inverse()).sum();
}

/// Unnormalized allocation weights sqrt(sigma_i^2 [V~^{-1} G V~^{-1}]_ii),
/// with V~ the joint covariance without simulation noise.
inline Eigen::VectorXd allocation_weights(const Eigen::VectorXd& sigma_eps_sq, const SkiParams& params,
                                          const Geometry& geom, const Eigen::MatrixXd& G) {
    const Index k = geom.k();
    if (sigma_eps_sq.size() != k) throw InputError("need one simulation variance per design point");
    const Eigen::MatrixXd vt =
        joint_covariance_matrix(params, Eigen::MatrixXd::Zero(k, k), geom.design, geom.obs_points());
    const SpdFactor f(vt);
    const Eigen::MatrixXd a = f.solve(G);
    const Eigen::MatrixXd m = f.solve(Eigen::MatrixXd(a.transpose()));
    Eigen::VectorXd w(k);
    for (Index i = 0; i < k; ++i) w(i) = std::sqrt(std::max(0.0, sigma_eps_sq(i)) * std::max(0.0, m(i, i)));
    return w;
}

struct Allocation {
    Eigen::VectorXi n;
    int budget = 0;
};

/// Integer split of `total` proportional to `weights` with `floor` per entry
/// first, the remainder rounded by largest fractional part (ties to the lower
/// index). All-zero weights split evenly.
inline Eigen::VectorXi round_allocation(const Eigen::VectorXd& weights, int total, int floor = 1) {
    const Index k = weights.size();
    if (k == 0) throw InputError("allocation needs at least one point");
    if (total < floor * k) throw InputError("budget " + std::to_string(total) + " is below the floor of " +
                                            std::to_string(floor) + " per point for " + std::to_string(k) + " points");
    if ((weights.array() < 0.0).any() || !weights.allFinite()) throw InputError("allocation weights must be >= 0");
    const int rem = total - floor * static_cast<int>(k);
    Eigen::VectorXd w = weights;
    if (!(w.sum() > 0.0)) w.setOnes();
    const Eigen::VectorXd ideal = static_cast<double>(rem) * w / w.sum();
    Eigen::VectorXi n(k);
    std::vector<std::pair<double, Index>> frac;
    int used = 0;
    for (Index i = 0; i < k; ++i) {
        const double fl = std::floor(ideal(i));
        n(i) = floor + static_cast<int>(fl);
        used += static_cast<int>(fl);
        frac.emplace_back(ideal(i) - fl, i);
    }
    std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int j = 0; j < rem - used; ++j) n(frac[static_cast<std::size_t>(j)].second) += 1;
    return n;
}

inline Allocation allocate(int budget, const Eigen::VectorXd& sigma_eps_sq, const SkiParams& params,
                           const Geometry& geom, const Eigen::MatrixXd& G) {
    if (budget < geom.k())
        throw InputError("budget " + std::to_string(budget) + " is smaller than k = " + std::to_string(geom.k()));
    return Allocation{round_allocation(allocation_weights(sigma_eps_sq, params, geom, G), budget, 1), budget};
}

/// Draws `count` replications at point `index`, numbered from `first`.
using ReplicationSource = std::function<std::vector<double>(Index index, int count, int first)>;

struct TwoStageConfig {
    int budget = 700;       // simulation replications N
    int n0 = 20;            // stage-1 replications per design point
    int real_budget = 1000; // total real-system replications over the ell locations
    int real_n0 = 20;       // stage-1 real replications per location
    FitConfig fit;
    QuadratureConfig quad;
};

struct TwoStageResult {
    FitReport fit;
    Allocation sim_allocation;
    Allocation real_allocation;
    Dataset data;
    std::vector<std::vector<double>> real_replications;
};

/// Pilot replications everywhere, a fit, then the remaining simulation and
/// real budgets allocated by the IMSE weights and a refit on all data.
inline TwoStageResult two_stage(const ReplicationSource& sim, const ReplicationSource& real, const PointSet& design,
                                const std::vector<Index>& obs_index, const DesignSpace& space,
                                const TwoStageConfig& cfg) {
    const Index k = design.size();
    const Index ell = static_cast<Index>(obs_index.size());
    if (cfg.n0 < 2) throw InputError("stage-1 replications per point must be >= 2");
    if (cfg.budget < k * cfg.n0)
        throw InputError("budget " + std::to_string(cfg.budget) + " is below k * n0 = " + std::to_string(k * cfg.n0));
    if (ell > 0 && cfg.real_budget < ell * cfg.real_n0)
        throw InputError("real budget is below ell * real_n0");

    std::vector<std::vector<double>> reps(static_cast<std::size_t>(k));
    for (Index i = 0; i < k; ++i) reps[static_cast<std::size_t>(i)] = sim(i, cfg.n0, 0);
    std::vector<std::vector<double>> real_reps(static_cast<std::size_t>(ell));
    if (ell > 0)
        for (Index j = 0; j < ell; ++j) real_reps[static_cast<std::size_t>(j)] = real(j, cfg.real_n0, 0);

    auto build = [&] {
        Eigen::VectorXd z(ell);
        for (Index j = 0; j < ell; ++j) {
            const auto& r = real_reps[static_cast<std::size_t>(j)];
            z(j) = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
        }
        return Dataset::from_replications(design, reps, obs_index, z);
    };

    Dataset data = build();
    FitReport fit = fit_mle(data, BasisSpec::constant(), cfg.fit);

    const int sim_extra = cfg.budget - static_cast<int>(k) * cfg.n0;
    const int real_extra = ell > 0 ? cfg.real_budget - static_cast<int>(ell) * cfg.real_n0 : 0;
    Eigen::VectorXi sim_add = Eigen::VectorXi::Zero(k);
    Eigen::VectorXi real_add = Eigen::VectorXi::Zero(ell);
    if (sim_extra > 0 || real_extra > 0) {
        const Geometry geom = data.geometry();
        const Eigen::MatrixXd G = imse_moment_matrix(fit.fitted, geom, space, cfg.quad).G;
        if (sim_extra > 0) sim_add = round_allocation(allocation_weights(fit.sigma_eps_hat, fit.fitted, geom, G), sim_extra, 0);
        if (real_extra > 0) {
            // The same weight rule on the observation rows, with the real-system sample variances.
            Eigen::VectorXd real_var(ell);
            for (Index j = 0; j < ell; ++j) {
                const auto& r = real_reps[static_cast<std::size_t>(j)];
                const double m = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
                double ss = 0.0;
                for (double v : r) ss += (v - m) * (v - m);
                real_var(j) = ss / static_cast<double>(r.size() - 1);
            }
            const Eigen::MatrixXd vt = joint_covariance_matrix(fit.fitted, Eigen::MatrixXd::Zero(k, k), geom.design,
                                                               geom.obs_points());
            const SpdFactor f(vt);
            const Eigen::MatrixXd a = f.solve(G);
            const Eigen::MatrixXd m = f.solve(Eigen::MatrixXd(a.transpose()));
            Eigen::VectorXd w(ell);
            for (Index j = 0; j < ell; ++j) w(j) = std::sqrt(real_var(j) * std::max(0.0, m(k + j, k + j)));
            real_add = round_allocation(w, real_extra, 0);
        }
        for (Index i = 0; i < k; ++i)
            if (sim_add(i) > 0) {
                auto more = sim(i, sim_add(i), cfg.n0);
                auto& r = reps[static_cast<std::size_t>(i)];
                r.insert(r.end(), more.begin(), more.end());
            }
        for (Index j = 0; j < ell; ++j)
            if (real_add(j) > 0) {
                auto more = real(j, real_add(j), cfg.real_n0);
                auto& r = real_reps[static_cast<std::size_t>(j)];
                r.insert(r.end(), more.begin(), more.end());
            }
        data = build();
        fit = fit_mle(data, BasisSpec::constant(), cfg.fit);
    }

    TwoStageResult out;
    out.fit = std::move(fit);
    out.sim_allocation = Allocation{data.counts, cfg.budget};
    Eigen::VectorXi real_n(ell);
    for (Index j = 0; j < ell; ++j) real_n(j) = static_cast<int>(real_reps[static_cast<std::size_t>(j)].size());
    out.real_allocation = Allocation{real_n, cfg.real_budget};
    out.data = std::move(data);
    out.real_replications = std::move(real_reps);
    return out;
}

}  // namespace ski
