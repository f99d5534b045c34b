#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ski/errors.hpp"
#include "ski/linalg.hpp"

namespace ski {

using Point = Eigen::VectorXd;

enum class KernelFamily { SquaredExponential };

/// Stationary covariance Sigma(x, x') = spatial_variance * R(x - x'; lengthscales).
///
/// `lengthscales` holds either one value shared by every input dimension or one
/// value per dimension. The correlation is exp(-sum_p theta_p (x_p - x'_p)^2).
struct KernelSpec {
    KernelFamily family = KernelFamily::SquaredExponential;
    double spatial_variance = 1.0;
    Eigen::VectorXd lengthscales = Eigen::VectorXd::Ones(1);

    static KernelSpec isotropic(double tau_sq, double theta) {
        KernelSpec k;
        k.spatial_variance = tau_sq;
        k.lengthscales = Eigen::VectorXd::Constant(1, theta);
        return k;
    }

    static KernelSpec anisotropic(double tau_sq, Eigen::VectorXd thetas) {
        KernelSpec k;
        k.spatial_variance = tau_sq;
        k.lengthscales = std::move(thetas);
        return k;
    }

    [[nodiscard]] bool is_isotropic() const noexcept { return lengthscales.size() == 1; }

    [[nodiscard]] Index num_lengthscales() const noexcept { return lengthscales.size(); }

    [[nodiscard]] double theta(Index p) const { return is_isotropic() ? lengthscales(0) : lengthscales(p); }

    void validate(Index dim = -1) const {
        if (!(spatial_variance >= 0.0) || !std::isfinite(spatial_variance))
            throw InputError("kernel spatial variance must be finite and >= 0");
        if (lengthscales.size() == 0) throw InputError("kernel needs at least one lengthscale");
        for (Index p = 0; p < lengthscales.size(); ++p)
            if (!(lengthscales(p) > 0.0) || !std::isfinite(lengthscales(p)))
                throw InputError("kernel lengthscales must be finite and > 0");
        if (dim >= 0 && !is_isotropic() && lengthscales.size() != dim)
            throw InputError("kernel has " + std::to_string(lengthscales.size()) +
                             " lengthscales but inputs have dimension " + std::to_string(dim));
    }
};

/// Ordered set of k points in R^d, stored one point per row.
class PointSet {
public:
    PointSet() = default;
    explicit PointSet(Eigen::MatrixXd rows) : rows_(std::move(rows)) {}

    PointSet(std::initializer_list<std::initializer_list<double>> pts) {
        const Index k = static_cast<Index>(pts.size());
        const Index d = k > 0 ? static_cast<Index>(pts.begin()->size()) : 0;
        rows_.resize(k, d);
        Index i = 0;
        for (const auto& p : pts) {
            if (static_cast<Index>(p.size()) != d) throw InputError("points have differing dimensions");
            Index j = 0;
            for (double v : p) rows_(i, j++) = v;
            ++i;
        }
    }

    static PointSet from_vectors(const std::vector<Point>& pts) {
        if (pts.empty()) return {};
        Eigen::MatrixXd m(static_cast<Index>(pts.size()), pts.front().size());
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (pts[i].size() != m.cols()) throw InputError("points have differing dimensions");
            m.row(static_cast<Index>(i)) = pts[i].transpose();
        }
        return PointSet(std::move(m));
    }

    [[nodiscard]] Index size() const noexcept { return rows_.rows(); }
    [[nodiscard]] Index dim() const noexcept { return rows_.cols(); }
    [[nodiscard]] bool empty() const noexcept { return rows_.rows() == 0; }
    [[nodiscard]] Point operator[](Index i) const { return rows_.row(i).transpose(); }
    [[nodiscard]] const Eigen::MatrixXd& matrix() const noexcept { return rows_; }

    [[nodiscard]] PointSet subset(const std::vector<Index>& idx) const {
        Eigen::MatrixXd m(static_cast<Index>(idx.size()), dim());
        for (std::size_t j = 0; j < idx.size(); ++j) m.row(static_cast<Index>(j)) = rows_.row(idx[j]);
        return PointSet(std::move(m));
    }

    void append(const Point& p) {
        if (!empty() && p.size() != dim()) throw InputError("appended point has wrong dimension");
        Eigen::MatrixXd m(size() + 1, p.size());
        if (!empty()) m.topRows(size()) = rows_;
        m.row(size()) = p.transpose();
        rows_ = std::move(m);
    }

private:
    Eigen::MatrixXd rows_;
};

namespace detail {

inline double weighted_sq_distance(const KernelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& x,
                                   const Eigen::Ref<const Eigen::VectorXd>& y) {
    double s = 0.0;
    if (spec.is_isotropic()) {
        s = spec.lengthscales(0) * (x - y).squaredNorm();
    } else {
        for (Index p = 0; p < x.size(); ++p) {
            const double d = x(p) - y(p);
            s += spec.lengthscales(p) * d * d;
        }
    }
    return s;
}

inline void check_dims(const KernelSpec& spec, Index a, Index b) {
    if (a != b) throw InputError("point dimension mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
    if (!spec.is_isotropic() && spec.lengthscales.size() != a)
        throw InputError("kernel has " + std::to_string(spec.lengthscales.size()) +
                         " lengthscales but points have dimension " + std::to_string(a));
}

}  // namespace detail

inline double correlation(const KernelSpec& spec, const Point& x, const Point& y) {
    detail::check_dims(spec, x.size(), y.size());
    return std::exp(-detail::weighted_sq_distance(spec, x, y));
}

inline double covariance(const KernelSpec& spec, const Point& x, const Point& y) {
    return spec.spatial_variance * correlation(spec, x, y);
}

/// |A| x |B| correlation matrix with entry (i, j) = correlation(A_i, B_j).
inline Eigen::MatrixXd corr_matrix(const KernelSpec& spec, const PointSet& a, const PointSet& b) {
    if (a.empty() || b.empty()) return Eigen::MatrixXd(a.size(), b.size());
    detail::check_dims(spec, a.dim(), b.dim());
    Eigen::MatrixXd r(a.size(), b.size());
    const auto& am = a.matrix();
    const auto& bm = b.matrix();
    for (Index i = 0; i < a.size(); ++i)
        for (Index j = 0; j < b.size(); ++j)
            r(i, j) = std::exp(-detail::weighted_sq_distance(spec, am.row(i).transpose(), bm.row(j).transpose()));
    return r;
}

/// Symmetric correlation matrix of one point set (exact unit diagonal).
inline Eigen::MatrixXd corr_matrix(const KernelSpec& spec, const PointSet& a) {
    Eigen::MatrixXd r(a.size(), a.size());
    if (a.empty()) return r;
    detail::check_dims(spec, a.dim(), a.dim());
    const auto& am = a.matrix();
    for (Index i = 0; i < a.size(); ++i) {
        r(i, i) = 1.0;
        for (Index j = 0; j < i; ++j) {
            const double v = std::exp(-detail::weighted_sq_distance(spec, am.row(i).transpose(), am.row(j).transpose()));
            r(i, j) = v;
            r(j, i) = v;
        }
    }
    return r;
}

inline Eigen::VectorXd corr_vector(const KernelSpec& spec, const PointSet& a, const Point& x) {
    Eigen::VectorXd r(a.size());
    if (a.empty()) return r;
    detail::check_dims(spec, a.dim(), x.size());
    for (Index i = 0; i < a.size(); ++i)
        r(i) = std::exp(-detail::weighted_sq_distance(spec, a.matrix().row(i).transpose(), x));
    return r;
}

/// Entrywise derivative of corr_matrix(spec, a, b) with respect to lengthscale p.
/// For an isotropic kernel p must be 0 and the derivative is taken with respect to
/// the shared lengthscale.
inline Eigen::MatrixXd corr_matrix_dtheta(const KernelSpec& spec, const PointSet& a, const PointSet& b, Index p) {
    Eigen::MatrixXd r = corr_matrix(spec, a, b);
    const auto& am = a.matrix();
    const auto& bm = b.matrix();
    for (Index i = 0; i < a.size(); ++i)
        for (Index j = 0; j < b.size(); ++j) {
            double sq = 0.0;
            if (spec.is_isotropic()) {
                sq = (am.row(i) - bm.row(j)).squaredNorm();
            } else {
                const double d = am(i, p) - bm(j, p);
                sq = d * d;
            }
            r(i, j) *= -sq;
        }
    return r;
}

}  // namespace ski
