#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <sstream>

#include "ski/errors.hpp"

namespace ski {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Nugget schedule applied when a plain Cholesky factorization fails. Values are
/// multiples of the mean diagonal.
struct NuggetPolicy {
    double first = 1e-10;
    double last = 1e-6;
    double growth = 10.0;
};

/// Cholesky factor of a symmetric positive-definite matrix. A diagonal nugget is
/// added only when the plain factorization fails.
class SpdFactor {
public:
    SpdFactor() = default;

    explicit SpdFactor(const MatrixXd& a, const NuggetPolicy& policy = {}) { compute(a, policy); }

    void compute(const MatrixXd& a, const NuggetPolicy& policy = {}) {
        n_ = a.rows();
        nugget_ = 0.0;
        if (n_ == 0) {
            llt_ = Eigen::LLT<MatrixXd>();
            return;
        }
        llt_.compute(a);
        if (llt_.info() == Eigen::Success && finite_factor()) return;

        const double mean_diag = std::abs(a.diagonal().mean());
        const double base = mean_diag > 0.0 ? mean_diag : 1.0;
        for (double rel = policy.first; rel <= policy.last * (1.0 + 1e-12); rel *= policy.growth) {
            MatrixXd jittered = a;
            jittered.diagonal().array() += rel * base;
            llt_.compute(jittered);
            if (llt_.info() == Eigen::Success && finite_factor()) {
                nugget_ = rel * base;
                return;
            }
        }
        Eigen::SelfAdjointEigenSolver<MatrixXd> eig(a, Eigen::EigenvaluesOnly);
        const double smallest = eig.eigenvalues().size() > 0 ? eig.eigenvalues().minCoeff() : 0.0;
        std::ostringstream msg;
        msg << "covariance matrix of size " << n_ << " is not positive definite (smallest eigenvalue "
            << smallest << ")";
        throw NumericError(msg.str(), smallest);
    }

    [[nodiscard]] Index size() const noexcept { return n_; }
    [[nodiscard]] double nugget() const noexcept { return nugget_; }

    template <typename Rhs>
    [[nodiscard]] MatrixXd solve(const Eigen::MatrixBase<Rhs>& b) const {
        if (n_ == 0) return MatrixXd(0, b.cols());
        return llt_.solve(b);
    }

    [[nodiscard]] VectorXd solve_vec(const VectorXd& b) const {
        if (n_ == 0) return VectorXd(0);
        return llt_.solve(b);
    }

    /// x^T A^{-1} x
    [[nodiscard]] double quad_form(const VectorXd& x) const {
        if (n_ == 0) return 0.0;
        const VectorXd w = llt_.matrixL().solve(x);
        return w.squaredNorm();
    }

    [[nodiscard]] double log_det() const {
        if (n_ == 0) return 0.0;
        return 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
    }

    [[nodiscard]] MatrixXd inverse() const { return solve(MatrixXd::Identity(n_, n_)); }

    [[nodiscard]] MatrixXd lower() const {
        if (n_ == 0) return MatrixXd(0, 0);
        return llt_.matrixL().toDenseMatrix();
    }

private:
    [[nodiscard]] bool finite_factor() const {
        return llt_.matrixLLT().diagonal().allFinite() && (llt_.matrixLLT().diagonal().array() > 0.0).all();
    }

    Eigen::LLT<MatrixXd> llt_;
    Index n_ = 0;
    double nugget_ = 0.0;
};

inline MatrixXd symmetrize(const MatrixXd& a) { return 0.5 * (a + a.transpose()); }

}  // namespace ski
