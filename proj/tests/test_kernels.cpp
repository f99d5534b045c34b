#include <cmath>
#include <random>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "ski/errors.hpp"
#include "ski/kernels.hpp"
#include "ski/linalg.hpp"
#include "ski/random.hpp"

using ski::KernelSpec;
using ski::PointSet;
using Eigen::VectorXd;
using ski::Index;

namespace {

PointSet random_points(ski::Rng& rng, int n, int d) {
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    Eigen::MatrixXd m(n, d);
    for (int i = 0; i < n; ++i)
        for (int p = 0; p < d; ++p) m(i, p) = u(rng);
    return PointSet(m);
}

}  // namespace

TEST(Correlation, ZeroLagIsOne) {
    const KernelSpec k = KernelSpec::isotropic(3.0, 17.0);
    EXPECT_EQ(ski::correlation(k, VectorXd::Constant(2, 0.3), VectorXd::Constant(2, 0.3)), 1.0);
}

TEST(Correlation, ClosedFormOneDimension) {
    const KernelSpec k = KernelSpec::isotropic(1.0, 5.0);
    EXPECT_NEAR(ski::correlation(k, VectorXd::Zero(1), VectorXd::Ones(1)), 6.7379469990854670e-3, 1e-15);
}

TEST(Correlation, ClosedFormTwoDimensions) {
    const KernelSpec k = KernelSpec::anisotropic(1.0, Eigen::Vector2d(1.0, 1.0));
    EXPECT_DOUBLE_EQ(ski::correlation(k, Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(1.0, 2.0)), std::exp(-5.0));
}

TEST(Correlation, AnisotropicWeightsEachCoordinate) {
    const KernelSpec k = KernelSpec::anisotropic(1.0, Eigen::Vector2d(0.5, 3.0));
    EXPECT_DOUBLE_EQ(ski::correlation(k, Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(2.0, 1.0)),
                     std::exp(-(0.5 * 4.0 + 3.0 * 1.0)));
}

TEST(Correlation, CovarianceScalesBySpatialVariance) {
    const KernelSpec k = KernelSpec::isotropic(2.5, 1.0);
    EXPECT_DOUBLE_EQ(ski::covariance(k, VectorXd::Zero(1), VectorXd::Ones(1)), 2.5 * std::exp(-1.0));
}

TEST(Correlation, DimensionMismatchThrows) {
    const KernelSpec iso = KernelSpec::isotropic(1.0, 1.0);
    EXPECT_THROW((void)ski::correlation(iso, VectorXd::Zero(2), VectorXd::Zero(3)), ski::InputError);
    const KernelSpec an = KernelSpec::anisotropic(1.0, Eigen::Vector3d(1.0, 1.0, 1.0));
    EXPECT_THROW((void)ski::correlation(an, VectorXd::Zero(2), VectorXd::Zero(2)), ski::InputError);
}

TEST(Correlation, SymmetricInArguments) {
    ski::Rng rng(3);
    const KernelSpec k = KernelSpec::anisotropic(1.0, Eigen::Vector3d(0.2, 1.5, 4.0));
    const PointSet pts = random_points(rng, 20, 3);
    for (Index i = 0; i < pts.size(); ++i)
        for (Index j = 0; j < pts.size(); ++j)
            EXPECT_EQ(ski::correlation(k, pts[i], pts[j]), ski::correlation(k, pts[j], pts[i]));
}

TEST(KernelSpec, ValidationRejectsBadValues) {
    EXPECT_THROW(KernelSpec::isotropic(-1.0, 1.0).validate(), ski::InputError);
    EXPECT_THROW(KernelSpec::isotropic(1.0, 0.0).validate(), ski::InputError);
    EXPECT_THROW(KernelSpec::isotropic(1.0, NAN).validate(), ski::InputError);
    EXPECT_THROW(KernelSpec::anisotropic(1.0, Eigen::Vector2d(1.0, 1.0)).validate(3), ski::InputError);
    EXPECT_NO_THROW(KernelSpec::isotropic(0.0, 1.0).validate(4));
}

TEST(CorrMatrix, SinglePoint) {
    const PointSet a{{0.7}};
    const Eigen::MatrixXd r = ski::corr_matrix(KernelSpec::isotropic(1.0, 9.0), a);
    ASSERT_EQ(r.rows(), 1);
    ASSERT_EQ(r.cols(), 1);
    EXPECT_EQ(r(0, 0), 1.0);
}

TEST(CorrMatrix, TwoPointsClosedForm) {
    const PointSet a{{0.0}, {1.0}};
    const Eigen::MatrixXd r = ski::corr_matrix(KernelSpec::isotropic(1.0, 5.0), a);
    EXPECT_EQ(r(0, 0), 1.0);
    EXPECT_EQ(r(1, 1), 1.0);
    EXPECT_DOUBLE_EQ(r(0, 1), std::exp(-5.0));
    EXPECT_DOUBLE_EQ(r(1, 0), std::exp(-5.0));
}

TEST(CorrMatrix, CrossMatrixTransposes) {
    ski::Rng rng(5);
    const KernelSpec k = KernelSpec::isotropic(1.0, 0.8);
    const PointSet a = random_points(rng, 3, 2), b = random_points(rng, 2, 2);
    const Eigen::MatrixXd ab = ski::corr_matrix(k, a, b);
    const Eigen::MatrixXd ba = ski::corr_matrix(k, b, a);
    ASSERT_EQ(ab.rows(), 3);
    ASSERT_EQ(ab.cols(), 2);
    EXPECT_EQ((ab - ba.transpose()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(CorrMatrix, EntriesMatchScalarCorrelation) {
    ski::Rng rng(6);
    const KernelSpec k = KernelSpec::anisotropic(1.0, Eigen::Vector2d(0.3, 2.0));
    const PointSet a = random_points(rng, 5, 2), b = random_points(rng, 4, 2);
    const Eigen::MatrixXd ab = ski::corr_matrix(k, a, b);
    for (Index i = 0; i < 5; ++i)
        for (Index j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(ab(i, j), ski::correlation(k, a[i], b[j]));
    const VectorXd v = ski::corr_vector(k, a, b[2]);
    for (Index i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(v(i), ab(i, 2));
}

TEST(CorrMatrix, DimensionMismatchThrows) {
    const KernelSpec k = KernelSpec::isotropic(1.0, 1.0);
    EXPECT_THROW((void)ski::corr_matrix(k, PointSet{{0.0}}, PointSet{{0.0, 1.0}}), ski::InputError);
}

TEST(CorrMatrix, SymmetricPositiveSemidefinite) {
    ski::Rng rng(7);
    std::uniform_int_distribution<int> size(1, 30);
    std::uniform_real_distribution<double> th(0.05, 20.0);
    for (int t = 0; t < 60; ++t) {
        const int n = size(rng), d = 1 + t % 3;
        const PointSet pts = random_points(rng, n, d);
        const KernelSpec k = KernelSpec::isotropic(1.0, th(rng));
        const Eigen::MatrixXd r = ski::corr_matrix(k, pts);
        EXPECT_EQ((r - r.transpose()).cwiseAbs().maxCoeff(), 0.0);
        for (int i = 0; i < n; ++i) EXPECT_EQ(r(i, i), 1.0);
        const double lmin = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(r).eigenvalues().minCoeff();
        EXPECT_GE(lmin, -1e-10 * r.trace());
    }
}

TEST(CorrelationProperty, TranslationInvariant) {
    ski::Rng rng(8);
    const KernelSpec k = KernelSpec::anisotropic(1.0, Eigen::Vector3d(0.4, 1.1, 2.7));
    std::normal_distribution<double> n(0.0, 3.0);
    for (int t = 0; t < 200; ++t) {
        const PointSet p = random_points(rng, 2, 3);
        const VectorXd shift = Eigen::Vector3d(n(rng), n(rng), n(rng));
        const double a = ski::correlation(k, p[0], p[1]);
        const double b = ski::correlation(k, VectorXd(p[0] + shift), VectorXd(p[1] + shift));
        EXPECT_NEAR(a, b, 1e-12 * std::max(1.0, a));
    }
}

TEST(CorrelationProperty, ScaleConsistency) {
    ski::Rng rng(9);
    std::uniform_real_distribution<double> cs(0.2, 5.0);
    const Eigen::Vector2d theta(0.7, 1.9);
    for (int t = 0; t < 200; ++t) {
        const PointSet p = random_points(rng, 2, 2);
        const double c = cs(rng);
        const double a = ski::correlation(KernelSpec::anisotropic(1.0, theta), p[0], p[1]);
        const double b = ski::correlation(KernelSpec::anisotropic(1.0, c * c * theta), VectorXd(p[0] / c),
                                          VectorXd(p[1] / c));
        EXPECT_NEAR(a, b, 1e-12);
    }
}

TEST(CorrelationProperty, DecaysWithDistance) {
    const KernelSpec k = KernelSpec::isotropic(1.0, 2.0);
    double prev = 1.0;
    for (double r = 0.1; r < 10.0; r += 0.1) {
        const double c = ski::correlation(k, VectorXd::Zero(1), VectorXd::Constant(1, r));
        EXPECT_LT(c, prev);
        prev = c;
    }
    EXPECT_LT(prev, 1e-80);
}

TEST(CorrMatrix, ThetaDerivativeMatchesFiniteDifference) {
    ski::Rng rng(10);
    const PointSet a = random_points(rng, 4, 2), b = random_points(rng, 3, 2);
    const Eigen::Vector2d theta(0.6, 1.4);
    for (Index p = 0; p < 2; ++p) {
        const Eigen::MatrixXd d = ski::corr_matrix_dtheta(KernelSpec::anisotropic(1.0, theta), a, b, p);
        const double h = 1e-6;
        Eigen::Vector2d tp = theta, tm = theta;
        tp(p) += h;
        tm(p) -= h;
        const Eigen::MatrixXd fd = (ski::corr_matrix(KernelSpec::anisotropic(1.0, tp), a, b) -
                                    ski::corr_matrix(KernelSpec::anisotropic(1.0, tm), a, b)) /
                                   (2.0 * h);
        EXPECT_LT((d - fd).cwiseAbs().maxCoeff(), 1e-7);
    }
}

TEST(SpdFactor, NoNuggetWhenPlainFactorizationSucceeds) {
    const PointSet pts{{0.0}, {0.5}, {1.0}};
    const ski::SpdFactor f(ski::corr_matrix(KernelSpec::isotropic(1.0, 2.0), pts));
    EXPECT_EQ(f.nugget(), 0.0);
}

TEST(SpdFactor, NuggetRescuesDuplicatePoints) {
    const PointSet pts{{0.3}, {0.3}, {0.8}};
    const Eigen::MatrixXd r = ski::corr_matrix(KernelSpec::isotropic(1.0, 2.0), pts);
    const ski::SpdFactor f(r);
    EXPECT_GT(f.nugget(), 0.0);
    EXPECT_LE(f.nugget(), 1e-6 * r.diagonal().mean() * (1.0 + 1e-12));
    EXPECT_TRUE(std::isfinite(f.log_det()));
}

TEST(SpdFactor, IndefiniteMatrixThrowsWithEigenvalue) {
    Eigen::MatrixXd a(2, 2);
    a << 1.0, 2.0, 2.0, 1.0;
    try {
        const ski::SpdFactor f(a);
        FAIL() << "expected a numeric error";
    } catch (const ski::NumericError& e) {
        EXPECT_NEAR(e.smallest_eigenvalue(), -1.0, 1e-12);
    }
}
