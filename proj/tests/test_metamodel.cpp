#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "oracles.hpp"
#include "ski/errors.hpp"
#include "ski/metamodel.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;
using ski::Dataset;
using ski::FittedModel;
using ski::Index;
using ski::KernelSpec;
using ski::NoiseModel;
using ski::PointSet;
using ski::SkiParams;

namespace {

SkiParams params_1d(double rho, double tm, double th_m, double tw, double th_w, double sz, double beta = 0.0,
                    double gamma = 0.0) {
    SkiParams p;
    p.rho = rho;
    p.beta = VectorXd::Constant(1, beta);
    p.gamma = VectorXd::Constant(1, gamma);
    p.kernel_m = KernelSpec::isotropic(tm, th_m);
    p.kernel_w = KernelSpec::isotropic(tw, th_w);
    p.sigma_zeta_sq = sz;
    return p;
}

double rel_diff(double a, double b, double floor) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor}); }

}  // namespace

// ---- assemble_joint_cov ----

TEST(JointCov, SingleDesignPoint) {
    const SkiParams p = params_1d(1.0, 1.0, 1.0, 1.0, 1.0, 0.1);
    const Dataset d = Dataset::from_summary(PointSet{{0.5}}, VectorXd::Zero(1), VectorXi::Constant(1, 2));
    const auto jc = ski::assemble_joint_cov(p, NoiseModel::independent(VectorXd::Constant(1, 2.0)), d);
    ASSERT_EQ(jc.V.rows(), 1);
    EXPECT_DOUBLE_EQ(jc.V(0, 0), 2.0);
}

TEST(JointCov, RhoZeroDecouples) {
    const SkiParams p = params_1d(0.0, 1.3, 2.0, 0.7, 4.0, 0.25);
    const PointSet design{{0.1}, {0.6}};
    const Dataset d = Dataset::from_summary(design, VectorXd::Zero(2), VectorXi::Constant(2, 3), {1}, VectorXd::Zero(1));
    const auto jc = ski::assemble_joint_cov(p, NoiseModel::independent(VectorXd::Constant(2, 0.5)), d);
    EXPECT_EQ(MatrixXd(jc.V12()).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_DOUBLE_EQ(jc.V22()(0, 0), 0.7 + 0.25);
}

TEST(JointCov, EntriesMatchScalarOracle) {
    ski::Rng rng(21);
    for (int t = 0; t < 20; ++t) {
        const oracle::Instance in = oracle::random_instance(rng, 2 + t % 5, 1 + t % 2);
        const auto jc = ski::assemble_joint_cov(in.params, in.noise, in.data);
        const auto g = oracle::joint_gaussian(in);
        const Index n = in.data.k() + in.data.ell();
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < n; ++j) EXPECT_NEAR(jc.V(i, j), g.cov(i, j), 1e-13 * (1.0 + std::abs(g.cov(i, j))));
    }
}

TEST(JointCov, CrnCorrelationScalesOffDiagonal) {
    MatrixXd corr(2, 2);
    corr << 1.0, 0.6, 0.6, 1.0;
    const NoiseModel n{Eigen::Vector2d(2.0, 8.0), corr};
    const MatrixXd c = n.averaged_cov(Eigen::Vector2i(4, 2));
    EXPECT_DOUBLE_EQ(c(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(c(1, 1), 4.0);
    EXPECT_DOUBLE_EQ(c(0, 1), std::sqrt(2.0 * 8.0 / 8.0) * 0.6);
}

TEST(JointCov, NonPositiveDefiniteReportsEigenvalue) {
    MatrixXd corr(2, 2);
    corr << 1.0, 3.0, 3.0, 1.0;
    const SkiParams p = params_1d(1.0, 1e-3, 1.0, 1.0, 1.0, 0.1);
    const Dataset d = Dataset::from_summary(PointSet{{0.0}, {1.0}}, VectorXd::Zero(2), VectorXi::Ones(2));
    try {
        (void)ski::assemble_joint_cov(p, NoiseModel{VectorXd::Constant(2, 1.0), corr}, d);
        FAIL() << "expected a numeric error";
    } catch (const ski::NumericError& e) {
        EXPECT_LT(e.smallest_eigenvalue(), -1.0);
    }
}

TEST(Dataset, RejectsMalformedInput) {
    EXPECT_THROW(Dataset::from_summary(PointSet(), VectorXd(0), VectorXi(0)), ski::InputError);
    const PointSet two{{0.0}, {1.0}};
    EXPECT_THROW(Dataset::from_summary(two, VectorXd::Zero(2), VectorXi::Ones(2), {0, 0}, VectorXd::Zero(2)),
                 ski::InputError);
    EXPECT_THROW(Dataset::from_summary(two, VectorXd::Zero(2), VectorXi::Ones(2), {2}, VectorXd::Zero(1)),
                 ski::InputError);
    EXPECT_THROW(Dataset::from_summary(two, VectorXd::Zero(2), VectorXi::Ones(2), {1}, VectorXd::Zero(2)),
                 ski::InputError);
    EXPECT_THROW(Dataset::from_summary(two, VectorXd::Zero(2), VectorXi::Zero(2)), ski::InputError);
}

TEST(Prediction, DimensionMismatchThrows) {
    ski::Rng rng(1);
    const auto in = oracle::random_instance(rng, 3, 1);
    const FittedModel m(in.params, in.noise, in.data);
    EXPECT_THROW((void)m.predict_ski(VectorXd::Zero(3)), ski::InputError);
}

// ---- predict_ski ----

TEST(PredictSki, ReducesToSkWithRhoOneAndNoObservations) {
    ski::Rng rng(2);
    for (int t = 0; t < 30; ++t) {
        auto in = oracle::random_instance(rng, 1 + t % 8, 0);
        in.params.rho = 1.0;
        in.params.gamma.setZero();
        in.params.kernel_w.spatial_variance = 0.0;
        const FittedModel m(in.params, in.noise, in.data);
        const auto a = m.predict_ski(in.x0), b = m.predict_sk(in.x0);
        EXPECT_NEAR(a.mean, b.mean, 1e-12 * (1.0 + std::abs(b.mean)));
        EXPECT_NEAR(a.mse, b.mse, 1e-12);
    }
}

TEST(PredictSki, InterpolatesNoiseFreeObservation) {
    const SkiParams p = params_1d(0.8, 1.2, 3.0, 0.6, 2.0, 0.0, 0.4, -0.3);
    const PointSet design{{0.1}, {0.45}, {0.9}};
    const Dataset d =
        Dataset::from_summary(design, Eigen::Vector3d(0.3, -0.2, 1.1), VectorXi::Ones(3), {0, 1, 2}, Eigen::Vector3d(1.7, -0.4, 0.9));
    const FittedModel m(p, NoiseModel::homoskedastic(3, 0.0), d);
    const auto r = m.predict_ski(design[0]);
    EXPECT_NEAR(r.mean, 1.7, 1e-8);
    EXPECT_NEAR(r.mse, 0.0, 1e-8);
}

TEST(PredictSki, MatchesExactGaussianConditioning) {
    ski::Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        const Index k = 1 + t % 7;
        const auto in = oracle::random_instance(rng, k, t % (k + 1), 1 + t % 2);
        const FittedModel m(in.params, in.noise, in.data);
        const auto g = oracle::joint_gaussian(in);
        VectorXd values(in.data.k() + in.data.ell());
        values << in.data.ybar, in.data.z;
        const auto c = oracle::condition(g, oracle::range(0, g.y0()), values, g.z0());
        const auto r = m.predict_ski(in.x0);
        EXPECT_NEAR(r.mean, c.mean, 1e-8 * (1.0 + std::abs(c.mean)));
        EXPECT_NEAR(r.mse, c.var, 1e-8 * (1.0 + c.var));
        EXPECT_GE(r.mse, -1e-10);
    }
}

TEST(PredictSki, MonteCarloOracle) {
    ski::Rng rng(4);
    const auto in = oracle::random_instance(rng, 2, 1, 1);
    const FittedModel m(in.params, in.noise, in.data);
    const auto g = oracle::joint_gaussian(in);
    const MatrixXd draws = oracle::draw_joint(g, 200000, rng);
    VectorXd q(3);
    q << in.data.ybar, in.data.z;
    const auto fit = oracle::monte_carlo_conditional(draws.leftCols(3), draws.col(g.z0()), q);
    const auto r = m.predict_ski(in.x0);
    EXPECT_LE(std::abs(r.mean - fit.mean_at), 3.0 * fit.mean_se);
    EXPECT_LE(std::abs(r.mse - fit.resid_var), 3.0 * fit.resid_var_se);
}

// ---- predict_sk ----

TEST(PredictSk, InterpolatesWithoutNoise) {
    ski::Rng rng(5);
    const auto in = oracle::random_instance(rng, 4, 0);
    const FittedModel m(in.params, NoiseModel::homoskedastic(4, 0.0), in.data);
    for (Index i = 0; i < 4; ++i) EXPECT_NEAR(m.predict_sk(in.data.design[i]).mean, in.data.ybar(i), 1e-7);
}

TEST(PredictSk, HugeNoiseReturnsTrend) {
    ski::Rng rng(6);
    const auto in = oracle::random_instance(rng, 5, 0);
    const FittedModel m(in.params, NoiseModel::homoskedastic(5, 1e14), in.data);
    const auto r = m.predict_sk(in.x0);
    EXPECT_NEAR(r.mean, in.params.beta(0), 1e-8);
    EXPECT_NEAR(r.mse, in.params.kernel_m.spatial_variance, 1e-8);
}

TEST(PredictSk, MonteCarloOracle) {
    ski::Rng rng(7);
    const auto in = oracle::random_instance(rng, 3, 0);
    const FittedModel m(in.params, in.noise, in.data);
    const auto g = oracle::joint_gaussian(in);
    const MatrixXd draws = oracle::draw_joint(g, 200000, rng);
    const auto fit = oracle::monte_carlo_conditional(draws.leftCols(3), draws.col(g.y0()), in.data.ybar);
    const auto r = m.predict_sk(in.x0);
    EXPECT_LE(std::abs(r.mean - fit.mean_at), 3.0 * fit.mean_se);
    EXPECT_LE(std::abs(r.mse - fit.resid_var), 3.0 * fit.resid_var_se);
}

// ---- predict_gpr ----

TEST(PredictGpr, InterpolatesNoiseFreeObservation) {
    ski::Rng rng(8);
    auto in = oracle::random_instance(rng, 4, 3);
    in.params.sigma_zeta_sq = 0.0;
    const FittedModel m(in.params, in.noise, in.data);
    for (Index j = 0; j < 3; ++j)
        EXPECT_NEAR(m.predict_gpr(in.data.design[in.data.obs_index[static_cast<std::size_t>(j)]]).mean, in.data.z(j), 1e-7);
}

TEST(PredictGpr, ScalarHandFormula) {
    const SkiParams p = params_1d(1.5, 0.8, 2.0, 0.5, 3.0, 0.2, 0.7, -0.4);
    const PointSet design{{0.2}, {0.7}};
    const Dataset d = Dataset::from_summary(design, Eigen::Vector2d(9.0, -9.0), VectorXi::Ones(2), {1}, VectorXd::Constant(1, 2.3));
    const FittedModel m(p, NoiseModel::homoskedastic(2, 1.0), d);
    const double x0 = 0.35, xo = 0.7;
    const double c2 = 1.5 * 1.5 * 0.8 * std::exp(-2.0 * (x0 - xo) * (x0 - xo)) + 0.5 * std::exp(-3.0 * (x0 - xo) * (x0 - xo));
    const double v22 = 1.5 * 1.5 * 0.8 + 0.5 + 0.2;
    const double prior = 1.5 * 0.7 - 0.4;
    const auto r = m.predict_gpr(VectorXd::Constant(1, x0));
    EXPECT_NEAR(r.mean, prior + c2 / v22 * (2.3 - prior), 1e-14);
    EXPECT_NEAR(r.mse, 1.5 * 1.5 * 0.8 + 0.5 - c2 * c2 / v22, 1e-14);
}

TEST(PredictGpr, MonteCarloOracle) {
    ski::Rng rng(9);
    const auto in = oracle::random_instance(rng, 4, 3);
    const FittedModel m(in.params, in.noise, in.data);
    const auto g = oracle::joint_gaussian(in);
    const MatrixXd draws = oracle::draw_joint(g, 200000, rng);
    const auto fit = oracle::monte_carlo_conditional(draws.middleCols(4, 3), draws.col(g.z0()), in.data.z);
    const auto r = m.predict_gpr(in.x0);
    EXPECT_LE(std::abs(r.mean - fit.mean_at), 3.0 * fit.mean_se);
    EXPECT_LE(std::abs(r.mse - fit.resid_var), 3.0 * fit.resid_var_se);
}

// ---- gap identities ----

TEST(GapGpr, ZeroWhenRhoIsZero) {
    ski::Rng rng(10);
    auto in = oracle::random_instance(rng, 5, 2);
    in.params.rho = 0.0;
    EXPECT_NEAR(ski::mse_gap_gpr(in.params, in.noise, in.data, in.x0), 0.0, 1e-14);
}

TEST(GapGpr, ZeroOnConstructedEqualityInstance) {
    // With k = l = 1 the gap vanishes when C1 = V12 V22^{-1} C2, which is linear
    // in sigma_zeta^2: r_M (tau_W^2 + sigma_zeta^2) = tau_W^2 r_W.
    const double tm = 1.3, tw = 0.9, th_m = 4.0, th_w = 1.0, x0 = 0.4;
    const double rm = std::exp(-th_m * x0 * x0), rw = std::exp(-th_w * x0 * x0);
    const double sz = tw * (rw - rm) / rm;
    ASSERT_GT(sz, 0.0);
    const SkiParams p = params_1d(1.7, tm, th_m, tw, th_w, sz);
    const Dataset d = Dataset::from_summary(PointSet{{0.0}}, VectorXd::Constant(1, 0.2), VectorXi::Ones(1), {0},
                                            VectorXd::Constant(1, 0.5));
    const FittedModel m(p, NoiseModel::homoskedastic(1, 0.3), d);
    const VectorXd at = VectorXd::Constant(1, x0);
    EXPECT_NEAR(m.mse_gap_gpr(at), 0.0, 1e-14);
    EXPECT_NEAR(m.predict_gpr(at).mse - m.predict_ski(at).mse, 0.0, 1e-13);
}

TEST(GapGpr, MatchesDirectDifference) {
    ski::Rng rng(11);
    for (int t = 0; t < 100; ++t) {
        const Index k = 1 + t % 8;
        const auto in = oracle::random_instance(rng, k, t % (k + 1));
        const FittedModel m(in.params, in.noise, in.data);
        const double direct = m.predict_gpr(in.x0).mse - m.predict_ski(in.x0).mse;
        const double gap = m.mse_gap_gpr(in.x0);
        EXPECT_GE(gap, -1e-10);
        EXPECT_LE(rel_diff(gap, direct, 1e-6 * in.params.prior_variance()), 1e-10);
    }
}

TEST(GapSk, ZeroOnEqualityConditions) {
    // rho = 1, gamma = 0, tau_W^2 = 0 and noise-free simulation give C2 = V12' V11^{-1} C1.
    const SkiParams p = params_1d(1.0, 1.1, 2.0, 0.0, 1.0, 0.3, 0.8, 0.0);
    const PointSet design{{0.0}, {0.5}, {1.0}};
    const Dataset d = Dataset::from_summary(design, Eigen::Vector3d(0.1, 0.4, -0.2), VectorXi::Ones(3), {0, 2},
                                            Eigen::Vector2d(0.3, -0.1));
    const FittedModel m(p, NoiseModel::homoskedastic(3, 0.0), d);
    const auto gap = m.mse_gap_sk(VectorXd::Constant(1, 0.3));
    EXPECT_NEAR(gap.bias_sq, 0.0, 1e-15);
    EXPECT_NEAR(gap.extra_var_terms, 0.0, 1e-9);
}

TEST(GapSk, BiasIsGammaSquaredWhenRhoIsOne) {
    ski::Rng rng(12);
    auto in = oracle::random_instance(rng, 4, 2);
    in.params.rho = 1.0;
    in.params.gamma(0) = -1.25;
    EXPECT_DOUBLE_EQ(ski::mse_gap_sk(in.params, in.noise, in.data, in.x0).bias_sq, 1.5625);
}

TEST(GapSk, MatchesClosedFormSkErrorForZ) {
    ski::Rng rng(13);
    for (int t = 0; t < 100; ++t) {
        const Index k = 1 + t % 8;
        const auto in = oracle::random_instance(rng, k, t % (k + 1));
        const FittedModel m(in.params, in.noise, in.data);
        // E[(Z0 - Yhat)^2] from the joint law: Yhat = beta + w'(ybar - beta), w = V11^{-1} s.
        const auto g = oracle::joint_gaussian(in);
        const MatrixXd v11 = g.cov.topLeftCorner(k, k);
        const VectorXd s = g.cov.col(g.y0()).head(k);
        const VectorXd w = v11.fullPivLu().solve(s);
        const double bias = g.mean(g.z0()) - in.params.beta(0);
        const double var = g.cov(g.z0(), g.z0()) - 2.0 * w.dot(g.cov.col(g.z0()).head(k)) + w.dot(v11 * w);
        const double mse_sk_z = bias * bias + var;
        EXPECT_LE(rel_diff(m.mse_sk_for_z(in.x0), mse_sk_z, 1e-6 * in.params.prior_variance()), 1e-9);
        const auto gap = m.mse_gap_sk(in.x0);
        EXPECT_GE(gap.bias_sq, -1e-10);
        EXPECT_GE(gap.extra_var_terms, -1e-10);
        EXPECT_LE(rel_diff(gap.total(), mse_sk_z - m.predict_ski(in.x0).mse, 1e-6 * in.params.prior_variance()), 1e-8);
    }
}

// ---- invariants ----

TEST(MetamodelProperty, SkiNeverWorseThanGprOrSk) {
    ski::Rng rng(14);
    for (int t = 0; t < 200; ++t) {
        const Index k = 1 + t % 8;
        const auto in = oracle::random_instance(rng, k, std::uniform_int_distribution<Index>(0, k)(rng), 1 + t % 3);
        const FittedModel m(in.params, in.noise, in.data);
        const double ski_mse = m.predict_ski(in.x0).mse;
        EXPECT_LE(ski_mse, m.predict_gpr(in.x0).mse + 1e-10);
        EXPECT_LE(ski_mse, m.mse_sk_for_z(in.x0) + 1e-10);
    }
}

TEST(MetamodelProperty, DeterministicSimulationIgnoresReplicationCounts) {
    ski::Rng rng(15);
    for (int t = 0; t < 20; ++t) {
        auto in = oracle::random_instance(rng, 2 + t % 5, 1 + t % 2);
        in.noise = NoiseModel::homoskedastic(in.data.k(), 0.0);
        const auto a = ski::predict_ski(in.params, in.noise, in.data, in.x0);
        ski::Dataset d2 = in.data;
        d2.counts = (d2.counts.array() * 7 + 3).matrix();
        const auto b = ski::predict_ski(in.params, in.noise, d2, in.x0);
        EXPECT_EQ(a.mean, b.mean);
        EXPECT_EQ(a.mse, b.mse);
    }
}

TEST(MetamodelProperty, RhoZeroIgnoresSimulationNoise) {
    ski::Rng rng(16);
    for (int t = 0; t < 20; ++t) {
        auto in = oracle::random_instance(rng, 2 + t % 5, 1 + t % 2);
        in.params.rho = 0.0;
        const auto a = ski::predict_ski(in.params, in.noise, in.data, in.x0);
        NoiseModel n2 = in.noise;
        n2.sigma_eps_sq = (n2.sigma_eps_sq.array() * 50.0 + 1.0).matrix();
        const auto b = ski::predict_ski(in.params, n2, in.data, in.x0);
        EXPECT_NEAR(a.mean, b.mean, 1e-12);
        EXPECT_NEAR(a.mse, b.mse, 1e-12);
    }
}

TEST(MonotonicityProbe, AllPerturbationsMoveMseTheRightWay) {
    ski::Rng rng(17);
    for (int t = 0; t < 40; ++t) {
        const Index k = 2 + t % 6;
        const auto in = oracle::random_instance(rng, k, 1 + t % (k - 1));
        ski::Probe p;
        p.kind = ski::ProbeKind::InflateObservationNoise;
        p.factor = 10.0;
        auto r = ski::monotonicity_probe(in.params, in.noise, in.data, in.x0, p);
        EXPECT_GE(r.mse_after, r.mse_before - 1e-10);

        p.kind = ski::ProbeKind::InflateSimulationNoise;
        p.index = t % k;
        r = ski::monotonicity_probe(in.params, in.noise, in.data, in.x0, p);
        EXPECT_GE(r.mse_after, r.mse_before - 1e-10);

        p.kind = ski::ProbeKind::ScaleReplications;
        p.factor = 2.0;
        r = ski::monotonicity_probe(in.params, in.noise, in.data, in.x0, p);
        EXPECT_LE(r.mse_after, r.mse_before + 1e-10);

        p.kind = ski::ProbeKind::AddDesignPoint;
        p.point = VectorXd::Constant(2, oracle::uniform(rng, 0.0, 1.0));
        p.sigma_eps_sq = oracle::uniform(rng, 0.1, 3.0);
        p.replications = 2;
        r = ski::monotonicity_probe(in.params, in.noise, in.data, in.x0, p);
        EXPECT_LE(r.mse_after, r.mse_before + 1e-10);

        const auto& obs = in.data.obs_index;
        for (Index i = 0; i < k; ++i)
            if (std::find(obs.begin(), obs.end(), i) == obs.end()) {
                p.kind = ski::ProbeKind::AddObservation;
                p.index = i;
                r = ski::monotonicity_probe(in.params, in.noise, in.data, in.x0, p);
                EXPECT_LE(r.mse_after, r.mse_before + 1e-10);
                break;
            }
    }
}

TEST(SkiWeights, ReproducePredictorMeans) {
    ski::Rng rng(18);
    const auto in = oracle::random_instance(rng, 6, 3);
    const FittedModel m(in.params, in.noise, in.data);
    const PointSet x0s{{0.1, 0.2}, {0.5, 0.5}, {0.9, 0.3}};
    const MatrixXd w = m.ski_weights(x0s);
    VectorXd centered(9);
    centered.head(6) = in.data.ybar.array() - in.params.beta(0);
    centered.tail(3) = in.data.z.array() - (in.params.rho * in.params.beta(0) + in.params.gamma(0));
    for (Index j = 0; j < 3; ++j)
        EXPECT_NEAR(m.prior_mean_z(x0s[j]) + w.col(j).dot(centered), m.predict_ski(x0s[j]).mean, 1e-10);
}
