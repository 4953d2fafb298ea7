#include "helpers.hpp"
#include "peis/eis.hpp"
#include "peis/errors.hpp"
#include "peis/harness.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace peis;
using testing::vec;

namespace {

LinearGaussianModel bivariate_gaussian() {
  Mat t(2, 2);
  t << 0.8, 0.1, -0.2, 0.5;
  Mat q(2, 2);
  q << 0.5, 0.1, 0.1, 0.3;
  Mat h(2, 2);
  h << 1.0, 0.4, 0.4, 0.8;
  return LinearGaussianModel(t, q, Mat::Identity(2, 2), h, Vec::Zero(2), stationary_cov(t, q));
}

EisParams scaled(EisParams p, double factor) {
  for (auto& b : p.b) b *= factor;
  for (auto& c : p.c) c *= factor;
  return p;
}

double log_normal_pdf(double x, double mean, double var) {
  return -0.5 * std::log(2 * std::numbers::pi * var) - 0.5 * (x - mean) * (x - mean) / var;
}

}  // namespace

TEST_SUITE("eis") {
  TEST_CASE("natural kernel reproduces the transition density") {
    const TransitionMoments tm{vec({0.3, -0.1}), (Mat(2, 2) << 0.5, 0.1, 0.1, 0.4).finished()};
    const KernelMoments km = kernel_moments(Vec::Zero(2), Mat::Zero(2, 2), Mat::Identity(2, 2), tm);
    CHECK((km.mean - tm.mean).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((km.cov - tm.cov).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(std::abs(km.log_delta) < 1e-14);
  }

  TEST_CASE("scalar kernel moments") {
    const TransitionMoments tm{vec({0.0}), Mat::Identity(1, 1)};
    const KernelMoments km = kernel_moments(vec({1.0}), Mat::Identity(1, 1), Mat::Identity(1, 1), tm);
    CHECK(km.cov(0, 0) == doctest::Approx(0.5));
    CHECK(km.mean(0) == doctest::Approx(0.5));
    CHECK(km.log_delta == doctest::Approx(0.5 * std::log(2.0) - 0.25).epsilon(1e-14));
  }

  TEST_CASE("log chi equals the log kernel integral") {
    const double b = 0.7, c = 0.4, f = 0.3, s2 = 0.8;
    const TransitionMoments tm{vec({f}), Mat::Constant(1, 1, s2)};
    const KernelMoments km = kernel_moments(vec({b}), Mat::Constant(1, 1, c), Mat::Identity(1, 1), tm);
    const double integral = testing::simpson(
        [&](double x) { return std::exp(b * x - 0.5 * c * x * x + log_normal_pdf(x, f, s2)); }, -20, 20);
    CHECK(std::abs(std::exp(-km.log_delta) - integral) < 1e-6);
    // Negative curvature is fine as long as the precision stays positive.
    const KernelMoments neg = kernel_moments(vec({-0.2}), Mat::Constant(1, 1, -0.9), Mat::Identity(1, 1), tm);
    const double integral_neg = testing::simpson(
        [&](double x) { return std::exp(-0.2 * x + 0.45 * x * x + log_normal_pdf(x, f, s2)); }, -60, 60, 200000);
    CHECK(std::abs(std::exp(-neg.log_delta) - integral_neg) < 1e-6 * integral_neg);
  }

  TEST_CASE("kernel moments reject an indefinite precision") {
    const TransitionMoments tm{vec({0.0}), Mat::Identity(1, 1)};
    CHECK_THROWS_AS(kernel_moments(vec({0.0}), Mat::Constant(1, 1, -2.0), Mat::Identity(1, 1), tm, 4),
                    KernelDegeneracyError);
  }

  TEST_CASE("log_phi values") {
    CHECK(log_phi(0.0, 0.0, 10.0) == doctest::Approx(0.0));
    CHECK(log_phi(1.0, 0.0, 10.0) == doctest::Approx(std::log(0.8)).epsilon(1e-14));
    CHECK_THROWS_AS(log_phi(5.0, 0.0, 10.0), NumericDomainError);
    CHECK_THROWS_AS(log_phi(0.0, 6.0, 10.0), NumericDomainError);
  }

  TEST_CASE("log_phi normalizes the tilted inverse gamma") {
    for (auto [alpha, beta] : {std::pair{0.7, 1.2}, std::pair{-1.5, -0.8}, std::pair{2.0, 3.0}}) {
      const double nu = 10.0, h = 5.0;
      auto integrand = [&](double l) {
        if (l <= 0.0) return 0.0;
        const double log_ig = h * std::log(h) - std::lgamma(h) - (h + 1) * std::log(l) - h / l;
        return std::exp(alpha * std::log(l) + beta / l + log_ig);
      };
      const double integral = testing::simpson(integrand, 0.0, 60.0, 600000) +
                              testing::simpson(integrand, 60.0, 6000.0, 600000);
      CAPTURE(alpha);
      CHECK(std::abs(integral * std::exp(log_phi(alpha, beta, nu)) - 1.0) < 1e-6);
    }
  }

  TEST_CASE("draw_state mean, antithetic symmetry and covariance") {
    const TransitionMoments tm{vec({0.2, -0.4}), (Mat(2, 2) << 0.6, 0.2, 0.2, 0.5).finished()};
    Mat c(2, 2);
    c << 0.8, -0.3, -0.3, 1.1;
    const KernelMoments km = kernel_moments(vec({0.5, 0.1}), c, Mat::Identity(2, 2), tm);
    CHECK(draw_state(km, Vec::Zero(2)) == km.mean);
    const Vec xi = vec({0.7, -1.3});
    const Vec mid = 0.5 * (draw_state(km, xi) + draw_state(km, -xi));
    CHECK((mid - km.mean).cwiseAbs().maxCoeff() < 1e-15);

    Rng rng(12);
    const int n = 100000;
    Eigen::MatrixXd draws(2, n);
    for (int i = 0; i < n; ++i) draws.col(i) = draw_state(km, vec({rng.normal(), rng.normal()}));
    const Eigen::Vector2d m = draws.rowwise().mean();
    const Eigen::MatrixXd centered = draws.colwise() - m;
    const Eigen::Matrix2d cov = centered * centered.transpose() / (n - 1);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) CHECK(cov(i, j) == doctest::Approx(km.cov(i, j)).epsilon(0.03));
  }

  TEST_CASE("configuration validation") {
    const UnivariateSvModel sv(UnivariateSvParams{});
    EisConfig cfg;
    cfg.samples = 5;
    CHECK_THROWS_AS(cfg.validate(sv), ContractError);
    cfg = EisConfig{};
    cfg.mode = EisMode::full;
    CHECK_THROWS_AS(cfg.validate(sv), ContractError);
    const EisParams nat = EisParams::natural(4, 2);
    for (int t = 0; t < 4; ++t) {
      CHECK(nat.b[static_cast<std::size_t>(t)].isZero());
      CHECK(nat.c[static_cast<std::size_t>(t)].isZero());
    }
  }

  TEST_CASE("EIS is exact on a scalar linear Gaussian model") {
    const LinearGaussianModel model(0.9, 0.5, 1.0);
    const Trajectory tr = simulate_dgp(model, 200, 3);
    const EisParams params = fit_eis(model, tr.y, EisConfig{}, 5);
    const double exact = kalman_loglik(model, tr.y);
    for (int n_particles : {2, 10}) {
      const LikEstimate est = eis_loglik(model, tr.y, params, n_particles, true, 8);
      CHECK(std::abs(est.log_likelihood - exact) < 1e-6);
    }
    const LikEstimate many = eis_loglik(model, tr.y, params, 1000, false, 9);
    CHECK(testing::variance(many.final_log_weights) < 1e-8);
  }

  TEST_CASE("EIS is exact with a correlated bivariate signal") {
    // Exercises the off-diagonal entries of C.
    const LinearGaussianModel model = bivariate_gaussian();
    const Trajectory tr = simulate_dgp(model, 100, 4);
    const EisParams params = fit_eis(model, tr.y, EisConfig{}, 6);
    CHECK(std::abs(params.c[50](0, 1)) > 1e-3);
    const LikEstimate est = eis_loglik(model, tr.y, params, 200, false, 1);
    CHECK(std::abs(est.log_likelihood - kalman_loglik(model, tr.y)) < 1e-6);
    CHECK(testing::variance(est.final_log_weights) < 1e-8);
  }

  TEST_CASE("EIS is exact for two factors observed through their sum") {
    // log chi_{t+1} depends on phi1 x1 + phi2 x2, which the signal x1 + x2
    // alone cannot express, so the kernel lives on the full state.
    Mat t = Mat::Zero(2, 2);
    t(0, 0) = 0.95;
    t(1, 1) = 0.3;
    Mat q = Mat::Zero(2, 2);
    q(0, 0) = 0.1;
    q(1, 1) = 0.6;
    const Mat z = Mat::Ones(1, 2);
    const LinearGaussianModel model(t, q, z, Mat::Identity(1, 1), Vec::Zero(2), stationary_cov(t, q));
    CHECK(kernel_basis(model).rows() == 2);
    const Trajectory tr = simulate_dgp(model, 150, 21);
    const EisParams params = fit_eis(model, tr.y, EisConfig{}, 22);
    const LikEstimate est = eis_loglik(model, tr.y, params, 100, false, 23);
    CHECK(std::abs(est.log_likelihood - kalman_loglik(model, tr.y)) < 1e-6);
    CHECK(testing::variance(est.final_log_weights) < 1e-8);
  }

  TEST_CASE("single period with the natural sampler is prior importance sampling") {
    const LinearGaussianModel model(0.9, 0.5, 1.0);
    const Trajectory tr = simulate_dgp(model, 1, 8);
    const EisParams nat = EisParams::natural(1, 1);
    const LikEstimate est = eis_loglik(model, tr.y, nat, 6, false, 31);
    Rng rng(31);
    std::vector<double> lw;
    const double sd = std::sqrt(model.initial_cov()(0, 0));
    for (int i = 0; i < 6; ++i) lw.push_back(model.log_meas(tr.y.row(0).transpose(), vec({sd * rng.normal()})));
    CHECK(est.log_likelihood == doctest::Approx(log_sum_exp(lw) - std::log(6.0)).epsilon(1e-12));
  }

  TEST_CASE("EIS is unbiased and antithetics reduce variance for an imperfect sampler") {
    const LinearGaussianModel model(0.9, 0.5, 1.0);
    const Trajectory tr = simulate_dgp(model, 50, 13);
    const double exact = kalman_loglik(model, tr.y);
    const EisParams params = scaled(fit_eis(model, tr.y, EisConfig{}, 1), 0.5);
    const int reps = 2000;
    std::vector<double> plain, anti, plain_log, anti_log;
    for (int r = 0; r < reps; ++r) {
      const auto seed = derive_seed(3, {static_cast<std::uint64_t>(r)});
      const double lp = eis_loglik(model, tr.y, params, 4, false, seed).log_likelihood;
      const double la = eis_loglik(model, tr.y, params, 4, true, seed).log_likelihood;
      plain.push_back(std::exp(lp - exact));
      anti.push_back(std::exp(la - exact));
      plain_log.push_back(lp);
      anti_log.push_back(la);
    }
    CHECK(std::abs(testing::mean(plain) - 1.0) < 3.0 * std::sqrt(testing::variance(plain) / reps));
    CHECK(std::abs(testing::mean(anti) - 1.0) < 3.0 * std::sqrt(testing::variance(anti) / reps));
    CHECK(testing::variance(anti_log) <= testing::variance(plain_log));
  }

  TEST_CASE("fitting the stochastic volatility models") {
    const UnivariateSvModel sv(UnivariateSvParams{});
    const Trajectory tr = simulate_dgp(sv, 1000, 2);
    const EisParams p = fit_eis(sv, tr.y, EisConfig{}, 3);
    CHECK(p.size() == 1000);
    CHECK(p.iterations >= 4);
    CHECK(p.iterations <= 10);
    for (const Mat& c : p.c) CHECK(c.allFinite());
    const EisParams again = fit_eis(sv, tr.y, EisConfig{}, 3);
    CHECK(again.b[500] == p.b[500]);

    const BivariateSvModel bv(BivariateSvParams{});
    const Trajectory tb = simulate_dgp(bv, 500, 2);
    const EisParams pb = fit_eis(bv, tb.y, EisConfig{}, 3);
    const LikEstimate est = eis_loglik(bv, tb.y, pb, 50, true, 4);
    CHECK(std::isfinite(est.log_likelihood));
  }

  TEST_CASE("full mode tilts satisfy the inverse gamma constraints") {
    const auto model = make_model("univariate-sv-tstate", {});
    const Trajectory tr = simulate_dgp(*model, 400, 6);
    EisConfig cfg;
    cfg.mode = EisMode::full;
    const EisFit fit = fit_eis_detailed(*model, tr.y, cfg, 2);
    REQUIRE(fit.full.has_value());
    CHECK_FALSE(fit.partial.has_lambda_tilt());
    CHECK(fit.full->has_lambda_tilt());
    bool any_tilt = false;
    for (int t = 1; t < 400; ++t) {
      const auto k = static_cast<std::size_t>(t);
      for (int j = 0; j < 2; ++j) {
        CHECK(5.0 - fit.full->alpha[k](j) > 0.0);
        CHECK(5.0 - fit.full->beta[k](j) > 0.0);
        any_tilt = any_tilt || fit.full->alpha[k](j) != 0.0;
      }
      // Lambda-scaled kernels need C positive semi-definite.
      CHECK(Eigen::SelfAdjointEigenSolver<Mat>(fit.full->c[k]).eigenvalues().minCoeff() >= -1e-12);
    }
    CHECK(any_tilt);
    const LikEstimate est = eis_loglik(*model, tr.y, fit.full.value(), 50, true, 3);
    CHECK(std::isfinite(est.log_likelihood));
  }

  TEST_CASE("rank deficient regressions are reported with period and iteration") {
    // The signal is a state component with essentially zero variance.
    Mat t = Mat::Identity(2, 2) * 0.5;
    Mat q(2, 2);
    q << 1.0, 0.0, 0.0, 1e-300;
    Mat z(1, 2);
    z << 0.0, 1.0;
    const LinearGaussianModel model(t, q, z, Mat::Identity(1, 1), Vec::Zero(2), q);
    Observations y(5, 1);
    y << 0.1, -0.2, 0.3, 0.0, 0.5;
    try {
      fit_eis(model, y, EisConfig{}, 1);
      FAIL("expected SingularDesignError");
    } catch (const SingularDesignError& e) {
      CHECK(e.period() == 4);
      CHECK(e.iteration() == 1);
    }
  }
}
