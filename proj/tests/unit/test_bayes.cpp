#include "helpers.hpp"
#include "peis/bayes.hpp"
#include "peis/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace peis;

namespace {

// y_i ~ N(mu, 1), mu ~ N(0, tau2): posterior N(m, v) in closed form.
struct Conjugate {
  std::vector<double> y;
  double tau2 = 4.0;

  double loglik(double mu) const {
    double s = 0.0;
    for (double v : y) s += -0.5 * (kLog2Pi + (v - mu) * (v - mu));
    return s;
  }
  double post_var() const { return 1.0 / (1.0 / tau2 + static_cast<double>(y.size())); }
  double post_mean() const { return post_var() * std::accumulate(y.begin(), y.end(), 0.0); }
  PriorSpec prior() const { return {{"mu"}, {MarginalPrior::normal(0.0, tau2)}}; }
};

Conjugate make_conjugate() {
  Conjugate c;
  Rng rng(3);
  for (int i = 0; i < 20; ++i) c.y.push_back(0.7 + rng.normal());
  return c;
}

// Unbiased but noisy: L^ = L exp(sigma z - sigma^2 / 2).
LogLikelihood noisy(const Conjugate& c, double sigma) {
  return [c, sigma](const std::vector<double>& theta, std::uint64_t seed) {
    Rng rng(seed);
    return c.loglik(theta[0]) + sigma * rng.normal() - 0.5 * sigma * sigma;
  };
}

MvtProposal normal_like(double mean, double var) {
  MvtProposal q;
  q.location = Eigen::VectorXd::Constant(1, mean);
  q.scale = Eigen::MatrixXd::Constant(1, 1, var);
  q.dof = 1e7;
  return q;
}

}  // namespace

TEST_SUITE("bayes") {
  TEST_CASE("prior densities") {
    const PriorSpec p = default_prior("bivariate-sv");
    std::vector<double> theta = default_parameters("bivariate-sv");
    CHECK(std::isfinite(log_prior(p, theta)));
    theta[3] = 1.2;
    CHECK(log_prior(p, theta) == kNegInf);
    theta[3] = 0.0;
    CHECK(log_prior(p, theta) == kNegInf);

    CHECK(MarginalPrior::normal(0, 1).log_density(0.0) == doctest::Approx(-0.5 * std::log(2.0 * M_PI)));
    // Inverse gamma at its mode b / (a + 1): b^a / Gamma(a) * mode^{-a-1} * e^{-(a+1)}.
    const double a = 2.5, b = 0.035, mode = b / (a + 1.0);
    const double closed = std::pow(b, a) / std::tgamma(a) * std::pow(mode, -a - 1.0) * std::exp(-(a + 1.0));
    CHECK(std::exp(MarginalPrior::inverse_gamma(a, b).log_density(mode)) == doctest::Approx(closed).epsilon(1e-12));
    CHECK(MarginalPrior::inverse_gamma(a, b).log_density(-1.0) == kNegInf);

    PriorSpec bad{{"x"}, {MarginalPrior::uniform(1, 0)}};
    CHECK_THROWS_AS(bad.validate(), ParameterDomainError);
  }

  TEST_CASE("transforms round-trip and reject boundaries") {
    const ParamTransform logit{TransformKind::logit};
    CHECK(logit.forward(0.5) == 0.0);
    CHECK(logit.inverse(0.0) == 0.5);
    const ParamTransform lg{TransformKind::log};
    for (double v : {-3.0, 0.0, 1.7}) CHECK(lg.log_jacobian(v) == v);
    CHECK_THROWS_AS(logit.forward(1.0), ParameterDomainError);
    CHECK_THROWS_AS(logit.forward(0.0), ParameterDomainError);
    CHECK_THROWS_AS(ParamTransform{TransformKind::atanh}.forward(-1.0), ParameterDomainError);
    CHECK_THROWS_AS(lg.forward(0.0), ParameterDomainError);
    CHECK_THROWS_AS((ParamTransform{TransformKind::interval, 2, 100}.forward(100.0)), ParameterDomainError);

    for (const std::string id : {"bivariate-sv", "univariate-sv-tstate", "linear-gaussian"}) {
      const PriorSpec p = default_prior(id);
      const auto tr = transforms_for(p);
      Rng rng(11);
      for (int k = 0; k < 2000; ++k) {
        std::vector<double> theta;
        for (const auto& m : p.marginals) theta.push_back(m.sample(rng));
        const std::vector<double> back = to_constrained(tr, to_unconstrained(tr, theta));
        for (std::size_t i = 0; i < theta.size(); ++i)
          REQUIRE(std::abs(back[i] - theta[i]) <= 1e-12 * std::max(1.0, std::abs(theta[i])));
      }
    }
  }

  TEST_CASE("log Jacobians match numerical derivatives") {
    for (const ParamTransform t : {ParamTransform{TransformKind::logit}, ParamTransform{TransformKind::atanh},
                                   ParamTransform{TransformKind::log}, ParamTransform{TransformKind::interval, 2, 100}}) {
      for (double v : {-2.5, -0.3, 0.0, 0.8, 3.0}) {
        const double h = 1e-6;
        const double d = (t.inverse(v + h) - t.inverse(v - h)) / (2 * h);
        CHECK(t.log_jacobian(v) == doctest::Approx(std::log(d)).epsilon(1e-6));
      }
    }
  }

  TEST_CASE("transformed priors integrate to one") {
    for (const std::string id : {"bivariate-sv", "univariate-sv-tstate", "linear-gaussian"}) {
      const PriorSpec p = default_prior(id);
      const auto tr = transforms_for(p);
      for (std::size_t i = 0; i < tr.size(); ++i) {
        const auto f = [&](double v) {
          const double th = tr[i].inverse(v);
          const double lp = p.marginals[i].log_density(th);
          return lp == kNegInf ? 0.0 : std::exp(lp + tr[i].log_jacobian(v));
        };
        const double lo = p.marginals[i].kind == PriorKind::inverse_gamma ? -40.0 : -60.0;
        const double integral = testing::simpson(f, lo, 60.0, 200000);
        CAPTURE(id);
        CAPTURE(p.names[i]);
        CHECK(std::abs(integral - 1.0) < 1e-6);
      }
    }
  }

  TEST_CASE("multivariate t density integrates and samples match") {
    MvtProposal q = normal_like(0.3, 0.5);
    q.dof = 5.0;
    const double integral =
        testing::simpson([&](double v) { return std::exp(q.log_density(Eigen::VectorXd::Constant(1, v))); }, -400, 400,
                         400000);
    CHECK(integral == doctest::Approx(1.0).epsilon(1e-5));
    q.dof = 1.5;
    CHECK_THROWS_AS(q.validate(), ContractError);
  }

  TEST_CASE("weighted EM for a multivariate t") {
    // Two points, equal weight (each duplicated to meet M > d + 2).
    Eigen::MatrixXd two(4, 1);
    two << 1.0, 1.0, 3.0, 3.0;
    const std::vector<double> eq(4, 0.25);
    CHECK(fit_mvt_proposal(two, eq).location(0) == doctest::Approx(2.0));

    Eigen::MatrixXd pts(6, 2);
    pts << 0, 0, 1, 2, -1, 3, 4, 4, 2, -2, 5, 1;
    const std::vector<double> hot{0, 0, 0, 1, 0, 0};
    const MvtProposal one = fit_mvt_proposal(pts, hot);
    CHECK(one.location(0) == doctest::Approx(4.0));
    CHECK(one.location(1) == doctest::Approx(4.0));
    CHECK(one.scale.maxCoeff() < 1e-6);
    CHECK_NOTHROW(one.validate());

    CHECK_THROWS_AS(fit_mvt_proposal(pts.topRows(3), std::vector<double>(3, 1.0 / 3)), ContractError);
    CHECK_THROWS_AS(fit_mvt_proposal(pts, std::vector<double>(6, 0.5)), ContractError);

    // Monte Carlo recovery.
    MvtProposal truth;
    truth.location = Eigen::Vector3d(1.0, -2.0, 0.5);
    truth.scale = Eigen::Matrix3d{{1.0, 0.3, -0.2}, {0.3, 0.5, 0.1}, {-0.2, 0.1, 2.0}};
    truth.dof = 5.0;
    Rng rng(21);
    const int m = 100000;
    Eigen::MatrixXd draws(m, 3);
    for (int i = 0; i < m; ++i) draws.row(i) = truth.sample(rng).transpose();
    const MvtProposal fit = fit_mvt_proposal(draws, std::vector<double>(m, 1.0 / m));
    for (int j = 0; j < 3; ++j)
      CHECK(std::abs(fit.location(j) - truth.location(j)) < 0.02 * std::sqrt(truth.scale(j, j)));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        CAPTURE(i);
        CAPTURE(j);
        CHECK(std::abs(fit.scale(i, j) - truth.scale(i, j)) <= 0.05 * std::abs(truth.scale(i, j)) + 0.01);
      }
  }

  TEST_CASE("weighted summaries") {
    const std::vector<double> x{0.0, 4.0};
    CHECK(weighted_summary(x, std::vector<double>{1.0, 3.0}).mean == doctest::Approx(3.0));
    Rng rng(2);
    std::vector<double> z(200000), w(200000, 1.0);
    for (double& v : z) v = rng.normal();
    const ParamSummary s = weighted_summary(z, w);
    CHECK(s.sd == doctest::Approx(1.0).epsilon(0.01));
    CHECK(std::abs(s.skewness) < 0.03);
    CHECK(s.kurtosis == doctest::Approx(3.0).epsilon(0.02));
    CHECK(s.lower90 == doctest::Approx(-1.6449).epsilon(0.02));
    CHECK(s.upper90 == doctest::Approx(1.6449).epsilon(0.02));
  }

  TEST_CASE("IS2 without data returns the prior") {
    const Posterior post({{"mu"}, {MarginalPrior::normal(0.5, 2.0)}},
                         [](const std::vector<double>&, std::uint64_t) { return 0.0; });
    Is2Config cfg;
    cfg.draws = 20000;
    const Is2Result r = is2_run(post, normal_like(0.0, 3.0), cfg);
    double wsum = 0.0;
    for (double w : r.weights) wsum += w;
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(std::exp(r.log_marginal_likelihood) - 1.0) < 3.0 * r.log_marginal_likelihood_se + 1e-3);
    CHECK(std::abs(r.summary[0].mean - 0.5) < 3.0 * r.std_errors[0].mean);
    CHECK(std::abs(r.summary[0].sd - std::sqrt(2.0)) < 3.0 * r.std_errors[0].sd);
  }

  TEST_CASE("IS2 recovers the conjugate posterior") {
    const Conjugate c = make_conjugate();
    for (double sigma : {0.0, 1.0}) {
      const Posterior post(c.prior(), noisy(c, sigma));
      Is2Config cfg;
      cfg.draws = 5000;
      MvtProposal q = normal_like(c.post_mean() + 0.1, 2.0 * c.post_var());
      q.dof = 5.0;
      const Is2Result r = is2_run(post, q, cfg);
      CAPTURE(sigma);
      MESSAGE("IS2 mean " << r.summary[0].mean << " exact " << c.post_mean() << " se " << r.std_errors[0].mean);
      CHECK(std::abs(r.summary[0].mean - c.post_mean()) < 3.0 * r.std_errors[0].mean);
      CHECK(r.std_errors[0].mean > 0.0);
      CHECK(std::isfinite(r.log_marginal_likelihood));
    }
  }

  TEST_CASE("IS2 reports a proposal that misses the posterior") {
    const Posterior post({{"p"}, {MarginalPrior::uniform(0, 1)}},
                         [](const std::vector<double>&, std::uint64_t) -> double { throw EstimatorFailure("x", 3); });
    Is2Config cfg;
    cfg.draws = 10;
    cfg.bootstrap = 100;
    CHECK_THROWS_AS(is2_run(post, normal_like(0.0, 1.0), cfg), ProposalMismatchError);
  }

  TEST_CASE("PMMH on a flat target and with the exact proposal") {
    // Flat: the likelihood cancels the prior exactly.
    const PriorSpec p1{{"x"}, {MarginalPrior::normal(0, 1)}};
    const Posterior flat(p1, [&](const std::vector<double>& th, std::uint64_t) { return -log_prior(p1, th); });
    PmmhConfig cfg;
    cfg.iters = 2000;
    cfg.burn_in = 100;
    const std::vector<double> start{0.0};
    CHECK(pmmh_arw(flat, start, cfg).acceptance == 1.0);

    // Target equal to the proposal.
    const MvtProposal q = [] {
      MvtProposal t;
      t.location = Eigen::Vector2d(0.2, -0.4);
      t.scale = Eigen::Matrix2d{{1.0, 0.3}, {0.3, 0.5}};
      t.dof = 5.0;
      return t;
    }();
    const PriorSpec p2{{"a", "b"}, {MarginalPrior::normal(0, 1), MarginalPrior::normal(0, 1)}};
    const Posterior exact(p2, [&](const std::vector<double>& th, std::uint64_t) {
      const Eigen::Vector2d v(th[0], th[1]);
      return q.log_density(v) - log_prior(p2, th);
    });
    CHECK(pmmh_imh(exact, q, cfg).acceptance == 1.0);
  }

  TEST_CASE("PMMH recovers the conjugate posterior, also with a noisy estimator") {
    const Conjugate c = make_conjugate();
    for (double sigma : {0.0, 1.0}) {
      const Posterior post(c.prior(), noisy(c, sigma));
      PmmhConfig cfg;
      cfg.iters = 40000;
      cfg.burn_in = 1000;
      const std::vector<double> start{0.0};
      const ChainResult arw = pmmh_arw(post, start, cfg);
      MvtProposal q = normal_like(c.post_mean(), 1.5 * c.post_var());
      q.dof = 5.0;
      const ChainResult imh = pmmh_imh(post, q, cfg);
      CAPTURE(sigma);
      MESSAGE("sigma " << sigma << ": ARW mean " << arw.mean[0] << " (se " << arw.mean_se[0] << ", acc "
                       << arw.acceptance << "), IMH mean " << imh.mean[0] << " (se " << imh.mean_se[0] << ", acc "
                       << imh.acceptance << "), exact " << c.post_mean());
      CHECK(std::abs(arw.mean[0] - c.post_mean()) < 3.0 * arw.mean_se[0]);
      CHECK(std::abs(imh.mean[0] - c.post_mean()) < 3.0 * imh.mean_se[0]);
      CHECK(arw.acceptance > 0.0);
      CHECK(arw.acceptance < 1.0);
    }
  }

  TEST_CASE("IMH with the exact posterior as proposal is nearly iid") {
    const Conjugate c = make_conjugate();
    const Posterior post(c.prior(), noisy(c, 0.0));
    PmmhConfig cfg;
    cfg.iters = 20000;
    cfg.burn_in = 100;
    const ChainResult r = pmmh_imh(post, normal_like(c.post_mean(), c.post_var()), cfg);
    CHECK(r.acceptance > 0.99);
    CHECK(r.inefficiency[0] > 0.8);
    CHECK(r.inefficiency[0] < 1.3);
  }

  TEST_CASE("estimator failures count as rejections") {
    const Conjugate c = make_conjugate();
    const Posterior post(c.prior(), [&](const std::vector<double>& th, std::uint64_t seed) {
      if (seed % 3 == 0) throw DegeneracyError("all weights vanished", 7);
      return c.loglik(th[0]);
    });
    PmmhConfig cfg;
    cfg.iters = 3000;
    cfg.burn_in = 100;
    cfg.seed = 4;
    const std::vector<double> start{0.5};
    const ChainResult r = pmmh_arw(post, start, cfg);
    CHECK(r.failures > 0);
    CHECK(r.acceptance < 1.0);
    CHECK(r.chain.allFinite());
  }

  TEST_CASE("proposal training on the conjugate model") {
    const Conjugate c = make_conjugate();
    const Posterior post(c.prior(), noisy(c, 0.0));
    TrainingConfig cfg;
    const TrainingResult r = train_proposal(post, cfg);
    CHECK(r.exponents.back() == 1.0);
    CHECK(r.proposal.location(0) == doctest::Approx(c.post_mean()).epsilon(0.02));
    // A t scale with dof 5 has variance scale * 5 / 3.
    CHECK(r.proposal.scale(0, 0) * 5.0 / 3.0 == doctest::Approx(c.post_var()).epsilon(0.25));
  }

  TEST_CASE("optimal particle count") {
    CHECK(optimal_particles(7.5, 0.0, 0.01) == doctest::Approx(7.5));
    CHECK(std::abs(optimal_particles(158.2, 0.567, 0.00188) - 310.0) <= 2.0);
    CHECK(std::abs(optimal_particles(5.5, 0.567, 0.00205) - 42.0) <= 2.0);
    // Bootstrap row of the same table: the formula gives about 1,479.
    CHECK(optimal_particles(1478.6, 0.0, 0.01039) == doctest::Approx(1478.6));
    double prev = 0.0;
    for (double v : {0.5, 1.0, 2.0, 8.0}) {
      const double n = optimal_particles(v, 0.3, 0.002);
      CHECK(n > prev);
      prev = n;
    }
    CHECK(optimal_particles(2.0, 0.6, 0.002) > optimal_particles(2.0, 0.3, 0.002));
    CHECK_THROWS_AS(optimal_particles(0.0, 0.1, 0.1), ParameterDomainError);
    CHECK_THROWS_AS(optimal_particles(1.0, -0.1, 0.1), ParameterDomainError);
    CHECK_THROWS_AS(optimal_particles(1.0, 0.1, 0.0), ParameterDomainError);
  }

  TEST_CASE("overlapping batch means inefficiency") {
    Rng rng(8);
    std::vector<double> iid(100000);
    for (double& v : iid) v = rng.normal();
    const double f = obm_inefficiency(iid);
    CHECK(f > 0.8);
    CHECK(f < 1.3);

    std::vector<double> ar(1000000);
    double x = 0.0;
    for (double& v : ar) v = x = 0.5 * x + rng.normal();
    CHECK(obm_inefficiency(ar) == doctest::Approx(3.0).epsilon(0.15));

    CHECK_THROWS_AS(obm_inefficiency(std::vector<double>(400, 2.0)), DegenerateSampleError);
    CHECK_THROWS_AS(obm_inefficiency(std::vector<double>(50, 1.0), 10), ContractError);
  }

  TEST_CASE("bootstrap standard errors") {
    const auto mean_stat = [](const Eigen::MatrixXd& d, std::span<const double> w) {
      double s = 0.0, ws = 0.0;
      for (Eigen::Index i = 0; i < d.rows(); ++i) {
        s += w[i] * d(i, 0);
        ws += w[i];
      }
      return s / ws;
    };
    const Eigen::MatrixXd same = Eigen::MatrixXd::Constant(10, 1, 3.0);
    CHECK(bootstrap_se(same, std::vector<double>(10, 0.1), mean_stat, 200, 1) == 0.0);

    // Resampling {0, 1} twice: the mean is 0, 1/2, 1 with probabilities 1/4, 1/2, 1/4.
    Eigen::MatrixXd two(2, 1);
    two << 0.0, 1.0;
    CHECK(bootstrap_se(two, std::vector<double>{1, 1}, mean_stat, 100000, 2) ==
          doctest::Approx(std::sqrt(0.125)).epsilon(0.05));

    Rng rng(5);
    std::vector<double> se;
    for (int m : {250, 500, 1000, 2000, 4000}) {
      Eigen::MatrixXd d(m, 1);
      std::vector<double> w(m);
      for (int i = 0; i < m; ++i) {
        d(i, 0) = rng.normal();
        w[i] = rng.uniform();
      }
      se.push_back(bootstrap_se(d, w, mean_stat, 1000, 3));
    }
    const double shrink = se.front() / se.back();
    MESSAGE("SE ratio over 16x draws " << shrink);
    CHECK(shrink > 4.0 * 0.7);
    CHECK(shrink < 4.0 * 1.3);
    CHECK_THROWS_AS(bootstrap_se(two, std::vector<double>{1, 1}, mean_stat, 50, 2), ContractError);
  }
}
