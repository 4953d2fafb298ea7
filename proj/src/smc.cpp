#include "peis/smc.hpp"

#include "peis/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>

namespace peis {

double ess(std::span<const double> weights) {
  double sum = 0.0;
  double sq = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ContractError("ess: negative or NaN weight");
    sum += w;
    sq += w * w;
  }
  if (weights.empty() || std::abs(sum - 1.0) > 1e-9) throw ContractError("ess: weights are not normalized");
  return 1.0 / sq;
}

std::vector<int> systematic_resample(std::span<const double> weights, int n_out, double u) {
  if (n_out < 1) throw ContractError("systematic_resample: n_out must be positive");
  if (!(u >= 0.0 && u < 1.0)) throw ContractError("systematic_resample: u must lie in [0, 1)");
  const int k = static_cast<int>(weights.size());
  if (k == 0) throw ContractError("systematic_resample: empty weights");
  int last = k - 1;
  while (last > 0 && weights[static_cast<std::size_t>(last)] <= 0.0) --last;

  std::vector<int> out(static_cast<std::size_t>(n_out));
  double cum = weights[0];
  int j = 0;
  for (int i = 0; i < n_out; ++i) {
    const double point = (u + i) / n_out;
    while (j < last && cum <= point) cum += weights[static_cast<std::size_t>(++j)];
    out[static_cast<std::size_t>(i)] = j;
  }
  return out;
}

namespace {

void check_weights(const std::vector<double>& log_w, int t) {
  bool any_finite = false;
  for (double v : log_w) {
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
      throw EstimatorFailure("non-finite importance weight", t);
    any_finite = any_finite || std::isfinite(v);
  }
  if (!any_finite) throw DegeneracyError("all particle weights are zero", t);
}

double ess_from_log(const std::vector<double>& log_w_normalized) {
  double sq = 0.0;
  for (double v : log_w_normalized) sq += std::exp(2.0 * v);
  return 1.0 / sq;
}

}  // namespace

LikEstimate run_sequential(SequentialProposal& proposal, int n, const EngineOptions& options, Rng& rng) {
  const auto start = std::chrono::steady_clock::now();
  const int big_n = options.particles;
  if (big_n < 2) throw ContractError("particle count must be at least 2");
  if (options.antithetic && big_n % 2 != 0) throw ContractError("antithetic sampling needs an even particle count");
  const int m = proposal.state_dim();
  const int half = options.antithetic ? big_n / 2 : big_n;
  const bool lam = proposal.carries_lambda();
  const double log_n = std::log(static_cast<double>(big_n));

  LikEstimate out;
  out.increments.reserve(static_cast<std::size_t>(n));
  out.ess.reserve(static_cast<std::size_t>(n));
  out.ess_plus.reserve(static_cast<std::size_t>(n));

  Eigen::MatrixXd x(m, big_n), x_next(m, big_n);
  Eigen::MatrixXd lambda(lam ? m : 0, big_n), lambda_next(lam ? m : 0, big_n);
  if (lam) {
    lambda.setOnes();
    lambda_next.setOnes();
  }
  x.setZero();
  Eigen::MatrixXd xi(m, big_n);
  std::vector<double> log_weight(static_cast<std::size_t>(big_n), -log_n);
  std::vector<double> log_chi(static_cast<std::size_t>(big_n), 0.0);
  std::vector<double> log_plus(static_cast<std::size_t>(big_n));
  std::vector<double> w_plus(static_cast<std::size_t>(big_n));
  std::vector<double> log_w(static_cast<std::size_t>(big_n));
  std::vector<double> tmp_chi(static_cast<std::size_t>(big_n));

  Vec xp(m), lp(lam ? m : 0), xo(m), lo(lam ? m : 0), e(m);
  for (int t = 0; t < n; ++t) {
    proposal.prepare(t);
    bool resampled = false;
    double log_sum_plus = 0.0;
    double ess_plus = std::numeric_limits<double>::quiet_NaN();

    if (t > 0 && (options.look_ahead || options.threshold > 0.0)) {
      for (int i = 0; i < big_n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (options.look_ahead) {
          xp = x.col(i);
          if (lam) lp = lambda.col(i);
          log_chi[k] = proposal.log_look_ahead(t, xp, lp);
        }
        log_plus[k] = log_weight[k] + log_chi[k];
      }
      check_weights(log_plus, t);
      log_sum_plus = log_sum_exp(log_plus);
      double sq = 0.0;
      for (int i = 0; i < big_n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        w_plus[k] = std::exp(log_plus[k] - log_sum_plus);
        sq += w_plus[k] * w_plus[k];
      }
      ess_plus = 1.0 / sq;

      if (ess_plus / big_n < options.threshold) {
        const double u = rng.uniform();
        // Renormalize so rounding cannot leave the cumulative sum short of one.
        double total = 0.0;
        for (double w : w_plus) total += w;
        for (double& w : w_plus) w /= total;
        const std::vector<int> idx = systematic_resample(w_plus, half, u);
        for (int j = 0; j < big_n; ++j) {
          const int src = idx[static_cast<std::size_t>(j % half)];
          x_next.col(j) = x.col(src);
          if (lam) lambda_next.col(j) = lambda.col(src);
          tmp_chi[static_cast<std::size_t>(j)] = log_chi[static_cast<std::size_t>(src)];
        }
        x.swap(x_next);
        if (lam) lambda.swap(lambda_next);
        log_chi.swap(tmp_chi);
        std::fill(log_weight.begin(), log_weight.end(), -log_n);
        resampled = true;
        ++out.resample_count;
      }
    }
    out.ess_plus.push_back(ess_plus);

    for (int i = 0; i < half; ++i)
      for (int j = 0; j < m; ++j) xi(j, i) = rng.normal();
    if (options.antithetic) xi.rightCols(half) = -xi.leftCols(half);

    for (int i = 0; i < big_n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      xp = x.col(i);
      if (lam) lp = lambda.col(i);
      e = xi.col(i);
      const double r = proposal.propagate(t, xp, lp, e, rng, xo, lo);
      x_next.col(i) = xo;
      if (lam) lambda_next.col(i) = lo;
      log_w[k] = log_weight[k] + r - (resampled ? log_chi[k] : 0.0);
    }
    x.swap(x_next);
    if (lam) lambda.swap(lambda_next);

    check_weights(log_w, t);
    const double lse = log_sum_exp(log_w);
    const double inc = lse + (resampled ? log_sum_plus : 0.0);
    if (!std::isfinite(inc)) throw EstimatorFailure("non-finite likelihood increment", t);
    out.increments.push_back(inc);
    for (int i = 0; i < big_n; ++i) log_weight[static_cast<std::size_t>(i)] = log_w[static_cast<std::size_t>(i)] - lse;
    out.ess.push_back(ess_from_log(log_weight));
  }

  double total = 0.0;
  for (double v : out.increments) total += v;
  out.log_likelihood = total;
  out.final_log_weights = log_weight;
  out.fallback_count = proposal.fallback_count();
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

namespace {

/// Transition-density proposal. With `look_ahead` the first-stage weight is
/// p(y_t | Z F(x_{t-1})) (APF(0)); otherwise chi is one (bootstrap).
class TransitionProposal final : public SequentialProposal {
 public:
  TransitionProposal(const StateSpaceModel& model, const Observations& y, bool look_ahead)
      : model_(model), y_(rows_of(y)), z_(model.signal_map()), look_ahead_(look_ahead) {
    a1_ = model.initial_mean();
    p1_sqrt_ = psd_sqrt(model.initial_cov());
    q_sqrt_ = psd_sqrt(model.noise_cov());
    t_noise_ = model.state_noise() == StateNoise::student_t;
    if (t_noise_) dof_ = model.state_dof();
  }

  int state_dim() const override { return model_.state_dim(); }
  bool carries_lambda() const override { return t_noise_; }

  double log_look_ahead(int t, const Vec& x_prev, const Vec&) override {
    if (!look_ahead_) return 0.0;
    const Vec f = model_.transition_mean(x_prev, &y_[static_cast<std::size_t>(t - 1)]);
    return model_.log_meas(y_[static_cast<std::size_t>(t)], z_ * f);
  }

  double propagate(int t, const Vec& x_prev, const Vec& lambda, const Vec& xi, Rng& rng, Vec& x_out,
                   Vec& lambda_out) override {
    if (t == 0) {
      x_out = a1_ + p1_sqrt_ * xi;
    } else {
      Vec shock = q_sqrt_ * xi;
      if (t_noise_) shock.array() *= lambda.array().sqrt();
      x_out = model_.transition_mean(x_prev, &y_[static_cast<std::size_t>(t - 1)]) + shock;
    }
    if (t_noise_) {
      lambda_out.resize(dof_.size());
      for (int j = 0; j < dof_.size(); ++j) lambda_out(j) = rng.inverse_gamma(0.5 * dof_(j), 0.5 * dof_(j));
    }
    return model_.log_meas(y_[static_cast<std::size_t>(t)], z_ * x_out);
  }

 private:
  const StateSpaceModel& model_;
  std::vector<Vec> y_;
  Mat z_;
  bool look_ahead_;
  Vec a1_;
  Mat p1_sqrt_, q_sqrt_;
  bool t_noise_ = false;
  Vec dof_;
};

/// Gaussian proposal from a second order expansion of
/// log p(y_t|Z x) + log p(x | x_{t-1}) around its mode.
class LaplaceProposal final : public SequentialProposal {
 public:
  LaplaceProposal(const StateSpaceModel& model, const Observations& y)
      : model_(model), y_(rows_of(y)), z_(model.signal_map()) {
    if (model.state_noise() != StateNoise::gaussian)
      throw ContractError("SISR(2) requires Gaussian state noise");
    prior_[0].init(model.initial_cov());
    prior_[1].init(model.noise_cov());
  }

  int state_dim() const override { return model_.state_dim(); }
  int fallback_count() const override { return fallbacks_; }

  double propagate(int t, const Vec& x_prev, const Vec&, const Vec& xi, Rng&, Vec& x_out, Vec&) override {
    const Vec& y = y_[static_cast<std::size_t>(t)];
    const Prior& pr = prior_[t == 0 ? 0 : 1];
    const Vec f = t == 0 ? model_.initial_mean() : model_.transition_mean(x_prev, &y_[static_cast<std::size_t>(t - 1)]);

    auto objective = [&](const Vec& x) {
      const Vec d = x - f;
      return model_.log_meas(y, z_ * x) - 0.5 * d.dot(pr.inv * d);
    };

    Vec x = f;
    double fx = objective(x);
    Mat neg_h;
    bool ok = std::isfinite(fx);
    for (int it = 0; ok && it < 20; ++it) {
      const MeasurementDerivatives md = model_.meas_derivatives(y, z_ * x);
      const Vec g = z_.transpose() * md.gradient - pr.inv * (x - f);
      neg_h = pr.inv - z_.transpose() * md.hessian * z_;
      if (g.cwiseAbs().maxCoeff() < 1e-8) break;
      Eigen::LLT<Mat> llt(neg_h);
      const Vec dir = llt.info() == Eigen::Success ? Vec(llt.solve(g)) : g;
      double step = 1.0;
      bool improved = false;
      for (int k = 0; k < 40; ++k) {
        const Vec cand = x + step * dir;
        const double fc = objective(cand);
        if (fc > fx) {
          x = cand;
          fx = fc;
          improved = true;
          break;
        }
        step *= 0.5;
      }
      if (!improved) break;
    }
    if (ok) {
      const MeasurementDerivatives md = model_.meas_derivatives(y, z_ * x);
      neg_h = pr.inv - z_.transpose() * md.hessian * z_;
    }
    Eigen::LLT<Mat> llt(neg_h);
    if (!ok || llt.info() != Eigen::Success || !x.allFinite()) {
      ++fallbacks_;
      x_out = f + pr.sqrt * xi;
      return model_.log_meas(y, z_ * x_out);
    }
    // x = mode + L'^{-1} xi has covariance (L L')^{-1} = (-H)^{-1}.
    const Mat l = llt.matrixL();
    x_out = x + l.transpose().triangularView<Eigen::Upper>().solve(xi);
    const double log_q = -0.5 * static_cast<double>(xi.size()) * kLog2Pi + l.diagonal().array().log().sum() -
                         0.5 * xi.squaredNorm();
    const Vec d = x_out - f;
    const double log_p = pr.log_norm - 0.5 * d.dot(pr.inv * d);
    return model_.log_meas(y, z_ * x_out) + log_p - log_q;
  }

 private:
  struct Prior {
    Mat inv;
    Mat sqrt;
    double log_norm = 0.0;
    void init(const Mat& cov) {
      Eigen::LLT<Mat> llt(cov);
      if (llt.info() != Eigen::Success) throw ContractError("SISR(2) requires a nonsingular state covariance");
      const Mat l = llt.matrixL();
      sqrt = l;
      inv = llt.solve(Mat::Identity(cov.rows(), cov.cols()));
      log_norm = -0.5 * static_cast<double>(cov.rows()) * kLog2Pi - l.diagonal().array().log().sum();
    }
  };

  const StateSpaceModel& model_;
  std::vector<Vec> y_;
  Mat z_;
  Prior prior_[2];
  int fallbacks_ = 0;
};

LikEstimate run_filter(SequentialProposal& proposal, int n, int particles, const ResamplePolicy& policy,
                       bool look_ahead, std::uint64_t seed) {
  if (!(policy.threshold > 0.0 && policy.threshold <= 1.0))
    throw ContractError("resampling threshold must lie in (0, 1]");
  Rng rng(seed);
  EngineOptions opt;
  opt.particles = particles;
  opt.threshold = policy.threshold;
  opt.look_ahead = look_ahead;
  return run_sequential(proposal, n, opt, rng);
}

}  // namespace

LikEstimate bootstrap_loglik(const StateSpaceModel& model, const Observations& y, int particles,
                             const ResamplePolicy& policy, std::uint64_t seed) {
  TransitionProposal prop(model, y, false);
  return run_filter(prop, static_cast<int>(y.rows()), particles, policy, false, seed);
}

LikEstimate apf0_loglik(const StateSpaceModel& model, const Observations& y, int particles,
                        const ResamplePolicy& policy, std::uint64_t seed) {
  TransitionProposal prop(model, y, true);
  return run_filter(prop, static_cast<int>(y.rows()), particles, policy, true, seed);
}

LikEstimate sisr2_loglik(const StateSpaceModel& model, const Observations& y, int particles,
                         const ResamplePolicy& policy, std::uint64_t seed) {
  LaplaceProposal prop(model, y);
  return run_filter(prop, static_cast<int>(y.rows()), particles, policy, false, seed);
}

}  // namespace peis
