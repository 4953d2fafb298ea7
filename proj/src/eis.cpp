#include "peis/eis.hpp"

#include "eis_sampler.hpp"
#include "peis/errors.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>

namespace peis {

namespace detail {

bool GaussianKernel::build(const Mat& sigma, const Vec& b, const Mat& c, const Mat& z) {
  const Eigen::Index m = sigma.rows();
  Eigen::LLT<Mat> ls(sigma);
  if (ls.info() != Eigen::Success) return false;
  sigma_inv = ls.solve(Mat::Identity(m, m));
  Mat prec = sigma_inv;
  prec.noalias() += z.transpose() * c * z;
  Eigen::LLT<Mat> lp(prec);
  if (lp.info() != Eigen::Success) return false;
  v = lp.solve(Mat::Identity(m, m));
  v = 0.5 * (v + v.transpose()).eval();
  Eigen::LLT<Mat> lv(v);
  if (lv.info() != Eigen::Success) return false;
  v_chol = lv.matrixL();
  const Mat l_sigma = ls.matrixL();
  const Mat l_prec = lp.matrixL();
  half_log_ratio = l_sigma.diagonal().array().log().sum() + l_prec.diagonal().array().log().sum();
  zb.noalias() = z.transpose() * b;
  return std::isfinite(half_log_ratio) && v.allFinite();
}

EisProposal::EisProposal(const StateSpaceModel& model, const Observations& y, const EisParams& params)
    : model_(model),
      params_(params),
      y_(rows_of(y)),
      k_(kernel_basis(model)),
      z_(model.signal_map()),
      a1_(model.initial_mean()),
      p1_(model.initial_cov()),
      q_(model.noise_cov()),
      t_noise_(model.state_noise() == StateNoise::student_t),
      dof_(model.state_dof()) {
  const int n = static_cast<int>(y.rows());
  if (params.size() != n) throw ContractError("EIS parameters do not match the sample length");
  if (params.has_lambda_tilt() && !t_noise_) throw ContractError("lambda tilts need Student-t state noise");
  cache_.resize(static_cast<std::size_t>(n));
  cached_.assign(static_cast<std::size_t>(n), 0);
}

const GaussianKernel& EisProposal::kernel(int t, const Vec& lambda) {
  const auto k = static_cast<std::size_t>(t);
  if (t == 0 || !t_noise_) {
    if (!cached_[k]) {
      if (!cache_[k].build(t == 0 ? p1_ : q_, params_.b[k], params_.c[k], k_))
        throw KernelDegeneracyError("importance kernel covariance is not positive definite", t);
      cached_[k] = 1;
    }
    return cache_[k];
  }
  if (!scratch_.build(scaled_cov(q_, lambda), params_.b[k], params_.c[k], k_))
    throw KernelDegeneracyError("importance kernel covariance is not positive definite", t);
  return scratch_;
}

void EisProposal::prepare(int t) {
  if (t == 0 || !t_noise_) kernel(t, Vec());
}

double EisProposal::log_look_ahead(int t, const Vec& x_prev, const Vec& lambda) {
  const Vec f = model_.transition_mean(x_prev, &y_[static_cast<std::size_t>(t - 1)]);
  Vec mean;
  return -kernel(t, lambda).log_delta(f, mean);
}

double EisProposal::propagate(int t, const Vec& x_prev, const Vec& lambda, const Vec& xi, Rng& rng, Vec& x_out,
                              Vec& lambda_out) {
  const auto k = static_cast<std::size_t>(t);
  const Vec f = t == 0 ? a1_ : model_.transition_mean(x_prev, &y_[k - 1]);
  const GaussianKernel& ker = kernel(t, lambda);
  Vec mean;
  const double log_delta = ker.log_delta(f, mean);
  x_out = mean;
  x_out.noalias() += ker.v_chol * xi;
  const Vec s = k_ * x_out;
  double r = model_.log_meas(y_[k], z_ * x_out) - (params_.b[k].dot(s) - 0.5 * s.dot(params_.c[k] * s)) - log_delta;
  if (t_noise_) {
    const int m = static_cast<int>(dof_.size());
    lambda_out.resize(m);
    if (t + 1 < static_cast<int>(y_.size())) {
      const bool tilt = params_.has_lambda_tilt();
      for (int j = 0; j < m; ++j) {
        const double a = tilt ? params_.alpha[k + 1](j) : 0.0;
        const double b = tilt ? params_.beta[k + 1](j) : 0.0;
        const double half_nu = 0.5 * dof_(j);
        const double l = rng.inverse_gamma(half_nu - a, half_nu - b);
        lambda_out(j) = l;
        if (tilt) r -= log_phi(a, b, dof_(j)) + a * std::log(l) + b / l;
      }
    } else {
      lambda_out.setOnes();
    }
  }
  return r;
}

}  // namespace detail

using detail::GaussianKernel;

EisParams EisParams::natural(int n, int p) {
  EisParams out;
  out.b.assign(static_cast<std::size_t>(n), Vec::Zero(p));
  out.c.assign(static_cast<std::size_t>(n), Mat::Zero(p, p));
  return out;
}

Mat kernel_basis(const StateSpaceModel& model) {
  if (model.signal_dim() == model.state_dim()) return model.signal_map();
  return Mat::Identity(model.state_dim(), model.state_dim());
}

void EisConfig::validate(const StateSpaceModel& model) const {
  const int m = model.state_dim();
  const int p = static_cast<int>(kernel_basis(model).rows());
  if (samples < p * (p + 3) / 2 + 2 * m + 2)
    throw ContractError("EIS sample count too small for the regression");
  if (max_iter < 1) throw ContractError("EIS max_iter must be positive");
  if (!(rel_tol > 0.0)) throw ContractError("EIS rel_tol must be positive");
  if (warmup_iters < 1) throw ContractError("EIS warmup_iters must be positive");
  if (leverage_warm_iters < 0) throw ContractError("EIS leverage_warm_iters must be non-negative");
  if (sample_doublings < 0) throw ContractError("EIS sample_doublings must be non-negative");
  if (mode == EisMode::full && model.state_noise() != StateNoise::student_t)
    throw ContractError("full-mode EIS needs Student-t state noise");
}

CrnStore CrnStore::draw(const StateSpaceModel& model, int n, int samples, std::uint64_t seed) {
  Rng rng(seed);
  const int m = model.state_dim();
  const bool t_noise = model.state_noise() == StateNoise::student_t;
  const Vec dof = model.state_dof();
  CrnStore crn;
  crn.u.assign(static_cast<std::size_t>(samples), std::vector<Vec>(static_cast<std::size_t>(n), Vec(m)));
  if (t_noise)
    crn.lambda.assign(static_cast<std::size_t>(samples), std::vector<Vec>(static_cast<std::size_t>(n), Vec(m)));
  for (int s = 0; s < samples; ++s) {
    for (int t = 0; t < n; ++t) {
      Vec& u = crn.u[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)];
      for (int j = 0; j < m; ++j) u(j) = rng.normal();
      if (t_noise) {
        Vec& l = crn.lambda[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)];
        for (int j = 0; j < m; ++j) l(j) = rng.inverse_gamma(0.5 * dof(j), 0.5 * dof(j));
      }
    }
  }
  return crn;
}

KernelMoments kernel_moments(const Vec& b, const Mat& c, const Mat& z, const TransitionMoments& tm, int t) {
  GaussianKernel k;
  if (!k.build(tm.cov, b, c, z))
    throw KernelDegeneracyError("importance kernel covariance is not positive definite", t);
  KernelMoments km;
  km.log_delta = k.log_delta(tm.mean, km.mean);
  km.cov = k.v;
  return km;
}

KernelMoments kernel_moments(const EisParams& params, const StateSpaceModel& model, int t, const Vec& x_prev,
                             const std::optional<Vec>& y_prev, const std::optional<Vec>& lambda) {
  if (t < 0 || t >= params.size()) throw ContractError("kernel_moments: period out of range");
  const TransitionMoments tm =
      t == 0 ? initial_moments(model) : transition_moments(model, t, x_prev, y_prev, lambda);
  const auto k = static_cast<std::size_t>(t);
  return kernel_moments(params.b[k], params.c[k], kernel_basis(model), tm, t);
}

double log_phi(double alpha, double beta, double nu) {
  const double h = 0.5 * nu;
  if (!(h - alpha > 0.0) || !(h - beta > 0.0) || !(nu > 0.0))
    throw NumericDomainError("log_phi: needs nu/2 - alpha > 0 and nu/2 - beta > 0");
  return std::lgamma(h) - h * std::log(h) + (h - alpha) * std::log(h - beta) - std::lgamma(h - alpha);
}

Vec draw_state(const KernelMoments& km, const Vec& xi) {
  if (!xi.allFinite()) throw NumericDomainError("draw_state: non-finite innovation");
  Eigen::LLT<Mat> llt(km.cov);
  if (llt.info() != Eigen::Success) throw KernelDegeneracyError("kernel covariance is not positive definite", 0);
  return km.mean + llt.matrixL() * xi;
}

namespace {

struct Fitter {
  const StateSpaceModel& truth;
  std::unique_ptr<StateSpaceModel> warm;
  std::vector<Vec> y;
  Mat z;   // kernel basis
  Mat zs;  // signal map
  int n, m, p, samples;
  bool t_noise;
  Vec dof;
  CrnStore crn;
  std::vector<Eigen::MatrixXd> x;  // per period, m x S

  Fitter(const StateSpaceModel& model, const Observations& obs, const EisConfig& cfg, std::uint64_t seed)
      : truth(model),
        y(rows_of(obs)),
        z(kernel_basis(model)),
        zs(model.signal_map()),
        n(static_cast<int>(obs.rows())),
        m(model.state_dim()),
        p(static_cast<int>(z.rows())),
        samples(cfg.samples),
        t_noise(model.state_noise() == StateNoise::student_t),
        dof(model.state_dof()) {
    if (cfg.leverage_warm_iters > 0 && model.has_leverage()) warm = model.without_leverage();
    crn = CrnStore::draw(model, n, samples, seed);
    x.assign(static_cast<std::size_t>(n), Eigen::MatrixXd(m, samples));
  }

  const Vec& lambda_at(int s, int t) const {
    return crn.lambda[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)];
  }

  /// Regenerates the S trajectories from `prm` with the common random numbers.
  void simulate(const StateSpaceModel& mdl, const EisParams& prm) {
    const Vec a1 = mdl.initial_mean();
    const Mat p1 = mdl.initial_cov();
    const Mat& q = mdl.noise_cov();
    GaussianKernel k;
    Vec mean, f, xs(m);
    for (int t = 0; t < n; ++t) {
      const auto tk = static_cast<std::size_t>(t);
      const bool per_sample = t_noise && t > 0;
      if (!per_sample && !k.build(t == 0 ? p1 : q, prm.b[tk], prm.c[tk], z))
        throw KernelDegeneracyError("importance kernel covariance is not positive definite", t);
      for (int s = 0; s < samples; ++s) {
        if (t == 0) {
          f = a1;
        } else {
          xs = x[tk - 1].col(s);
          f = mdl.transition_mean(xs, &y[tk - 1]);
        }
        if (per_sample && !k.build(detail::scaled_cov(q, lambda_at(s, t)), prm.b[tk], prm.c[tk], z))
          throw KernelDegeneracyError("importance kernel covariance is not positive definite", t);
        k.log_delta(f, mean);
        mean.noalias() += k.v_chol.lazyProduct(crn.u[static_cast<std::size_t>(s)][tk]);
        x[tk].col(s) = mean;
      }
    }
  }

  /// Makes the kernel at t admissible: Sigma^{-1} + Z'CZ positive definite
  /// (halving C toward the natural sampler) or, when Sigma scales with an
  /// unbounded lambda, C positive semi-definite.
  void safeguard(Mat& c, const Mat& sigma_inv, bool lambda_scaled, int t) const {
    if (lambda_scaled) {
      Eigen::SelfAdjointEigenSolver<Mat> es(c);
      if (es.eigenvalues().minCoeff() < 0.0) {
        const Vec d = es.eigenvalues().cwiseMax(0.0);
        c = es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
      }
      return;
    }
    for (int h = 0;; ++h) {
      Mat prec = sigma_inv;
      prec.noalias() += z.transpose() * c * z;
      Eigen::LLT<Mat> llt(prec);
      if (llt.info() == Eigen::Success) return;
      if (h == 10) throw KernelDegeneracyError("importance kernel stayed indefinite after shrinking", t);
      c *= 0.5;
    }
  }

  /// One backward pass of least squares regressions over the current
  /// trajectories. With `full`, also fits the lambda tilts.
  /// `step` < 1 moves (b, C) only part of the way from `base` to the new fit.
  EisParams sweep(const StateSpaceModel& mdl, double zeta, bool full, int iteration, const EisParams& base,
                  double step) const {
    EisParams next = EisParams::natural(n, p);
    if (full) {
      next.alpha.assign(static_cast<std::size_t>(n), Vec::Zero(m));
      next.beta.assign(static_cast<std::size_t>(n), Vec::Zero(m));
    }
    const int n_quad = p * (p + 1) / 2;
    const int base_cols = 1 + p + n_quad;
    const Mat& q = mdl.noise_cov();
    const Mat sigma_inv_q = Eigen::LLT<Mat>(q).solve(Mat::Identity(m, m));
    const Mat sigma_inv_1 = Eigen::LLT<Mat>(mdl.initial_cov()).solve(Mat::Identity(m, m));

    Eigen::MatrixXd design(samples, base_cols + 2 * m);
    Eigen::VectorXd dep(samples);
    GaussianKernel knext;
    Vec xs(m), sig(p), f(m), mean(m);
    for (int t = n - 1; t >= 0; --t) {
      const auto tk = static_cast<std::size_t>(t);
      const bool has_next = t + 1 < n;
      const bool tilt_cols = full && has_next;
      if (has_next && !t_noise && !knext.build(q, next.b[tk + 1], next.c[tk + 1], z))
        throw KernelDegeneracyError("importance kernel covariance is not positive definite", t + 1);
      for (int s = 0; s < samples; ++s) {
        xs = x[tk].col(s);
        sig.noalias() = z.lazyProduct(xs);
        double d = zeta * mdl.log_meas(y[tk], zs.lazyProduct(xs));
        if (has_next) {
          f = mdl.transition_mean(xs, &y[tk]);
          if (t_noise &&
              !knext.build(detail::scaled_cov(q, lambda_at(s, t + 1)), next.b[tk + 1], next.c[tk + 1], z))
            throw KernelDegeneracyError("importance kernel covariance is not positive definite", t + 1);
          d -= knext.log_delta(f, mean);
        }
        dep(s) = d;
        design(s, 0) = 1.0;
        for (int i = 0; i < p; ++i) design(s, 1 + i) = sig(i);
        int col = 1 + p;
        for (int i = 0; i < p; ++i)
          for (int j = i; j < p; ++j) design(s, col++) = i == j ? -0.5 * sig(i) * sig(i) : -sig(i) * sig(j);
        if (tilt_cols) {
          const Vec& l = lambda_at(s, t + 1);
          for (int j = 0; j < m; ++j) {
            design(s, base_cols + j) = std::log(l(j));
            design(s, base_cols + m + j) = 1.0 / l(j);
          }
        }
      }
      const int cols = base_cols + (tilt_cols ? 2 * m : 0);
      const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(design.leftCols(cols));
      if (cod.rank() < cols) throw SingularDesignError("EIS regression design is rank deficient", t, iteration);
      const Eigen::VectorXd coef = cod.solve(dep);
      if (!coef.allFinite()) throw KernelDegeneracyError("EIS regression produced non-finite coefficients", t);

      Vec& b = next.b[tk];
      Mat& c = next.c[tk];
      b = coef.segment(1, p);
      int col = 1 + p;
      for (int i = 0; i < p; ++i)
        for (int j = i; j < p; ++j) {
          c(i, j) = coef(col);
          c(j, i) = coef(col);
          ++col;
        }
      if (step < 1.0) {
        b = base.b[tk] + step * (b - base.b[tk]);
        c = base.c[tk] + step * (c - base.c[tk]);
      }
      safeguard(c, t == 0 ? sigma_inv_1 : sigma_inv_q, t_noise && t > 0, t);

      if (tilt_cols) {
        Vec& a = next.alpha[tk + 1];
        Vec& bt = next.beta[tk + 1];
        for (int j = 0; j < m; ++j) {
          a(j) = coef(base_cols + j);
          bt(j) = coef(base_cols + m + j);
          const double h = 0.5 * dof(j);
          int halvings = 0;
          while ((h - a(j) <= 0.0 || h - bt(j) <= 0.0) && halvings < 10) {
            a(j) *= 0.5;
            bt(j) *= 0.5;
            ++halvings;
          }
          if (h - a(j) <= 0.0 || h - bt(j) <= 0.0) {
            a(j) = 0.0;
            bt(j) = 0.0;
          }
        }
      }
    }
    return next;
  }
};

double relative_change(const EisParams& prev, const EisParams& cur) {
  double worst = 0.0;
  for (int t = 0; t < cur.size(); ++t) {
    const auto k = static_cast<std::size_t>(t);
    const double diff = std::max((cur.b[k] - prev.b[k]).cwiseAbs().maxCoeff(),
                                 (cur.c[k] - prev.c[k]).cwiseAbs().maxCoeff());
    const double scale = std::max({prev.b[k].cwiseAbs().maxCoeff(), prev.c[k].cwiseAbs().maxCoeff(), 1e-6});
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

}  // namespace

namespace {

EisFit fit_once(const StateSpaceModel& model, const Observations& y, const EisConfig& cfg, std::uint64_t seed) {
  const int n = static_cast<int>(y.rows());
  EisFit out;
  out.partial = EisParams::natural(n, static_cast<int>(kernel_basis(model).rows()));
  if (n == 0) return out;

  Fitter fit(model, y, cfg, seed);
  EisParams cur = out.partial;
  bool prev_comparable = false;
  auto model_at = [&](int k) -> const StateSpaceModel& {
    return fit.warm && k <= cfg.leverage_warm_iters ? *fit.warm : model;
  };
  const bool tempered = cfg.warmup == EisWarmup::tempered;
  for (int k = 1; k <= cfg.max_iter; ++k) {
    const double zeta = std::min(1.0, static_cast<double>(k) / cfg.warmup_iters);
    const StateSpaceModel& mdl = model_at(k);
    const bool warm = &mdl != &model;
    fit.simulate(mdl, cur);
    EisParams next = fit.sweep(mdl, tempered ? zeta : 1.0, false, k, cur, tempered ? 1.0 : zeta);
    const bool comparable = zeta == 1.0 && !warm;
    const bool done = comparable && prev_comparable && relative_change(cur, next) < cfg.rel_tol;
    next.iterations = k;
    next.converged = done;
    cur = std::move(next);
    prev_comparable = comparable;
    if (done) break;
  }
  // The last sweep has not been simulated from yet.
  fit.simulate(model, cur);
  out.partial = cur;

  if (cfg.mode == EisMode::full) {
    EisParams full = fit.sweep(model, 1.0, true, out.partial.iterations + 1, out.partial, 1.0);
    full.iterations = out.partial.iterations + 1;
    full.converged = out.partial.converged;
    out.full = std::move(full);
  }
  return out;
}

}  // namespace

EisFit fit_eis_detailed(const StateSpaceModel& model, const Observations& y, const EisConfig& cfg,
                        std::uint64_t seed) {
  cfg.validate(model);
  if (!y.allFinite()) throw NumericDomainError("fit_eis: non-finite observations");
  // Too few regression samples show up as kernels that break down; refit
  // with twice as many (and fresh common random numbers) before giving up.
  EisConfig attempt = cfg;
  for (int retry = 0;; ++retry) {
    try {
      return fit_once(model, y, attempt, retry == 0 ? seed : derive_seed(seed, {static_cast<std::uint64_t>(retry)}));
    } catch (const KernelDegeneracyError&) {
      if (retry == cfg.sample_doublings) throw;
      attempt.samples *= 2;
    }
  }
}

EisParams fit_eis(const StateSpaceModel& model, const Observations& y, const EisConfig& cfg, std::uint64_t seed) {
  EisFit f = fit_eis_detailed(model, y, cfg, seed);
  return f.full ? std::move(*f.full) : std::move(f.partial);
}

LikEstimate eis_loglik(const StateSpaceModel& model, const Observations& y, const EisParams& params, int particles,
                       bool antithetic, std::uint64_t seed) {
  detail::EisProposal prop(model, y, params);
  EngineOptions opt;
  opt.particles = particles;
  opt.threshold = 0.0;
  opt.antithetic = antithetic;
  opt.look_ahead = false;
  Rng rng(seed);
  return run_sequential(prop, static_cast<int>(y.rows()), opt, rng);
}

}  // namespace peis
