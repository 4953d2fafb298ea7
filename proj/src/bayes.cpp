#include "peis/bayes.hpp"

#include "parallel.hpp"
#include "peis/errors.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace peis {
namespace {

double elapsed(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// log(1 + e^x) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double logistic(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

std::vector<double> normalize_log_weights(std::span<const double> log_w) {
  const double lse = log_sum_exp(log_w);
  std::vector<double> w(log_w.size(), 0.0);
  if (!std::isfinite(lse)) return w;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_w[i] - lse);
  return w;
}

double ess_of(std::span<const double> w) {
  double s = 0.0;
  for (double x : w) s += x * x;
  return s > 0.0 ? 1.0 / s : 0.0;
}

// Lower Cholesky factor; false when not positive definite.
bool cholesky(const Eigen::MatrixXd& s, Eigen::MatrixXd& l) {
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success) return false;
  l = llt.matrixL();
  return l.diagonal().minCoeff() > 0.0 && l.allFinite();
}

std::vector<double> column(const Eigen::MatrixXd& m, int j) {
  return std::vector<double>(m.col(j).data(), m.col(j).data() + m.rows());
}

}  // namespace

// ---------------------------------------------------------------------------
// Priors

MarginalPrior MarginalPrior::normal(double mean, double variance) { return {PriorKind::normal, mean, variance}; }
MarginalPrior MarginalPrior::uniform(double lower, double upper) { return {PriorKind::uniform, lower, upper}; }
MarginalPrior MarginalPrior::inverse_gamma(double shape, double scale) {
  return {PriorKind::inverse_gamma, shape, scale};
}

bool MarginalPrior::in_support(double x) const {
  if (!std::isfinite(x)) return false;
  switch (kind) {
    case PriorKind::normal:
      return true;
    case PriorKind::uniform:
      return x > a && x < b;
    case PriorKind::inverse_gamma:
      return x > 0.0;
  }
  return false;
}

double MarginalPrior::log_density(double x) const {
  if (!in_support(x)) return kNegInf;
  switch (kind) {
    case PriorKind::normal:
      return -0.5 * (kLog2Pi + std::log(b) + (x - a) * (x - a) / b);
    case PriorKind::uniform:
      return -std::log(b - a);
    case PriorKind::inverse_gamma:
      return a * std::log(b) - std::lgamma(a) - (a + 1.0) * std::log(x) - b / x;
  }
  return kNegInf;
}

double MarginalPrior::sample(Rng& rng) const {
  switch (kind) {
    case PriorKind::normal:
      return a + std::sqrt(b) * rng.normal();
    case PriorKind::uniform:
      return a + (b - a) * rng.uniform();
    case PriorKind::inverse_gamma:
      return rng.inverse_gamma(a, b);
  }
  return 0.0;
}

void PriorSpec::validate() const {
  if (marginals.empty()) throw ContractError("prior has no parameters");
  if (!names.empty() && names.size() != marginals.size()) throw ContractError("prior names and marginals differ in size");
  for (const auto& m : marginals) {
    const bool ok = m.kind == PriorKind::uniform ? m.a < m.b : m.b > 0.0 && (m.kind != PriorKind::inverse_gamma || m.a > 0.0);
    if (!ok || !std::isfinite(m.a) || !std::isfinite(m.b)) throw ParameterDomainError("improper prior marginal");
  }
}

PriorSpec default_prior(const std::string& model_id) {
  using M = MarginalPrior;
  PriorSpec p;
  p.names = parameter_names(model_id);
  if (model_id == "bivariate-sv") {
    p.marginals = {M::normal(0, 1),  M::normal(0, 1),  M::normal(0, 1),
                   M::uniform(0, 1), M::uniform(0, 1), M::uniform(0, 1),
                   M::inverse_gamma(2.5, 0.035), M::inverse_gamma(2.5, 0.035), M::inverse_gamma(2.5, 0.0075)};
  } else if (model_id == "univariate-sv" || model_id == "univariate-sv-tstate") {
    p.marginals = {M::normal(0, 1),
                   M::uniform(0, 1),
                   M::uniform(0, 1),
                   M::inverse_gamma(2.5, 0.035),
                   M::inverse_gamma(2.5, 0.035),
                   M::uniform(-1, 1),
                   M::uniform(-1, 1),
                   M::uniform(2, 100)};
    if (model_id == "univariate-sv-tstate") p.marginals.push_back(M::uniform(2, 100));
  } else if (model_id == "linear-gaussian") {
    p.marginals = {M::uniform(-1, 1), M::inverse_gamma(2.5, 1.0), M::inverse_gamma(2.5, 1.0)};
  } else {
    throw ContractError("no default prior for model '" + model_id + "'");
  }
  return p;
}

double log_prior(const PriorSpec& prior, std::span<const double> theta) {
  if (theta.size() != prior.marginals.size()) throw ContractError("log_prior: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    s += prior.marginals[i].log_density(theta[i]);
    if (s == kNegInf) return kNegInf;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Transforms

double ParamTransform::forward(double theta) const {
  auto bad = [&] { throw ParameterDomainError("transform: " + std::to_string(theta) + " outside the open domain"); };
  if (!std::isfinite(theta)) bad();
  switch (kind) {
    case TransformKind::identity:
      return theta;
    case TransformKind::log:
      if (theta <= 0.0) bad();
      return std::log(theta);
    case TransformKind::logit:
      if (theta <= 0.0 || theta >= 1.0) bad();
      return std::log(theta) - std::log1p(-theta);
    case TransformKind::atanh:
      if (theta <= -1.0 || theta >= 1.0) bad();
      return std::atanh(theta);
    case TransformKind::interval: {
      if (theta <= lower || theta >= upper) bad();
      const double u = (theta - lower) / (upper - lower);
      return std::log(u) - std::log1p(-u);
    }
  }
  return theta;
}

double ParamTransform::inverse(double v) const {
  switch (kind) {
    case TransformKind::identity:
      return v;
    case TransformKind::log:
      return std::exp(v);
    case TransformKind::logit:
      return logistic(v);
    case TransformKind::atanh:
      return std::tanh(v);
    case TransformKind::interval:
      return lower + (upper - lower) * logistic(v);
  }
  return v;
}

double ParamTransform::log_jacobian(double v) const {
  switch (kind) {
    case TransformKind::identity:
      return 0.0;
    case TransformKind::log:
      return v;
    case TransformKind::logit:
      return -softplus(-v) - softplus(v);
    case TransformKind::atanh: {
      const double a = std::abs(v);
      return 2.0 * (std::log(2.0) - a - std::log1p(std::exp(-2.0 * a)));
    }
    case TransformKind::interval:
      return std::log(upper - lower) - softplus(-v) - softplus(v);
  }
  return 0.0;
}

std::vector<ParamTransform> transforms_for(const PriorSpec& prior) {
  std::vector<ParamTransform> out;
  for (const auto& m : prior.marginals) {
    switch (m.kind) {
      case PriorKind::normal:
        out.push_back({TransformKind::identity});
        break;
      case PriorKind::inverse_gamma:
        out.push_back({TransformKind::log});
        break;
      case PriorKind::uniform:
        if (m.a == 0.0 && m.b == 1.0)
          out.push_back({TransformKind::logit});
        else if (m.a == -1.0 && m.b == 1.0)
          out.push_back({TransformKind::atanh});
        else
          out.push_back({TransformKind::interval, m.a, m.b});
        break;
    }
  }
  return out;
}

Eigen::VectorXd to_unconstrained(const std::vector<ParamTransform>& tr, std::span<const double> theta) {
  if (theta.size() != tr.size()) throw ContractError("to_unconstrained: dimension mismatch");
  Eigen::VectorXd v(static_cast<Eigen::Index>(tr.size()));
  for (std::size_t i = 0; i < tr.size(); ++i) v(static_cast<Eigen::Index>(i)) = tr[i].forward(theta[i]);
  return v;
}

std::vector<double> to_constrained(const std::vector<ParamTransform>& tr, const Eigen::VectorXd& v) {
  if (static_cast<std::size_t>(v.size()) != tr.size()) throw ContractError("to_constrained: dimension mismatch");
  std::vector<double> theta(tr.size());
  for (std::size_t i = 0; i < tr.size(); ++i) theta[i] = tr[i].inverse(v(static_cast<Eigen::Index>(i)));
  return theta;
}

double log_jacobian(const std::vector<ParamTransform>& tr, const Eigen::VectorXd& v) {
  double s = 0.0;
  for (std::size_t i = 0; i < tr.size(); ++i) s += tr[i].log_jacobian(v(static_cast<Eigen::Index>(i)));
  return s;
}

// ---------------------------------------------------------------------------
// Likelihood plumbing

LogLikelihood make_loglik(const std::string& model_id, const Observations& y, const std::string& method,
                          int particles, const LikelihoodSettings& settings) {
  if (!is_known_method(method)) throw ContractError("unknown likelihood method '" + method + "'");
  parameter_names(model_id);  // validates the id
  return [=](const std::vector<double>& theta, std::uint64_t seed) {
    const auto model = make_model(model_id, theta);
    return evaluate_method(method, particles, *model, y, settings, seed).log_likelihood;
  };
}

Posterior::Posterior(PriorSpec prior_spec, LogLikelihood lik)
    : prior(std::move(prior_spec)), transforms(transforms_for(prior)), loglik(std::move(lik)) {
  prior.validate();
}

double Posterior::log_target(const Eigen::VectorXd& v, std::uint64_t seed, bool* failed) const {
  if (failed != nullptr) *failed = false;
  const std::vector<double> theta = to_constrained(transforms, v);
  const double lp = log_prior(prior, theta);
  // Saturated transforms land on the boundary; the prior rules those out.
  if (lp == kNegInf) return kNegInf;
  double ll = kNegInf;
  try {
    ll = loglik(theta, seed);
  } catch (const Error&) {
    ll = kNegInf;
  }
  if (!std::isfinite(ll)) {
    if (failed != nullptr) *failed = true;
    return kNegInf;
  }
  return ll + lp + log_jacobian(transforms, v);
}

// ---------------------------------------------------------------------------
// Multivariate t

void MvtProposal::validate() const {
  if (!(dof > 2.0)) throw ContractError("multivariate t needs dof > 2");
  if (scale.rows() != location.size() || scale.cols() != location.size())
    throw ContractError("multivariate t scale has the wrong shape");
  Eigen::MatrixXd l;
  if (!cholesky(scale, l)) throw DegenerateSampleError("multivariate t scale is not positive definite");
}

double MvtProposal::log_density(const Eigen::VectorXd& v) const {
  Eigen::LLT<Eigen::MatrixXd> llt(scale);
  const int d = dim();
  const Eigen::VectorXd z = llt.matrixL().solve(v - location);
  const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return std::lgamma(0.5 * (dof + d)) - std::lgamma(0.5 * dof) - 0.5 * d * std::log(dof * M_PI) - 0.5 * log_det -
         0.5 * (dof + d) * std::log1p(z.squaredNorm() / dof);
}

Eigen::VectorXd MvtProposal::sample(Rng& rng) const {
  const int d = dim();
  Eigen::VectorXd z(d);
  for (int i = 0; i < d; ++i) z(i) = rng.normal();
  const double w = rng.gamma(0.5 * dof, 2.0 / dof);  // chi2(dof) / dof
  Eigen::LLT<Eigen::MatrixXd> llt(scale);
  return location + llt.matrixL() * z / std::sqrt(w);
}

MvtProposal fit_mvt_proposal(const Eigen::MatrixXd& draws, std::span<const double> weights, const MvtFitConfig& cfg) {
  const int m = static_cast<int>(draws.rows());
  const int d = static_cast<int>(draws.cols());
  if (static_cast<int>(weights.size()) != m) throw ContractError("fit_mvt_proposal: weights and draws differ in size");
  if (m <= d + 2) throw ContractError("fit_mvt_proposal needs more than d + 2 draws");
  if (!(cfg.dof > 2.0)) throw ContractError("fit_mvt_proposal needs dof > 2");
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (std::abs(wsum - 1.0) > 1e-8) throw ContractError("fit_mvt_proposal needs normalized weights");
  if (!draws.allFinite()) throw DegenerateSampleError("fit_mvt_proposal: non-finite draws");
  const Eigen::Map<const Eigen::VectorXd> w(weights.data(), m);

  // Ridge only when the weighted scatter is (near) singular. The floor of 1
  // on the ridge size covers a one-point sample, where the trace is zero.
  auto regularize = [&](Eigen::MatrixXd s) {
    s = 0.5 * (s + s.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s, Eigen::EigenvaluesOnly);
    const double top = es.eigenvalues().maxCoeff();
    if (!(es.eigenvalues().minCoeff() > 1e-12 * top)) {
      const double tr = s.trace() / d;
      s += 1e-8 * (tr > 0.0 ? tr : 1.0) * Eigen::MatrixXd::Identity(d, d);
    }
    return s;
  };

  MvtProposal q;
  q.dof = cfg.dof;
  q.location = draws.transpose() * w;
  {
    const Eigen::MatrixXd c = draws.rowwise() - q.location.transpose();
    q.scale = regularize(c.transpose() * w.asDiagonal() * c);
  }
  for (int it = 0; it < cfg.max_iter; ++it) {
    Eigen::MatrixXd l;
    if (!cholesky(q.scale, l)) throw DegenerateSampleError("fit_mvt_proposal: singular scale");
    const Eigen::MatrixXd c = draws.rowwise() - q.location.transpose();
    const Eigen::MatrixXd z = l.triangularView<Eigen::Lower>().solve(c.transpose());
    const Eigen::VectorXd maha = z.colwise().squaredNorm().transpose();
    const Eigen::VectorXd wu = w.array() * (cfg.dof + d) / (cfg.dof + maha.array());
    const Eigen::VectorXd loc = draws.transpose() * wu / wu.sum();
    const Eigen::MatrixXd c2 = draws.rowwise() - loc.transpose();
    q.scale = regularize(c2.transpose() * wu.asDiagonal() * c2);
    const double change = (loc - q.location).norm() / std::max(q.location.norm(), 1e-300);
    q.location = loc;
    if (change < cfg.tol || (loc.norm() == 0.0)) break;
  }
  if (!q.scale.allFinite()) throw DegenerateSampleError("fit_mvt_proposal: non-finite scale");
  q.validate();
  return q;
}

// ---------------------------------------------------------------------------
// Proposal training

TrainingResult train_proposal(const Posterior& post, const TrainingConfig& cfg) {
  const int d = post.dim();
  if (cfg.draws <= d + 2) throw ContractError("train_proposal needs more than d + 2 draws");

  // Prior moments in the unconstrained space.
  MvtProposal q;
  q.dof = cfg.dof;
  {
    Rng rng(derive_seed(cfg.seed, {0}));
    const int k = 20000;
    Eigen::MatrixXd v(k, d);
    int rows = 0;
    while (rows < k) {
      std::vector<double> theta(d);
      for (int j = 0; j < d; ++j) theta[j] = post.prior.marginals[j].sample(rng);
      try {
        v.row(rows) = to_unconstrained(post.transforms, theta).transpose();
        ++rows;
      } catch (const ParameterDomainError&) {
      }
    }
    q.location = v.colwise().mean().transpose();
    const Eigen::MatrixXd c = v.rowwise() - q.location.transpose();
    // A t with this scale has the prior covariance.
    q.scale = (c.transpose() * c) / (k - 1) * (q.dof - 2.0) / q.dof;
  }

  // Draws from every round stay in the pool. Their weights use the equal
  // mixture of all proposals so far in the denominator, so the effective
  // sample keeps growing while the exponent rises.
  TrainingResult out;
  std::vector<MvtProposal> history;
  std::vector<Eigen::VectorXd> pool;
  std::vector<double> base, ll;  // log prior + log Jacobian, log L^
  double gamma = 0.0;
  int full_rounds = 0;
  const int max_total = cfg.max_tempering_rounds + cfg.max_rounds;
  for (int round = 0; round < max_total; ++round) {
    history.push_back(q);
    for (int i = 0; i < cfg.draws; ++i) {
      const auto ur = static_cast<std::uint64_t>(round), ui = static_cast<std::uint64_t>(i);
      Rng rng(derive_seed(cfg.seed, {1, ur, ui}));
      const Eigen::VectorXd vi = q.sample(rng);
      const std::vector<double> theta = to_constrained(post.transforms, vi);
      const double lp = log_prior(post.prior, theta);
      double l = kNegInf;
      if (lp != kNegInf) {
        try {
          l = post.loglik(theta, derive_seed(cfg.seed, {2, ur, ui}));
        } catch (const Error&) {
        }
        if (!std::isfinite(l)) {
          l = kNegInf;
          ++out.failures;
        }
      }
      pool.push_back(vi);
      base.push_back(lp + log_jacobian(post.transforms, vi));
      ll.push_back(l);
    }
    const int m = static_cast<int>(pool.size());
    std::vector<double> log_mix(m);
    {
      std::vector<double> terms(history.size());
      for (int i = 0; i < m; ++i) {
        for (std::size_t r = 0; r < history.size(); ++r) terms[r] = history[r].log_density(pool[i]);
        log_mix[i] = log_sum_exp(terms) - std::log(static_cast<double>(history.size()));
      }
    }
    auto weights_at = [&](double g) {
      std::vector<double> lw(m);
      for (int i = 0; i < m; ++i) lw[i] = ll[i] == kNegInf ? kNegInf : base[i] + g * ll[i] - log_mix[i];
      return normalize_log_weights(lw);
    };
    // Next exponent from the conditional ESS of the incremental weights
    // L^(next - gamma) under the current ones, which always moves forward.
    const bool last_tempering = round + 1 >= cfg.max_tempering_rounds;
    double next = 1.0;
    if (gamma < 1.0 && !last_tempering) {
      const std::vector<double> cur = weights_at(gamma);
      double top = kNegInf;
      for (int i = 0; i < m; ++i)
        if (cur[i] > 0.0) top = std::max(top, ll[i]);
      auto cess = [&](double delta) {
        double s1 = 0.0, s2 = 0.0;
        for (int i = 0; i < m; ++i) {
          if (cur[i] == 0.0) continue;
          const double u = std::exp(delta * (ll[i] - top));
          s1 += cur[i] * u;
          s2 += cur[i] * u * u;
        }
        return s2 > 0.0 ? s1 * s1 / s2 : 0.0;
      };
      if (std::isfinite(top) && cess(1.0 - gamma) < cfg.ess_fraction) {
        double lo = 0.0, hi = 1.0 - gamma;
        for (int b = 0; b < 60; ++b) {
          const double mid = 0.5 * (lo + hi);
          (cess(mid) >= cfg.ess_fraction ? lo : hi) = mid;
        }
        next = gamma + lo;
      }
    }
    gamma = next;
    const std::vector<double> w = weights_at(gamma);
    if (ess_of(w) == 0.0) throw ProposalMismatchError("train_proposal: every weight is zero");
    Eigen::MatrixXd v(m, d);
    for (int i = 0; i < m; ++i) v.row(i) = pool[i].transpose();
    const MvtProposal fitted = fit_mvt_proposal(v, w, {cfg.dof, 200, 1e-6});
    const double change = (fitted.location - q.location).norm() / std::max(q.location.norm(), 1.0);
    q = fitted;
    out.exponents.push_back(gamma);
    out.ess.push_back(ess_of(w));
    out.rounds = round + 1;
    if (gamma == 1.0) {
      ++full_rounds;
      if (change < cfg.location_tol) {
        out.converged = true;
        break;
      }
      if (full_rounds >= cfg.max_rounds) break;
    }
  }
  out.proposal = q;
  return out;
}

// ---------------------------------------------------------------------------
// IS^2

ParamSummary weighted_summary(std::span<const double> x, std::span<const double> weights) {
  const std::size_t m = x.size();
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  ParamSummary s;
  if (m == 0 || !(wsum > 0.0)) return s;
  for (std::size_t i = 0; i < m; ++i) s.mean += weights[i] * x[i];
  s.mean /= wsum;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double e = x[i] - s.mean;
    const double w = weights[i] / wsum;
    m2 += w * e * e;
    m3 += w * e * e * e;
    m4 += w * e * e * e * e;
  }
  s.sd = std::sqrt(m2);
  if (m2 > 0.0) {
    s.skewness = m3 / (m2 * s.sd);
    s.kurtosis = m4 / (m2 * m2);
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  auto quantile = [&](double p) {
    double acc = 0.0;
    for (std::size_t k : order) {
      acc += weights[k] / wsum;
      if (acc >= p) return x[k];
    }
    return x[order.back()];
  };
  s.lower90 = quantile(0.05);
  s.upper90 = quantile(0.95);
  return s;
}

Is2Result is2_run(const Posterior& post, const MvtProposal& proposal, const Is2Config& cfg) {
  if (cfg.draws < 2) throw ContractError("is2_run needs at least two draws");
  if (cfg.bootstrap < 100) throw ContractError("is2_run needs at least 100 bootstrap resamples");
  proposal.validate();
  const int d = post.dim();
  if (proposal.dim() != d) throw ContractError("is2_run: proposal dimension does not match the prior");
  const auto start = std::chrono::steady_clock::now();
  const int m = cfg.draws;

  Is2Result out;
  out.names = post.prior.names;
  out.draws.resize(m, d);
  out.log_weights.assign(m, kNegInf);
  std::vector<char> failed(m, 0);
  detail::parallel_for(m, cfg.threads, [&](int i) {
    Rng rng(derive_seed(cfg.seed, {0, static_cast<std::uint64_t>(i)}));
    const Eigen::VectorXd v = proposal.sample(rng);
    const std::vector<double> theta = to_constrained(post.transforms, v);
    for (int j = 0; j < d; ++j) out.draws(i, j) = theta[j];
    bool f = false;
    const double lt = post.log_target(v, derive_seed(cfg.seed, {1, static_cast<std::uint64_t>(i)}), &f);
    failed[i] = f;
    out.log_weights[i] = lt == kNegInf ? kNegInf : lt - proposal.log_density(v);
  });
  out.failures = static_cast<int>(std::count(failed.begin(), failed.end(), 1));
  const double lse = log_sum_exp(out.log_weights);
  if (!std::isfinite(lse)) throw ProposalMismatchError("is2_run: every importance weight is zero");
  out.weights = normalize_log_weights(out.log_weights);
  out.ess = ess_of(out.weights);
  out.log_marginal_likelihood = lse - std::log(static_cast<double>(m));
  for (int j = 0; j < d; ++j) out.summary.push_back(weighted_summary(column(out.draws, j), out.weights));

  // Bootstrap over (draw, weight) pairs; every statistic uses the same resamples.
  std::vector<std::vector<ParamSummary>> boot(d);
  std::vector<double> boot_ml;
  Rng rng(derive_seed(cfg.seed, {2}));
  std::vector<double> x(m), w(m), lw(m);
  for (int b = 0; b < cfg.bootstrap; ++b) {
    std::vector<int> idx(m);
    for (int i = 0; i < m; ++i) idx[i] = std::min(m - 1, static_cast<int>(rng.uniform() * m));
    for (int i = 0; i < m; ++i) lw[i] = out.log_weights[idx[i]];
    const double l = log_sum_exp(lw);
    boot_ml.push_back(l - std::log(static_cast<double>(m)));
    for (int i = 0; i < m; ++i) w[i] = std::isfinite(l) ? std::exp(lw[i] - l) : 0.0;
    for (int j = 0; j < d; ++j) {
      for (int i = 0; i < m; ++i) x[i] = out.draws(idx[i], j);
      boot[j].push_back(weighted_summary(x, w));
    }
  }
  auto sd_of = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double a : v) mean += a;
    mean /= static_cast<double>(v.size());
    double s = 0.0;
    for (double a : v) s += (a - mean) * (a - mean);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
  };
  for (int j = 0; j < d; ++j) {
    auto field = [&](double ParamSummary::*f) {
      std::vector<double> v;
      for (const auto& s : boot[j]) v.push_back(s.*f);
      return sd_of(v);
    };
    out.std_errors.push_back({field(&ParamSummary::mean), field(&ParamSummary::sd), field(&ParamSummary::skewness),
                              field(&ParamSummary::kurtosis), field(&ParamSummary::lower90),
                              field(&ParamSummary::upper90)});
  }
  boot_ml.erase(std::remove_if(boot_ml.begin(), boot_ml.end(), [](double v) { return !std::isfinite(v); }),
                boot_ml.end());
  out.log_marginal_likelihood_se = boot_ml.size() > 1 ? sd_of(boot_ml) : 0.0;
  out.seconds = elapsed(start);
  return out;
}

// ---------------------------------------------------------------------------
// PMMH

namespace {

// Shared loop: `propose` returns the candidate and the log proposal
// correction log q(cur | prop) - log q(prop | cur).
template <typename Propose>
ChainResult run_chain(const Posterior& post, Eigen::VectorXd cur, const PmmhConfig& cfg, Propose&& propose) {
  if (cfg.iters < 1 || cfg.burn_in < 0 || cfg.burn_in >= cfg.iters)
    throw ContractError("pmmh: need iters > burn_in >= 0");
  const auto start = std::chrono::steady_clock::now();
  const int d = post.dim();
  ChainResult out;
  out.names = post.prior.names;
  out.chain.resize(cfg.iters, d);
  out.log_target.resize(cfg.iters);

  double lp_cur = post.log_target(cur, derive_seed(cfg.seed, {2}));
  if (lp_cur == kNegInf) throw ContractError("pmmh: the initial point has zero posterior estimate");
  Rng rng(derive_seed(cfg.seed, {0}));
  int accepted = 0;
  for (int k = 0; k < cfg.iters; ++k) {
    double log_q_ratio = 0.0;
    const Eigen::VectorXd prop = propose(k, cur, rng, log_q_ratio);
    bool failed = false;
    const double lp = post.log_target(prop, derive_seed(cfg.seed, {1, static_cast<std::uint64_t>(k)}), &failed);
    if (failed) ++out.failures;
    const double log_u = std::log(rng.uniform());
    if (lp != kNegInf && log_u < lp - lp_cur + log_q_ratio) {
      cur = prop;
      lp_cur = lp;
      ++accepted;
    }
    const std::vector<double> theta = to_constrained(post.transforms, cur);
    for (int j = 0; j < d; ++j) out.chain(k, j) = theta[j];
    out.log_target[k] = lp_cur;
  }
  out.acceptance = static_cast<double>(accepted) / cfg.iters;
  const int kept = cfg.iters - cfg.burn_in;
  for (int j = 0; j < d; ++j) {
    const Eigen::VectorXd col = out.chain.col(j).tail(kept);
    const double mean = col.mean();
    const double var = kept > 1 ? (col.array() - mean).square().sum() / (kept - 1) : 0.0;
    double ineff = INFINITY;
    try {
      ineff = obm_inefficiency(std::span<const double>(col.data(), kept));
    } catch (const Error&) {
    }
    out.mean.push_back(mean);
    out.inefficiency.push_back(ineff);
    out.mean_se.push_back(std::isfinite(ineff) ? std::sqrt(var * ineff / kept) : INFINITY);
  }
  out.seconds = elapsed(start);
  return out;
}

}  // namespace

ChainResult pmmh_arw(const Posterior& post, std::span<const double> theta0, const PmmhConfig& cfg) {
  const int d = post.dim();
  const Eigen::VectorXd v0 = to_unconstrained(post.transforms, theta0);
  // Running moments of the chain in the unconstrained space.
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(d, d);
  int count = 0;
  const double small = 0.1 / std::sqrt(static_cast<double>(d));
  auto propose = [&](int k, const Eigen::VectorXd& cur, Rng& rng, double& log_q_ratio) {
    log_q_ratio = 0.0;
    // Fold the current state (the chain value at iteration k - 1) into the moments.
    if (k > 0) {
      ++count;
      const Eigen::VectorXd delta = cur - mean;
      mean += delta / count;
      m2 += delta * (cur - mean).transpose();
    }
    Eigen::VectorXd z(d);
    for (int i = 0; i < d; ++i) z(i) = rng.normal();
    const bool adaptive = k >= cfg.adapt_start && count > d && rng.uniform() < 0.95;
    if (adaptive) {
      Eigen::MatrixXd l;
      if (cholesky(m2 / (count - 1) * (2.38 * 2.38 / d), l)) return Eigen::VectorXd(cur + l * z);
    }
    return Eigen::VectorXd(cur + small * z);
  };
  return run_chain(post, v0, cfg, propose);
}

ChainResult pmmh_imh(const Posterior& post, const MvtProposal& proposal, const PmmhConfig& cfg) {
  proposal.validate();
  if (proposal.dim() != post.dim()) throw ContractError("pmmh_imh: proposal dimension does not match the prior");
  auto propose = [&](int, const Eigen::VectorXd& cur, Rng& rng, double& log_q_ratio) {
    Eigen::VectorXd prop = proposal.sample(rng);
    log_q_ratio = proposal.log_density(cur) - proposal.log_density(prop);
    return prop;
  };
  return run_chain(post, proposal.location, cfg, propose);
}

// ---------------------------------------------------------------------------
// Particle count and diagnostics

double optimal_particles(double var_unit, double tau1, double tau2) {
  if (!(var_unit > 0.0) || !(tau2 > 0.0) || !(tau1 >= 0.0))
    throw ParameterDomainError("optimal_particles needs var_unit > 0, tau2 > 0 and tau1 >= 0");
  return var_unit * (1.0 + std::sqrt(1.0 + 4.0 * (tau1 / tau2) / var_unit)) / 2.0;
}

double obm_inefficiency(std::span<const double> chain, int batch) {
  const int n = static_cast<int>(chain.size());
  const int b = batch > 0 ? batch : static_cast<int>(std::floor(std::sqrt(static_cast<double>(n))));
  if (b < 1 || n < 10 * b) throw ContractError("obm_inefficiency needs a chain of at least 10 batch lengths");
  double mean = 0.0;
  for (double x : chain) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : chain) var += (x - mean) * (x - mean);
  var /= n;
  if (!(var > 0.0)) throw DegenerateSampleError("obm_inefficiency: constant chain has no variance");
  // Sliding window sums.
  double window = 0.0;
  for (int i = 0; i < b; ++i) window += chain[i];
  double acc = 0.0;
  for (int j = 0;; ++j) {
    const double e = window / b - mean;
    acc += e * e;
    if (j + b >= n) break;
    window += chain[j + b] - chain[j];
  }
  const double obm = static_cast<double>(n) * b / (static_cast<double>(n - b) * (n - b + 1)) * acc;
  return obm / var;
}

double bootstrap_se(const Eigen::MatrixXd& draws, std::span<const double> weights,
                    const std::function<double(const Eigen::MatrixXd&, std::span<const double>)>& statistic, int B,
                    std::uint64_t seed) {
  if (B < 100) throw ContractError("bootstrap_se needs B >= 100");
  const int m = static_cast<int>(draws.rows());
  if (static_cast<int>(weights.size()) != m || m == 0) throw ContractError("bootstrap_se: size mismatch");
  Rng rng(seed);
  Eigen::MatrixXd xb(m, draws.cols());
  std::vector<double> wb(m);
  double mean = 0.0, m2 = 0.0;
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < m; ++i) {
      const int k = std::min(m - 1, static_cast<int>(rng.uniform() * m));
      xb.row(i) = draws.row(k);
      wb[i] = weights[k];
    }
    const double s = statistic(xb, wb);
    const double delta = s - mean;
    mean += delta / (b + 1);
    m2 += delta * (s - mean);
  }
  return std::sqrt(m2 / (B - 1));
}

}  // namespace peis
