#pragma once

#include "peis/harness.hpp"
#include "peis/linalg.hpp"
#include "peis/rng.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace peis {

// ---------------------------------------------------------------------------
// Priors and parameter transforms

enum class PriorKind { normal, uniform, inverse_gamma };

/// One independent marginal. normal: (mean, variance); uniform: (lower,
/// upper); inverse_gamma: (shape, scale).
struct MarginalPrior {
  PriorKind kind = PriorKind::normal;
  double a = 0.0;
  double b = 1.0;

  static MarginalPrior normal(double mean, double variance);
  static MarginalPrior uniform(double lower, double upper);
  static MarginalPrior inverse_gamma(double shape, double scale);

  bool in_support(double x) const;
  /// -inf outside the support.
  double log_density(double x) const;
  double sample(Rng& rng) const;
};

struct PriorSpec {
  std::vector<std::string> names;
  std::vector<MarginalPrior> marginals;

  int dim() const { return static_cast<int>(marginals.size()); }
  void validate() const;
};

/// Independent priors used for posterior inference. Bivariate SV:
/// c_i ~ N(0, 1), phi_i ~ U(0, 1), sigma2_{1,2} ~ IG(2.5, 0.035),
/// sigma2_3 ~ IG(2.5, 0.0075). The univariate and linear models get the same
/// families by analogy (rho ~ U(-1, 1), nu ~ U(2, 100)).
PriorSpec default_prior(const std::string& model_id);

double log_prior(const PriorSpec& prior, std::span<const double> theta);

/// Map to the unconstrained space where all samplers work:
///   normal -> identity, inverse gamma -> log, U(0,1) -> logit,
///   U(-1,1) -> atanh, other U(a,b) -> logit((x - a) / (b - a)).
enum class TransformKind { identity, log, logit, atanh, interval };

struct ParamTransform {
  TransformKind kind = TransformKind::identity;
  double lower = 0.0;
  double upper = 1.0;

  /// Throws ParameterDomainError on the boundary or outside.
  double forward(double theta) const;
  double inverse(double v) const;
  /// log |d theta / d v|.
  double log_jacobian(double v) const;
};

std::vector<ParamTransform> transforms_for(const PriorSpec& prior);

Eigen::VectorXd to_unconstrained(const std::vector<ParamTransform>& tr, std::span<const double> theta);
std::vector<double> to_constrained(const std::vector<ParamTransform>& tr, const Eigen::VectorXd& v);
double log_jacobian(const std::vector<ParamTransform>& tr, const Eigen::VectorXd& v);

// ---------------------------------------------------------------------------
// Likelihood plumbing

/// log p^(y | theta) for a constrained parameter vector. May throw any
/// peis::Error; samplers treat that as a zero likelihood estimate.
using LogLikelihood = std::function<double(const std::vector<double>& theta, std::uint64_t seed)>;

/// Wraps evaluate_method: builds the model for theta, fits EIS when the
/// method needs it and returns the log-likelihood estimate.
LogLikelihood make_loglik(const std::string& model_id, const Observations& y, const std::string& method,
                          int particles, const LikelihoodSettings& settings);

/// Unnormalized log posterior in unconstrained space:
/// log L^ + log p(theta(v)) + log |J(v)|.
struct Posterior {
  PriorSpec prior;
  std::vector<ParamTransform> transforms;
  LogLikelihood loglik;

  Posterior(PriorSpec prior_spec, LogLikelihood lik);
  int dim() const { return prior.dim(); }
  /// -inf when the estimator fails; `failed` is set in that case.
  double log_target(const Eigen::VectorXd& v, std::uint64_t seed, bool* failed = nullptr) const;
};

// ---------------------------------------------------------------------------
// Multivariate t proposal

struct MvtProposal {
  Eigen::VectorXd location;
  Eigen::MatrixXd scale;
  double dof = 5.0;

  int dim() const { return static_cast<int>(location.size()); }
  void validate() const;
  double log_density(const Eigen::VectorXd& v) const;
  Eigen::VectorXd sample(Rng& rng) const;
};

struct MvtFitConfig {
  double dof = 5.0;
  int max_iter = 200;
  double tol = 1e-6;
};

/// Importance-weighted EM for a single multivariate t with fixed dof.
/// `draws` is M x d, `weights` normalized. Throws DegenerateSampleError when
/// the scale stays singular after the ridge.
MvtProposal fit_mvt_proposal(const Eigen::MatrixXd& draws, std::span<const double> weights,
                             const MvtFitConfig& cfg = {});

struct TrainingConfig {
  int draws = 500;
  /// Refinement rounds at full likelihood weight.
  int max_rounds = 5;
  /// Stop when ||delta location|| / max(||location||, 1) falls below this.
  double location_tol = 0.01;
  /// Rounds with tempered weights before the full posterior is reached.
  int max_tempering_rounds = 25;
  /// Tempering picks the exponent so the weights keep this ESS fraction.
  double ess_fraction = 0.5;
  double dof = 5.0;
  std::uint64_t seed = 1;
};

struct TrainingResult {
  MvtProposal proposal;
  int rounds = 0;
  std::vector<double> exponents;  // likelihood exponent per round
  std::vector<double> ess;        // ESS of the round's weights
  int failures = 0;
  bool converged = false;
};

/// Stand-in for mixture-of-t training with a single t: starts from a t
/// matched to the prior moments in unconstrained space and refits on
/// importance-weighted draws, tempering the likelihood while the weights are
/// too degenerate to fit.
TrainingResult train_proposal(const Posterior& post, const TrainingConfig& cfg);

// ---------------------------------------------------------------------------
// IS^2

struct ParamSummary {
  double mean = 0.0;
  double sd = 0.0;
  double skewness = 0.0;
  double kurtosis = 0.0;
  double lower90 = 0.0;
  double upper90 = 0.0;
};

struct Is2Result {
  std::vector<std::string> names;
  Eigen::MatrixXd draws;         // M x d, constrained
  std::vector<double> log_weights;  // unnormalized, -inf on estimator failure
  std::vector<double> weights;      // normalized
  std::vector<ParamSummary> summary;
  std::vector<ParamSummary> std_errors;  // bootstrap
  double log_marginal_likelihood = 0.0;
  double log_marginal_likelihood_se = 0.0;  // bootstrap, on the log scale
  double ess = 0.0;
  int failures = 0;
  double seconds = 0.0;
};

struct Is2Config {
  int draws = 2000;
  int bootstrap = 1000;
  std::uint64_t seed = 1;
  int threads = 1;
};

/// Throws ProposalMismatchError when every weight is zero.
Is2Result is2_run(const Posterior& post, const MvtProposal& proposal, const Is2Config& cfg);

/// Weighted summaries of one column.
ParamSummary weighted_summary(std::span<const double> x, std::span<const double> weights);

// ---------------------------------------------------------------------------
// PMMH

struct PmmhConfig {
  int iters = 20000;
  int burn_in = 2000;
  /// ARW: iterations with the fixed 0.1^2 I / d proposal before adaptation.
  int adapt_start = 100;
  std::uint64_t seed = 1;
};

struct ChainResult {
  std::vector<std::string> names;
  Eigen::MatrixXd chain;  // iters x d, constrained
  std::vector<double> log_target;
  double acceptance = 0.0;
  int failures = 0;
  /// Post burn-in, per parameter; +inf when the column is constant.
  std::vector<double> inefficiency;
  std::vector<double> mean;
  std::vector<double> mean_se;
  double seconds = 0.0;
};

/// Adaptive random walk: with probability 0.95 N(0, 2.38^2 S / d) with S the
/// running chain covariance, otherwise N(0, 0.1^2 I / d).
ChainResult pmmh_arw(const Posterior& post, std::span<const double> theta0, const PmmhConfig& cfg);

/// Independence sampler with proposal q; the start is q's location.
ChainResult pmmh_imh(const Posterior& post, const MvtProposal& proposal, const PmmhConfig& cfg);

// ---------------------------------------------------------------------------
// Particle count and diagnostics

/// N_opt = var_unit (1 + sqrt(1 + 4 (tau1 / tau2) / var_unit)) / 2.
double optimal_particles(double var_unit, double tau1, double tau2);

/// Inefficiency factor by overlapping batch means; batch <= 0 selects
/// floor(sqrt(length)).
double obm_inefficiency(std::span<const double> chain, int batch = 0);

/// Standard deviation of `statistic` over B weighted resamples of the
/// (draw, weight) pairs, drawn with replacement.
double bootstrap_se(const Eigen::MatrixXd& draws, std::span<const double> weights,
                    const std::function<double(const Eigen::MatrixXd&, std::span<const double>)>& statistic, int B,
                    std::uint64_t seed);

}  // namespace peis
