#pragma once

#include "peis/linalg.hpp"
#include "peis/models.hpp"
#include "peis/rng.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace peis {

/// Output of every likelihood estimator in the library.
struct LikEstimate {
  double log_likelihood = 0.0;
  /// log p^(y_t | y_{1:t-1}); their sum is log_likelihood.
  std::vector<double> increments;
  int resample_count = 0;
  double seconds = 0.0;
  /// ESS of the normalized weights at the end of each period.
  std::vector<double> ess;
  /// ESS of the resampling weights inspected at the start of period t (NaN
  /// at t = 0 or when no resampling weights were formed).
  std::vector<double> ess_plus;
  /// Normalized log weights at the final period.
  std::vector<double> final_log_weights;
  /// SISR(2) particles that fell back to the transition proposal.
  int fallback_count = 0;
};

struct ResamplePolicy {
  /// Resample when ESS / N is strictly below this fraction.
  double threshold = 0.5;
};

/// Particle cloud at the end of one period: states column-wise (m x N),
/// optional lambda slots (m x N, or empty), raw and normalized log weights.
struct ParticleSystem {
  Eigen::MatrixXd particles;
  Eigen::MatrixXd lambda;
  std::vector<double> log_weights;
  std::vector<double> weights;
  double ess = 0.0;
};

/// 1 / sum W_i^2 for normalized W. Throws ContractError otherwise.
double ess(std::span<const double> weights);

/// Systematic resampling: the grid (u + i) / n_out is walked against the
/// cumulative weights. Output indices are sorted ascending.
std::vector<int> systematic_resample(std::span<const double> weights, int n_out, double u);

// ---------------------------------------------------------------------------
// Auxiliary particle filter engine shared by every estimator.
//
// Each period t the engine (i) forms the resampling weights
// W_{t-1} * chi_t(x_{t-1}) and resamples when their ESS falls below the
// threshold, (ii) propagates every particle through the proposal, and
// (iii) reweights, dividing by the ancestor's look-ahead after a resampling
// step. The likelihood increment is sum(w_t), times sum(w+_{t-1}) when the
// previous step resampled.

class SequentialProposal {
 public:
  virtual ~SequentialProposal() = default;

  virtual int state_dim() const = 0;
  /// Whether particles carry a lambda slot (Student-t state noise).
  virtual bool carries_lambda() const { return false; }
  /// Called once at the start of each period before any particle work.
  virtual void prepare(int /*t*/) {}
  /// log chi_t(x_{t-1}, lambda_t) for t >= 1.
  virtual double log_look_ahead(int /*t*/, const Vec& /*x_prev*/, const Vec& /*lambda*/) { return 0.0; }
  /// Draws x_t from the Gaussian innovation `xi` (and the lambda slot for
  /// period t+1), returning log of target / proposal for this period.
  virtual double propagate(int t, const Vec& x_prev, const Vec& lambda, const Vec& xi, Rng& rng,
                           Vec& x_out, Vec& lambda_out) = 0;
  virtual int fallback_count() const { return 0; }
};

struct EngineOptions {
  int particles = 50;
  double threshold = 0.5;
  bool antithetic = false;
  /// Evaluate look-ahead functions. When false the resampling weights are W.
  bool look_ahead = false;
};

LikEstimate run_sequential(SequentialProposal& proposal, int n, const EngineOptions& options, Rng& rng);

// ---------------------------------------------------------------------------
// Baseline filters

/// Bootstrap filter: transition proposal, ESS-triggered resampling.
LikEstimate bootstrap_loglik(const StateSpaceModel& model, const Observations& y, int particles,
                             const ResamplePolicy& policy, std::uint64_t seed);

/// Zero-order auxiliary particle filter: first-stage weights
/// W_{t-1} p(y_t | Z F(x_{t-1})).
LikEstimate apf0_loglik(const StateSpaceModel& model, const Observations& y, int particles,
                        const ResamplePolicy& policy, std::uint64_t seed);

/// SISR with a per-particle Laplace (second order) proposal. Gaussian state
/// noise only.
LikEstimate sisr2_loglik(const StateSpaceModel& model, const Observations& y, int particles,
                         const ResamplePolicy& policy, std::uint64_t seed);

}  // namespace peis
