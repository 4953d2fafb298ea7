#pragma once

#include "peis/eis.hpp"
#include "peis/smc.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace peis {

/// Resampling weights w+_i = W_i chi_i at one period.
struct ForwardState {
  std::vector<double> w_plus;       // normalized
  std::vector<double> log_w_plus;   // unnormalized, log scale
  double log_sum = 0.0;             // log sum_i w+_i
  double ess_plus = 0.0;
};

struct PeisConfig {
  int particles = 50;
  double threshold = 0.9;
  bool antithetic = true;

  void validate() const;
};

/// Throws DegeneracyError (period -1) when every forward weight is zero.
ForwardState forward_weights(std::span<const double> weights, std::span<const double> log_chi);

/// Particle EIS: the fitted EIS sampler inside an auxiliary particle filter
/// whose look-ahead is the kernel integration constant chi_{t+1}(x_t).
LikEstimate peis_loglik(const StateSpaceModel& model, const Observations& y, const EisParams& params,
                        const PeisConfig& cfg, std::uint64_t seed);

struct UnbiasednessResult {
  double mean_ratio = 0.0;  // mean of L^ / L_ref
  double std_error = 0.0;
  double z = 0.0;
  int replications = 0;
};

/// Runs `estimator(seed)` (returning log L^) R times with derived seeds and
/// tests mean(L^ / L_ref) = 1.
UnbiasednessResult unbiasedness_harness(const std::function<double(std::uint64_t)>& estimator, double log_ref,
                                        int replications, std::uint64_t seed);

}  // namespace peis
