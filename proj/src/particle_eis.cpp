#include "peis/particle_eis.hpp"

#include "eis_sampler.hpp"
#include "peis/errors.hpp"

#include <cmath>

namespace peis {

void PeisConfig::validate() const {
  if (particles < 2) throw ContractError("P-EIS needs at least two particles");
  if (antithetic && particles % 2 != 0) throw ContractError("antithetic P-EIS needs an even particle count");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ContractError("P-EIS threshold must lie in [0, 1]");
}

ForwardState forward_weights(std::span<const double> weights, std::span<const double> log_chi) {
  if (weights.size() != log_chi.size()) throw ContractError("forward_weights: size mismatch");
  ess(weights);  // validates normalization
  ForwardState fs;
  fs.log_w_plus.resize(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!std::isfinite(log_chi[i])) throw ContractError("forward_weights: non-finite log chi");
    fs.log_w_plus[i] = std::log(weights[i]) + log_chi[i];
  }
  fs.log_sum = log_sum_exp(fs.log_w_plus);
  if (!std::isfinite(fs.log_sum)) throw DegeneracyError("all forward weights are zero", -1);
  fs.w_plus.resize(weights.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    fs.w_plus[i] = std::exp(fs.log_w_plus[i] - fs.log_sum);
    sq += fs.w_plus[i] * fs.w_plus[i];
  }
  fs.ess_plus = 1.0 / sq;
  return fs;
}

LikEstimate peis_loglik(const StateSpaceModel& model, const Observations& y, const EisParams& params,
                        const PeisConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  detail::EisProposal prop(model, y, params);
  EngineOptions opt;
  opt.particles = cfg.particles;
  opt.threshold = cfg.threshold;
  opt.antithetic = cfg.antithetic;
  opt.look_ahead = true;
  Rng rng(seed);
  return run_sequential(prop, static_cast<int>(y.rows()), opt, rng);
}

UnbiasednessResult unbiasedness_harness(const std::function<double(std::uint64_t)>& estimator, double log_ref,
                                        int replications, std::uint64_t seed) {
  if (replications < 2) throw ContractError("unbiasedness_harness needs at least two replications");
  // Welford on the ratios.
  double mean = 0.0;
  double m2 = 0.0;
  for (int r = 0; r < replications; ++r) {
    const double ratio = std::exp(estimator(derive_seed(seed, {static_cast<std::uint64_t>(r)})) - log_ref);
    const double delta = ratio - mean;
    mean += delta / (r + 1);
    m2 += delta * (ratio - mean);
  }
  UnbiasednessResult out;
  out.replications = replications;
  out.mean_ratio = mean;
  out.std_error = std::sqrt(m2 / (replications - 1) / replications);
  if (out.std_error > 0.0)
    out.z = (mean - 1.0) / out.std_error;
  else
    out.z = std::abs(mean - 1.0) < 1e-12 ? 0.0 : std::copysign(INFINITY, mean - 1.0);
  return out;
}

}  // namespace peis
