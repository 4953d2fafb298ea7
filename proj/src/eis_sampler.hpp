#pragma once

// Shared by the EIS fitter, the EIS estimator and particle EIS.

#include "peis/eis.hpp"
#include "peis/smc.hpp"

#include <vector>

namespace peis::detail {

/// Gaussian kernel exp(b'Z x - 1/2 x'Z'CZ x) N(x; F, Sigma) for a fixed Sigma,
/// with everything that does not depend on F precomputed.
struct GaussianKernel {
  Mat sigma_inv;
  Mat v;
  Mat v_chol;
  Vec zb;
  double half_log_ratio = 0.0;  // 1/2 log(|Sigma| / |V|)

  /// False when Sigma or Sigma^{-1} + Z'CZ is not positive definite.
  bool build(const Mat& sigma, const Vec& b, const Mat& c, const Mat& z);

  /// log delta(F); writes the kernel mean.
  double log_delta(const Vec& f, Vec& mean) const {
    // Lazy products: these matrices are at most 4 x 4.
    const Vec sf = sigma_inv.lazyProduct(f);
    const Vec h = zb + sf;
    mean.noalias() = v.lazyProduct(h);
    return half_log_ratio + 0.5 * f.dot(sf) - 0.5 * h.dot(mean);
  }
};

/// Lambda Q Lambda for Lambda = diag(sqrt(lambda)).
inline Mat scaled_cov(const Mat& q, const Vec& lambda) {
  const Vec s = lambda.cwiseSqrt();
  return s.asDiagonal() * q * s.asDiagonal();
}

/// The fitted sequential sampler q(x_t | x_{t-1}) = k_t / chi_t, optionally
/// with tilted inverse-gamma draws for the next period's lambda.
class EisProposal final : public SequentialProposal {
 public:
  EisProposal(const StateSpaceModel& model, const Observations& y, const EisParams& params);

  int state_dim() const override { return model_.state_dim(); }
  bool carries_lambda() const override { return t_noise_; }
  void prepare(int t) override;
  double log_look_ahead(int t, const Vec& x_prev, const Vec& lambda) override;
  double propagate(int t, const Vec& x_prev, const Vec& lambda, const Vec& xi, Rng& rng, Vec& x_out,
                   Vec& lambda_out) override;

 private:
  const GaussianKernel& kernel(int t, const Vec& lambda);

  const StateSpaceModel& model_;
  const EisParams& params_;
  std::vector<Vec> y_;
  Mat k_;  // kernel basis
  Mat z_;
  Vec a1_;
  Mat p1_;
  Mat q_;
  bool t_noise_;
  Vec dof_;
  std::vector<GaussianKernel> cache_;
  std::vector<char> cached_;
  GaussianKernel scratch_;
};

}  // namespace peis::detail
