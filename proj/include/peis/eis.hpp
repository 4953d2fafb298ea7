#pragma once

#include "peis/linalg.hpp"
#include "peis/models.hpp"
#include "peis/smc.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace peis {

/// Importance parameters of the sequential kernels
///   k_t(x_t, x_{t-1}) = exp(b_t' K x_t - 1/2 x_t' K' C_t K x_t) p(x_t | x_{t-1}, lambda_t)
/// with K = kernel_basis(model), and, in full mode, the inverse-gamma tilts lambda^{alpha} exp(beta / lambda)
/// of q(lambda_t). Entries are 0-based in t; alpha/beta are empty unless
/// the parameters were fitted in full mode (alpha[0], beta[0] are unused).
struct EisParams {
  std::vector<Vec> b;
  std::vector<Mat> c;
  std::vector<Vec> alpha;
  std::vector<Vec> beta;
  int iterations = 0;
  bool converged = false;

  int size() const { return static_cast<int>(b.size()); }
  bool has_lambda_tilt() const { return !alpha.empty(); }

  /// b = 0, C = 0: the kernels reproduce the transition density.
  static EisParams natural(int n, int p);
};

/// Coordinates the kernels are quadratic in: the signal map Z when it has
/// as many rows as the state, otherwise the identity. With fewer signals
/// than states, log chi_{t+1}(x_t) depends on Z F(x_t) rather than Z x_t, so
/// a signal-only kernel cannot absorb it.
Mat kernel_basis(const StateSpaceModel& model);

enum class EisMode { partial, full };

/// How the first iterations are slowed down. With zeta_k = min(1, k / warmup_iters):
/// `damped` moves (b, C) only zeta_k of the way from the previous iterate to
/// the new regression fit; `tempered` regresses zeta_k log p(y|x) instead.
enum class EisWarmup { damped, tempered };

struct EisConfig {
  int samples = 50;
  int max_iter = 10;
  double rel_tol = 1e-3;
  int warmup_iters = 3;
  EisWarmup warmup = EisWarmup::damped;
  /// A fit whose kernels break down is redone with twice the samples, at
  /// most this many times.
  int sample_doublings = 2;
  /// Leverage coefficients are set to zero for this many initial iterations.
  int leverage_warm_iters = 2;
  EisMode mode = EisMode::partial;

  /// Throws ContractError when the regression would be underdetermined.
  void validate(const StateSpaceModel& model) const;
};

/// Common random numbers of one fit: S x n standard normal m-vectors and,
/// for Student-t state noise, S x n draws from the lambda prior.
struct CrnStore {
  std::vector<std::vector<Vec>> u;
  std::vector<std::vector<Vec>> lambda;

  static CrnStore draw(const StateSpaceModel& model, int n, int samples, std::uint64_t seed);
};

struct KernelMoments {
  Vec mean;
  Mat cov;
  double log_delta = 0.0;
};

/// Moments of the normalized kernel q(x_t | x_{t-1}) for transition moments
/// (F, Sigma): V = (Sigma^{-1} + Z'CZ)^{-1}, mu = V (Z'b + Sigma^{-1} F) and the
/// log integration constant log delta = -log chi.
KernelMoments kernel_moments(const Vec& b, const Mat& c, const Mat& z, const TransitionMoments& tm, int t = 0);

/// Same for period t of a fitted parameter set (t = 0 uses the initial moments).
KernelMoments kernel_moments(const EisParams& params, const StateSpaceModel& model, int t, const Vec& x_prev,
                             const std::optional<Vec>& y_prev, const std::optional<Vec>& lambda);

/// log of Gamma(nu/2) / (nu/2)^{nu/2} * (nu/2 - beta)^{nu/2 - alpha} / Gamma(nu/2 - alpha),
/// the constant that normalizes lambda^alpha exp(beta/lambda) IG(lambda; nu/2, nu/2).
double log_phi(double alpha, double beta, double nu);

/// mu + L xi with L the lower Cholesky factor of V.
Vec draw_state(const KernelMoments& km, const Vec& xi);

struct EisFit {
  EisParams partial;
  /// Present when fitted in full mode; built from one extra sweep over
  /// trajectories drawn from `partial`.
  std::optional<EisParams> full;

  const EisParams& best() const { return full ? *full : partial; }
};

EisFit fit_eis_detailed(const StateSpaceModel& model, const Observations& y, const EisConfig& cfg,
                        std::uint64_t seed);

/// Parameters of the requested mode.
EisParams fit_eis(const StateSpaceModel& model, const Observations& y, const EisConfig& cfg, std::uint64_t seed);

/// Plain importance sampling over N trajectories from the fitted sampler.
LikEstimate eis_loglik(const StateSpaceModel& model, const Observations& y, const EisParams& params, int particles,
                       bool antithetic, std::uint64_t seed);

}  // namespace peis
