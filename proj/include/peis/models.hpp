#pragma once

#include "peis/linalg.hpp"
#include "peis/rng.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace peis {

enum class StateNoise { gaussian, student_t };

/// Conditional mean F_t and covariance Sigma_t = Lambda_t Q Lambda_t of x_t.
struct TransitionMoments {
  Vec mean;
  Mat cov;
};

struct MeasurementDerivatives {
  Vec gradient;  // d log p(y|s) / ds
  Mat hessian;
};

/// State space model contract
///
///   x_1 ~ N(a_1, P_1)
///   x_t = F(x_{t-1}, y_{t-1}) + Lambda_t eta_t,   eta_t ~ N(0, Q)
///   y_t | x_t ~ p(y_t | Z x_t)
///
/// where Lambda_t = diag(sqrt(lambda_t)) with lambda_{j,t} ~ IG(nu_j/2, nu_j/2)
/// for Student-t state noise and Lambda_t = I otherwise. Models bind their
/// parameter vector at construction; every evaluator is a pure function.
class StateSpaceModel {
 public:
  virtual ~StateSpaceModel() = default;

  virtual std::string name() const = 0;
  virtual std::unique_ptr<StateSpaceModel> clone() const = 0;

  int state_dim() const { return static_cast<int>(signal_map().cols()); }
  int signal_dim() const { return static_cast<int>(signal_map().rows()); }
  virtual int obs_dim() const = 0;
  /// Z, p x m.
  virtual const Mat& signal_map() const = 0;

  virtual bool has_leverage() const { return false; }
  virtual StateNoise state_noise() const { return StateNoise::gaussian; }
  /// nu_eta per state component; only meaningful for Student-t state noise.
  virtual Vec state_dof() const { return Vec(); }

  virtual Vec initial_mean() const = 0;
  virtual Mat initial_cov() const = 0;

  /// F(x_prev). `y_prev` is read only by leverage models and may be null.
  virtual Vec transition_mean(const Vec& x_prev, const Vec* y_prev) const = 0;
  /// Q, including the (nu-2)/nu factor of standardized Student-t noise.
  virtual const Mat& noise_cov() const = 0;

  virtual double log_meas(const Vec& y, const Vec& signal) const = 0;
  /// Derivatives of log p(y|s) in the signal. Default: central differences.
  virtual MeasurementDerivatives meas_derivatives(const Vec& y, const Vec& signal) const;
  virtual Vec sample_obs(const Vec& signal, Rng& rng) const = 0;

  /// Copy with the leverage coefficients set to zero; null if the model has none.
  virtual std::unique_ptr<StateSpaceModel> without_leverage() const { return nullptr; }
};

struct Trajectory {
  Eigen::MatrixXd x;  // n x m
  Observations y;     // n x obs_dim
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Concrete models

/// Two-factor log-volatility with leverage and standardized-t returns:
///   y_t = exp((c + x_1t + x_2t)/2) eps_t
///   x_{i,t+1} = phi_i x_it + rho_i sigma_i eps_t + sqrt(1 - rho_i^2) sigma_i eta_it
/// eta is N(0,1) or standardized t(nu_state).
struct UnivariateSvParams {
  double c = 0.0;
  double phi1 = 0.995;
  double phi2 = 0.9;
  double sigma2_1 = 0.005;
  double sigma2_2 = 0.03;
  double rho1 = -0.2;
  double rho2 = -0.5;
  double nu = 10.0;
  std::optional<double> nu_state;

  static std::vector<std::string> names(bool student_t_states);
  std::vector<double> to_vector() const;
  static UnivariateSvParams from_vector(const std::vector<double>& v);
};

class UnivariateSvModel final : public StateSpaceModel {
 public:
  explicit UnivariateSvModel(const UnivariateSvParams& params);

  std::string name() const override;
  std::unique_ptr<StateSpaceModel> clone() const override;
  int obs_dim() const override { return 1; }
  const Mat& signal_map() const override { return z_; }
  bool has_leverage() const override { return p_.rho1 != 0.0 || p_.rho2 != 0.0; }
  StateNoise state_noise() const override;
  Vec state_dof() const override;
  Vec initial_mean() const override;
  Mat initial_cov() const override;
  Vec transition_mean(const Vec& x_prev, const Vec* y_prev) const override;
  const Mat& noise_cov() const override { return q_; }
  double log_meas(const Vec& y, const Vec& signal) const override;
  MeasurementDerivatives meas_derivatives(const Vec& y, const Vec& signal) const override;
  Vec sample_obs(const Vec& signal, Rng& rng) const override;
  std::unique_ptr<StateSpaceModel> without_leverage() const override;

  const UnivariateSvParams& params() const { return p_; }

 private:
  UnivariateSvParams p_;
  Mat z_;
  Mat q_;
  double log_norm_;
};

/// Bivariate SV with time-varying correlation:
///   y_t ~ N(0, [s1^2, r s1 s2; r s1 s2, s2^2]),
///   s_i^2 = exp(c_i + x_it), r_t = (1 - exp(-c3 - x_3t)) / (1 + exp(-c3 - x_3t)),
///   x_{i,t+1} = phi_i x_it + eta_it, eta_it ~ N(0, sigma_i^2).
struct BivariateSvParams {
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 1.0;
  double phi1 = 0.98;
  double phi2 = 0.98;
  double phi3 = 0.99;
  double sigma2_1 = 0.0225;
  double sigma2_2 = 0.0225;
  double sigma2_3 = 0.0025;

  static std::vector<std::string> names();
  std::vector<double> to_vector() const;
  static BivariateSvParams from_vector(const std::vector<double>& v);
};

class BivariateSvModel final : public StateSpaceModel {
 public:
  explicit BivariateSvModel(const BivariateSvParams& params);

  std::string name() const override { return "bivariate-sv"; }
  std::unique_ptr<StateSpaceModel> clone() const override;
  int obs_dim() const override { return 2; }
  const Mat& signal_map() const override { return z_; }
  Vec initial_mean() const override;
  Mat initial_cov() const override;
  Vec transition_mean(const Vec& x_prev, const Vec* y_prev) const override;
  const Mat& noise_cov() const override { return q_; }
  double log_meas(const Vec& y, const Vec& signal) const override;
  Vec sample_obs(const Vec& signal, Rng& rng) const override;

  const BivariateSvParams& params() const { return p_; }

  /// r_t as a function of c3 + x_3t.
  static double correlation(double c3_plus_x3);

 private:
  BivariateSvParams p_;
  Mat z_;
  Mat q_;
};

/// Linear Gaussian model x_t = T x_{t-1} + eta, y_t = Z x_t + e, e ~ N(0, H).
/// The measurement density is exactly quadratic in the signal, which makes it
/// the exactness oracle for the importance samplers (see kalman_loglik).
class LinearGaussianModel final : public StateSpaceModel {
 public:
  /// Scalar AR(1) plus noise, started from the stationary distribution.
  LinearGaussianModel(double phi, double sigma2_eta, double sigma2_eps);
  /// General form; Q and P1 may be singular (deterministic states).
  LinearGaussianModel(Mat transition, Mat q, Mat z, Mat h, Vec a1, Mat p1);

  std::string name() const override { return "linear-gaussian"; }
  std::unique_ptr<StateSpaceModel> clone() const override;
  int obs_dim() const override { return static_cast<int>(z_.rows()); }
  const Mat& signal_map() const override { return z_; }
  Vec initial_mean() const override { return a1_; }
  Mat initial_cov() const override { return p1_; }
  Vec transition_mean(const Vec& x_prev, const Vec* y_prev) const override;
  const Mat& noise_cov() const override { return q_; }
  double log_meas(const Vec& y, const Vec& signal) const override;
  MeasurementDerivatives meas_derivatives(const Vec& y, const Vec& signal) const override;
  Vec sample_obs(const Vec& signal, Rng& rng) const override;

  const Mat& transition_matrix() const { return t_; }
  const Mat& measurement_cov() const { return h_; }

 private:
  Mat t_, q_, z_, h_;
  Vec a1_;
  Mat p1_;
  Mat h_sqrt_;
};

/// Solves P = T P T' + Q for the stationary covariance of a stable VAR(1).
Mat stationary_cov(const Mat& transition, const Mat& q);

// ---------------------------------------------------------------------------
// Operations

Trajectory simulate_dgp(const StateSpaceModel& model, int n, std::uint64_t seed);

/// log p(y_t | s_t); throws NumericDomainError on non-finite input.
double log_meas(const StateSpaceModel& model, const Vec& y, const Vec& signal);

TransitionMoments initial_moments(const StateSpaceModel& model);

/// Moments of x_t | x_{t-1} for period t >= 1 (0-based). `lambda` is required
/// iff the state noise is Student-t; `y_prev` iff the model has leverage.
TransitionMoments transition_moments(const StateSpaceModel& model, int t, const Vec& x_prev,
                                     const std::optional<Vec>& y_prev,
                                     const std::optional<Vec>& lambda);

double log_transition(const StateSpaceModel& model, int t, const Vec& x_t, const Vec& x_prev,
                      const std::optional<Vec>& y_prev, const std::optional<Vec>& lambda);

/// Builds a model from a registry id ("univariate-sv", "univariate-sv-tstate",
/// "bivariate-sv", "linear-gaussian") and a parameter vector in that model's
/// canonical order. Empty vector selects the simulation defaults.
std::unique_ptr<StateSpaceModel> make_model(const std::string& id, const std::vector<double>& theta);
std::vector<std::string> parameter_names(const std::string& id);
std::vector<double> default_parameters(const std::string& id);

}  // namespace peis
