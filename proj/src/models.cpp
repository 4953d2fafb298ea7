#include "peis/models.hpp"

#include "peis/errors.hpp"

#include <cmath>
#include <numbers>

namespace peis {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ParameterDomainError(what);
}

bool all_finite(const Vec& v) { return v.allFinite(); }

// log(1 - tanh(u)^2) without cancellation.
double log_one_minus_tanh2(double u) {
  const double a = std::abs(u);
  return 2.0 * (std::log(2.0) - a - std::log1p(std::exp(-2.0 * a)));
}

}  // namespace

MeasurementDerivatives StateSpaceModel::meas_derivatives(const Vec& y, const Vec& signal) const {
  const int p = static_cast<int>(signal.size());
  MeasurementDerivatives d{Vec::Zero(p), Mat::Zero(p, p)};
  const double f0 = log_meas(y, signal);
  Vec h(p);
  for (int i = 0; i < p; ++i) h(i) = 1e-4 * std::max(1.0, std::abs(signal(i)));
  for (int i = 0; i < p; ++i) {
    Vec sp = signal, sm = signal;
    sp(i) += h(i);
    sm(i) -= h(i);
    const double fp = log_meas(y, sp), fm = log_meas(y, sm);
    d.gradient(i) = (fp - fm) / (2.0 * h(i));
    d.hessian(i, i) = (fp - 2.0 * f0 + fm) / (h(i) * h(i));
    for (int j = 0; j < i; ++j) {
      Vec spp = signal, spm = signal, smp = signal, smm = signal;
      spp(i) += h(i); spp(j) += h(j);
      spm(i) += h(i); spm(j) -= h(j);
      smp(i) -= h(i); smp(j) += h(j);
      smm(i) -= h(i); smm(j) -= h(j);
      const double v = (log_meas(y, spp) - log_meas(y, spm) - log_meas(y, smp) + log_meas(y, smm)) /
                       (4.0 * h(i) * h(j));
      d.hessian(i, j) = d.hessian(j, i) = v;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Univariate two-factor SV

std::vector<std::string> UnivariateSvParams::names(bool student_t_states) {
  std::vector<std::string> n{"c", "phi1", "phi2", "sigma2_1", "sigma2_2", "rho1", "rho2", "nu"};
  if (student_t_states) n.emplace_back("nu_state");
  return n;
}

std::vector<double> UnivariateSvParams::to_vector() const {
  std::vector<double> v{c, phi1, phi2, sigma2_1, sigma2_2, rho1, rho2, nu};
  if (nu_state) v.push_back(*nu_state);
  return v;
}

UnivariateSvParams UnivariateSvParams::from_vector(const std::vector<double>& v) {
  if (v.size() != 8 && v.size() != 9)
    throw ParameterDomainError("univariate SV expects 8 or 9 parameters");
  UnivariateSvParams p{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], std::nullopt};
  if (v.size() == 9) p.nu_state = v[8];
  return p;
}

UnivariateSvModel::UnivariateSvModel(const UnivariateSvParams& params) : p_(params) {
  require(std::isfinite(p_.c), "c must be finite");
  require(1.0 > p_.phi1 && p_.phi1 > p_.phi2 && p_.phi2 > -1.0, "need 1 > phi1 > phi2 > -1");
  require(p_.sigma2_1 > 0.0 && p_.sigma2_2 > 0.0, "state variances must be positive");
  require(std::abs(p_.rho1) < 1.0 && std::abs(p_.rho2) < 1.0, "leverage coefficients must lie in (-1,1)");
  require(p_.nu > 2.0, "return degrees of freedom must exceed 2");
  if (p_.nu_state) require(*p_.nu_state > 2.0, "state degrees of freedom must exceed 2");

  z_ = Mat::Ones(1, 2);
  const double kappa = p_.nu_state ? (*p_.nu_state - 2.0) / *p_.nu_state : 1.0;
  q_ = Mat::Zero(2, 2);
  q_(0, 0) = (1.0 - p_.rho1 * p_.rho1) * p_.sigma2_1 * kappa;
  q_(1, 1) = (1.0 - p_.rho2 * p_.rho2) * p_.sigma2_2 * kappa;
  const double nu = p_.nu;
  log_norm_ = std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
              0.5 * std::log(std::numbers::pi * (nu - 2.0));
}

std::string UnivariateSvModel::name() const {
  return p_.nu_state ? "univariate-sv-tstate" : "univariate-sv";
}

std::unique_ptr<StateSpaceModel> UnivariateSvModel::clone() const {
  return std::make_unique<UnivariateSvModel>(*this);
}

StateNoise UnivariateSvModel::state_noise() const {
  return p_.nu_state ? StateNoise::student_t : StateNoise::gaussian;
}

Vec UnivariateSvModel::state_dof() const {
  if (!p_.nu_state) return Vec();
  return Vec::Constant(2, *p_.nu_state);
}

Vec UnivariateSvModel::initial_mean() const { return Vec::Zero(2); }

Mat UnivariateSvModel::initial_cov() const {
  Mat p1 = Mat::Zero(2, 2);
  p1(0, 0) = p_.sigma2_1 / (1.0 - p_.phi1 * p_.phi1);
  p1(1, 1) = p_.sigma2_2 / (1.0 - p_.phi2 * p_.phi2);
  return p1;
}

Vec UnivariateSvModel::transition_mean(const Vec& x_prev, const Vec* y_prev) const {
  Vec f(2);
  f(0) = p_.phi1 * x_prev(0);
  f(1) = p_.phi2 * x_prev(1);
  if (y_prev != nullptr && has_leverage()) {
    const double eps = (*y_prev)(0) * std::exp(-0.5 * (p_.c + x_prev(0) + x_prev(1)));
    f(0) += p_.rho1 * std::sqrt(p_.sigma2_1) * eps;
    f(1) += p_.rho2 * std::sqrt(p_.sigma2_2) * eps;
  }
  return f;
}

double UnivariateSvModel::log_meas(const Vec& y, const Vec& signal) const {
  const double s = p_.c + signal(0);
  const double a = y(0) * y(0) * std::exp(-s) / (p_.nu - 2.0);
  return log_norm_ - 0.5 * s - 0.5 * (p_.nu + 1.0) * std::log1p(a);
}

MeasurementDerivatives UnivariateSvModel::meas_derivatives(const Vec& y, const Vec& signal) const {
  const double s = p_.c + signal(0);
  const double a = y(0) * y(0) * std::exp(-s) / (p_.nu - 2.0);
  const double half_nu1 = 0.5 * (p_.nu + 1.0);
  MeasurementDerivatives d{Vec(1), Mat(1, 1)};
  d.gradient(0) = -0.5 + half_nu1 * a / (1.0 + a);
  d.hessian(0, 0) = -half_nu1 * a / ((1.0 + a) * (1.0 + a));
  return d;
}

Vec UnivariateSvModel::sample_obs(const Vec& signal, Rng& rng) const {
  const double eps = rng.student_t(p_.nu) * std::sqrt((p_.nu - 2.0) / p_.nu);
  Vec y(1);
  y(0) = std::exp(0.5 * (p_.c + signal(0))) * eps;
  return y;
}

std::unique_ptr<StateSpaceModel> UnivariateSvModel::without_leverage() const {
  UnivariateSvParams p = p_;
  p.rho1 = 0.0;
  p.rho2 = 0.0;
  return std::make_unique<UnivariateSvModel>(p);
}

// ---------------------------------------------------------------------------
// Bivariate SV

std::vector<std::string> BivariateSvParams::names() {
  return {"c1", "c2", "c3", "phi1", "phi2", "phi3", "sigma2_1", "sigma2_2", "sigma2_3"};
}

std::vector<double> BivariateSvParams::to_vector() const {
  return {c1, c2, c3, phi1, phi2, phi3, sigma2_1, sigma2_2, sigma2_3};
}

BivariateSvParams BivariateSvParams::from_vector(const std::vector<double>& v) {
  if (v.size() != 9) throw ParameterDomainError("bivariate SV expects 9 parameters");
  return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]};
}

BivariateSvModel::BivariateSvModel(const BivariateSvParams& params) : p_(params) {
  require(std::isfinite(p_.c1) && std::isfinite(p_.c2) && std::isfinite(p_.c3), "constants must be finite");
  for (double phi : {p_.phi1, p_.phi2, p_.phi3}) require(std::abs(phi) < 1.0, "need |phi| < 1");
  for (double s2 : {p_.sigma2_1, p_.sigma2_2, p_.sigma2_3}) require(s2 > 0.0, "state variances must be positive");
  z_ = Mat::Identity(3, 3);
  q_ = Mat::Zero(3, 3);
  q_(0, 0) = p_.sigma2_1;
  q_(1, 1) = p_.sigma2_2;
  q_(2, 2) = p_.sigma2_3;
}

std::unique_ptr<StateSpaceModel> BivariateSvModel::clone() const {
  return std::make_unique<BivariateSvModel>(*this);
}

Vec BivariateSvModel::initial_mean() const { return Vec::Zero(3); }

Mat BivariateSvModel::initial_cov() const {
  Mat p1 = Mat::Zero(3, 3);
  p1(0, 0) = p_.sigma2_1 / (1.0 - p_.phi1 * p_.phi1);
  p1(1, 1) = p_.sigma2_2 / (1.0 - p_.phi2 * p_.phi2);
  p1(2, 2) = p_.sigma2_3 / (1.0 - p_.phi3 * p_.phi3);
  return p1;
}

Vec BivariateSvModel::transition_mean(const Vec& x_prev, const Vec*) const {
  Vec f(3);
  f << p_.phi1 * x_prev(0), p_.phi2 * x_prev(1), p_.phi3 * x_prev(2);
  return f;
}

double BivariateSvModel::correlation(double c3_plus_x3) { return std::tanh(0.5 * c3_plus_x3); }

double BivariateSvModel::log_meas(const Vec& y, const Vec& signal) const {
  const double h1 = p_.c1 + signal(0);
  const double h2 = p_.c2 + signal(1);
  const double u = 0.5 * (p_.c3 + signal(2));
  const double r = std::tanh(u);
  const double log_1mr2 = log_one_minus_tanh2(u);
  const double z1 = y(0) * std::exp(-0.5 * h1);
  const double z2 = y(1) * std::exp(-0.5 * h2);
  const double quad = (z1 * z1 - 2.0 * r * z1 * z2 + z2 * z2) * std::exp(-log_1mr2);
  return -kLog2Pi - 0.5 * (h1 + h2 + log_1mr2) - 0.5 * quad;
}

Vec BivariateSvModel::sample_obs(const Vec& signal, Rng& rng) const {
  const double s1 = std::exp(0.5 * (p_.c1 + signal(0)));
  const double s2 = std::exp(0.5 * (p_.c2 + signal(1)));
  const double u = 0.5 * (p_.c3 + signal(2));
  const double r = std::tanh(u);
  const double e1 = rng.normal();
  const double e2 = rng.normal();
  Vec y(2);
  y(0) = s1 * e1;
  y(1) = s2 * (r * e1 + std::exp(0.5 * log_one_minus_tanh2(u)) * e2);
  return y;
}

// ---------------------------------------------------------------------------
// Linear Gaussian

Mat stationary_cov(const Mat& transition, const Mat& q) {
  const int m = static_cast<int>(transition.rows());
  // vec(P) = (I - T (x) T)^{-1} vec(Q)
  Eigen::MatrixXd kron(m * m, m * m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) kron.block(i * m, j * m, m, m) = transition(i, j) * transition;
  const Eigen::MatrixXd a = Eigen::MatrixXd::Identity(m * m, m * m) - kron;
  Eigen::VectorXd vq(m * m);
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < m; ++i) vq(j * m + i) = q(i, j);
  const Eigen::VectorXd vp = a.partialPivLu().solve(vq);
  Mat p(m, m);
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < m; ++i) p(i, j) = vp(j * m + i);
  return 0.5 * (p + p.transpose());
}

LinearGaussianModel::LinearGaussianModel(double phi, double sigma2_eta, double sigma2_eps) {
  require(std::abs(phi) < 1.0, "need |phi| < 1");
  require(sigma2_eta > 0.0 && sigma2_eps > 0.0, "variances must be positive");
  t_ = Mat::Constant(1, 1, phi);
  q_ = Mat::Constant(1, 1, sigma2_eta);
  z_ = Mat::Identity(1, 1);
  h_ = Mat::Constant(1, 1, sigma2_eps);
  a1_ = Vec::Zero(1);
  p1_ = Mat::Constant(1, 1, sigma2_eta / (1.0 - phi * phi));
  h_sqrt_ = psd_sqrt(h_);
}

LinearGaussianModel::LinearGaussianModel(Mat transition, Mat q, Mat z, Mat h, Vec a1, Mat p1)
    : t_(std::move(transition)), q_(std::move(q)), z_(std::move(z)), h_(std::move(h)),
      a1_(std::move(a1)), p1_(std::move(p1)) {
  const auto m = t_.rows();
  require(t_.cols() == m && q_.rows() == m && q_.cols() == m && z_.cols() == m && a1_.size() == m &&
              p1_.rows() == m && p1_.cols() == m,
          "inconsistent state dimensions");
  require(z_.rows() <= m && h_.rows() == z_.rows() && h_.cols() == z_.rows(), "inconsistent signal dimensions");
  require(Eigen::LLT<Mat>(h_).info() == Eigen::Success, "measurement covariance must be positive definite");
  h_sqrt_ = psd_sqrt(h_);
}

std::unique_ptr<StateSpaceModel> LinearGaussianModel::clone() const {
  return std::make_unique<LinearGaussianModel>(*this);
}

Vec LinearGaussianModel::transition_mean(const Vec& x_prev, const Vec*) const { return t_ * x_prev; }

double LinearGaussianModel::log_meas(const Vec& y, const Vec& signal) const {
  return log_mvn(y, signal, h_);
}

MeasurementDerivatives LinearGaussianModel::meas_derivatives(const Vec& y, const Vec& signal) const {
  const Mat h_inv = h_.inverse();
  return {h_inv * (y - signal), -h_inv};
}

Vec LinearGaussianModel::sample_obs(const Vec& signal, Rng& rng) const {
  Vec e(signal.size());
  for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = rng.normal();
  return signal + h_sqrt_ * e;
}

// ---------------------------------------------------------------------------
// Operations

Trajectory simulate_dgp(const StateSpaceModel& model, int n, std::uint64_t seed) {
  if (n < 1) throw ContractError("simulate_dgp needs n >= 1");
  const int m = model.state_dim();
  Rng rng(seed);
  Trajectory tr{Eigen::MatrixXd(n, m), Observations(n, model.obs_dim()), seed};
  const Mat& z = model.signal_map();
  const Mat q_sqrt = psd_sqrt(model.noise_cov());
  const bool t_noise = model.state_noise() == StateNoise::student_t;
  const Vec dof = model.state_dof();

  Vec xi(m);
  for (int j = 0; j < m; ++j) xi(j) = rng.normal();
  Vec x = model.initial_mean() + psd_sqrt(model.initial_cov()) * xi;
  for (int t = 0; t < n; ++t) {
    const Vec y = model.sample_obs(z * x, rng);
    tr.x.row(t) = x.transpose();
    tr.y.row(t) = y.transpose();
    if (t + 1 == n) break;
    for (int j = 0; j < m; ++j) xi(j) = rng.normal();
    Vec shock = q_sqrt * xi;
    if (t_noise) {
      for (int j = 0; j < m; ++j) shock(j) *= std::sqrt(rng.inverse_gamma(0.5 * dof(j), 0.5 * dof(j)));
    }
    x = model.transition_mean(x, &y) + shock;
  }
  return tr;
}

double log_meas(const StateSpaceModel& model, const Vec& y, const Vec& signal) {
  if (!all_finite(y) || !all_finite(signal)) throw NumericDomainError("log_meas: non-finite input");
  return model.log_meas(y, signal);
}

TransitionMoments initial_moments(const StateSpaceModel& model) {
  return {model.initial_mean(), model.initial_cov()};
}

TransitionMoments transition_moments(const StateSpaceModel& model, int t, const Vec& x_prev,
                                     const std::optional<Vec>& y_prev,
                                     const std::optional<Vec>& lambda) {
  if (t < 1) throw ContractError("transition_moments: period must be >= 1; use initial_moments");
  const int m = model.state_dim();
  if (x_prev.size() != m) throw ContractError("transition_moments: state dimension mismatch");
  const bool t_noise = model.state_noise() == StateNoise::student_t;
  if (t_noise && !lambda) throw ContractError("transition_moments: Student-t state noise needs lambda");
  if (model.has_leverage() && !y_prev) throw ContractError("transition_moments: leverage model needs y_prev");
  TransitionMoments tm{model.transition_mean(x_prev, y_prev ? &*y_prev : nullptr), model.noise_cov()};
  if (lambda) {
    if (lambda->size() != m || (lambda->array() <= 0.0).any())
      throw ContractError("transition_moments: lambda must be a positive m-vector");
    const Vec s = lambda->cwiseSqrt();
    tm.cov = s.asDiagonal() * tm.cov * s.asDiagonal();
  }
  return tm;
}

double log_transition(const StateSpaceModel& model, int t, const Vec& x_t, const Vec& x_prev,
                      const std::optional<Vec>& y_prev, const std::optional<Vec>& lambda) {
  const TransitionMoments tm = transition_moments(model, t, x_prev, y_prev, lambda);
  return log_mvn(x_t, tm.mean, tm.cov);
}

// ---------------------------------------------------------------------------
// Registry

std::vector<std::string> parameter_names(const std::string& id) {
  if (id == "univariate-sv") return UnivariateSvParams::names(false);
  if (id == "univariate-sv-tstate") return UnivariateSvParams::names(true);
  if (id == "bivariate-sv") return BivariateSvParams::names();
  if (id == "linear-gaussian") return {"phi", "sigma2_eta", "sigma2_eps"};
  throw ContractError("unknown model id '" + id + "'");
}

std::vector<double> default_parameters(const std::string& id) {
  if (id == "univariate-sv") return UnivariateSvParams{}.to_vector();
  if (id == "univariate-sv-tstate") {
    UnivariateSvParams p;
    p.nu_state = 10.0;
    return p.to_vector();
  }
  if (id == "bivariate-sv") return BivariateSvParams{}.to_vector();
  if (id == "linear-gaussian") return {0.9, 0.5, 1.0};
  throw ContractError("unknown model id '" + id + "'");
}

std::unique_ptr<StateSpaceModel> make_model(const std::string& id, const std::vector<double>& theta) {
  const std::vector<double> v = theta.empty() ? default_parameters(id) : theta;
  if (v.size() != parameter_names(id).size())
    throw ParameterDomainError("model '" + id + "' expects " + std::to_string(parameter_names(id).size()) +
                               " parameters");
  if (id == "univariate-sv" || id == "univariate-sv-tstate")
    return std::make_unique<UnivariateSvModel>(UnivariateSvParams::from_vector(v));
  if (id == "bivariate-sv") return std::make_unique<BivariateSvModel>(BivariateSvParams::from_vector(v));
  return std::make_unique<LinearGaussianModel>(v[0], v[1], v[2]);
}

}  // namespace peis
