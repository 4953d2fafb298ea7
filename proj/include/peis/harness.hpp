#pragma once

#include "peis/eis.hpp"
#include "peis/models.hpp"
#include "peis/smc.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace peis {

/// Exact prediction-error-decomposition log likelihood of a LinearGaussianModel.
double kalman_loglik(const StateSpaceModel& model, const Observations& y);

// ---------------------------------------------------------------------------
// Likelihood methods by id

/// "bf", "apf0", "sisr2", "eis", "peis", "eis-full", "peis-full".
bool is_known_method(const std::string& id);
bool method_uses_eis(const std::string& id);

struct MethodSpec {
  std::string id;
  int particles = 50;
};

struct LikelihoodSettings {
  EisConfig eis;
  double filter_threshold = 0.5;
  double peis_threshold = 0.9;
  bool antithetic = true;
};

/// One evaluation of method `id`: fits EIS first when needed. `fit_seconds`
/// receives the fit time (0 for particle filters).
LikEstimate evaluate_method(const std::string& id, int particles, const StateSpaceModel& model,
                            const Observations& y, const LikelihoodSettings& settings, std::uint64_t seed,
                            double* fit_seconds = nullptr);

// ---------------------------------------------------------------------------
// Variance and efficiency study

struct ExperimentConfig {
  std::string model = "bivariate-sv";
  std::vector<double> theta;  // empty: model defaults
  int n = 500;
  int trajectories = 20;
  int evals = 10;
  std::vector<MethodSpec> methods;
  std::string benchmark = "eis";
  LikelihoodSettings settings;
  std::uint64_t seed = 1;
  int threads = 1;

  void validate() const;
};

struct MethodSummary {
  std::string method;
  int particles = 0;
  double variance = 0.0;
  double variance_ratio = 0.0;
  double tau1 = 0.0;
  double n_tau2 = 0.0;
  double efficiency_n = 0.0;
  double efficiency_inf = 0.0;
  int failures = 0;
  double mean_resamples = 0.0;
  /// trajectories x evals log-likelihood estimates (NaN where the estimator failed).
  std::vector<std::vector<double>> estimates;
};

struct VarianceStudyResult {
  std::string benchmark;
  std::vector<MethodSummary> methods;

  const MethodSummary& method(const std::string& id) const;
};

/// Mean over trajectories of the per-trajectory sample variance (divisor
/// J - 1) of the log-likelihood estimates. NaN entries are skipped.
double study_variance(const std::vector<std::vector<double>>& estimates);

struct Efficiency {
  double at_n = 0.0;
  double asymptotic = 0.0;
};

/// Time-normalized variance of method h relative to benchmark b.
Efficiency efficiency(double var_h, double var_b, double tau1_h, double tau2_h, double tau1_b, double tau2_b,
                      int particles);

/// Runs every (trajectory, evaluation) cell with seeds derived from cfg.seed.
/// Within a cell all EIS-based methods share one fit. Throws
/// StudyIntegrityError when any method fails in more than 1% of its cells.
VarianceStudyResult variance_study(const ExperimentConfig& cfg);

struct TimingModel {
  double tau1 = 0.0;
  double tau2 = 0.0;
  double r_squared = 0.0;
};

/// Least squares fit of time = tau1 + N tau2.
TimingModel fit_timing_model(const std::vector<double>& particles, const std::vector<double>& seconds);

// ---------------------------------------------------------------------------
// Data files

struct ReturnSeries {
  std::vector<std::string> dates;
  std::vector<std::string> names;
  Observations values;  // n x k
};

ReturnSeries load_returns_csv(const std::filesystem::path& path);
void write_returns_csv(const std::filesystem::path& path, const ReturnSeries& series);

/// Shortest decimal representation that reads back to the same double.
std::string format_double(double v);

// ---------------------------------------------------------------------------
// Command line

/// Entry point of the `peis` tool. Returns the process exit code; usage
/// errors return 2 and print a JSON error record to stderr.
int run_cli(int argc, char** argv);

/// FNV-1a 64-bit hash as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

}  // namespace peis
