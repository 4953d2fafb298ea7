#include "peis/harness.hpp"

#include "parallel.hpp"
#include "peis/errors.hpp"
#include "peis/particle_eis.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

namespace peis {
namespace {

const std::vector<std::string> kMethods{"bf", "apf0", "sisr2", "eis", "peis", "eis-full", "peis-full"};

bool wants_full(const std::string& id) { return id == "eis-full" || id == "peis-full"; }

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  return v.size() % 2 == 1 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

// Runs method `id` against an already fitted sampler (EIS methods) or from
// scratch (particle filters).
LikEstimate run_method(const std::string& id, int particles, const StateSpaceModel& model, const Observations& y,
                       const LikelihoodSettings& s, const EisFit* fit, std::uint64_t seed) {
  const ResamplePolicy policy{s.filter_threshold};
  if (id == "bf") return bootstrap_loglik(model, y, particles, policy, seed);
  if (id == "apf0") return apf0_loglik(model, y, particles, policy, seed);
  if (id == "sisr2") return sisr2_loglik(model, y, particles, policy, seed);
  if (fit == nullptr) throw ContractError("method '" + id + "' needs an EIS fit");
  const EisParams& params = wants_full(id) ? fit->best() : fit->partial;
  if (id == "eis" || id == "eis-full") return eis_loglik(model, y, params, particles, s.antithetic, seed);
  if (id == "peis" || id == "peis-full") {
    PeisConfig cfg;
    cfg.particles = particles;
    cfg.threshold = s.peis_threshold;
    cfg.antithetic = s.antithetic;
    return peis_loglik(model, y, params, cfg, seed);
  }
  throw ContractError("unknown method '" + id + "'");
}

EisFit timed_fit(const StateSpaceModel& model, const Observations& y, EisConfig cfg, bool full, std::uint64_t seed,
                 double& seconds) {
  if (full && model.state_noise() == StateNoise::student_t) cfg.mode = EisMode::full;
  const auto start = std::chrono::steady_clock::now();
  EisFit fit = fit_eis_detailed(model, y, cfg, seed);
  seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return fit;
}

}  // namespace

bool is_known_method(const std::string& id) { return std::find(kMethods.begin(), kMethods.end(), id) != kMethods.end(); }

bool method_uses_eis(const std::string& id) {
  if (!is_known_method(id)) throw ContractError("unknown method '" + id + "'");
  return id != "bf" && id != "apf0" && id != "sisr2";
}

LikEstimate evaluate_method(const std::string& id, int particles, const StateSpaceModel& model,
                            const Observations& y, const LikelihoodSettings& settings, std::uint64_t seed,
                            double* fit_seconds) {
  double fs = 0.0;
  LikEstimate est;
  if (method_uses_eis(id)) {
    const EisFit fit = timed_fit(model, y, settings.eis, wants_full(id), derive_seed(seed, {0}), fs);
    est = run_method(id, particles, model, y, settings, &fit, derive_seed(seed, {1}));
  } else {
    est = run_method(id, particles, model, y, settings, nullptr, derive_seed(seed, {1}));
  }
  if (fit_seconds != nullptr) *fit_seconds = fs;
  return est;
}

// ---------------------------------------------------------------------------
// Variance study

void ExperimentConfig::validate() const {
  parameter_names(model);
  if (n < 1) throw ContractError("experiment needs n >= 1");
  if (trajectories < 1) throw ContractError("experiment needs at least one trajectory");
  if (evals < 2) throw ContractError("experiment needs at least two evaluations per trajectory");
  if (methods.empty()) throw ContractError("experiment has no methods");
  bool has_benchmark = false;
  for (const auto& m : methods) {
    if (!is_known_method(m.id)) throw ContractError("unknown method '" + m.id + "'");
    if (m.particles < 1) throw ContractError("method '" + m.id + "' needs at least one particle");
    has_benchmark = has_benchmark || m.id == benchmark;
  }
  if (!has_benchmark) throw ContractError("benchmark '" + benchmark + "' is not among the methods");
  if (threads < 1) throw ContractError("experiment needs threads >= 1");
}

const MethodSummary& VarianceStudyResult::method(const std::string& id) const {
  for (const auto& m : methods)
    if (m.method == id) return m;
  throw ContractError("no method '" + id + "' in the study result");
}

double study_variance(const std::vector<std::vector<double>>& estimates) {
  if (estimates.empty()) throw ContractError("study_variance: no trajectories");
  double total = 0.0;
  int rows = 0;
  for (const auto& row : estimates) {
    double mean = 0.0;
    int k = 0;
    for (double v : row)
      if (!std::isnan(v)) {
        mean += v;
        ++k;
      }
    if (k < 2) continue;
    mean /= k;
    double ss = 0.0;
    for (double v : row)
      if (!std::isnan(v)) ss += (v - mean) * (v - mean);
    total += ss / (k - 1);
    ++rows;
  }
  if (rows == 0) throw ContractError("study_variance: no trajectory has two valid estimates");
  return total / rows;
}

Efficiency efficiency(double var_h, double var_b, double tau1_h, double tau2_h, double tau1_b, double tau2_b,
                      int particles) {
  if (!(var_b > 0.0) || !(tau2_h > 0.0) || !(tau2_b > 0.0) || particles < 1)
    throw ParameterDomainError("efficiency needs var_b > 0, tau2 > 0 and N >= 1");
  const double ratio = var_h / var_b;
  const double n = particles;
  Efficiency e;
  e.at_n = ratio / (1.0 + (tau1_b + n * tau2_b - tau1_h - n * tau2_h) / (n * tau2_h));
  e.asymptotic = ratio * (tau2_h / tau2_b);
  return e;
}

VarianceStudyResult variance_study(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto model = make_model(cfg.model, cfg.theta);
  const int r_count = cfg.trajectories;
  const int j_count = cfg.evals;
  const int k_count = static_cast<int>(cfg.methods.size());
  bool any_eis = false, any_full = false;
  for (const auto& m : cfg.methods) {
    any_eis = any_eis || method_uses_eis(m.id);
    any_full = any_full || wants_full(m.id);
  }

  std::vector<Trajectory> paths(r_count);
  detail::parallel_for(r_count, cfg.threads, [&](int r) {
    paths[r] = simulate_dgp(*model, cfg.n, derive_seed(cfg.seed, {0, static_cast<std::uint64_t>(r)}));
  });

  struct Cell {
    std::vector<double> loglik, eval_seconds;
    std::vector<int> resamples;
    std::vector<std::string> error;
    double fit_seconds = 0.0;
  };
  std::vector<Cell> cells(static_cast<std::size_t>(r_count) * j_count);
  detail::parallel_for(r_count * j_count, cfg.threads, [&](int idx) {
    const int r = idx / j_count;
    const int j = idx % j_count;
    const auto ur = static_cast<std::uint64_t>(r);
    const auto uj = static_cast<std::uint64_t>(j);
    Cell& cell = cells[idx];
    cell.loglik.assign(k_count, NAN);
    cell.eval_seconds.assign(k_count, NAN);
    cell.resamples.assign(k_count, 0);
    cell.error.assign(k_count, "");
    const Observations& y = paths[r].y;
    // One fit per cell, shared by every EIS-based method.
    std::optional<EisFit> fit;
    std::string fit_error;
    if (any_eis) {
      try {
        fit = timed_fit(*model, y, cfg.settings.eis, any_full, derive_seed(cfg.seed, {1, ur, uj}), cell.fit_seconds);
      } catch (const Error& e) {
        fit_error = e.what();
      }
    }
    for (int k = 0; k < k_count; ++k) {
      const MethodSpec& m = cfg.methods[k];
      if (method_uses_eis(m.id) && !fit) {
        cell.error[k] = fit_error;
        continue;
      }
      try {
        const LikEstimate est = run_method(m.id, m.particles, *model, y, cfg.settings, fit ? &*fit : nullptr,
                                           derive_seed(cfg.seed, {2, ur, uj, static_cast<std::uint64_t>(k)}));
        cell.loglik[k] = est.log_likelihood;
        cell.eval_seconds[k] = est.seconds;
        cell.resamples[k] = est.resample_count;
      } catch (const Error& e) {
        cell.error[k] = e.what();
      }
    }
  });

  VarianceStudyResult out;
  out.benchmark = cfg.benchmark;
  std::vector<double> fit_times;
  for (const auto& c : cells) fit_times.push_back(c.fit_seconds);
  const double tau1_eis = any_eis ? median(fit_times) : 0.0;
  for (int k = 0; k < k_count; ++k) {
    MethodSummary s;
    s.method = cfg.methods[k].id;
    s.particles = cfg.methods[k].particles;
    s.estimates.assign(r_count, std::vector<double>(j_count, NAN));
    std::vector<double> times;
    double resamples = 0.0;
    std::string first_error;
    int first_r = -1, first_j = -1;
    for (int r = 0; r < r_count; ++r)
      for (int j = 0; j < j_count; ++j) {
        const Cell& c = cells[static_cast<std::size_t>(r) * j_count + j];
        s.estimates[r][j] = c.loglik[k];
        if (std::isnan(c.loglik[k])) {
          if (s.failures++ == 0) {
            first_error = c.error[k];
            first_r = r;
            first_j = j;
          }
          continue;
        }
        times.push_back(c.eval_seconds[k]);
        resamples += c.resamples[k];
      }
    const int total = r_count * j_count;
    if (s.failures > 0.01 * total)
      throw StudyIntegrityError("method '" + s.method + "' failed in " + std::to_string(s.failures) + " of " +
                                std::to_string(total) + " cells; first at trajectory " + std::to_string(first_r) +
                                ", evaluation " + std::to_string(first_j) + ": " + first_error);
    s.variance = study_variance(s.estimates);
    s.tau1 = method_uses_eis(s.method) ? tau1_eis : 0.0;
    s.n_tau2 = median(times);
    s.mean_resamples = times.empty() ? 0.0 : resamples / static_cast<double>(times.size());
    out.methods.push_back(std::move(s));
  }
  const MethodSummary& b = out.method(cfg.benchmark);
  const double var_b = b.variance, tau1_b = b.tau1, tau2_b = b.n_tau2 / b.particles;
  for (auto& s : out.methods) {
    s.variance_ratio = var_b > 0.0 ? s.variance / var_b : NAN;
    const double tau2_h = s.n_tau2 / s.particles;
    if (var_b > 0.0 && tau2_h > 0.0 && tau2_b > 0.0) {
      const Efficiency e = efficiency(s.variance, var_b, s.tau1, tau2_h, tau1_b, tau2_b, s.particles);
      s.efficiency_n = e.at_n;
      s.efficiency_inf = e.asymptotic;
    } else {
      s.efficiency_n = s.efficiency_inf = NAN;
    }
  }
  return out;
}

TimingModel fit_timing_model(const std::vector<double>& particles, const std::vector<double>& seconds) {
  const std::size_t n = particles.size();
  if (n != seconds.size() || n < 2) throw ContractError("fit_timing_model needs matching inputs of size >= 2");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += particles[i];
    my += seconds[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (particles[i] - mx) * (particles[i] - mx);
    sxy += (particles[i] - mx) * (seconds[i] - my);
    syy += (seconds[i] - my) * (seconds[i] - my);
  }
  if (!(sxx > 0.0)) throw ContractError("fit_timing_model needs at least two distinct particle counts");
  TimingModel t;
  t.tau2 = sxy / sxx;
  t.tau1 = my - t.tau2 * mx;
  t.r_squared = syy > 0.0 ? sxy * sxy / (sxx * syy) : 1.0;
  return t;
}

// ---------------------------------------------------------------------------
// Data files

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

ReturnSeries load_returns_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'", 0);
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) {
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
      while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
      cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file", 1);
  const std::vector<std::string> header = split(line);
  if (header.size() < 2) throw ParseError("header needs a date column and at least one series", 1);
  ReturnSeries out;
  out.names.assign(header.begin() + 1, header.end());
  const std::size_t k = out.names.size();
  static const std::regex iso(R"(\d{4}-\d{2}-\d{2}([T ][0-9:.]+Z?)?)");
  std::vector<double> values;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> cells = split(line);
    if (cells.size() != k + 1)
      throw ParseError("expected " + std::to_string(k + 1) + " cells, found " + std::to_string(cells.size()), line_no);
    if (!std::regex_match(cells[0], iso)) throw ParseError("'" + cells[0] + "' is not an ISO-8601 date", line_no);
    out.dates.push_back(cells[0]);
    for (std::size_t j = 1; j <= k; ++j) {
      const std::string& c = cells[j];
      double v = 0.0;
      const auto res = std::from_chars(c.data(), c.data() + c.size(), v);
      if (c.empty() || res.ec != std::errc() || res.ptr != c.data() + c.size() || !std::isfinite(v))
        throw ParseError("missing or non-numeric value in column '" + out.names[j - 1] + "'", line_no);
      values.push_back(v);
    }
  }
  const auto n = static_cast<Eigen::Index>(out.dates.size());
  out.values.resize(n, static_cast<Eigen::Index>(k));
  for (Eigen::Index i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out.values(i, static_cast<Eigen::Index>(j)) = values[i * k + j];
  return out;
}

void write_returns_csv(const std::filesystem::path& path, const ReturnSeries& series) {
  if (static_cast<Eigen::Index>(series.dates.size()) != series.values.rows() ||
      static_cast<Eigen::Index>(series.names.size()) != series.values.cols())
    throw ContractError("write_returns_csv: dimension mismatch");
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write '" + path.string() + "'");
  out << "date";
  for (const auto& n : series.names) out << ',' << n;
  out << '\n';
  for (Eigen::Index i = 0; i < series.values.rows(); ++i) {
    out << series.dates[i];
    for (Eigen::Index j = 0; j < series.values.cols(); ++j) out << ',' << format_double(series.values(i, j));
    out << '\n';
  }
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace peis
