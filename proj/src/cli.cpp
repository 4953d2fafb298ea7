// The `peis` command line tool. Every subcommand resolves its settings from
// built-in defaults, then an optional JSON config file, then explicit flags,
// and records the resolved settings in a manifest next to its outputs.

#include "peis/bayes.hpp"
#include "peis/errors.hpp"
#include "peis/harness.hpp"
#include "peis/particle_eis.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <variant>

namespace peis {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kVersion = "1.0.0";

// A flag bound to a config key.
struct Binding {
  std::variant<int*, double*, std::string*, std::uint64_t*, std::vector<double>*, bool*> target;
  CLI::Option* option = nullptr;
};

class Command {
 public:
  Command(CLI::App& app, const std::string& name, const std::string& about) : sub_(app.add_subcommand(name, about)) {
    sub_->add_option("--config", config_path_, "JSON config file (a manifest also works)");
    sub_->add_option("--out", out_dir_, "output directory");
  }

  template <typename T>
  void flag(const std::string& key, T default_value, const std::string& help) {
    auto holder = std::make_shared<T>(default_value);
    holders_.push_back(holder);
    defaults_[key] = default_value;
    Binding b{holder.get(), nullptr};
    if constexpr (std::is_same_v<T, bool>)
      b.option = sub_->add_flag("--" + key, *holder, help);
    else
      b.option = sub_->add_option("--" + key, *holder, help);
    bindings_[key] = b;
  }

  CLI::App* app() const { return sub_; }
  std::string name() const { return sub_->get_name(); }
  fs::path out_dir() const { return out_dir_; }

  /// Defaults < config file < explicit flags.
  json resolve() const {
    json cfg = defaults_;
    if (!config_path_.empty()) {
      std::ifstream in(config_path_);
      if (!in) throw UsageError("cannot read config '" + config_path_ + "'");
      json file;
      try {
        file = json::parse(in);
      } catch (const json::exception& e) {
        throw UsageError("config '" + config_path_ + "' is not valid JSON: " + e.what());
      }
      if (file.is_object() && file.contains("config") && file.contains("config_hash")) file = file["config"];
      if (!file.is_object()) throw UsageError("config must be a JSON object");
      for (auto& [key, value] : file.items()) {
        if (!defaults_.contains(key)) throw UsageError("unknown config key '" + key + "' for " + name());
        if (value.type() != defaults_[key].type() &&
            !(value.is_number() && defaults_[key].is_number()))
          throw UsageError("config key '" + key + "' has the wrong type");
        cfg[key] = value;
      }
    }
    for (const auto& [key, b] : bindings_) {
      if (b.option->count() == 0) continue;
      std::visit([&](auto* p) { cfg[key] = *p; }, b.target);
    }
    return cfg;
  }

 private:
  CLI::App* sub_;
  std::string config_path_;
  std::string out_dir_ = "out";
  json defaults_ = json::object();
  std::map<std::string, Binding> bindings_;
  std::vector<std::shared_ptr<void>> holders_;
};

template <typename T>
T get(const json& cfg, const std::string& key) {
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("config key '" + key + "' is missing or has the wrong type");
  }
}

struct Output {
  fs::path dir;
  std::vector<std::string> files;

  fs::path file(const std::string& name) {
    files.push_back(name);
    return dir / name;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot write '" + path.string() + "'");
  out << text;
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return fnv1a_hex(ss.str());
}

void write_manifest(const std::string& command, const json& cfg, const Output& out) {
  json m;
  m["command"] = command;
  m["config"] = cfg;
  m["config_hash"] = fnv1a_hex(cfg.dump());
  m["seed"] = cfg.contains("seed") ? cfg["seed"] : json(nullptr);
  m["version"] = kVersion;
  m["compiler"] = __VERSION__;
  m["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  if (cfg.contains("data") && !cfg["data"].get<std::string>().empty())
    m["data_hash"] = file_hash(cfg["data"].get<std::string>());
  m["outputs"] = out.files;
  write_text(out.dir / (command + "_manifest.json"), m.dump(2) + "\n");
}

// json numbers through the shortest round-trip formatter.
json num(double v) { return std::isfinite(v) ? json(v) : json(format_double(v)); }

// Observations: the CSV file when given, otherwise a DGP path.
Observations observations(const json& cfg, const std::string& model_id) {
  const std::string data = get<std::string>(cfg, "data");
  if (!data.empty()) return load_returns_csv(data).values;
  const auto model = make_model(model_id, get<std::vector<double>>(cfg, "theta"));
  return simulate_dgp(*model, get<int>(cfg, "n"), derive_seed(get<std::uint64_t>(cfg, "seed"), {0})).y;
}

LikelihoodSettings settings_from(const json& cfg) {
  LikelihoodSettings s;
  s.eis.samples = get<int>(cfg, "eis-samples");
  s.antithetic = !get<bool>(cfg, "no-antithetic");
  return s;
}

std::vector<MethodSpec> parse_methods(const std::string& text) {
  std::vector<MethodSpec> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    MethodSpec m;
    m.id = item.substr(0, colon);
    if (colon != std::string::npos) {
      try {
        m.particles = std::stoi(item.substr(colon + 1));
      } catch (const std::exception&) {
        throw UsageError("bad particle count in '" + item + "'");
      }
    }
    if (!is_known_method(m.id)) throw UsageError("unknown method '" + m.id + "'");
    out.push_back(m);
  }
  if (out.empty()) throw UsageError("no methods given");
  return out;
}

std::string iso_date(int day) {
  using namespace std::chrono;
  const year_month_day ymd{sys_days{year{2000} / January / 1} + days{day}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

json proposal_json(const MvtProposal& q, const std::vector<std::string>& names) {
  json j;
  j["names"] = names;
  j["dof"] = q.dof;
  j["location"] = std::vector<double>(q.location.data(), q.location.data() + q.location.size());
  std::vector<std::vector<double>> s;
  for (int i = 0; i < q.dim(); ++i) {
    std::vector<double> row;
    for (int k = 0; k < q.dim(); ++k) row.push_back(q.scale(i, k));
    s.push_back(row);
  }
  j["scale"] = s;
  return j;
}

MvtProposal proposal_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read proposal '" + path + "'");
  try {
    const json j = json::parse(in);
    MvtProposal q;
    q.dof = j.at("dof").get<double>();
    const auto loc = j.at("location").get<std::vector<double>>();
    q.location = Eigen::Map<const Eigen::VectorXd>(loc.data(), static_cast<Eigen::Index>(loc.size()));
    const auto s = j.at("scale").get<std::vector<std::vector<double>>>();
    q.scale.resize(q.dim(), q.dim());
    for (int i = 0; i < q.dim(); ++i)
      for (int k = 0; k < q.dim(); ++k) q.scale(i, k) = s.at(i).at(k);
    q.validate();
    return q;
  } catch (const json::exception& e) {
    throw UsageError("proposal '" + path + "' is malformed: " + e.what());
  }
}

std::string matrix_csv(const std::vector<std::string>& header, const Eigen::MatrixXd& m) {
  std::ostringstream os;
  for (std::size_t j = 0; j < header.size(); ++j) os << (j ? "," : "") << header[j];
  os << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << format_double(m(i, j));
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands

json cmd_simulate(const json& cfg, Output& out) {
  const std::string id = get<std::string>(cfg, "model");
  const auto model = make_model(id, get<std::vector<double>>(cfg, "theta"));
  const Trajectory tr = simulate_dgp(*model, get<int>(cfg, "n"), get<std::uint64_t>(cfg, "seed"));
  ReturnSeries series;
  series.values = tr.y;
  for (int j = 0; j < tr.y.cols(); ++j) series.names.push_back("y" + std::to_string(j + 1));
  for (int i = 0; i < tr.y.rows(); ++i) series.dates.push_back(iso_date(i));
  write_returns_csv(out.file("returns.csv"), series);
  std::vector<std::string> header;
  for (int j = 0; j < tr.x.cols(); ++j) header.push_back("x" + std::to_string(j + 1));
  write_text(out.file("states.csv"), matrix_csv(header, tr.x));
  return {{"n", tr.y.rows()}, {"series", tr.y.cols()}};
}

json cmd_loglik(const json& cfg, Output& out) {
  const std::string id = get<std::string>(cfg, "model");
  const auto model = make_model(id, get<std::vector<double>>(cfg, "theta"));
  const Observations y = observations(cfg, id);
  double fit_seconds = 0.0;
  const LikEstimate est = evaluate_method(get<std::string>(cfg, "method"), get<int>(cfg, "particles"), *model, y,
                                          settings_from(cfg), derive_seed(get<std::uint64_t>(cfg, "seed"), {1}),
                                          &fit_seconds);
  json res;
  res["log_likelihood"] = num(est.log_likelihood);
  res["resample_count"] = est.resample_count;
  res["n"] = y.rows();
  write_text(out.file("loglik.json"), res.dump(2) + "\n");
  std::ostringstream os;
  os << "t,increment,ess\n";
  for (std::size_t t = 0; t < est.increments.size(); ++t)
    os << t << ',' << format_double(est.increments[t]) << ',' << format_double(est.ess[t]) << '\n';
  write_text(out.file("increments.csv"), os.str());
  res["fit_seconds"] = fit_seconds;
  res["eval_seconds"] = est.seconds;
  return res;
}

json cmd_variance_study(const json& cfg, Output& out) {
  ExperimentConfig ec;
  ec.model = get<std::string>(cfg, "model");
  ec.theta = get<std::vector<double>>(cfg, "theta");
  ec.n = get<int>(cfg, "n");
  ec.trajectories = get<int>(cfg, "trajectories");
  ec.evals = get<int>(cfg, "evals");
  ec.methods = parse_methods(get<std::string>(cfg, "methods"));
  ec.benchmark = get<std::string>(cfg, "benchmark");
  ec.settings = settings_from(cfg);
  ec.seed = get<std::uint64_t>(cfg, "seed");
  ec.threads = get<int>(cfg, "threads");
  try {
    ec.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  const VarianceStudyResult r = variance_study(ec);
  std::ostringstream res, est, timing;
  res << "method,particles,variance,variance_ratio,failures,mean_resamples\n";
  timing << "method,particles,tau1,n_tau2,efficiency_n,efficiency_inf\n";
  est << "method,trajectory,evaluation,log_likelihood\n";
  json summary = json::array();
  for (const auto& m : r.methods) {
    res << m.method << ',' << m.particles << ',' << format_double(m.variance) << ','
        << format_double(m.variance_ratio) << ',' << m.failures << ',' << format_double(m.mean_resamples) << '\n';
    timing << m.method << ',' << m.particles << ',' << format_double(m.tau1) << ',' << format_double(m.n_tau2)
           << ',' << format_double(m.efficiency_n) << ',' << format_double(m.efficiency_inf) << '\n';
    for (std::size_t i = 0; i < m.estimates.size(); ++i)
      for (std::size_t j = 0; j < m.estimates[i].size(); ++j)
        est << m.method << ',' << i << ',' << j << ',' << format_double(m.estimates[i][j]) << '\n';
    summary.push_back({{"method", m.method},
                       {"particles", m.particles},
                       {"variance", num(m.variance)},
                       {"variance_ratio", num(m.variance_ratio)},
                       {"efficiency_n", num(m.efficiency_n)},
                       {"efficiency_inf", num(m.efficiency_inf)}});
  }
  write_text(out.file("variance_study.csv"), res.str());
  write_text(out.file("estimates.csv"), est.str());
  // Timings are not reproducible and live apart from the results.
  write_text(out.dir / "timing.csv", timing.str());
  return {{"methods", summary}};
}

json cmd_optimal_n(const json& cfg, Output& out) {
  const double n = optimal_particles(get<double>(cfg, "var-unit"), get<double>(cfg, "tau1"), get<double>(cfg, "tau2"));
  const json res{{"optimal_particles", n}};
  write_text(out.file("optimal_n.json"), res.dump(2) + "\n");
  return res;
}

Posterior posterior_from(const json& cfg, const std::string& method_key, const std::string& particles_key) {
  const std::string id = get<std::string>(cfg, "model");
  const Observations y = observations(cfg, id);
  return Posterior(default_prior(id), make_loglik(id, y, get<std::string>(cfg, method_key),
                                                  get<int>(cfg, particles_key), settings_from(cfg)));
}

json cmd_fit_proposal(const json& cfg, Output& out) {
  const Posterior post = posterior_from(cfg, "method", "particles");
  TrainingConfig tc;
  tc.draws = get<int>(cfg, "draws");
  tc.max_rounds = get<int>(cfg, "rounds");
  tc.seed = derive_seed(get<std::uint64_t>(cfg, "seed"), {2});
  const TrainingResult tr = train_proposal(post, tc);
  json j = proposal_json(tr.proposal, post.prior.names);
  j["rounds"] = tr.rounds;
  j["exponents"] = tr.exponents;
  j["converged"] = tr.converged;
  write_text(out.file("proposal.json"), j.dump(2) + "\n");
  return {{"rounds", tr.rounds}, {"converged", tr.converged}, {"failures", tr.failures}};
}

MvtProposal proposal_for(const json& cfg, const Posterior& post) {
  const std::string path = get<std::string>(cfg, "proposal");
  if (!path.empty()) return proposal_from_file(path);
  TrainingConfig tc;
  tc.seed = derive_seed(get<std::uint64_t>(cfg, "seed"), {2});
  return train_proposal(post, tc).proposal;
}

json cmd_is2(const json& cfg, Output& out) {
  const Posterior post = posterior_from(cfg, "method", "particles");
  const MvtProposal q = proposal_for(cfg, post);
  Is2Config ic;
  ic.draws = get<int>(cfg, "draws");
  ic.bootstrap = get<int>(cfg, "bootstrap");
  ic.seed = derive_seed(get<std::uint64_t>(cfg, "seed"), {3});
  ic.threads = get<int>(cfg, "threads");
  const Is2Result r = is2_run(post, q, ic);
  std::ostringstream os;
  os << "parameter,mean,sd,skewness,kurtosis,lower90,upper90,se_mean,se_sd,se_skewness,se_kurtosis,se_lower90,"
        "se_upper90\n";
  for (std::size_t j = 0; j < r.summary.size(); ++j) {
    const auto& s = r.summary[j];
    const auto& e = r.std_errors[j];
    os << r.names[j];
    for (double v : {s.mean, s.sd, s.skewness, s.kurtosis, s.lower90, s.upper90, e.mean, e.sd, e.skewness, e.kurtosis,
                     e.lower90, e.upper90})
      os << ',' << format_double(v);
    os << '\n';
  }
  write_text(out.file("is2_summary.csv"), os.str());
  std::vector<std::string> header = r.names;
  header.push_back("log_weight");
  Eigen::MatrixXd m(r.draws.rows(), r.draws.cols() + 1);
  m << r.draws, Eigen::Map<const Eigen::VectorXd>(r.log_weights.data(), r.draws.rows());
  write_text(out.file("is2_draws.csv"), matrix_csv(header, m));
  const json res{{"log_marginal_likelihood", num(r.log_marginal_likelihood)},
                 {"log_marginal_likelihood_se", num(r.log_marginal_likelihood_se)},
                 {"ess", num(r.ess)},
                 {"failures", r.failures}};
  write_text(out.file("is2.json"), res.dump(2) + "\n");
  return res;
}

json cmd_pmmh(const json& cfg, Output& out) {
  const Posterior post = posterior_from(cfg, "method", "particles");
  PmmhConfig pc;
  pc.iters = get<int>(cfg, "iters");
  pc.burn_in = get<int>(cfg, "burn-in");
  pc.seed = derive_seed(get<std::uint64_t>(cfg, "seed"), {4});
  const std::string sampler = get<std::string>(cfg, "sampler");
  ChainResult r;
  if (sampler == "arw") {
    std::vector<double> init = get<std::vector<double>>(cfg, "init");
    if (init.empty()) init = default_parameters(get<std::string>(cfg, "model"));
    r = pmmh_arw(post, init, pc);
  } else if (sampler == "imh") {
    r = pmmh_imh(post, proposal_for(cfg, post), pc);
  } else {
    throw UsageError("sampler must be 'arw' or 'imh'");
  }
  std::vector<std::string> header = r.names;
  header.push_back("log_target");
  Eigen::MatrixXd m(r.chain.rows(), r.chain.cols() + 1);
  m << r.chain, Eigen::Map<const Eigen::VectorXd>(r.log_target.data(), r.chain.rows());
  write_text(out.file("chain.csv"), matrix_csv(header, m));
  std::ostringstream os;
  os << "parameter,mean,mean_se,inefficiency\n";
  for (std::size_t j = 0; j < r.names.size(); ++j)
    os << r.names[j] << ',' << format_double(r.mean[j]) << ',' << format_double(r.mean_se[j]) << ','
       << format_double(r.inefficiency[j]) << '\n';
  write_text(out.file("pmmh_summary.csv"), os.str());
  const json res{{"acceptance", r.acceptance}, {"failures", r.failures}};
  write_text(out.file("pmmh.json"), res.dump(2) + "\n");
  return {{"acceptance", r.acceptance}, {"failures", r.failures}, {"seconds", r.seconds}};
}

// Quick headless property checks; one line per property.
json cmd_check(const json& cfg, Output& out) {
  const std::uint64_t seed = get<std::uint64_t>(cfg, "seed");
  const int threads = std::max(2, get<int>(cfg, "threads"));
  std::vector<std::pair<std::string, bool>> results;
  auto record = [&](const std::string& name, bool ok, const std::string& detail) {
    results.emplace_back(name, ok);
    std::cout << (ok ? "PASS " : "FAIL ") << name << "  " << detail << '\n';
  };

  const LinearGaussianModel lg(0.9, 0.5, 1.0);
  {
    const Trajectory tr = simulate_dgp(lg, 200, derive_seed(seed, {1}));
    const double exact = kalman_loglik(lg, tr.y);
    const EisParams p = fit_eis(lg, tr.y, EisConfig{}, derive_seed(seed, {2}));
    const double e = eis_loglik(lg, tr.y, p, 50, true, derive_seed(seed, {3})).log_likelihood;
    const double pe = peis_loglik(lg, tr.y, p, PeisConfig{}, derive_seed(seed, {3})).log_likelihood;
    const double dev = std::max(std::abs(e - exact), std::abs(pe - exact));
    record("exactness on the linear Gaussian model", dev < 1e-6, "max |delta| " + format_double(dev));
  }
  {
    const Trajectory tr = simulate_dgp(lg, 50, derive_seed(seed, {4}));
    const double exact = kalman_loglik(lg, tr.y);
    for (const std::string m : {"bf", "apf0", "sisr2"}) {
      const UnbiasednessResult u = unbiasedness_harness(
          [&](std::uint64_t s) { return evaluate_method(m, 16, lg, tr.y, {}, s).log_likelihood; }, exact, 4000,
          derive_seed(seed, {5}));
      record("unbiasedness " + m, std::abs(u.z) < 3.0, "z " + format_double(u.z));
    }
    const EisParams p = fit_eis(lg, tr.y, EisConfig{}, derive_seed(seed, {6}));
    EisParams half = p;
    for (auto& b : half.b) b *= 0.5;
    for (auto& c : half.c) c *= 0.5;
    PeisConfig pc;
    pc.particles = 4;
    pc.threshold = 1.0;
    const UnbiasednessResult u = unbiasedness_harness(
        [&](std::uint64_t s) { return peis_loglik(lg, tr.y, half, pc, s).log_likelihood; }, exact, 4000,
        derive_seed(seed, {7}));
    record("unbiasedness peis with forced resampling", std::abs(u.z) < 3.0, "z " + format_double(u.z));
  }
  {
    ExperimentConfig ec;
    ec.model = "univariate-sv";
    ec.n = 100;
    ec.trajectories = 3;
    ec.evals = 4;
    ec.methods = {{"bf", 20}, {"eis", 10}, {"peis", 10}};
    ec.seed = seed;
    ec.threads = 1;
    const VarianceStudyResult a = variance_study(ec);
    ec.threads = threads;
    const VarianceStudyResult b = variance_study(ec);
    bool same = true;
    for (std::size_t k = 0; k < a.methods.size(); ++k) same = same && a.methods[k].estimates == b.methods[k].estimates;
    record("variance study identical across thread counts", same, "1 vs " + std::to_string(threads) + " threads");
  }
  {
    const Trajectory tr = simulate_dgp(lg, 30, derive_seed(seed, {8}));
    const Posterior post(default_prior("linear-gaussian"), make_loglik("linear-gaussian", tr.y, "peis", 8, {}));
    MvtProposal q;
    q.location = to_unconstrained(post.transforms, std::vector<double>{0.9, 0.5, 1.0});
    q.scale = 0.05 * Eigen::MatrixXd::Identity(3, 3);
    Is2Config ic;
    ic.draws = 40;
    ic.bootstrap = 100;
    ic.seed = seed;
    ic.threads = 1;
    const Is2Result a = is2_run(post, q, ic);
    ic.threads = threads;
    const Is2Result b = is2_run(post, q, ic);
    record("IS2 identical across thread counts", a.log_weights == b.log_weights && a.draws == b.draws,
           "1 vs " + std::to_string(threads) + " threads");
  }
  {
    bool ok = true;
    const PriorSpec prior = default_prior("univariate-sv");
    const auto tr = transforms_for(prior);
    Rng rng(seed);
    for (int k = 0; k < 1000 && ok; ++k) {
      std::vector<double> theta;
      for (const auto& m : prior.marginals) theta.push_back(m.sample(rng));
      const std::vector<double> back = to_constrained(tr, to_unconstrained(tr, theta));
      for (std::size_t i = 0; i < theta.size(); ++i)
        ok = ok && std::abs(back[i] - theta[i]) <= 1e-12 * std::max(1.0, std::abs(theta[i]));
    }
    record("transform round trip", ok, "1000 prior draws");
  }
  int failed = 0;
  json j = json::array();
  for (const auto& [name, ok] : results) {
    failed += ok ? 0 : 1;
    j.push_back({{"property", name}, {"pass", ok}});
  }
  write_text(out.file("check.json"), j.dump(2) + "\n");
  return {{"failed", failed}, {"total", results.size()}};
}

void error_record(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Likelihood estimation and Bayesian inference for state space models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  std::vector<std::unique_ptr<Command>> cmds;
  auto add = [&](const std::string& name, const std::string& about) {
    cmds.push_back(std::make_unique<Command>(app, name, about));
    return cmds.back().get();
  };
  auto model_flags = [](Command* c) {
    c->flag<std::string>("model", "bivariate-sv", "model id");
    c->flag<std::vector<double>>("theta", {}, "parameters in canonical order (default: simulation values)");
    c->flag<int>("n", 500, "number of periods to simulate");
    c->flag<std::uint64_t>("seed", 1, "root seed");
  };
  auto lik_flags = [](Command* c) {
    c->flag<std::string>("method", "peis", "bf | apf0 | sisr2 | eis | peis | eis-full | peis-full");
    c->flag<int>("particles", 50, "particles or importance samples");
    c->flag<int>("eis-samples", 50, "simulations per EIS iteration");
    c->flag<bool>("no-antithetic", false, "disable antithetic draws in EIS and P-EIS");
    c->flag<std::string>("data", "", "CSV of returns (header, date column); default simulates");
  };

  Command* simulate = add("simulate", "simulate a path from a model");
  model_flags(simulate);

  Command* loglik = add("loglik", "estimate the log likelihood once");
  model_flags(loglik);
  lik_flags(loglik);

  Command* vs = add("variance-study", "variance and efficiency of several estimators");
  model_flags(vs);
  vs->flag<int>("trajectories", 20, "simulated trajectories");
  vs->flag<int>("evals", 10, "evaluations per trajectory");
  vs->flag<std::string>("methods", "bf:50,eis:50,peis:50", "comma list of method:particles");
  vs->flag<std::string>("benchmark", "eis", "benchmark method");
  vs->flag<int>("eis-samples", 50, "simulations per EIS iteration");
  vs->flag<bool>("no-antithetic", false, "disable antithetic draws in EIS and P-EIS");
  vs->flag<int>("threads", 1, "worker threads");

  Command* opt = add("optimal-n", "optimal particle count from variance and timing");
  opt->flag<double>("var-unit", 1.0, "log-likelihood variance times the particle count");
  opt->flag<double>("tau1", 0.0, "fixed cost in seconds");
  opt->flag<double>("tau2", 1.0, "seconds per particle");

  Command* fp = add("fit-proposal", "train a multivariate t proposal for the posterior");
  model_flags(fp);
  lik_flags(fp);
  fp->flag<int>("draws", 500, "draws per training round");
  fp->flag<int>("rounds", 5, "refinement rounds at full weight");

  Command* is2 = add("is2", "importance sampling squared");
  model_flags(is2);
  lik_flags(is2);
  is2->flag<std::string>("proposal", "", "proposal JSON from fit-proposal (default: train one)");
  is2->flag<int>("draws", 2000, "parameter draws");
  is2->flag<int>("bootstrap", 1000, "bootstrap resamples for standard errors");
  is2->flag<int>("threads", 1, "worker threads");

  Command* pmmh = add("pmmh", "particle marginal Metropolis-Hastings");
  model_flags(pmmh);
  lik_flags(pmmh);
  pmmh->flag<std::string>("sampler", "arw", "arw | imh");
  pmmh->flag<std::string>("proposal", "", "proposal JSON for imh (default: train one)");
  pmmh->flag<std::vector<double>>("init", {}, "arw starting point (default: simulation values)");
  pmmh->flag<int>("iters", 20000, "iterations");
  pmmh->flag<int>("burn-in", 2000, "discarded iterations");

  Command* check = add("check", "run the headless property checks");
  check->flag<std::uint64_t>("seed", 1, "root seed");
  check->flag<int>("threads", 2, "threads for the determinism checks (at least 2)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_record("usage", e.what());
    return 2;
  }

  for (const auto& c : cmds) {
    if (!c->app()->parsed()) continue;
    try {
      const json cfg = c->resolve();
      Output out{c->out_dir(), {}};
      fs::create_directories(out.dir);
      json summary;
      const std::string n = c->name();
      if (n == "simulate") summary = cmd_simulate(cfg, out);
      else if (n == "loglik") summary = cmd_loglik(cfg, out);
      else if (n == "variance-study") summary = cmd_variance_study(cfg, out);
      else if (n == "optimal-n") summary = cmd_optimal_n(cfg, out);
      else if (n == "fit-proposal") summary = cmd_fit_proposal(cfg, out);
      else if (n == "is2") summary = cmd_is2(cfg, out);
      else if (n == "pmmh") summary = cmd_pmmh(cfg, out);
      else summary = cmd_check(cfg, out);
      write_manifest(n, cfg, out);
      std::cout << summary.dump() << '\n';
      if (n == "check" && summary["failed"].get<int>() > 0) return 1;
      return 0;
    } catch (const UsageError& e) {
      error_record(e.kind(), e.what());
      return 2;
    } catch (const ParseError& e) {
      error_record(e.kind(), e.what());
      return 2;
    } catch (const Error& e) {
      error_record(e.kind(), e.what());
      return 1;
    } catch (const std::exception& e) {
      error_record("internal", e.what());
      return 1;
    }
  }
  return 2;
}

}  // namespace peis
