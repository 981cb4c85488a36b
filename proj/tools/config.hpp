#pragma once

// Experiment configuration: a YAML file with sections for simulation, model,
// kernel, run and diagnostics.  Unknown keys are rejected with their line.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "cphylo/chains.hpp"
#include "cphylo/diagnostics.hpp"
#include "cphylo/kernel.hpp"
#include "cphylo/sd_model.hpp"

namespace cphylo::cli {

class Config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Simulation_config {
  std::optional<std::string> tree;  // Newick truth; random when absent
  int n_leaves = 8;
  double root_age = 1000.0;
  double lambda = 0.1;
  double mu = 2.5e-4;
  double kappa = 0.0;
  int n_catastrophes = 0;  // placed on distinct leaf branches
  std::optional<double> xi_value;
  std::optional<std::pair<double, double>> xi_beta;
  std::uint64_t seed = 1;
};

struct Experiment_config {
  std::filesystem::path source;  // config file, for relative paths
  std::string hash;
  std::filesystem::path output_dir = "out";
  std::optional<std::filesystem::path> data_path;
  std::optional<Simulation_config> simulation;

  Sd_model model;  // data filled in later
  struct Clade_spec {
    std::vector<std::string> taxa;
    std::optional<double> lo;
    std::optional<double> hi;
    int line = 0;
  };
  std::vector<Clade_spec> clades;
  std::vector<std::pair<std::string, Interval>> leaf_ranges;
  double mu_start = 2.5e-4;
  double kappa_start = 0.1;

  Kernel_config kernel;
  Run_config run;
  bool write_samples = true;
  long marginal_iterations = 10000;
  int marginal_chains = 4;

  long diagnose_stride = 0;  // 0: thinning stride
  long asdsf_every = 10;
  Window_rule window = Window_rule::trailing_75;
  double min_split_freq = 0.1;
  int bootstrap = 0;
};

// FNV-1a over the raw config bytes, as 16 hex digits.
inline auto config_hash(const std::string& text) -> std::string {
  auto h = std::uint64_t{14695981039346656037ull};
  for (auto c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  auto out = std::ostringstream{};
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

namespace detail {

inline auto where(const YAML::Node& n) -> std::string {
  return "line " + std::to_string(n.Mark().line + 1);
}

inline auto fail(const YAML::Node& n, const std::string& what) -> Config_error {
  return Config_error{where(n) + ": " + what};
}

inline auto check_keys(const YAML::Node& map, const std::string& section, const std::set<std::string>& allowed)
    -> void {
  if (!map.IsMap()) { throw fail(map, "'" + section + "' must be a mapping"); }
  for (const auto& kv : map) {
    auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) { throw fail(kv.first, "unknown key '" + key + "' in '" + section + "'"); }
  }
}

template <typename T>
auto get(const YAML::Node& n, const std::string& what) -> T {
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw fail(n, "bad value for '" + what + "'");
  }
}

inline auto positive(const YAML::Node& n, const std::string& what) -> double {
  auto v = get<double>(n, what);
  if (!(v > 0.0)) { throw fail(n, "'" + what + "' must be positive"); }
  return v;
}

inline auto gamma_prior(const YAML::Node& n, const std::string& what) -> Gamma_prior {
  if (!n.IsSequence() || n.size() != 2) { throw fail(n, "'" + what + "' must be [shape, rate]"); }
  return {positive(n[0], what + " shape"), positive(n[1], what + " rate")};
}

inline auto interval(const YAML::Node& n, const std::string& what) -> Interval {
  if (!n.IsSequence() || n.size() != 2) { throw fail(n, "'" + what + "' must be [lo, hi]"); }
  auto lo = get<double>(n[0], what);
  auto hi = n[1].as<std::string>() == "inf" ? k_inf : get<double>(n[1], what);
  if (!(lo <= hi)) { throw fail(n, "'" + what + "' must have lo <= hi"); }
  return {lo, hi};
}

inline auto read_simulation(const YAML::Node& n) -> Simulation_config {
  check_keys(n, "simulate",
             {"tree", "n_leaves", "root_age", "lambda", "mu", "kappa", "n_catastrophes", "xi", "xi_beta", "seed"});
  auto s = Simulation_config{};
  if (n["tree"]) { s.tree = get<std::string>(n["tree"], "tree"); }
  if (n["n_leaves"]) {
    s.n_leaves = get<int>(n["n_leaves"], "n_leaves");
    if (s.n_leaves < 2) { throw fail(n["n_leaves"], "'n_leaves' must be at least 2"); }
  }
  if (n["root_age"]) { s.root_age = positive(n["root_age"], "root_age"); }
  if (n["lambda"]) {
    s.lambda = get<double>(n["lambda"], "lambda");
    if (s.lambda < 0.0) { throw fail(n["lambda"], "'lambda' must be non-negative"); }
  }
  if (n["mu"]) { s.mu = positive(n["mu"], "mu"); }
  if (n["kappa"]) {
    s.kappa = get<double>(n["kappa"], "kappa");
    if (s.kappa < 0.0 || s.kappa >= 1.0) { throw fail(n["kappa"], "'kappa' must lie in [0, 1)"); }
  }
  if (n["n_catastrophes"]) {
    s.n_catastrophes = get<int>(n["n_catastrophes"], "n_catastrophes");
    if (s.n_catastrophes < 0) { throw fail(n["n_catastrophes"], "'n_catastrophes' must be non-negative"); }
  }
  if (n["xi"]) {
    s.xi_value = get<double>(n["xi"], "xi");
    if (*s.xi_value < 0.0 || *s.xi_value > 1.0) { throw fail(n["xi"], "'xi' must lie in [0, 1]"); }
  }
  if (n["xi_beta"]) {
    auto g = gamma_prior(n["xi_beta"], "xi_beta");
    s.xi_beta = std::pair{g.shape, g.rate};
  }
  if (n["seed"]) { s.seed = get<std::uint64_t>(n["seed"], "seed"); }
  return s;
}

inline auto read_scalar_block(const YAML::Node& n, const std::string& name, double& start, bool& fixed,
                              Interval& bounds) -> void {
  check_keys(n, name, {"value", "fixed", "bounds"});
  if (n["value"]) { start = get<double>(n["value"], name + ".value"); }
  if (n["fixed"]) { fixed = get<bool>(n["fixed"], name + ".fixed"); }
  if (n["bounds"]) { bounds = interval(n["bounds"], name + ".bounds"); }
}

inline auto read_model(const YAML::Node& n, Experiment_config& c) -> void {
  check_keys(n, "model",
             {"use_likelihood", "root_age_bound", "lambda_prior", "rho_prior", "mu", "kappa", "xi_fixed",
              "catastrophes", "constraints", "leaf_ranges"});
  auto& m = c.model;
  if (n["use_likelihood"]) { m.use_likelihood = get<bool>(n["use_likelihood"], "use_likelihood"); }
  if (n["root_age_bound"]) { m.root_age_bound = positive(n["root_age_bound"], "root_age_bound"); }
  if (n["lambda_prior"]) { m.lambda_prior = gamma_prior(n["lambda_prior"], "lambda_prior"); }
  if (n["rho_prior"]) { m.rho_prior = gamma_prior(n["rho_prior"], "rho_prior"); }
  if (n["mu"]) { read_scalar_block(n["mu"], "mu", c.mu_start, m.mu_fixed, m.mu_bounds); }
  if (n["kappa"]) { read_scalar_block(n["kappa"], "kappa", c.kappa_start, m.kappa_fixed, m.kappa_bounds); }
  if (n["xi_fixed"]) { m.xi_fixed = get<bool>(n["xi_fixed"], "xi_fixed"); }
  if (n["catastrophes"]) { m.catastrophes = get<bool>(n["catastrophes"], "catastrophes"); }
  if (n["constraints"]) {
    if (!n["constraints"].IsSequence()) { throw fail(n["constraints"], "'constraints' must be a list"); }
    for (const auto& e : n["constraints"]) {
      check_keys(e, "constraints", {"clade", "lo", "hi"});
      auto spec = Experiment_config::Clade_spec{};
      spec.line = static_cast<int>(e.Mark().line) + 1;
      if (!e["clade"] || !e["clade"].IsSequence()) { throw fail(e, "constraint needs a 'clade' list"); }
      spec.taxa = get<std::vector<std::string>>(e["clade"], "clade");
      if (e["lo"]) { spec.lo = get<double>(e["lo"], "lo"); }
      if (e["hi"]) { spec.hi = get<double>(e["hi"], "hi"); }
      c.clades.push_back(std::move(spec));
    }
  }
  if (n["leaf_ranges"]) {
    if (!n["leaf_ranges"].IsMap()) { throw fail(n["leaf_ranges"], "'leaf_ranges' must map taxa to [lo, hi]"); }
    for (const auto& kv : n["leaf_ranges"]) {
      c.leaf_ranges.emplace_back(kv.first.as<std::string>(), interval(kv.second, "leaf_ranges"));
    }
  }
}

inline auto read_kernel(const YAML::Node& n, Kernel_config& k) -> void {
  check_keys(n, "kernel", {"theta", "multi_scale_moves", "weights"});
  if (n["theta"]) { k.theta = positive(n["theta"], "theta"); }
  if (n["multi_scale_moves"]) { k.multi_scale_moves = get<bool>(n["multi_scale_moves"], "multi_scale_moves"); }
  if (n["weights"]) {
    if (!n["weights"].IsMap()) { throw fail(n["weights"], "'weights' must map move names to weights"); }
    for (const auto& kv : n["weights"]) {
      auto name = kv.first.as<std::string>();
      auto m = parse_move_name(name);
      if (!m) { throw fail(kv.first, "unknown move '" + name + "'"); }
      auto w = get<double>(kv.second, name);
      if (w < 0.0) { throw fail(kv.second, "weight of '" + name + "' must be non-negative"); }
      k.weights[*m] = w;
    }
  }
}

inline auto read_run(const YAML::Node& n, Experiment_config& c) -> void {
  check_keys(n, "run",
             {"lags", "n_pairs", "max_iter", "thin", "master_seed", "init_steps", "init_root_age",
              "post_meeting_iterations", "write_samples", "marginal_iterations", "marginal_chains"});
  auto& r = c.run;
  if (n["lags"]) {
    r.lags = get<std::vector<long>>(n["lags"], "lags");
    if (r.lags.empty()) { throw fail(n["lags"], "'lags' must not be empty"); }
    for (auto k = std::size_t{0}; k < r.lags.size(); ++k) {
      if (r.lags[k] < 1) { throw fail(n["lags"], "lags must be at least 1"); }
      if (k > 0 && r.lags[k] <= r.lags[k - 1]) { throw fail(n["lags"], "lags must be strictly increasing"); }
    }
  }
  if (n["n_pairs"]) {
    r.n_pairs = get<int>(n["n_pairs"], "n_pairs");
    if (r.n_pairs < 1) { throw fail(n["n_pairs"], "'n_pairs' must be positive"); }
  }
  if (n["max_iter"]) { r.max_iter = get<long>(n["max_iter"], "max_iter"); }
  if (n["thin"]) {
    r.thin = get<long>(n["thin"], "thin");
    if (r.thin < 1) { throw fail(n["thin"], "'thin' must be positive"); }
  }
  if (n["master_seed"]) { r.master_seed = get<std::uint64_t>(n["master_seed"], "master_seed"); }
  if (n["init_steps"]) { r.init.steps = get<long>(n["init_steps"], "init_steps"); }
  if (n["init_root_age"]) { r.init.root_age = positive(n["init_root_age"], "init_root_age"); }
  if (n["post_meeting_iterations"]) {
    r.post_meeting_iterations = get<long>(n["post_meeting_iterations"], "post_meeting_iterations");
  }
  if (n["write_samples"]) { c.write_samples = get<bool>(n["write_samples"], "write_samples"); }
  if (n["marginal_iterations"]) { c.marginal_iterations = get<long>(n["marginal_iterations"], "marginal_iterations"); }
  if (n["marginal_chains"]) {
    c.marginal_chains = get<int>(n["marginal_chains"], "marginal_chains");
    if (c.marginal_chains < 2) { throw fail(n["marginal_chains"], "'marginal_chains' must be at least 2"); }
  }
  if (r.max_iter < r.lags.back()) { throw Config_error{"run: max_iter must be at least the largest lag"}; }
}

inline auto read_diagnose(const YAML::Node& n, Experiment_config& c) -> void {
  check_keys(n, "diagnose", {"stride", "asdsf_every", "window", "min_split_freq", "bootstrap"});
  if (n["stride"]) { c.diagnose_stride = get<long>(n["stride"], "stride"); }
  if (n["asdsf_every"]) { c.asdsf_every = get<long>(n["asdsf_every"], "asdsf_every"); }
  if (n["window"]) {
    auto w = get<std::string>(n["window"], "window");
    if (w == "trailing_75") {
      c.window = Window_rule::trailing_75;
    } else if (w == "disjoint") {
      c.window = Window_rule::disjoint;
    } else {
      throw fail(n["window"], "'window' must be trailing_75 or disjoint");
    }
  }
  if (n["min_split_freq"]) { c.min_split_freq = get<double>(n["min_split_freq"], "min_split_freq"); }
  if (n["bootstrap"]) { c.bootstrap = get<int>(n["bootstrap"], "bootstrap"); }
}

}  // namespace detail

inline auto parse_config(const std::string& text, const std::filesystem::path& source = {}) -> Experiment_config {
  auto root = YAML::Node{};
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw Config_error{"line " + std::to_string(e.mark.line + 1) + ": " + e.msg};
  }
  auto c = Experiment_config{};
  c.source = source;
  c.hash = config_hash(text);
  if (!root || root.IsNull()) { throw Config_error{"config is empty"}; }
  detail::check_keys(root, "top level", {"output_dir", "data", "simulate", "model", "kernel", "run", "diagnose"});
  auto base = source.empty() ? std::filesystem::path{} : source.parent_path();
  if (root["output_dir"]) { c.output_dir = detail::get<std::string>(root["output_dir"], "output_dir"); }
  if (root["data"]) { c.data_path = base / detail::get<std::string>(root["data"], "data"); }
  if (root["simulate"]) { c.simulation = detail::read_simulation(root["simulate"]); }
  if (c.simulation) { c.mu_start = c.simulation->mu; }
  if (root["model"]) { detail::read_model(root["model"], c); }
  if (root["kernel"]) { detail::read_kernel(root["kernel"], c.kernel); }
  if (root["run"]) { detail::read_run(root["run"], c); }
  if (root["diagnose"]) { detail::read_diagnose(root["diagnose"], c); }
  c.run.init.mu = c.mu_start;
  c.run.init.kappa = c.kappa_start;
  return c;
}

inline auto load_config(const std::filesystem::path& path) -> Experiment_config {
  auto in = std::ifstream{path};
  if (!in) { throw Config_error{"cannot open config file " + path.string()}; }
  auto text = std::string{std::istreambuf_iterator<char>{in}, {}};
  return parse_config(text, path);
}

// Resolves taxon names in constraints and leaf ranges against the data.
inline auto bind_data(Experiment_config& c, std::shared_ptr<const Pattern_data> data) -> void {
  auto index = [&](const std::string& name, int line) {
    for (auto k = 0; k < static_cast<int>(data->taxa->size()); ++k) {
      if ((*data->taxa)[k] == name) { return k; }
    }
    throw Config_error{(line > 0 ? "line " + std::to_string(line) + ": " : std::string{}) + "unknown taxon '" +
                       name + "'"};
  };
  auto n = static_cast<int>(data->taxa->size());
  c.model.constraints.clear();
  for (const auto& spec : c.clades) {
    auto set = Leaf_set{n};
    for (const auto& t : spec.taxa) { set.set(index(t, spec.line)); }
    c.model.constraints.push_back({set, spec.lo, spec.hi});
  }
  c.model.leaf_ranges.clear();
  if (!c.leaf_ranges.empty()) {
    c.model.leaf_ranges.assign(n, Interval{0.0, 0.0});
    for (const auto& [name, range] : c.leaf_ranges) { c.model.leaf_ranges[index(name, 0)] = range; }
  }
  c.model.data = std::move(data);
}

}  // namespace cphylo::cli
