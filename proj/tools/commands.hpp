#pragma once

// The three subcommands.  Every file written starts with a
// "# config_hash=..." line; CSV readers here skip '#' lines.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "cphylo/chains.hpp"
#include "cphylo/diagnostics.hpp"
#include "cphylo/newick.hpp"

namespace cphylo::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

class User_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline auto open_out(const fs::path& path, const std::string& hash) -> std::ofstream {
  fs::create_directories(path.parent_path());
  auto out = std::ofstream{path};
  if (!out) { throw User_error{"cannot write " + path.string()}; }
  out << "# config_hash=" << hash << '\n';
  return out;
}

inline auto timestamp() -> std::string {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

inline auto write_json(const fs::path& path, const Json& j) -> void {
  fs::create_directories(path.parent_path());
  auto out = std::ofstream{path};
  if (!out) { throw User_error{"cannot write " + path.string()}; }
  out << j.dump(2) << '\n';
}

// Reads the config hash from the first line of a file written by this tool.
inline auto file_hash(const fs::path& path) -> std::string {
  auto in = std::ifstream{path};
  auto line = std::string{};
  std::getline(in, line);
  constexpr auto k_prefix = std::string_view{"# config_hash="};
  return line.rfind(k_prefix, 0) == 0 ? line.substr(k_prefix.size()) : std::string{};
}

inline auto data_file(const Experiment_config& c) -> fs::path {
  return c.data_path ? *c.data_path : c.output_dir / "data.tsv";
}

inline auto load_data(const Experiment_config& c) -> std::shared_ptr<const Pattern_data> {
  auto path = data_file(c);
  auto in = std::ifstream{path};
  if (!in) {
    throw User_error{"cannot open data file " + path.string() +
                     (c.data_path ? std::string{} : std::string{" (run 'simulate' first or set 'data')"})};
  }
  try {
    auto data = read_patterns(in);
    if (data.total() == 0) { throw User_error{"data file " + path.string() + " has no observable traits"}; }
    return std::make_shared<const Pattern_data>(std::move(data));
  } catch (const Data_error& e) {
    throw User_error{path.string() + ": " + e.what()};
  }
}

inline auto kernel_for(const Experiment_config& c) -> Kernel {
  return Kernel{c.model, c.kernel, static_cast<int>(c.model.data->taxa->size())};
}

// Shared worker pool over `n` jobs.
template <typename Job>
auto parallel_for(int n, int threads, Job&& job) -> void {
  auto next = std::atomic<int>{0};
  auto worker = [&] {
    for (auto k = next++; k < n; k = next++) { job(k); }
  };
  auto pool = std::vector<std::thread>{};
  for (auto t = 1; t < std::max(1, std::min(threads, n)); ++t) { pool.emplace_back(worker); }
  worker();
  for (auto& t : pool) { t.join(); }
}

inline auto sample_sink_to(const fs::path& path, const std::string& hash, int num_leaves) -> Sample_sink {
  auto out = std::make_shared<std::ofstream>(open_out(path, hash));
  *out << format_sample_header(num_leaves) << '\n';
  return [out](char, long iteration, const Chain_state& c) { *out << format_sample_row(iteration, c) << '\n'; };
}

}  // namespace detail

// --- simulate -------------------------------------------------------------

struct Simulated {
  Tree tree;
  std::vector<int> cats;
  std::vector<double> xi;
  std::vector<std::string> catastrophe_taxa;
  Pattern_data data;
};

// Draws the true tree, catastrophe placement, registration probabilities and
// trait data, in that order, from one stream seeded by `s.seed`.
inline auto simulate_dataset(const Simulation_config& s) -> Simulated {
  auto rng = Random_stream{s.seed, 0};
  auto out = Simulated{};
  if (s.tree) {
    try {
      out.tree = parse_newick(*s.tree);
    } catch (const Newick_error& e) {
      throw User_error{std::string{"simulate.tree: "} + e.what()};
    }
  } else {
    auto taxa = std::make_shared<Taxon_names>();
    for (auto k = 1; k <= s.n_leaves; ++k) { taxa->push_back("T" + std::to_string(k)); }
    out.tree = random_tree(taxa, s.root_age, rng);
  }
  const auto& tree = out.tree;
  auto n = tree.num_leaves();
  if (s.n_catastrophes > n) { throw User_error{"simulate: more catastrophes than leaf branches"}; }
  out.cats.assign(tree.num_nodes(), 0);
  auto leaves = std::vector<int>(n);
  std::iota(leaves.begin(), leaves.end(), 0);
  for (auto k = 0; k < s.n_catastrophes; ++k) {
    auto pick = k + static_cast<int>(rng.index(n - k));
    std::swap(leaves[k], leaves[pick]);
    out.cats[leaves[k]] = 1;
    out.catastrophe_taxa.push_back(tree.taxon(leaves[k]));
  }
  out.xi.assign(n, s.xi_value.value_or(1.0));
  if (s.xi_beta) { out.xi = simulate_missingness(n, s.xi_beta->first, s.xi_beta->second, rng); }
  out.data = simulate(tree, s.lambda, s.mu, s.kappa, out.cats, out.xi, rng);
  if (out.data.total() == 0) { throw User_error{"simulated data set is empty (no trait survived to the leaves)"}; }
  return out;
}

inline auto cmd_simulate(const Experiment_config& c) -> int {
  if (!c.simulation) { throw User_error{"config has no 'simulate' section"}; }
  const auto& s = *c.simulation;
  auto sim = simulate_dataset(s);
  const auto& tree = sim.tree;
  const auto& data = sim.data;
  auto n = tree.num_leaves();

  auto data_out = detail::open_out(c.output_dir / "data.tsv", c.hash);
  write_patterns(data_out, data);
  auto tree_out = detail::open_out(c.output_dir / "truth.nwk", c.hash);
  tree_out << serialize_newick(tree) << '\n';

  auto prov = Json{};
  prov["config_hash"] = c.hash;
  prov["command"] = "simulate";
  prov["created"] = detail::timestamp();
  prov["seed"] = s.seed;
  prov["lambda"] = s.lambda;
  prov["mu"] = s.mu;
  prov["kappa"] = s.kappa;
  prov["root_age"] = tree.age(tree.root());
  prov["catastrophe_leaf_branches"] = sim.catastrophe_taxa;
  prov["xi"] = sim.xi;
  prov["truth"] = serialize_newick(tree);
  prov["n_traits"] = data.total();
  prov["n_patterns"] = data.num_patterns();
  detail::write_json(c.output_dir / "provenance_simulate.json", prov);
  std::cout << "simulated " << data.total() << " traits (" << data.num_patterns() << " patterns) on " << n
            << " leaves -> " << (c.output_dir / "data.tsv").string() << '\n';
  return 0;
}

// --- run ------------------------------------------------------------------

struct Run_options {
  bool marginal_only = false;
  bool resume = false;
  int threads = 1;
};

inline auto pair_stem(long lag, int pair) -> std::string {
  return "lag" + std::to_string(lag) + "_pair" + std::to_string(pair);
}

inline auto cmd_run_marginal(Experiment_config c, const Run_options& opt) -> int {
  auto data = detail::load_data(c);
  bind_data(c, data);
  auto kernel = detail::kernel_for(c);
  auto n = static_cast<int>(data->taxa->size());
  auto finals = std::vector<double>(c.marginal_chains);
  detail::parallel_for(c.marginal_chains, opt.threads, [&](int k) {
    auto sink = detail::sample_sink_to(c.output_dir / "samples" / ("marginal_chain" + std::to_string(k) + ".csv"),
                                       c.hash, n);
    finals[k] = run_marginal_chain(kernel, c.run, k, c.marginal_iterations, sink).log_posterior();
  });
  auto prov = Json{};
  prov["config_hash"] = c.hash;
  prov["command"] = "run --marginal-only";
  prov["created"] = detail::timestamp();
  prov["chains"] = c.marginal_chains;
  prov["iterations"] = c.marginal_iterations;
  prov["final_log_posterior"] = finals;
  detail::write_json(c.output_dir / "provenance_marginal.json", prov);
  std::cout << "ran " << c.marginal_chains << " marginal chains of " << c.marginal_iterations << " iterations\n";
  return 0;
}

inline auto read_record_fragment(const fs::path& path) -> std::optional<Meeting_record> {
  auto in = std::ifstream{path};
  auto line = std::string{};
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("pair,", 0) == 0) { continue; }
    auto r = Meeting_record{};
    auto ss = std::istringstream{line};
    auto field = std::string{};
    auto fields = std::vector<std::string>{};
    while (std::getline(ss, field, ',')) { fields.push_back(field); }
    if (fields.size() < 4) { return std::nullopt; }
    r.pair = std::stoi(fields[0]);
    r.lag = std::stol(fields[1]);
    r.tau = std::stol(fields[2]);
    r.censored = fields[3] == "1";
    return r;
  }
  return std::nullopt;
}

inline auto cmd_run(Experiment_config c, const Run_options& opt) -> int {
  if (opt.marginal_only) { return cmd_run_marginal(std::move(c), opt); }
  auto data = detail::load_data(c);
  bind_data(c, data);
  auto kernel = detail::kernel_for(c);
  auto n = static_cast<int>(data->taxa->size());
  c.run.threads = opt.threads;
  auto pairs_dir = c.output_dir / "pairs";
  auto fragment = [&](long lag, int p) { return pairs_dir / (pair_stem(lag, p) + ".csv"); };

  auto hooks = Run_hooks{};
  if (c.write_samples) {
    hooks.make_sink = [&](long lag, int p) {
      auto sx = detail::sample_sink_to(c.output_dir / "samples" / (pair_stem(lag, p) + "_x.csv"), c.hash, n);
      auto sy = detail::sample_sink_to(c.output_dir / "samples" / (pair_stem(lag, p) + "_y.csv"), c.hash, n);
      return Sample_sink{[sx, sy](char chain, long it, const Chain_state& s) { (chain == 'x' ? sx : sy)(chain, it, s); }};
    };
  }
  if (opt.resume) {
    hooks.skip = [&](long lag, int p) {
      auto path = fragment(lag, p);
      if (!fs::exists(path)) { return false; }
      if (detail::file_hash(path) != c.hash) {
        throw User_error{path.string() + " was written by a different config"};
      }
      return read_record_fragment(path).has_value();
    };
  }
  hooks.on_record = [&](const Meeting_record& r) {
    if (!r.error.empty()) { return; }
    auto out = detail::open_out(fragment(r.lag, r.pair), c.hash);
    out << format_record_header() << '\n' << format_record_row(r) << '\n';
  };
  // A config mismatch found while resuming is a user error, not a pair failure.
  if (opt.resume) {
    for (auto lag : c.run.lags) {
      for (auto p = 0; p < c.run.n_pairs; ++p) { hooks.skip(lag, p); }
    }
  }
  auto records = run_experiment(kernel, c.run, hooks);

  auto out = detail::open_out(c.output_dir / "meetings.csv", c.hash);
  out << format_record_header() << '\n';
  auto failures = std::vector<Meeting_record>{};
  auto resumed = 0;
  for (auto& r : records) {
    if (!r.error.empty()) {
      failures.push_back(r);
      continue;
    }
    if (r.tau == 0) {
      r = *read_record_fragment(fragment(r.lag, r.pair));
      ++resumed;
    }
    out << format_record_row(r) << '\n';
  }
  if (!failures.empty()) {
    auto fail_out = detail::open_out(c.output_dir / "failures.csv", c.hash);
    fail_out << "pair,lag,error\n";
    for (const auto& r : failures) {
      auto msg = r.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      fail_out << r.pair << ',' << r.lag << ',' << msg << '\n';
    }
  } else {
    fs::remove(c.output_dir / "failures.csv");
  }

  auto prov = Json{};
  prov["config_hash"] = c.hash;
  prov["command"] = "run";
  prov["created"] = detail::timestamp();
  prov["lags"] = c.run.lags;
  prov["n_pairs"] = c.run.n_pairs;
  prov["master_seed"] = c.run.master_seed;
  prov["threads"] = opt.threads;
  prov["resumed_pairs"] = resumed;
  prov["failed_pairs"] = failures.size();
  auto walls = Json::array();
  for (const auto& r : records) { walls.push_back({{"pair", r.pair}, {"lag", r.lag}, {"wall_seconds", r.wall_seconds}}); }
  prov["wall_seconds"] = walls;
  detail::write_json(c.output_dir / "provenance_run.json", prov);

  auto censored = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.censored; });
  std::cout << "ran " << records.size() << " pairs (" << resumed << " resumed, " << censored << " censored, "
            << failures.size() << " failed) -> " << (c.output_dir / "meetings.csv").string() << '\n';
  if (!failures.empty()) {
    std::cerr << "error: " << failures.size() << " pair(s) failed; see failures.csv\n";
    return 2;
  }
  return 0;
}

// --- diagnose -------------------------------------------------------------

struct Diagnose_options {
  long stride = 100;
  long asdsf_every = 10;
  Window_rule window = Window_rule::trailing_75;
  double min_split_freq = 0.1;
  int bootstrap = 0;
  std::uint64_t seed = 1;
};

inline auto read_meetings(const fs::path& path) -> std::map<long, std::vector<Meeting_time>> {
  auto in = std::ifstream{path};
  auto out = std::map<long, std::vector<Meeting_time>>{};
  auto line = std::string{};
  auto line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#' || line.rfind("pair,", 0) == 0) { continue; }
    auto fields = std::vector<std::string>{};
    auto ss = std::istringstream{line};
    auto f = std::string{};
    while (std::getline(ss, f, ',')) { fields.push_back(f); }
    try {
      if (fields.size() < 4) { throw std::invalid_argument{"too few fields"}; }
      auto lag = std::stol(fields[1]);
      auto tau = std::stol(fields[2]);
      if (tau < lag) { throw std::invalid_argument{"tau below lag"}; }
      out[lag].push_back({tau, fields[3] == "1"});
    } catch (const std::exception& e) {
      throw User_error{path.string() + ": line " + std::to_string(line_no) + ": bad record (" + e.what() + ")"};
    }
  }
  return out;
}

// Split sets of the trees in a sample file.
inline auto read_sample_splits(const fs::path& path, std::shared_ptr<const Taxon_names>& taxa)
    -> std::vector<std::set<Split>> {
  auto in = std::ifstream{path};
  auto out = std::vector<std::set<Split>>{};
  auto line = std::string{};
  auto line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#' || line.rfind("iteration,", 0) == 0) { continue; }
    auto a = line.find('"');
    auto b = line.find('"', a + 1);
    if (a == std::string::npos || b == std::string::npos) {
      throw User_error{path.string() + ": line " + std::to_string(line_no) + ": no quoted newick field"};
    }
    try {
      auto tree = parse_newick(std::string_view{line}.substr(a + 1, b - a - 1), taxa);
      if (!taxa) { taxa = tree.taxa(); }
      out.push_back(splits(tree));
    } catch (const Newick_error& e) {
      throw User_error{path.string() + ": line " + std::to_string(line_no) + ": " + e.what()};
    }
  }
  return out;
}

inline auto cmd_diagnose(const fs::path& dir, const Diagnose_options& opt) -> int {
  if (!fs::is_directory(dir)) { throw User_error{"not a directory: " + dir.string()}; }
  auto meetings = dir / "meetings.csv";
  auto marginal = std::vector<fs::path>{};
  if (fs::is_directory(dir / "samples")) {
    for (const auto& e : fs::directory_iterator{dir / "samples"}) {
      if (e.path().filename().string().rfind("marginal_chain", 0) == 0) { marginal.push_back(e.path()); }
    }
  }
  std::sort(marginal.begin(), marginal.end());
  if (!fs::exists(meetings) && marginal.size() < 2) {
    throw User_error{"no meetings.csv or marginal chain samples in " + dir.string()};
  }
  auto hash = fs::exists(meetings) ? detail::file_hash(meetings) : detail::file_hash(marginal.front());
  auto summary = Json{};
  summary["config_hash"] = hash;
  summary["created"] = detail::timestamp();
  auto warnings = Json::array();

  if (fs::exists(meetings)) {
    auto by_lag = read_meetings(meetings);
    if (by_lag.empty()) { throw User_error{meetings.string() + " has no records"}; }
    auto tv_out = detail::open_out(dir / "tv_curves.csv", hash);
    tv_out << "lag,s,bound" << (opt.bootstrap > 0 ? ",lower,upper" : "") << '\n';
    auto ecdf_out = detail::open_out(dir / "ecdf.csv", hash);
    ecdf_out << "lag,s,survival,log_survival\n";
    auto rng = Random_stream{opt.seed, 0};
    auto lags = Json::array();
    for (const auto& [lag, taus] : by_lag) {
      auto curve = tv_curve(taus, lag, opt.stride);
      if (opt.bootstrap > 0) { add_bootstrap_band(curve, taus, opt.bootstrap, 0.95, rng); }
      for (auto k = std::size_t{0}; k < curve.s.size(); ++k) {
        tv_out << lag << ',' << curve.s[k] << ',' << format_number(curve.bound[k]);
        if (opt.bootstrap > 0) {
          tv_out << ',' << format_number(curve.lower[k]) << ',' << format_number(curve.upper[k]);
        }
        tv_out << '\n';
      }
      auto surv = ecdf_survival(taus, lag);
      for (const auto& p : surv) {
        ecdf_out << lag << ',' << p.s << ',' << format_number(p.survival) << ','
                 << (p.survival > 0.0 ? format_number(std::log(p.survival)) : std::string{"-inf"}) << '\n';
      }
      auto fit = geometric_tail_fit(surv);
      auto n_censored = std::count_if(taus.begin(), taus.end(), [](const auto& t) { return t.censored; });
      auto first_below = Json{};
      for (auto k = std::size_t{0}; k < curve.s.size(); ++k) {
        if (curve.bound[k] < 0.01) {
          first_below = curve.s[k];
          break;
        }
      }
      lags.push_back({{"lag", lag},
                      {"num_pairs", taus.size()},
                      {"num_censored", n_censored},
                      {"bound_at_0", curve.bound.front()},
                      {"first_s_below_0.01", first_below},
                      {"tail_slope", fit.slope},
                      {"tail_r_squared", fit.r_squared}});
      if (n_censored > 0) {
        warnings.push_back("lag " + std::to_string(lag) + ": " + std::to_string(n_censored) +
                           " censored pair(s); bounds are lower bounds");
      }
    }
    summary["lags"] = lags;
    auto stability = Json::array();
    for (auto it = by_lag.begin(); std::next(it) != by_lag.end(); ++it) {
      auto nx = std::next(it);
      auto [agree, gap] = curves_agree(it->second, it->first, nx->second, nx->first, opt.stride);
      stability.push_back({{"lag_a", it->first}, {"lag_b", nx->first}, {"stable", agree}, {"max_gap", gap}});
    }
    summary["lag_stability"] = stability;
  }

  if (marginal.size() >= 2) {
    auto taxa = std::shared_ptr<const Taxon_names>{};
    auto chains = std::vector<std::vector<std::set<Split>>>{};
    auto shortest = std::numeric_limits<std::size_t>::max();
    for (const auto& p : marginal) {
      chains.push_back(read_sample_splits(p, taxa));
      shortest = std::min(shortest, chains.back().size());
    }
    for (auto& ch : chains) { ch.resize(shortest); }
    auto series = asdsf(chains, opt.window, opt.asdsf_every, opt.min_split_freq);
    auto out = detail::open_out(dir / "asdsf.csv", hash);
    out << "window_end,asdsf,num_splits,no_splits\n";
    for (const auto& p : series) {
      out << p.window_end << ',' << format_number(p.value) << ',' << p.num_splits << ',' << (p.no_splits ? 1 : 0)
          << '\n';
    }
    auto first_below = Json{};
    for (const auto& p : series) {
      if (p.value < 0.01) {
        first_below = p.window_end;
        break;
      }
    }
    summary["asdsf"] = {{"chains", chains.size()},
                        {"samples_per_chain", shortest},
                        {"final", series.empty() ? Json{} : Json(series.back().value)},
                        {"threshold", 0.01},
                        {"first_window_below_threshold", first_below}};
  }
  summary["warnings"] = warnings;
  detail::write_json(dir / "summary.json", summary);
  for (const auto& w : warnings) { std::cerr << "warning: " << w.get<std::string>() << '\n'; }
  std::cout << "diagnostics written to " << dir.string() << '\n';
  return 0;
}

}  // namespace cphylo::cli
