#pragma once

// Lag-l coupled chains, meeting detection and the experiment runner.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "kernel.hpp"
#include "newick.hpp"
#include "random_stream.hpp"
#include "sd_model.hpp"
#include "tree.hpp"

namespace cphylo {

// Purpose tags mixed into stream ids.
enum Stream_purpose : std::uint64_t {
  k_stream_init_x = 1,
  k_stream_init_y = 2,
  k_stream_main = 3,
  k_stream_marginal = 4,
};

inline auto stream_id(std::uint64_t lag, std::uint64_t pair, std::uint64_t purpose) -> std::uint64_t {
  if (lag >= (std::uint64_t{1} << 24) || pair >= (std::uint64_t{1} << 32) || purpose >= 256) {
    throw std::invalid_argument{"stream id component out of range"};
  }
  return (lag << 40) | (pair << 8) | purpose;
}

// --- Initialisation -------------------------------------------------------

struct Init_config {
  long steps = -1;                   // prior-only iterations; negative means 10 |L|^2
  std::optional<double> root_age;    // start root age; drawn below the root bound when absent
  double mu = 1e-3;
  double kappa = 0.1;                // ignored without catastrophes
  std::vector<double> xi;            // empty: all 1 when fixed, Unif(0,1) draws otherwise
  int max_attempts = 1000;
};

// Random topology respecting the (laminar) clade constraints, with ages built
// from exponential increments scaled so that the root lands on `root_age`.
inline auto random_constrained_tree(std::shared_ptr<const Taxon_names> taxa, const std::vector<Leaf_set>& clades_in,
                                    const std::vector<double>& leaf_ages, double root_age, Random_stream& rng)
    -> Tree {
  auto n = static_cast<int>(taxa->size());
  if (n < 2) { throw std::invalid_argument{"random_constrained_tree: need at least two leaves"}; }
  auto groups = clades_in;
  std::sort(groups.begin(), groups.end(), [](const Leaf_set& a, const Leaf_set& b) { return a.count() < b.count(); });
  for (auto a = std::size_t{0}; a < groups.size(); ++a) {
    for (auto b = a + 1; b < groups.size(); ++b) {
      if (groups[a].intersects(groups[b]) && !groups[a].is_subset_of(groups[b])) {
        throw std::invalid_argument{"clade constraints overlap without nesting"};
      }
    }
  }
  auto full = Leaf_set{n};
  for (auto i = 0; i < n; ++i) { full.set(i); }
  groups.push_back(full);

  auto nodes = std::vector<Node>(2 * n - 1);
  struct Component {
    Node_index root;
    Leaf_set leaves;
  };
  auto comps = std::vector<Component>{};
  for (auto i = 0; i < n; ++i) {
    auto s = Leaf_set{n};
    s.set(i);
    comps.push_back({i, s});
    nodes[i].age = leaf_ages.empty() ? 0.0 : leaf_ages[i];
  }
  auto next = n;
  for (const auto& g : groups) {
    auto inside = std::vector<std::size_t>{};
    for (auto k = std::size_t{0}; k < comps.size(); ++k) {
      if (comps[k].leaves.is_subset_of(g)) { inside.push_back(k); }
    }
    while (inside.size() > 1) {
      auto a = rng.index(inside.size());
      auto b = rng.index(inside.size() - 1);
      if (b >= a) { ++b; }
      auto& ca = comps[inside[a]];
      auto& cb = comps[inside[b]];
      auto parent = next++;
      nodes[parent].children = {ca.root, cb.root};
      nodes[ca.root].parent = parent;
      nodes[cb.root].parent = parent;
      ca.leaves |= cb.leaves;
      ca.root = parent;
      auto gone = inside[b];
      comps.erase(comps.begin() + static_cast<std::ptrdiff_t>(gone));
      inside.clear();
      for (auto k = std::size_t{0}; k < comps.size(); ++k) {
        if (comps[k].leaves.is_subset_of(g)) { inside.push_back(k); }
      }
    }
  }
  auto increments = std::vector<double>(2 * n - 1, 0.0);
  for (auto i = n; i < 2 * n - 1; ++i) { increments[i] = rng.exponential(1.0); }
  auto max_leaf = 0.0;
  for (auto i = 0; i < n; ++i) { max_leaf = std::max(max_leaf, nodes[i].age); }
  if (!(root_age > max_leaf)) { throw std::invalid_argument{"random_constrained_tree: root age not above leaves"}; }
  // Internal nodes were created children-first, so one forward pass sets ages.
  auto assign = [&](double c) {
    for (auto i = n; i < 2 * n - 1; ++i) {
      auto [a, b] = nodes[i].children;
      nodes[i].age = std::max(nodes[a].age, nodes[b].age) + c * increments[i];
    }
    return nodes[2 * n - 2].age;
  };
  auto lo = 0.0;
  auto hi = 1.0;
  while (assign(hi) < root_age) { hi *= 2.0; }
  for (auto it = 0; it < 200; ++it) {
    auto mid = 0.5 * (lo + hi);
    (assign(mid) < root_age ? lo : hi) = mid;
  }
  assign(hi);
  nodes[2 * n - 2].age = root_age;
  return Tree{std::move(taxa), std::move(nodes), 2 * n - 2};
}

// The model used by initialisation runs: prior only, no catastrophes, fixed
// scalars, all time moves available.
inline auto init_model(const Sd_model& model) -> Sd_model {
  auto m = model;
  m.use_likelihood = false;
  m.catastrophes = false;
  m.mu_fixed = true;
  m.kappa_fixed = true;
  return m;
}

inline auto init_state(const Sd_model& model, const Init_config& config, Random_stream& rng) -> Sd_state {
  if (!model.data) { throw std::invalid_argument{"init_state: model has no data"}; }
  auto taxa = model.data->taxa;
  auto n = static_cast<int>(taxa->size());
  auto leaf_ages = std::vector<double>{};
  auto max_leaf = 0.0;
  for (const auto& r : model.leaf_ranges) {
    leaf_ages.push_back(r.hi > r.lo ? rng.uniform(r.lo, r.hi) : r.lo);
    max_leaf = std::max(max_leaf, leaf_ages.back());
  }
  auto clade_sets = std::vector<Leaf_set>{};
  for (const auto& c : model.constraints) { clade_sets.push_back(c.leaves); }

  auto state = Sd_state{};
  auto found = false;
  for (auto attempt = 0; attempt < config.max_attempts && !found; ++attempt) {
    auto root_age = 0.0;
    if (config.root_age) {
      root_age = *config.root_age;
    } else if (std::isfinite(model.root_age_bound)) {
      root_age = rng.uniform(max_leaf, model.root_age_bound);
    } else {
      throw std::invalid_argument{"init_state: a start root age is needed when the root age is unbounded"};
    }
    auto tree = random_constrained_tree(taxa, clade_sets, leaf_ages, root_age, rng);
    state = Sd_state{std::move(tree), config.mu, 0.0, std::vector<double>(n, 1.0), std::vector<int>(2 * n - 1, 0)};
    found = std::isfinite(log_prior(init_model(model), state));
  }
  if (!found) { throw std::runtime_error{"init_state: could not draw a start tree satisfying the constraints"}; }

  if (!config.xi.empty()) {
    if (static_cast<int>(config.xi.size()) != n) { throw std::invalid_argument{"init_state: xi length mismatch"}; }
    state.xi = config.xi;
  } else if (!model.xi_fixed) {
    for (auto& x : state.xi) { x = rng.uniform(); }
  }

  auto steps = config.steps < 0 ? 10L * n * n : config.steps;
  if (steps > 0) {
    auto prior_model = init_model(model);
    auto kernel_config = Kernel_config{};
    kernel_config.multi_scale_moves = true;
    auto kernel = Kernel{prior_model, kernel_config, n};
    auto chain = evaluate(prior_model, std::move(state));
    for (auto s = 0L; s < steps; ++s) { marginal_step(kernel, chain, rng); }
    state = std::move(chain.state);
  }
  std::fill(state.cats.begin(), state.cats.end(), 0);
  state.mu = config.mu;
  state.kappa = model.catastrophes ? config.kappa : 0.0;
  return state;
}

// --- Sample output --------------------------------------------------------

inline auto format_sample_header(int num_leaves) -> std::string {
  auto out = std::string{"iteration,log_posterior,root_age,mu,kappa,n_total,newick"};
  for (auto i = 1; i <= num_leaves; ++i) { out += ",xi_" + std::to_string(i); }
  return out;
}

inline auto format_sample_row(long iteration, const Chain_state& c) -> std::string {
  const auto& s = c.state;
  auto out = std::to_string(iteration);
  out += ',' + format_number(c.log_posterior());
  out += ',' + format_number(s.tree.age(s.tree.root()));
  out += ',' + format_number(s.mu);
  out += ',' + format_number(s.kappa);
  out += ',' + std::to_string(s.total_cats());
  out += ",\"" + serialize_newick(s.tree) + '"';
  for (auto x : s.xi) { out += ',' + format_number(x); }
  return out;
}

// Receives thinned samples; `chain` is 'x' or 'y'.
using Sample_sink = std::function<void(char chain, long iteration, const Chain_state&)>;

// --- Marginal chains ------------------------------------------------------

inline auto advance_marginal(const Kernel& kernel, Chain_state& chain, Random_stream& rng, long steps) -> long {
  auto accepted = 0L;
  for (auto s = 0L; s < steps; ++s) { accepted += marginal_step(kernel, chain, rng).accepted; }
  return accepted;
}

// --- Coupled pairs --------------------------------------------------------

struct Coupled_pair {
  Chain_state x;
  Chain_state y;
  long lag = 1;
  long s = 0;  // iteration of x; y is at s - lag
  Random_stream rng;
  bool met = false;
  long thin = 100;
  bool needs_housekeeping = true;
};

inline auto is_checkpoint(const Coupled_pair& pair) -> bool {
  return pair.s >= pair.lag && (pair.s - pair.lag) % pair.thin == 0;
}

// Relabels y against x.  The cached posterior of y is recomputed so that
// identical states carry bitwise-identical caches.
inline auto housekeep(const Sd_model& model, Coupled_pair& pair) -> void {
  pair.y = evaluate(model, housekeeping(pair.x.state, pair.y.state));
  pair.needs_housekeeping = false;
}

// One coupled iteration followed, at thinned checkpoints, by the meeting test.
inline auto advance_coupled(Coupled_pair& pair, const Kernel& kernel) -> void {
  if (pair.needs_housekeeping) { housekeep(kernel.model(), pair); }
  auto [rx, ry] = coupled_step(kernel, pair.x, pair.y, pair.rng);
  pair.needs_housekeeping = rx.topology_changed || ry.topology_changed;
  ++pair.s;
  if (is_checkpoint(pair)) {
    auto equal = states_equal(pair.x.state, pair.y.state);
    if (pair.met && !equal) { throw Invariant_breach{"coupled chains separated after meeting"}; }
    pair.met = pair.met || equal;
  }
}

struct Run_config {
  std::vector<long> lags{1000};
  int n_pairs = 10;
  long max_iter = 100000;
  long thin = 100;
  std::uint64_t master_seed = 1;
  long post_meeting_iterations = 0;  // keep going after meeting, asserting equality
  int threads = 1;
  Init_config init;
};

struct Meeting_record {
  int pair = 0;
  long lag = 0;
  long tau = 0;
  bool censored = false;
  double wall_seconds = 0.0;
  std::string error;  // non-empty when the pair failed
  long post_meeting_checks = 0;
};

inline auto run_pair(const Kernel& kernel, const Run_config& config, long lag, int pair_index,
                     const Sample_sink& sink = {}) -> Meeting_record {
  if (lag < 1) { throw std::invalid_argument{"run_pair: lag must be at least 1"}; }
  auto start = std::chrono::steady_clock::now();
  const auto& model = kernel.model();
  auto seed = config.master_seed;
  auto ul = static_cast<std::uint64_t>(lag);
  auto up = static_cast<std::uint64_t>(pair_index);
  auto rng_x = Random_stream{seed, stream_id(ul, up, k_stream_init_x)};
  auto rng_y = Random_stream{seed, stream_id(ul, up, k_stream_init_y)};
  auto pair = Coupled_pair{evaluate(model, init_state(model, config.init, rng_x)),
                           evaluate(model, init_state(model, config.init, rng_y)),
                           lag,
                           0,
                           Random_stream{seed, stream_id(ul, up, k_stream_main)},
                           false,
                           config.thin,
                           true};
  auto emit = [&](char chain, long it, const Chain_state& c) {
    if (sink) { sink(chain, it, c); }
  };
  emit('x', 0, pair.x);
  for (pair.s = 1; pair.s <= lag; ++pair.s) {
    marginal_step(kernel, pair.x, pair.rng);
    if (pair.s % config.thin == 0) { emit('x', pair.s, pair.x); }
  }
  pair.s = lag;
  emit('y', 0, pair.y);
  housekeep(model, pair);
  pair.met = states_equal(pair.x.state, pair.y.state);

  auto record = Meeting_record{pair_index, lag, 0, false, 0.0, {}, 0};
  while (!pair.met && pair.s < config.max_iter) {
    advance_coupled(pair, kernel);
    if (pair.s % config.thin == 0) { emit('x', pair.s, pair.x); }
    if (is_checkpoint(pair)) { emit('y', pair.s - lag, pair.y); }
  }
  if (pair.met) {
    record.tau = pair.s;
    for (auto k = 0L; k < config.post_meeting_iterations; ++k) {
      advance_coupled(pair, kernel);
      if (!states_equal(pair.x.state, pair.y.state)) {
        throw Invariant_breach{"coupled chains separated after meeting"};
      }
      ++record.post_meeting_checks;
      if (pair.s % config.thin == 0) { emit('x', pair.s, pair.x); }
      if (is_checkpoint(pair)) { emit('y', pair.s - lag, pair.y); }
    }
  } else {
    record.tau = config.max_iter;
    record.censored = true;
  }
  record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return record;
}

struct Run_hooks {
  std::function<Sample_sink(long lag, int pair)> make_sink;
  std::function<bool(long lag, int pair)> skip;                 // already done, e.g. when resuming
  std::function<void(const Meeting_record&)> on_record;        // called from worker threads
};

// Runs n_pairs pairs at every lag on a pool of threads.  Records come back in
// (lag, pair) order regardless of scheduling; skipped pairs carry only their
// indices.
inline auto run_experiment(const Kernel& kernel, const Run_config& config, const Run_hooks& hooks = {})
    -> std::vector<Meeting_record> {
  auto jobs = std::vector<std::pair<long, int>>{};
  for (auto lag : config.lags) {
    for (auto p = 0; p < config.n_pairs; ++p) { jobs.emplace_back(lag, p); }
  }
  auto records = std::vector<Meeting_record>(jobs.size());
  auto next = std::atomic<std::size_t>{0};
  auto worker = [&] {
    for (auto k = next++; k < jobs.size(); k = next++) {
      auto [lag, p] = jobs[k];
      if (hooks.skip && hooks.skip(lag, p)) {
        records[k] = Meeting_record{p, lag, 0, false, 0.0, {}, 0};
        continue;
      }
      try {
        auto sink = hooks.make_sink ? hooks.make_sink(lag, p) : Sample_sink{};
        records[k] = run_pair(kernel, config, lag, p, sink);
      } catch (const std::exception& e) {
        records[k] = Meeting_record{p, lag, 0, false, 0.0, e.what(), 0};
      }
      if (hooks.on_record) { hooks.on_record(records[k]); }
    }
  };
  auto n_threads = std::max(1, std::min<int>(config.threads, static_cast<int>(jobs.size())));
  auto pool = std::vector<std::thread>{};
  for (auto t = 1; t < n_threads; ++t) { pool.emplace_back(worker); }
  worker();
  for (auto& t : pool) { t.join(); }
  return records;
}

inline auto format_record_header() -> std::string { return "pair,lag,tau,censored,wall_seconds"; }

// Wall time is written as NA so the file is reproducible byte for byte.
inline auto format_record_row(const Meeting_record& r) -> std::string {
  return std::to_string(r.pair) + ',' + std::to_string(r.lag) + ',' + std::to_string(r.tau) + ',' +
         (r.censored ? "1" : "0") + ",NA";
}

// Independent marginal chains, used for split-frequency comparisons and for
// checking that coupling leaves the marginal law alone.
inline auto run_marginal_chain(const Kernel& kernel, const Run_config& config, int chain_index, long iterations,
                               const Sample_sink& sink = {}) -> Chain_state {
  const auto& model = kernel.model();
  auto up = static_cast<std::uint64_t>(chain_index);
  auto rng_init = Random_stream{config.master_seed, stream_id(0, up, k_stream_init_x)};
  auto rng = Random_stream{config.master_seed, stream_id(0, up, k_stream_marginal)};
  auto chain = evaluate(model, init_state(model, config.init, rng_init));
  if (sink) { sink('x', 0, chain); }
  for (auto s = 1L; s <= iterations; ++s) {
    marginal_step(kernel, chain, rng);
    if (sink && s % config.thin == 0) { sink('x', s, chain); }
  }
  return chain;
}

}  // namespace cphylo
