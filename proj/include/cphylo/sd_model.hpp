#pragma once

// Stochastic Dollo trait model: pattern data, the pruning recursion for
// expected pattern counts, the Negative Multinomial likelihood (birth rate
// integrated out), priors, and an exact forward simulator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "couplers.hpp"
#include "random_stream.hpp"
#include "tree.hpp"

namespace cphylo {

inline constexpr double k_neg_inf = -std::numeric_limits<double>::infinity();
inline constexpr double k_inf = std::numeric_limits<double>::infinity();

// --- Pattern data ---------------------------------------------------------

enum Registration : std::uint8_t { k_absent = 0, k_present = 1, k_missing = 2 };

using Pattern = std::vector<std::uint8_t>;

class Data_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Pattern_data {
  std::shared_ptr<const Taxon_names> taxa;
  std::vector<Pattern> patterns;
  std::vector<int> counts;

  auto num_patterns() const -> int { return static_cast<int>(patterns.size()); }
  auto total() const -> long {
    auto n = 0L;
    for (auto c : counts) { n += c; }
    return n;
  }
};

inline auto is_observable(const Pattern& p) -> bool {
  return std::find(p.begin(), p.end(), k_present) != p.end();
}

// Aggregates trait columns into distinct observable patterns (sorted, so the
// result does not depend on column order).  Unobservable columns are dropped.
inline auto aggregate_patterns(std::shared_ptr<const Taxon_names> taxa, const std::vector<Pattern>& columns)
    -> Pattern_data {
  auto tally = std::map<Pattern, int>{};
  for (const auto& col : columns) {
    if (col.size() != taxa->size()) { throw Data_error{"pattern width does not match taxon count"}; }
    if (is_observable(col)) { ++tally[col]; }
  }
  auto out = Pattern_data{std::move(taxa), {}, {}};
  for (auto& [p, c] : tally) {
    out.patterns.push_back(p);
    out.counts.push_back(c);
  }
  return out;
}

inline auto registration_symbol(std::uint8_t r) -> char { return r == k_present ? '1' : r == k_absent ? '0' : '?'; }

// Header row of taxon names, then one row per trait; tab separated.
inline auto write_patterns(std::ostream& out, const Pattern_data& data) -> void {
  for (auto k = std::size_t{0}; k < data.taxa->size(); ++k) { out << (k ? "\t" : "") << (*data.taxa)[k]; }
  out << '\n';
  for (auto p = 0; p < data.num_patterns(); ++p) {
    for (auto rep = 0; rep < data.counts[p]; ++rep) {
      for (auto k = std::size_t{0}; k < data.patterns[p].size(); ++k) {
        out << (k ? "\t" : "") << registration_symbol(data.patterns[p][k]);
      }
      out << '\n';
    }
  }
}

// Lines starting with '#' and blank lines are ignored.
inline auto read_patterns(std::istream& in) -> Pattern_data {
  auto line = std::string{};
  auto line_no = 0;
  auto taxa = std::shared_ptr<Taxon_names>{};
  auto columns = std::vector<Pattern>{};
  auto split_tabs = [](const std::string& s) {
    auto fields = std::vector<std::string>{};
    auto ss = std::istringstream{s};
    auto f = std::string{};
    while (std::getline(ss, f, '\t')) {
      while (!f.empty() && (f.back() == '\r' || f.back() == ' ')) { f.pop_back(); }
      fields.push_back(f);
    }
    return fields;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#' || line == "\r") { continue; }
    auto fields = split_tabs(line);
    if (!taxa) {
      taxa = std::make_shared<Taxon_names>(fields);
      if (taxa->size() < 2) { throw Data_error{"line " + std::to_string(line_no) + ": need at least two taxa"}; }
      continue;
    }
    if (fields.size() != taxa->size()) {
      throw Data_error{"line " + std::to_string(line_no) + ": expected " + std::to_string(taxa->size()) +
                       " fields, found " + std::to_string(fields.size())};
    }
    auto col = Pattern(fields.size());
    for (auto k = std::size_t{0}; k < fields.size(); ++k) {
      if (fields[k] == "1") {
        col[k] = k_present;
      } else if (fields[k] == "0") {
        col[k] = k_absent;
      } else if (fields[k] == "?") {
        col[k] = k_missing;
      } else {
        throw Data_error{"line " + std::to_string(line_no) + ": bad symbol '" + fields[k] + "'"};
      }
    }
    columns.push_back(std::move(col));
  }
  if (!taxa) { throw Data_error{"pattern file has no header row"}; }
  return aggregate_patterns(std::move(taxa), columns);
}

// --- Model and state ------------------------------------------------------

// Gamma(shape, rate).
struct Gamma_prior {
  double shape;
  double rate;
};

struct Clade_constraint {
  Leaf_set leaves;
  std::optional<double> lo;
  std::optional<double> hi;
};

struct Sd_model {
  std::shared_ptr<const Pattern_data> data;  // null: prior only
  bool use_likelihood = true;

  Gamma_prior lambda_prior{1e-3, 1e-3};
  Gamma_prior rho_prior{1.5, 5000.0};
  double root_age_bound = k_inf;

  Interval mu_bounds{0.0, k_inf};
  Interval kappa_bounds{0.0, 1.0};
  bool mu_fixed = false;
  bool kappa_fixed = false;
  bool xi_fixed = false;
  bool catastrophes = true;

  std::vector<Clade_constraint> constraints;
  std::vector<Interval> leaf_ranges;  // empty: leaf ages fixed
};

struct Sd_state {
  Tree tree;
  double mu = 1e-3;
  double kappa = 0.0;
  std::vector<double> xi;  // per leaf
  std::vector<int> cats;   // per node, catastrophes on the branch above it

  auto total_cats() const -> int {
    auto n = 0;
    for (auto c : cats) { n += c; }
    return n;
  }
};

// Exact equality up to internal labels: same clades, ages, scalars and
// per-branch counts.
inline auto states_equal(const Sd_state& x, const Sd_state& y) -> bool {
  if (x.mu != y.mu || x.kappa != y.kappa || x.xi != y.xi) { return false; }
  if (!tree_equal(x.tree, y.tree)) { return false; }
  for (auto i = 0; i < x.tree.num_leaves(); ++i) {
    if (x.cats[i] != y.cats[i]) { return false; }
  }
  auto cy = clades(y.tree);
  for (const auto& [set, ix] : clades(x.tree)) {
    if (x.cats[ix] != y.cats[cy.at(set)]) { return false; }
  }
  return true;
}

// Relabels y's tree and catastrophe counts to agree with x on common clades.
inline auto housekeeping(const Sd_state& x, const Sd_state& y) -> Sd_state {
  auto new_index = housekeeping_relabeling(x.tree, y.tree);
  auto out = y;
  out.tree = relabel(y.tree, new_index);
  for (auto i = 0; i < y.tree.num_nodes(); ++i) { out.cats[new_index[i]] = y.cats[i]; }
  return out;
}

// --- Likelihood -----------------------------------------------------------

inline auto effective_length(double delta, int n_cat, double mu, double kappa) -> double {
  if (n_cat == 0) { return delta; }
  if (kappa >= 1.0) { return k_inf; }
  return delta + n_cat * (-std::log1p(-kappa) / mu);
}

struct Branch_factors {
  std::vector<double> length;        // effective length L_i
  std::vector<double> survival;      // exp(-mu L_i)
  std::vector<double> death;         // 1 - exp(-mu L_i)
};

inline auto branch_factors(const Sd_state& s) -> Branch_factors {
  auto n = s.tree.num_nodes();
  auto out = Branch_factors{std::vector<double>(n, 0.0), std::vector<double>(n, 1.0), std::vector<double>(n, 0.0)};
  for (auto i = 0; i < n; ++i) {
    if (i == s.tree.root()) { continue; }
    auto len = effective_length(s.tree.branch_length(i), s.cats[i], s.mu, s.kappa);
    out.length[i] = len;
    out.survival[i] = std::exp(-s.mu * len);
    out.death[i] = -std::expm1(-s.mu * len);
  }
  return out;
}

namespace detail {

inline auto pattern_count(const Sd_state& s, const Branch_factors& bf, std::span<const std::uint8_t> pattern,
                          std::span<const Node_index> post_order, std::vector<double>& u, std::vector<double>& d,
                          std::vector<double>& outside) -> double {
  const auto& tree = s.tree;
  for (auto i : post_order) {
    if (tree.is_leaf(i)) {
      auto xi = s.xi[i];
      switch (pattern[i]) {
        case k_present: u[i] = xi; d[i] = 0.0; break;
        case k_absent: u[i] = 0.0; d[i] = xi; break;
        default: u[i] = d[i] = 1.0 - xi; break;
      }
    } else {
      auto prod = 1.0;
      for (auto c : tree.children(i)) { prod *= bf.survival[c] * u[c] + bf.death[c] * d[c]; }
      u[i] = prod;
      d[i] = d[tree.children(i)[0]] * d[tree.children(i)[1]];
    }
  }
  auto r = tree.root();
  outside[r] = 1.0;
  auto z = u[r] / s.mu;
  for (auto it = post_order.rbegin(); it != post_order.rend(); ++it) {
    auto i = *it;
    if (i != r) {
      z += outside[i] * ((u[i] - d[i]) * bf.death[i] / s.mu + d[i] * bf.length[i]);
    }
    if (!tree.is_leaf(i)) {
      auto [a, b] = tree.children(i);
      outside[a] = outside[i] * d[b];
      outside[b] = outside[i] * d[a];
    }
  }
  return z;
}

}  // namespace detail

// Expected count of `pattern` at unit birth rate.
inline auto expected_pattern_count(const Sd_state& s, std::span<const std::uint8_t> pattern) -> double {
  auto n = static_cast<std::size_t>(s.tree.num_nodes());
  auto u = std::vector<double>(n), d = std::vector<double>(n), o = std::vector<double>(n);
  auto order = s.tree.post_order();
  return detail::pattern_count(s, branch_factors(s), pattern, order, u, d, o);
}

// Expected number of observable traits at unit birth rate.
inline auto expected_total(const Sd_state& s, const Branch_factors& bf) -> double {
  const auto& tree = s.tree;
  auto v = std::vector<double>(tree.num_nodes());
  auto z = 0.0;
  for (auto i : tree.post_order()) {
    if (tree.is_leaf(i)) {
      v[i] = 1.0 - s.xi[i];
    } else {
      auto prod = 1.0;
      for (auto c : tree.children(i)) { prod *= bf.survival[c] * v[c] + bf.death[c]; }
      v[i] = prod;
    }
    if (i != tree.root()) { z += (1.0 - v[i]) * bf.death[i] / s.mu; }
  }
  return z + (1.0 - v[tree.root()]) / s.mu;
}

inline auto expected_total(const Sd_state& s) -> double { return expected_total(s, branch_factors(s)); }

// Negative Multinomial log mass of the pattern counts, birth rate integrated
// against its Gamma prior.  Returns -inf when an observed pattern is
// impossible.
inline auto log_likelihood(const Sd_model& model, const Sd_state& s) -> double {
  if (!model.use_likelihood || !model.data) { return 0.0; }
  const auto& data = *model.data;
  auto bf = branch_factors(s);
  auto n = static_cast<std::size_t>(s.tree.num_nodes());
  auto u = std::vector<double>(n), d = std::vector<double>(n), o = std::vector<double>(n);
  auto order = s.tree.post_order();
  auto a = model.lambda_prior.shape;
  auto b = model.lambda_prior.rate;
  auto z_total = expected_total(s, bf);
  auto log_denom = std::log(b + z_total);
  auto total = 0.0;
  auto result = a * (std::log(b) - log_denom);
  for (auto p = 0; p < data.num_patterns(); ++p) {
    auto z = detail::pattern_count(s, bf, data.patterns[p], order, u, d, o);
    if (!(z > 0.0)) { return k_neg_inf; }
    auto np = static_cast<double>(data.counts[p]);
    total += np;
    result += np * (std::log(z) - log_denom) - std::lgamma(np + 1.0);
  }
  result += std::lgamma(a + total) - std::lgamma(a);
  return result;
}

// --- Priors ---------------------------------------------------------------

// Conditional prior of the count on branch i given the other counts, with the
// catastrophe rate integrated out.
inline auto conditional_count_law(const Sd_model& model, const Tree& tree, const std::vector<int>& cats,
                                  Node_index i) -> Neg_binomial_law {
  auto others = 0;
  for (auto k = 0; k < static_cast<int>(cats.size()); ++k) {
    if (k != i) { others += cats[k]; }
  }
  auto total_length = tree.total_length();
  return {model.rho_prior.shape + others, tree.branch_length(i) / (model.rho_prior.rate + total_length)};
}

inline auto log_catastrophe_prior(const Sd_model& model, const Tree& tree, const std::vector<int>& cats) -> double {
  auto a = model.rho_prior.shape;
  auto b = model.rho_prior.rate;
  auto total_length = tree.total_length();
  auto log_denom = std::log(b + total_length);
  auto n = 0;
  auto result = a * (std::log(b) - log_denom);
  for (auto i = 0; i < tree.num_nodes(); ++i) {
    if (cats[i] == 0) { continue; }
    if (i == tree.root() || cats[i] < 0) { return k_neg_inf; }
    n += cats[i];
    result += cats[i] * (std::log(tree.branch_length(i)) - log_denom) - std::lgamma(cats[i] + 1.0);
  }
  return result + std::lgamma(a + n) - std::lgamma(a);
}

inline auto satisfies_constraints(const Sd_model& model, const Tree& tree) -> bool {
  if (model.constraints.empty()) { return true; }
  auto sets = leaf_sets(tree);
  for (const auto& c : model.constraints) {
    auto it = std::find(sets.begin(), sets.end(), c.leaves);
    if (it == sets.end()) { return false; }
    auto age = tree.age(static_cast<Node_index>(it - sets.begin()));
    if ((c.lo && age < *c.lo) || (c.hi && age > *c.hi)) { return false; }
  }
  return true;
}

inline auto log_prior(const Sd_model& model, const Sd_state& s) -> double {
  const auto& tree = s.tree;
  if (tree.age(tree.root()) > model.root_age_bound) { return k_neg_inf; }
  if (!satisfies_constraints(model, tree)) { return k_neg_inf; }
  if (!model.leaf_ranges.empty()) {
    for (auto i = 0; i < tree.num_leaves(); ++i) {
      if (tree.age(i) < model.leaf_ranges[i].lo || tree.age(i) > model.leaf_ranges[i].hi) { return k_neg_inf; }
    }
  }
  if (!(s.mu > model.mu_bounds.lo && s.mu < model.mu_bounds.hi)) { return k_neg_inf; }
  if (!(s.kappa >= model.kappa_bounds.lo && s.kappa <= model.kappa_bounds.hi && s.kappa < 1.0)) {
    return k_neg_inf;
  }
  for (auto xi : s.xi) {
    if (!(xi >= 0.0 && xi <= 1.0)) { return k_neg_inf; }
  }
  if (!model.catastrophes) { return s.total_cats() == 0 ? 0.0 : k_neg_inf; }
  return log_catastrophe_prior(model, tree, s.cats);
}

inline auto log_posterior(const Sd_model& model, const Sd_state& s) -> double {
  auto lp = log_prior(model, s);
  if (lp == k_neg_inf) { return lp; }
  return lp + log_likelihood(model, s);
}

// --- Forward simulation ---------------------------------------------------

namespace detail {

// Evolves the traits present at the top of branch `i` down to node i.
// Catastrophes sit at uniform positions; each kills a present trait with
// probability kappa and adds Poisson(lambda kappa / mu) fresh traits.
inline auto evolve_branch(std::vector<long> traits, double length, int n_cat, double lambda, double mu,
                          double kappa, long& next_id, Random_stream& rng) -> std::vector<long> {
  auto events = std::vector<double>{};
  for (auto k = 0; k < n_cat; ++k) { events.push_back(rng.uniform(0.0, length)); }
  std::sort(events.begin(), events.end());
  events.push_back(length);
  auto t = 0.0;
  for (auto k = std::size_t{0}; k < events.size(); ++k) {
    auto seg = events[k] - t;
    auto keep_prob = std::exp(-mu * seg);
    auto kept = std::vector<long>{};
    for (auto id : traits) {
      if (rng.uniform() < keep_prob) { kept.push_back(id); }
    }
    auto births = sample_poisson(lambda * seg, rng);
    for (auto b = 0; b < births; ++b) {
      auto born_at = rng.uniform(0.0, seg);
      if (rng.uniform() < std::exp(-mu * (seg - born_at))) { kept.push_back(next_id++); }
    }
    traits = std::move(kept);
    t = events[k];
    if (k + 1 < events.size()) {
      auto survivors = std::vector<long>{};
      for (auto id : traits) {
        if (rng.uniform() >= kappa) { survivors.push_back(id); }
      }
      auto fresh = sample_poisson(lambda * kappa / mu, rng);
      for (auto b = 0; b < fresh; ++b) { survivors.push_back(next_id++); }
      traits = std::move(survivors);
    }
  }
  return traits;
}

}  // namespace detail

// Trait columns (one Pattern per trait, registration applied) before
// aggregation; unobservable columns included.
inline auto simulate_columns(const Tree& tree, double lambda, double mu, double kappa, const std::vector<int>& cats,
                             const std::vector<double>& xi, Random_stream& rng) -> std::vector<Pattern> {
  auto n = tree.num_leaves();
  auto at_node = std::vector<std::vector<long>>(tree.num_nodes());
  auto next_id = 0L;
  if (lambda > 0.0) {
    auto root_traits = sample_poisson(lambda / mu, rng);
    for (auto k = 0; k < root_traits; ++k) { at_node[tree.root()].push_back(next_id++); }
  }
  auto order = tree.post_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto i = *it;
    if (tree.is_leaf(i)) { continue; }
    for (auto c : tree.children(i)) {
      at_node[c] = detail::evolve_branch(at_node[i], tree.branch_length(c), cats[c], lambda, mu, kappa, next_id, rng);
    }
  }
  auto columns = std::vector<Pattern>(static_cast<std::size_t>(next_id), Pattern(n, k_absent));
  for (auto leaf = 0; leaf < n; ++leaf) {
    for (auto id : at_node[leaf]) { columns[id][leaf] = k_present; }
  }
  for (auto& col : columns) {
    for (auto leaf = 0; leaf < n; ++leaf) {
      if (rng.uniform() >= xi[leaf]) { col[leaf] = k_missing; }
    }
  }
  return columns;
}

inline auto simulate(const Tree& tree, double lambda, double mu, double kappa, const std::vector<int>& cats,
                     const std::vector<double>& xi, Random_stream& rng) -> Pattern_data {
  return aggregate_patterns(tree.taxa(), simulate_columns(tree, lambda, mu, kappa, cats, xi, rng));
}

// I.i.d. Beta(alpha, beta) observation probabilities via two Gamma draws.
inline auto simulate_missingness(int n_leaves, double alpha, double beta, Random_stream& rng) -> std::vector<double> {
  auto out = std::vector<double>(n_leaves);
  for (auto& x : out) {
    auto g1 = std::gamma_distribution<double>{alpha, 1.0}(rng);
    auto g2 = std::gamma_distribution<double>{beta, 1.0}(rng);
    x = g1 + g2 > 0.0 ? g1 / (g1 + g2) : 1.0;
  }
  return out;
}

}  // namespace cphylo
