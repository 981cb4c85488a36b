#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "cphylo/newick.hpp"
#include "cphylo/sd_model.hpp"
#include "stats.hpp"

using namespace cphylo;

namespace {

auto make_state(const std::string& newick, double mu, double kappa, std::vector<double> xi = {},
                std::vector<int> cats = {}) -> Sd_state {
  auto s = Sd_state{};
  s.tree = parse_newick(newick);
  s.mu = mu;
  s.kappa = kappa;
  s.xi = xi.empty() ? std::vector<double>(s.tree.num_leaves(), 1.0) : std::move(xi);
  s.cats = cats.empty() ? std::vector<int>(s.tree.num_nodes(), 0) : std::move(cats);
  return s;
}

// All patterns over {absent, present, missing}^n (or {absent, present}^n)
// with at least one present entry.
auto all_patterns(int n, bool with_missing) -> std::vector<Pattern> {
  auto base = with_missing ? 3 : 2;
  auto total = 1;
  for (auto k = 0; k < n; ++k) { total *= base; }
  auto out = std::vector<Pattern>{};
  for (auto code = 0; code < total; ++code) {
    auto p = Pattern(n);
    auto c = code;
    for (auto k = 0; k < n; ++k) {
      p[k] = static_cast<std::uint8_t>(c % base);
      c /= base;
    }
    if (is_observable(p)) { out.push_back(p); }
  }
  return out;
}

auto model_with(Pattern_data data) -> Sd_model {
  auto m = Sd_model{};
  m.data = std::make_shared<const Pattern_data>(std::move(data));
  return m;
}

constexpr auto k_rel = 1e-10;

}  // namespace

TEST(Effective_length, worked_values) {
  EXPECT_EQ(effective_length(10.0, 0, 0.3, 0.2), 10.0);
  EXPECT_NEAR(effective_length(0.0, 1, 0.1, 0.05), 0.512933, 1e-6);
  EXPECT_NEAR(effective_length(5.0, 2, 2.5e-4, 1.0 / 3.0), 3248.7209, 1e-4);
  EXPECT_EQ(effective_length(1.0, 1, 0.1, 1.0), k_inf);
}

TEST(Pattern_count, two_leaf_closed_forms) {
  auto mu = 0.1;
  auto t = 7.0;
  auto s = make_state("(A:7,B:7);", mu, 0.0);
  auto e = std::exp(-mu * t);
  EXPECT_NEAR(expected_pattern_count(s, Pattern{1, 1}), e * e / mu, k_rel * e * e / mu);
  auto z10 = e * (1.0 - e) / mu + (1.0 - e) / mu;
  EXPECT_NEAR(expected_pattern_count(s, Pattern{1, 0}), z10, k_rel * z10);
  EXPECT_NEAR(expected_pattern_count(s, Pattern{0, 1}), z10, k_rel * z10);
  auto z = expected_total(s);
  EXPECT_NEAR(z, e * e / mu + 2.0 * z10, k_rel * z);
}

TEST(Pattern_count, unregistrable_present_entry_is_zero) {
  auto s = make_state("((A:1,B:1):1,C:2);", 0.2, 0.0, {1.0, 0.0, 0.6});
  EXPECT_EQ(expected_pattern_count(s, Pattern{1, 1, 0}), 0.0);
  EXPECT_EQ(expected_pattern_count(s, Pattern{1, 0, 1}), 0.0);
  EXPECT_GT(expected_pattern_count(s, Pattern{1, 2, 1}), 0.0);
}

TEST(Expected_total, zero_observation_gives_zero) {
  auto s = make_state("((A:1,B:1):1,C:2);", 0.2, 0.0, {0.0, 0.0, 0.0});
  EXPECT_EQ(expected_total(s), 0.0);
}

TEST(Expected_total, equals_brute_force_sum) {
  auto rng = Random_stream{11, 0};
  auto taxa = std::make_shared<const Taxon_names>(Taxon_names{"a", "b", "c", "d", "e"});
  for (auto rep = 0; rep < 20; ++rep) {
    auto s = Sd_state{};
    s.tree = random_tree(taxa, 1.0 + 20.0 * rng.uniform(), rng);
    s.mu = 0.01 + 0.3 * rng.uniform();
    s.kappa = 0.6 * rng.uniform();
    s.cats.assign(s.tree.num_nodes(), 0);
    for (auto i = 0; i < s.tree.num_nodes(); ++i) {
      if (i != s.tree.root()) { s.cats[i] = static_cast<int>(rng.index(3)); }
    }
    s.xi.assign(5, 1.0);
    auto z = expected_total(s);
    auto sum = 0.0;
    for (const auto& p : all_patterns(5, false)) { sum += expected_pattern_count(s, p); }
    EXPECT_NEAR(sum, z, k_rel * z);

    // With missing registrations the observable patterns include '?' entries.
    for (auto& x : s.xi) { x = rng.uniform(); }
    z = expected_total(s);
    sum = 0.0;
    for (const auto& p : all_patterns(5, true)) { sum += expected_pattern_count(s, p); }
    EXPECT_NEAR(sum, z, k_rel * z);
  }
}

TEST(Expected_total, nonincreasing_in_mu) {
  auto s = make_state("(((A:1,B:1):2,C:3):4,D:7);", 0.01, 0.0, {1.0, 0.8, 0.5, 0.9});
  auto previous = k_inf;
  for (auto mu = 0.01; mu < 5.0; mu *= 1.3) {
    s.mu = mu;
    auto z = expected_total(s);
    EXPECT_LE(z, previous * (1.0 + 1e-12));
    previous = z;
  }
}

TEST(Log_likelihood, empty_data) {
  auto m = model_with(Pattern_data{std::make_shared<const Taxon_names>(Taxon_names{"A", "B"}), {}, {}});
  auto s = make_state("(A:3,B:3);", 0.2, 0.0);
  auto z = expected_total(s);
  auto a = m.lambda_prior.shape;
  auto b = m.lambda_prior.rate;
  EXPECT_NEAR(log_likelihood(m, s), a * std::log(b / (b + z)), 1e-12);
}

TEST(Log_likelihood, matches_direct_negative_multinomial) {
  auto s = make_state("((A:1,B:1):1,C:2);", 0.3, 0.2, {1.0, 0.9, 0.7});
  s.cats[0] = 1;
  auto data = Pattern_data{s.tree.taxa(), {{1, 1, 0}, {1, 0, 2}, {0, 0, 1}}, {3, 1, 5}};
  auto m = model_with(data);
  m.lambda_prior = {2.0, 0.5};
  auto z = expected_total(s);
  auto a = 2.0;
  auto b = 0.5;
  auto expected = std::lgamma(a + 9.0) - std::lgamma(a) + a * std::log(b / (b + z));
  for (auto p = 0; p < 3; ++p) {
    expected += -std::lgamma(data.counts[p] + 1.0) +
                data.counts[p] * std::log(expected_pattern_count(s, data.patterns[p]) / (b + z));
  }
  EXPECT_NEAR(log_likelihood(m, s), expected, 1e-10 * std::abs(expected));
}

TEST(Log_likelihood, impossible_pattern_is_negative_infinity) {
  auto s = make_state("((A:1,B:1):1,C:2);", 0.3, 0.0, {1.0, 0.0, 1.0});
  auto m = model_with(Pattern_data{s.tree.taxa(), {{0, 1, 0}}, {1}});
  EXPECT_EQ(log_likelihood(m, s), k_neg_inf);
  EXPECT_EQ(log_posterior(m, s), k_neg_inf);
}

TEST(Log_likelihood, invariant_under_leaf_permutation) {
  auto s1 = make_state("((A:1,B:1):1,C:2);", 0.3, 0.2, {1.0, 0.9, 0.7});
  s1.cats[1] = 2;
  auto reversed = std::make_shared<const Taxon_names>(Taxon_names{"C", "B", "A"});
  auto s2 = s1;
  s2.tree = parse_newick("((A:1,B:1):1,C:2);", reversed);
  s2.xi = {0.7, 0.9, 1.0};
  s2.cats = s1.cats;
  s2.cats[0] = s1.cats[2];
  s2.cats[2] = s1.cats[0];
  auto d1 = Pattern_data{s1.tree.taxa(), {{1, 1, 0}, {1, 0, 2}, {0, 0, 1}}, {3, 1, 5}};
  auto d2 = Pattern_data{reversed, {{0, 1, 1}, {2, 0, 1}, {1, 0, 0}}, {3, 1, 5}};
  EXPECT_NEAR(log_likelihood(model_with(d1), s1), log_likelihood(model_with(d2), s2), 1e-10);
}

TEST(Log_likelihood, catastrophe_equals_longer_branch) {
  auto mu = 0.05;
  auto kappa = 0.3;
  auto extra = -std::log1p(-kappa) / mu;
  auto t = 20.0;
  // Leaf A sits `extra` above the present with one catastrophe, or at the
  // present with none; both give A an effective length of t.
  auto with = Sd_state{};
  auto nodes = std::vector<Node>(3);
  nodes[2].children = {0, 1};
  nodes[2].age = t;
  nodes[0].parent = nodes[1].parent = 2;
  nodes[0].age = extra;
  with.tree = Tree{std::make_shared<const Taxon_names>(Taxon_names{"A", "B"}), nodes, 2};
  with.mu = mu;
  with.kappa = kappa;
  with.xi = {1.0, 0.8};
  with.cats = {1, 0, 0};
  auto without = with;
  without.tree = parse_newick("(A:20,B:20);");
  without.cats = {0, 0, 0};
  auto data = Pattern_data{without.tree.taxa(), {{1, 1}, {1, 0}, {0, 1}, {1, 2}}, {4, 2, 3, 1}};
  auto m = model_with(data);
  auto a = log_likelihood(m, with);
  auto b = log_likelihood(m, without);
  EXPECT_NEAR(a, b, 1e-12 * std::abs(b));
}

TEST(Log_likelihood, moving_a_count_to_a_rarer_pattern_lowers_it) {
  auto s = make_state("((A:1,B:1):1,C:2);", 0.3, 0.0);
  auto zp = expected_pattern_count(s, Pattern{1, 0, 0});
  auto zq = expected_pattern_count(s, Pattern{1, 1, 1});
  ASSERT_LT(zq, zp);
  auto before = model_with(Pattern_data{s.tree.taxa(), {{1, 0, 0}, {0, 1, 0}}, {1, 2}});
  auto after = model_with(Pattern_data{s.tree.taxa(), {{1, 1, 1}, {0, 1, 0}}, {1, 2}});
  EXPECT_LT(log_likelihood(after, s), log_likelihood(before, s));
}

TEST(Log_prior, zero_catastrophes_and_bounds) {
  auto m = Sd_model{};
  m.rho_prior = {1.5, 5000.0};
  auto s = make_state("((A:1,B:1):1,C:2);", 0.3, 0.1);
  auto delta = s.tree.total_length();
  EXPECT_NEAR(log_prior(m, s), 1.5 * std::log(5000.0 / (5000.0 + delta)), 1e-14);
  m.root_age_bound = 1.9;
  EXPECT_EQ(log_prior(m, s), k_neg_inf);
  m.root_age_bound = k_inf;
  s.cats[s.tree.root()] = 1;
  EXPECT_EQ(log_prior(m, s), k_neg_inf);
  s.cats[s.tree.root()] = 0;
  s.xi[1] = 1.2;
  EXPECT_EQ(log_prior(m, s), k_neg_inf);
}

TEST(Log_prior, constraints) {
  auto m = Sd_model{};
  auto s = make_state("((A:1,B:1):1,C:2);", 0.3, 0.1);
  auto ab = Leaf_set{3};
  ab.set(0);
  ab.set(1);
  m.constraints.push_back({ab, 0.5, 1.5});
  EXPECT_GT(log_prior(m, s), k_neg_inf);
  m.constraints[0].lo = 1.2;
  EXPECT_EQ(log_prior(m, s), k_neg_inf);
  auto ac = Leaf_set{3};
  ac.set(0);
  ac.set(2);
  m.constraints = {{ac, std::nullopt, std::nullopt}};
  EXPECT_EQ(log_prior(m, s), k_neg_inf);
}

TEST(Log_prior, catastrophe_prior_normalises) {
  auto m = Sd_model{};
  m.rho_prior = {2.0, 5.0};
  auto tree = parse_newick("(A:0.7,B:0.7);");
  auto total = 0.0;
  for (auto a = 0; a <= 10; ++a) {
    for (auto b = 0; b <= 10; ++b) { total += std::exp(log_catastrophe_prior(m, tree, {a, b, 0})); }
  }
  EXPECT_NEAR(total, 1.0, 1e-8);
}

TEST(Log_prior, catastrophe_marginal_matches_gamma_poisson) {
  auto m = Sd_model{};
  m.rho_prior = {1.5, 2.0};
  auto tree = parse_newick("((A:1,B:1):0.5,C:1.5);");
  auto branches = std::vector<Node_index>{};
  for (auto i = 0; i < tree.num_nodes(); ++i) {
    if (i != tree.root()) { branches.push_back(i); }
  }
  ASSERT_EQ(branches.size(), 4u);
  constexpr auto k_max = 12;
  // Marginal pmf of the count on the first branch by enumeration of the joint.
  auto marginal = std::vector<double>(k_max + 1, 0.0);
  auto cats = std::vector<int>(tree.num_nodes(), 0);
  for (auto c0 = 0; c0 <= k_max; ++c0) {
    for (auto c1 = 0; c1 <= k_max; ++c1) {
      for (auto c2 = 0; c2 <= k_max; ++c2) {
        for (auto c3 = 0; c3 <= k_max; ++c3) {
          cats[branches[0]] = c0;
          cats[branches[1]] = c1;
          cats[branches[2]] = c2;
          cats[branches[3]] = c3;
          marginal[c0] += std::exp(log_catastrophe_prior(m, tree, cats));
        }
      }
    }
  }
  auto rng = Random_stream{12, 0};
  auto observed = std::vector<double>(k_max + 1, 0.0);
  constexpr auto k_draws = 20000;
  for (auto k = 0; k < k_draws; ++k) {
    auto rho = std::gamma_distribution<double>{1.5, 1.0 / 2.0}(rng);
    auto n = sample_poisson(rho * tree.branch_length(branches[0]), rng);
    observed[std::min(n, k_max)] += 1.0;
  }
  auto mass = 0.0;
  for (auto v : marginal) { mass += v; }
  for (auto& v : marginal) { v /= mass; }
  EXPECT_GT(stats::chi_squared_gof(observed, marginal).p_value, 1e-3);
}

TEST(Conditional_count_law, matches_ratio_of_joint) {
  auto m = Sd_model{};
  m.rho_prior = {1.5, 3.0};
  auto tree = parse_newick("((A:1,B:1):0.5,C:1.5);");
  auto cats = std::vector<int>{1, 0, 2, 0, 0};
  auto law = conditional_count_law(m, tree, cats, 2);
  auto normaliser = 0.0;
  auto joint = std::vector<double>{};
  for (auto k = 0; k < 200; ++k) {
    cats[2] = k;
    joint.push_back(std::exp(log_catastrophe_prior(m, tree, cats)));
    normaliser += joint.back();
  }
  for (auto k = 0; k < 10; ++k) { EXPECT_NEAR(pmf(law, k), joint[k] / normaliser, 1e-12); }
}

TEST(Simulate, no_births_gives_empty_data) {
  auto rng = Random_stream{13, 0};
  auto tree = parse_newick("((A:1,B:1):1,C:2);");
  auto data = simulate(tree, 0.0, 0.1, 0.0, std::vector<int>(5, 0), {1.0, 1.0, 1.0}, rng);
  EXPECT_EQ(data.num_patterns(), 0);
}

TEST(Simulate, total_count_matches_expected_total) {
  auto rng = Random_stream{14, 0};
  auto s = make_state("(A:6,B:6);", 0.2, 0.0, {0.9, 0.6});
  auto lambda = 3.0;
  auto mean = lambda * expected_total(s);
  constexpr auto k_reps = 10000;
  auto sum = 0.0;
  for (auto r = 0; r < k_reps; ++r) {
    sum += static_cast<double>(simulate(s.tree, lambda, s.mu, s.kappa, s.cats, s.xi, rng).total());
  }
  // The observed total is Poisson(lambda Z).
  auto se = std::sqrt(mean / k_reps);
  EXPECT_NEAR(sum / k_reps, mean, 3.0 * se);
}

TEST(Simulate, pattern_counts_match_recursion) {
  auto rng = Random_stream{15, 0};
  auto s = make_state("((A:2,B:2):3,C:5);", 0.15, 0.4, {1.0, 0.7, 0.85});
  s.cats[0] = 1;
  s.cats[3] = 2;
  auto lambda = 1.5;
  constexpr auto k_reps = 20000;
  auto sums = std::map<Pattern, double>{};
  for (auto r = 0; r < k_reps; ++r) {
    auto data = simulate(s.tree, lambda, s.mu, s.kappa, s.cats, s.xi, rng);
    for (auto p = 0; p < data.num_patterns(); ++p) { sums[data.patterns[p]] += data.counts[p]; }
  }
  for (const auto& p : all_patterns(3, true)) {
    auto expected = lambda * expected_pattern_count(s, p);
    auto se = std::sqrt(expected / k_reps);
    auto observed = sums.count(p) ? sums[p] / k_reps : 0.0;
    EXPECT_NEAR(observed, expected, 4.0 * se + 1e-12) << int(p[0]) << int(p[1]) << int(p[2]);
  }
}

TEST(Simulate, inert_catastrophes) {
  auto tree = parse_newick("((A:2,B:2):3,C:5);");
  auto with = std::vector<int>{2, 1, 0, 3, 0};
  auto none = std::vector<int>(5, 0);
  auto xi = std::vector<double>{1.0, 1.0, 1.0};
  auto rng_a = Random_stream{16, 0};
  auto rng_b = Random_stream{16, 1};
  auto totals_a = std::vector<int>{};
  auto totals_b = std::vector<int>{};
  auto shared_a = std::vector<int>{};
  auto shared_b = std::vector<int>{};
  for (auto r = 0; r < 5000; ++r) {
    auto a = simulate(tree, 1.0, 0.2, 0.0, with, xi, rng_a);
    auto b = simulate(tree, 1.0, 0.2, 0.0, none, xi, rng_b);
    totals_a.push_back(static_cast<int>(a.total()));
    totals_b.push_back(static_cast<int>(b.total()));
    auto count_all = [](const Pattern_data& d) {
      for (auto p = 0; p < d.num_patterns(); ++p) {
        if (d.patterns[p] == Pattern{1, 1, 1}) { return d.counts[p]; }
      }
      return 0;
    };
    shared_a.push_back(count_all(a));
    shared_b.push_back(count_all(b));
  }
  EXPECT_GT(stats::chi_squared_two_sample(totals_a, totals_b).p_value, 1e-3);
  EXPECT_GT(stats::chi_squared_two_sample(shared_a, shared_b).p_value, 1e-3);
}

TEST(Simulate, missingness_moments) {
  auto rng = Random_stream{17, 0};
  auto xi = simulate_missingness(100000, 1.0, 1.0 / 3.0, rng);
  auto sum = 0.0;
  auto sq = 0.0;
  for (auto x : xi) {
    ASSERT_GE(x, 0.0);
    ASSERT_LE(x, 1.0);
    sum += x;
    sq += x * x;
  }
  auto n = static_cast<double>(xi.size());
  // Beta(1, 1/3): mean 3/4, variance ab / ((a+b)^2 (a+b+1)) = 9/112.
  EXPECT_NEAR(sum / n, 0.75, 3.0 * std::sqrt(9.0 / 112.0 / n));
  EXPECT_NEAR(sq / n - (sum / n) * (sum / n), 9.0 / 112.0, 0.005);
}

TEST(Pattern_io, round_trip) {
  auto taxa = std::make_shared<const Taxon_names>(Taxon_names{"A", "B", "C"});
  auto data = Pattern_data{taxa, {{0, 1, 2}, {1, 1, 0}}, {2, 1}};
  auto out = std::ostringstream{};
  write_patterns(out, data);
  auto in = std::istringstream{"# comment\n" + out.str()};
  auto back = read_patterns(in);
  EXPECT_EQ(*back.taxa, *taxa);
  EXPECT_EQ(back.patterns, data.patterns);
  EXPECT_EQ(back.counts, data.counts);
}

TEST(Pattern_io, errors_name_the_line) {
  auto in = std::istringstream{"A\tB\n1\t0\n1\tx\n"};
  try {
    read_patterns(in);
    FAIL();
  } catch (const Data_error& e) {
    EXPECT_NE(std::string{e.what()}.find("line 3"), std::string::npos);
  }
  auto short_row = std::istringstream{"A\tB\n1\n"};
  EXPECT_THROW(read_patterns(short_row), Data_error);
}

TEST(Pattern_io, unobservable_columns_are_dropped) {
  auto in = std::istringstream{"A\tB\n0\t0\n?\t0\n1\t?\n"};
  auto data = read_patterns(in);
  EXPECT_EQ(data.total(), 1);
}
