#include <gtest/gtest.h>

#include <cmath>

#include "cphylo/diagnostics.hpp"
#include "cphylo/newick.hpp"

using namespace cphylo;

namespace {

auto taus_of(std::vector<long> values) -> std::vector<Meeting_time> {
  auto out = std::vector<Meeting_time>{};
  for (auto v : values) { out.push_back({v, false}); }
  return out;
}

auto split_of(int n, std::initializer_list<int> leaves) -> Split {
  auto s = Leaf_set{n};
  for (auto l : leaves) { s.set(l); }
  return canonical_split(s);
}

}  // namespace

TEST(Tv_bound, worked_examples) {
  constexpr long l = 10;
  EXPECT_EQ(tv_bound(std::vector<long>{l + 1, 2 * l + 1, 4 * l}, l, 0), 2.0);
  EXPECT_EQ(tv_bound(std::vector<long>{3 * l}, l, 0), 2.0);
  EXPECT_EQ(tv_bound(std::vector<long>{3 * l}, l, 10), 1.0);
  EXPECT_EQ(tv_bound(std::vector<long>{3 * l}, l, 20), 0.0);
  EXPECT_EQ(tv_bound(std::vector<long>{l}, l, 0), 0.0);
}

TEST(Tv_bound, nonincreasing_in_s_and_rejects_bad_input) {
  auto taus = taus_of({12, 57, 230, 91, 400, 13});
  auto previous = tv_bound(taus, 10, 0);
  for (auto s = 1L; s < 500; ++s) {
    auto b = tv_bound(taus, 10, s);
    EXPECT_LE(b, previous);
    previous = b;
  }
  EXPECT_EQ(previous, 0.0);
  EXPECT_THROW(tv_bound(std::vector<Meeting_time>{}, 10, 0), std::invalid_argument);
  EXPECT_THROW(tv_bound(taus, 0, 0), std::invalid_argument);
  EXPECT_THROW(tv_bound(taus_of({5}), 10, 0), std::invalid_argument);
}

TEST(Tv_curve, grid_ends_at_largest_excess) {
  auto curve = tv_curve(taus_of({15, 47}), 10, 10);
  EXPECT_EQ(curve.s, (std::vector<long>{0, 10, 20, 30, 37}));
  EXPECT_EQ(curve.bound.front(), 2.5);
  EXPECT_EQ(curve.bound.back(), 0.0);
  EXPECT_FALSE(curve.censored);
  auto censored = taus_of({15, 47});
  censored[1].censored = true;
  EXPECT_TRUE(tv_curve(censored, 10, 10).censored);
}

TEST(Tv_curve, bootstrap_band_brackets_the_estimate) {
  auto rng = Random_stream{1, 0};
  auto taus = std::vector<Meeting_time>{};
  for (auto k = 0; k < 60; ++k) { taus.push_back({10 + static_cast<long>(rng.exponential(0.02)), false}); }
  auto curve = tv_curve(taus, 10, 25);
  add_bootstrap_band(curve, taus, 400, 0.9, rng);
  ASSERT_EQ(curve.lower.size(), curve.s.size());
  for (auto k = std::size_t{0}; k < curve.s.size(); ++k) {
    EXPECT_LE(curve.lower[k], curve.bound[k] + 1e-12);
    EXPECT_GE(curve.upper[k], curve.bound[k] - 1e-12);
  }
}

TEST(Ecdf_survival, step_values) {
  auto curve = ecdf_survival(taus_of({10, 12, 12, 15}), 10);
  ASSERT_EQ(curve.size(), 3u);
  EXPECT_EQ(curve[0].s, 0);
  EXPECT_EQ(curve[0].survival, 0.75);
  EXPECT_EQ(curve[1].s, 2);
  EXPECT_EQ(curve[1].survival, 0.25);
  EXPECT_EQ(curve[2].s, 5);
  EXPECT_EQ(curve[2].survival, 0.0);
}

TEST(Geometric_tail_fit, recovers_the_rate) {
  auto rng = Random_stream{2, 0};
  constexpr auto k_rate = 0.01;
  auto taus = std::vector<Meeting_time>{};
  for (auto k = 0; k < 20000; ++k) {
    taus.push_back({100 + static_cast<long>(std::floor(rng.exponential(k_rate))), false});
  }
  auto fit = geometric_tail_fit(ecdf_survival(taus, 100));
  EXPECT_GT(fit.r_squared, 0.95);
  // floor of an exponential is geometric with log survival slope -rate.
  EXPECT_NEAR(fit.slope, -k_rate, 0.15 * k_rate);
}

TEST(Fit_line, exact_line) {
  auto fit = fit_line({0.0, 1.0, 2.0, 3.0}, {1.0, 3.0, 5.0, 7.0});
  EXPECT_NEAR(fit.slope, 2.0, 1e-14);
  EXPECT_NEAR(fit.intercept, 1.0, 1e-14);
  EXPECT_NEAR(fit.r_squared, 1.0, 1e-14);
}

TEST(Asdsf, worked_example) {
  auto s = split_of(4, {0, 1});
  auto f = std::vector<std::map<Split, double>>{{{s, 0.2}}, {{s, 0.4}}};
  auto p = asdsf_from_frequencies(f);
  EXPECT_NEAR(p.value, 0.141421, 1e-6);
  EXPECT_EQ(p.num_splits, 1);
}

TEST(Asdsf, low_frequency_splits_are_ignored) {
  auto s = split_of(5, {0, 1});
  auto rare = split_of(5, {2, 3});
  auto base = std::vector<std::map<Split, double>>{{{s, 0.2}}, {{s, 0.4}}};
  auto with_rare = std::vector<std::map<Split, double>>{{{s, 0.2}, {rare, 0.05}}, {{s, 0.4}, {rare, 0.1}}};
  EXPECT_EQ(asdsf_from_frequencies(base).value, asdsf_from_frequencies(with_rare).value);
  auto none = std::vector<std::map<Split, double>>{{{rare, 0.05}}, {{rare, 0.01}}};
  EXPECT_TRUE(asdsf_from_frequencies(none).no_splits);
  EXPECT_THROW(asdsf_from_frequencies({base[0]}), std::invalid_argument);
}

TEST(Asdsf, identical_chains_give_zero) {
  auto a = parse_newick("(((A:1,B:1):1,C:2):1,(D:1,E:1):2);");
  auto b = parse_newick("(((A:1,C:1):1,B:2):1,(D:1,E:1):2);", a.taxa());
  auto chain = std::vector<std::set<Split>>{};
  for (auto k = 0; k < 40; ++k) { chain.push_back(splits(k % 3 == 0 ? a : b)); }
  auto points = asdsf({chain, chain, chain}, Window_rule::trailing_75, 10);
  ASSERT_EQ(points.size(), 4u);
  for (const auto& p : points) { EXPECT_EQ(p.value, 0.0); }
  EXPECT_EQ(points.back().window_end, 40);
}

TEST(Asdsf, windows) {
  auto a = parse_newick("(((A:1,B:1):1,C:2):1,(D:1,E:1):2);");
  auto b = parse_newick("(((A:1,C:1):1,B:2):1,(D:1,E:1):2);", a.taxa());
  auto ab = split_of(5, {0, 1});
  auto x = std::vector<std::set<Split>>{};
  auto y = std::vector<std::set<Split>>{};
  for (auto k = 0; k < 8; ++k) {
    x.push_back(splits(a));
    y.push_back(splits(k < 4 ? a : b));
  }
  // Disjoint blocks of four: the first agrees, the second differs completely.
  auto blocks = asdsf({x, y}, Window_rule::disjoint, 4);
  ASSERT_EQ(blocks.size(), 2u);
  EXPECT_EQ(blocks[0].value, 0.0);
  EXPECT_GT(blocks[1].value, 0.0);
  // The trailing window at 8 uses samples 2..7: {A,B} has frequencies 1 and 1/3.
  auto trailing = asdsf({x, y}, Window_rule::trailing_75, 8);
  ASSERT_EQ(trailing.size(), 1u);
  auto ac = split_of(5, {0, 2});
  auto de = split_of(5, {3, 4});
  auto expected = asdsf_from_frequencies({{{ab, 1.0}, {de, 1.0}}, {{ab, 2.0 / 6.0}, {ac, 4.0 / 6.0}, {de, 1.0}}});
  EXPECT_NEAR(trailing[0].value, expected.value, 1e-15);
}

TEST(Curves_agree, same_distribution_agrees_and_shift_disagrees) {
  auto rng = Random_stream{3, 0};
  auto draw = [&](long lag, double extra) {
    auto out = std::vector<Meeting_time>{};
    for (auto k = 0; k < 400; ++k) {
      out.push_back({lag + static_cast<long>(rng.exponential(1.0 / 200.0) + extra), false});
    }
    return out;
  };
  auto [ok, gap] = curves_agree(draw(100, 0.0), 100, draw(100, 0.0), 100, 25);
  EXPECT_TRUE(ok);
  EXPECT_GE(gap, 0.0);
  auto [bad, big_gap] = curves_agree(draw(100, 0.0), 100, draw(100, 600.0), 100, 25);
  EXPECT_FALSE(bad);
  EXPECT_GT(big_gap, 0.5);
}
