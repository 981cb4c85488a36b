#include <gtest/gtest.h>

#include <map>

#include "cphylo/couplers.hpp"
#include "stats.hpp"

using namespace cphylo;

namespace {

constexpr int k_draws = 10000;

template <typename F>
auto match_rate(F&& draw) -> double {
  auto hits = 0;
  for (auto k = 0; k < k_draws; ++k) {
    auto c = draw();
    if (c.matched) {
      EXPECT_EQ(c.x, c.y);
      ++hits;
    }
  }
  return static_cast<double>(hits) / k_draws;
}

auto within_3_sigma(double rate, double p) -> bool {
  return std::abs(stats::binomial_z(rate * k_draws, k_draws, p)) <= 3.0;
}

}  // namespace

TEST(Couple_bernoulli, equal_probabilities_always_match) {
  auto rng = Random_stream{1, 0};
  for (auto k = 0; k < 1000; ++k) { EXPECT_TRUE(couple_bernoulli(0.7, 0.7, rng).matched); }
}

TEST(Couple_bernoulli, joint_cells) {
  auto rng = Random_stream{2, 0};
  auto both_one = 0;
  auto both_zero = 0;
  for (auto k = 0; k < k_draws; ++k) {
    auto c = couple_bernoulli(0.3, 0.5, rng);
    both_one += c.x && c.y;
    both_zero += !c.x && !c.y;
  }
  EXPECT_LE(std::abs(stats::binomial_z(both_one, k_draws, 0.3)), 3.0);
  EXPECT_LE(std::abs(stats::binomial_z(both_zero, k_draws, 0.5)), 3.0);
}

TEST(Couple_bernoulli, opposite_extremes_never_match) {
  auto rng = Random_stream{3, 0};
  for (auto k = 0; k < 1000; ++k) {
    auto c = couple_bernoulli(0.0, 1.0, rng);
    EXPECT_FALSE(c.x);
    EXPECT_TRUE(c.y);
  }
}

TEST(Couple_generic, overlapping_uniforms) {
  auto rng = Random_stream{4, 0};
  auto rate = match_rate([&] {
    return couple_generic([](Random_stream& r) { return r.uniform(); },
                          [](double v) { return v >= 0.0 && v < 1.0 ? 1.0 : 0.0; },
                          [](Random_stream& r) { return r.uniform(0.5, 1.5); },
                          [](double v) { return v >= 0.5 && v < 1.5 ? 1.0 : 0.0; }, rng);
  });
  EXPECT_TRUE(within_3_sigma(rate, 0.5)) << rate;
}

TEST(Couple_generic, identical_laws_always_match) {
  auto rng = Random_stream{5, 0};
  auto rate = match_rate([&] {
    return couple_generic([](Random_stream& r) { return r.exponential(1.0); },
                          [](double v) { return std::exp(-v); },
                          [](Random_stream& r) { return r.exponential(1.0); },
                          [](double v) { return std::exp(-v); }, rng);
  });
  EXPECT_EQ(rate, 1.0);
}

TEST(Couple_generic, cap_turns_bad_densities_into_failure) {
  auto rng = Random_stream{6, 0};
  // q's density claims to be p everywhere it samples, so the residual loop
  // can never accept.
  auto bad = [&] {
    for (auto k = 0; k < 100; ++k) {
      couple_generic([](Random_stream& r) { return r.uniform(); }, [](double) { return 2.0; },
                     [](Random_stream& r) { return r.uniform(); }, [](double) { return 1.0; }, rng, 1000);
    }
  };
  EXPECT_THROW(bad(), Coupling_failure);
}

TEST(Couple_discrete_uniform, shifted_ranges) {
  auto rng = Random_stream{7, 0};
  auto a = std::vector<int>{1, 2, 3, 4};
  auto b = std::vector<int>{3, 4, 5, 6};
  EXPECT_TRUE(within_3_sigma(match_rate([&] { return couple_discrete_uniform(a, b, rng); }), 0.5));
}

TEST(Couple_discrete_uniform, unequal_sizes) {
  auto rng = Random_stream{8, 0};
  auto a = std::vector<int>{1, 2, 3};
  auto b = std::vector<int>{3, 4};
  EXPECT_TRUE(within_3_sigma(match_rate([&] { return couple_discrete_uniform(a, b, rng); }), 1.0 / 3.0));
}

TEST(Couple_discrete_uniform, shared_destination_set_always_matches) {
  auto rng = Random_stream{9, 0};
  auto j = std::vector<int>{2, 3, 4, 5, 6, 7};
  EXPECT_EQ(match_rate([&] { return couple_discrete_uniform(j, j, rng); }), 1.0);
}

TEST(Couple_discrete_uniform, marginals_are_uniform) {
  auto rng = Random_stream{10, 0};
  auto a = std::vector<int>{1, 2, 3};
  auto b = std::vector<int>{3, 4};
  auto cx = std::vector<double>(3, 0.0);
  auto cy = std::vector<double>(2, 0.0);
  for (auto k = 0; k < k_draws; ++k) {
    auto c = couple_discrete_uniform(a, b, rng);
    cx[c.x - 1] += 1;
    cy[c.y - 3] += 1;
  }
  EXPECT_GT(stats::chi_squared_gof(cx, {1.0 / 3, 1.0 / 3, 1.0 / 3}).p_value, 1e-3);
  EXPECT_GT(stats::chi_squared_gof(cy, {0.5, 0.5}).p_value, 1e-3);
}

TEST(Couple_categorical, match_rate_is_overlap) {
  auto rng = Random_stream{11, 0};
  auto wx = std::vector<double>{1, 1, 2};   // (0.25, 0.25, 0.5)
  auto wy = std::vector<double>{0, 3, 1};   // (0, 0.75, 0.25)
  auto rate = match_rate([&] { return couple_categorical(wx, wy, rng); });
  EXPECT_TRUE(within_3_sigma(rate, 0.25 + 0.25)) << rate;
}

TEST(Couple_uniform_interval, half_overlap) {
  auto rng = Random_stream{12, 0};
  EXPECT_TRUE(within_3_sigma(match_rate([&] { return couple_uniform_interval({0, 2}, {1, 3}, rng); }), 0.5));
}

TEST(Couple_uniform_interval, identical_and_disjoint) {
  auto rng = Random_stream{13, 0};
  EXPECT_EQ(match_rate([&] { return couple_uniform_interval({0.3, 0.9}, {0.3, 0.9}, rng); }), 1.0);
  EXPECT_EQ(match_rate([&] { return couple_uniform_interval({0, 1}, {2, 3}, rng); }), 0.0);
}

TEST(Couple_uniform_interval, marginals) {
  auto rng = Random_stream{14, 0};
  auto xs = std::vector<double>{};
  auto ys = std::vector<double>{};
  for (auto k = 0; k < k_draws; ++k) {
    auto c = couple_uniform_interval({0, 2}, {1, 4}, rng);
    xs.push_back(c.x);
    ys.push_back(c.y);
  }
  EXPECT_GT(stats::ks_one_sample(xs, [](double v) { return v / 2.0; }).p_value, 1e-3);
  EXPECT_GT(stats::ks_one_sample(ys, [](double v) { return (v - 1.0) / 3.0; }).p_value, 1e-3);
}

TEST(Couple_uniform_interval, rejects_empty_interval) {
  auto rng = Random_stream{15, 0};
  EXPECT_THROW(couple_uniform_interval({1, 1}, {0, 2}, rng), std::invalid_argument);
}

TEST(Couple_trunc_exponential, match_rate_half_at_log_two) {
  auto rng = Random_stream{16, 0};
  auto rate = match_rate([&] { return couple_trunc_exponential(1.0, 0.0, std::log(2.0), rng); });
  EXPECT_TRUE(within_3_sigma(rate, 0.5)) << rate;
}

TEST(Couple_trunc_exponential, marginals_are_shifted_exponentials) {
  auto rng = Random_stream{17, 0};
  auto xs = std::vector<double>{};
  auto ys = std::vector<double>{};
  for (auto k = 0; k < k_draws; ++k) {
    auto c = couple_trunc_exponential(0.5, 1.0, 2.5, rng);
    xs.push_back(c.x);
    ys.push_back(c.y);
  }
  EXPECT_GT(stats::ks_one_sample(xs, [](double v) { return 1.0 - std::exp(-0.5 * (v - 1.0)); }).p_value, 1e-3);
  EXPECT_GT(stats::ks_one_sample(ys, [](double v) { return 1.0 - std::exp(-0.5 * (v - 2.5)); }).p_value, 1e-3);
}

TEST(Couple_trunc_exponential, equal_offsets_match) {
  auto rng = Random_stream{18, 0};
  EXPECT_EQ(match_rate([&] { return couple_trunc_exponential(2.0, 3.0, 3.0, rng); }), 1.0);
}

TEST(Couple_counts, poisson_one_versus_two) {
  auto overlap = 0.0;
  for (auto k = 0; k < 60; ++k) {
    overlap += std::min(pmf(Poisson_law{1.0}, k), pmf(Poisson_law{2.0}, k));
  }
  // Summed by hand: e^-2 (1 + 2) + e^-1 (1/2 + 1/6 + 1/24 + ...) = 0.670247.
  EXPECT_NEAR(overlap, 0.670247, 5e-6);
  auto rng = Random_stream{19, 0};
  auto rate = match_rate([&] { return couple_counts(Poisson_law{1.0}, Poisson_law{2.0}, rng); });
  EXPECT_TRUE(within_3_sigma(rate, overlap)) << rate;
}

TEST(Couple_counts, zero_rates_give_zero) {
  auto rng = Random_stream{20, 0};
  for (auto k = 0; k < 100; ++k) {
    auto c = couple_counts(Poisson_law{0.0}, Poisson_law{0.0}, rng);
    EXPECT_EQ(c.x, 0);
    EXPECT_EQ(c.y, 0);
  }
}

TEST(Count_laws, negative_binomial_matches_gamma_poisson_mixture) {
  auto law = Neg_binomial_law{1.5, 0.3};
  auto total = 0.0;
  for (auto k = 0; k < 400; ++k) { total += pmf(law, k); }
  EXPECT_NEAR(total, 1.0, 1e-12);
  auto rng = Random_stream{21, 0};
  auto observed = std::vector<double>(30, 0.0);
  auto probs = std::vector<double>(30, 0.0);
  for (auto k = 0; k < k_draws; ++k) { observed[std::min(29, sample(Count_law{law}, rng))] += 1; }
  for (auto k = 0; k < 29; ++k) { probs[k] = pmf(law, k); }
  probs[29] = 1.0 - std::accumulate(probs.begin(), probs.end() - 1, 0.0);
  EXPECT_GT(stats::chi_squared_gof(observed, probs).p_value, 1e-3);
}

TEST(Count_laws, binomial_pmf_sums_to_one) {
  auto total = 0.0;
  for (auto k = 0; k <= 7; ++k) { total += pmf(Binomial_law{7, 0.35}, k); }
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_EQ(pmf(Binomial_law{0, 0.5}, 0), 1.0);
}

TEST(Couple_multinomial, zero_totals_match) {
  auto rng = Random_stream{22, 0};
  auto p = std::vector<double>{0.2, 0.8};
  auto c = couple_multinomial(0, 0, p, p, rng);
  EXPECT_TRUE(c.matched);
  EXPECT_EQ(c.x, (std::vector<int>{0, 0}));
}

TEST(Couple_multinomial, two_cell_overlap) {
  // {(2,0),(1,1),(0,2)}: (0.25, 0.5, 0.25) against (0.64, 0.32, 0.04).
  auto expected = 0.25 + 0.32 + 0.04;
  auto rng = Random_stream{23, 0};
  auto px = std::vector<double>{0.5, 0.5};
  auto py = std::vector<double>{0.8, 0.2};
  auto rate = match_rate([&] { return couple_multinomial(2, 2, px, py, rng); });
  EXPECT_TRUE(within_3_sigma(rate, expected)) << rate;
}

TEST(Couple_multinomial, unequal_totals_are_independent) {
  auto rng = Random_stream{24, 0};
  auto p = std::vector<double>{0.5, 0.5};
  for (auto k = 0; k < 100; ++k) {
    auto c = couple_multinomial(2, 3, p, p, rng);
    EXPECT_FALSE(c.matched);
    EXPECT_EQ(c.x[0] + c.x[1], 2);
    EXPECT_EQ(c.y[0] + c.y[1], 3);
  }
}

TEST(Multinomial, log_pmf_sums_to_one) {
  auto p = std::vector<double>{0.2, 0.3, 0.5};
  auto total = 0.0;
  for (auto a = 0; a <= 4; ++a) {
    for (auto b = 0; a + b <= 4; ++b) {
      auto counts = std::vector<int>{a, b, 4 - a - b};
      total += std::exp(multinomial_log_pmf(counts, p));
    }
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Shared_scale, is_uniform_on_half_to_two) {
  auto rng = Random_stream{25, 0};
  auto xs = std::vector<double>{};
  for (auto k = 0; k < k_draws; ++k) {
    auto v = shared_scale(rng);
    ASSERT_GE(v, 0.5);
    ASSERT_LT(v, 2.0);
    xs.push_back(v);
  }
  EXPECT_GT(stats::ks_one_sample(xs, [](double v) { return (v - 0.5) / 1.5; }).p_value, 1e-3);
}

TEST(Couplers, same_seed_same_sequence) {
  auto a = Random_stream{26, 4};
  auto b = Random_stream{26, 4};
  for (auto k = 0; k < 200; ++k) {
    auto ca = couple_counts(Poisson_law{1.0}, Neg_binomial_law{2.0, 0.4}, a);
    auto cb = couple_counts(Poisson_law{1.0}, Neg_binomial_law{2.0, 0.4}, b);
    ASSERT_EQ(ca.x, cb.x);
    ASSERT_EQ(ca.y, cb.y);
  }
}
