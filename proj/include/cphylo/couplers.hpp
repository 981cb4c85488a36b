#pragma once

// Maximal couplings with independent residuals, plus the common-random-number
// draws shared by both chains of a coupled pair.
//
// Every coupler consumes draws from one Random_stream in a fixed order, so a
// coupled step is reproducible from (seed, stream id) alone.  Whenever a draw
// reports `matched`, x and y are bitwise equal.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include "random_stream.hpp"

namespace cphylo {

template <typename T>
struct Coupled_draw {
  T x;
  T y;
  bool matched = false;
};

class Coupling_failure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr long k_default_rejection_cap = 1'000'000;

// Generic rejection coupler.  `dens_p` and `dens_q` return densities (or pmfs)
// up to no normalising constant; they must be exact.
template <typename Sample_p, typename Dens_p, typename Sample_q, typename Dens_q>
auto couple_generic(Sample_p&& sample_p, Dens_p&& dens_p, Sample_q&& sample_q, Dens_q&& dens_q,
                    Random_stream& rng, long cap = k_default_rejection_cap)
    -> Coupled_draw<decltype(sample_p(rng))> {
  auto x = sample_p(rng);
  auto u = rng.uniform();
  if (u * dens_p(x) <= dens_q(x)) {
    auto y = x;
    return {std::move(x), std::move(y), true};
  }
  for (auto iter = 0L; iter < cap; ++iter) {
    auto y = sample_q(rng);
    auto v = rng.uniform();
    if (v * dens_q(y) > dens_p(y)) {
      return {std::move(x), std::move(y), false};
    }
  }
  throw Coupling_failure{"couple_generic: rejection loop exceeded cap (inconsistent densities?)"};
}

// Shared Bernoulli coupling: (1{U < p}, 1{U < q}).
inline auto couple_bernoulli(double p, double q, Random_stream& rng) -> Coupled_draw<bool> {
  auto u = rng.uniform();
  auto x = u < p;
  auto y = u < q;
  return {x, y, x == y};
}

inline auto shared_uniform(Random_stream& rng) -> double { return rng.uniform_pos(); }

// Common scale factor nu ~ Unif(1/2, 2).
inline auto shared_scale(Random_stream& rng) -> double { return 0.5 + 1.5 * rng.uniform(); }

// --- Discrete uniform on finite sets --------------------------------------

// `a` and `b` need not be sorted; membership is tested by linear scan, which
// is fine for the small candidate sets produced by tree moves.
template <typename T>
auto couple_discrete_uniform(std::span<const T> a, std::span<const T> b, Random_stream& rng)
    -> Coupled_draw<T> {
  if (a.empty() || b.empty()) { throw std::invalid_argument{"couple_discrete_uniform: empty set"}; }
  auto contains = [](std::span<const T> s, const T& v) { return std::find(s.begin(), s.end(), v) != s.end(); };
  auto pa = 1.0 / static_cast<double>(a.size());
  auto pb = 1.0 / static_cast<double>(b.size());
  return couple_generic(
      [&](Random_stream& r) { return a[r.index(a.size())]; },
      [&](const T& v) { return contains(a, v) ? pa : 0.0; },
      [&](Random_stream& r) { return b[r.index(b.size())]; },
      [&](const T& v) { return contains(b, v) ? pb : 0.0; },
      rng);
}

template <typename T>
auto couple_discrete_uniform(const std::vector<T>& a, const std::vector<T>& b, Random_stream& rng)
    -> Coupled_draw<T> {
  return couple_discrete_uniform(std::span<const T>{a}, std::span<const T>{b}, rng);
}

// --- Categorical with arbitrary nonnegative weights ----------------------

inline auto sample_categorical(std::span<const double> w, Random_stream& rng) -> std::size_t {
  auto total = std::accumulate(w.begin(), w.end(), 0.0);
  if (!(total > 0.0)) { throw std::invalid_argument{"sample_categorical: weights sum to zero"}; }
  auto target = rng.uniform() * total;
  auto acc = 0.0;
  auto last_positive = w.size();
  for (auto i = std::size_t{0}; i < w.size(); ++i) {
    if (w[i] <= 0.0) { continue; }
    last_positive = i;
    acc += w[i];
    if (target < acc) { return i; }
  }
  return last_positive;
}

// Maximal coupling of two categorical laws on {0, ..., K-1}.
inline auto couple_categorical(std::span<const double> wx, std::span<const double> wy,
                               Random_stream& rng) -> Coupled_draw<std::size_t> {
  auto tx = std::accumulate(wx.begin(), wx.end(), 0.0);
  auto ty = std::accumulate(wy.begin(), wy.end(), 0.0);
  auto px = [&](std::size_t k) { return k < wx.size() ? wx[k] / tx : 0.0; };
  auto py = [&](std::size_t k) { return k < wy.size() ? wy[k] / ty : 0.0; };
  return couple_generic(
      [&](Random_stream& r) { return sample_categorical(wx, r); }, px,
      [&](Random_stream& r) { return sample_categorical(wy, r); }, py, rng);
}

// --- Continuous uniform on intervals --------------------------------------

struct Interval {
  double lo;
  double hi;
  auto length() const -> double { return hi - lo; }
  auto contains(double v) const -> bool { return v >= lo && v < hi; }
};

// Direct maximal coupling of Unif(i1) and Unif(i2).
inline auto couple_uniform_interval(Interval i1, Interval i2, Random_stream& rng) -> Coupled_draw<double> {
  if (!(i1.length() > 0.0) || !(i2.length() > 0.0)) {
    throw std::invalid_argument{"couple_uniform_interval: empty interval"};
  }
  auto lo = std::max(i1.lo, i2.lo);
  auto hi = std::min(i1.hi, i2.hi);
  auto overlap = std::max(0.0, hi - lo);
  auto match_prob = overlap / std::max(i1.length(), i2.length());
  if (i1.lo == i2.lo && i1.hi == i2.hi) { match_prob = 1.0; }
  if (rng.uniform() < match_prob) {
    auto v = rng.uniform(lo, hi);
    return {v, v, true};
  }
  // Residual of p: p - min(p, q), sampled by rejection from p.
  auto residual = [&rng](Interval mine, Interval other) {
    auto d_mine = 1.0 / mine.length();
    auto d_other = 1.0 / other.length();
    for (auto iter = 0L; iter < k_default_rejection_cap; ++iter) {
      auto v = rng.uniform(mine.lo, mine.hi);
      auto q = other.contains(v) ? d_other : 0.0;
      auto accept = 1.0 - std::min(1.0, q / d_mine);
      if (rng.uniform() < accept) { return v; }
    }
    throw Coupling_failure{"couple_uniform_interval: residual sampling did not terminate"};
  };
  auto x = residual(i1, i2);
  auto y = residual(i2, i1);
  return {x, y, false};
}

// --- Truncated exponentials -----------------------------------------------

// Exp(rate) restricted to [lo, hi), by inversion.
inline auto sample_trunc_exponential(double rate, double lo, double hi, Random_stream& rng) -> double {
  auto u = rng.uniform();
  if (std::isinf(hi)) { return lo - std::log1p(-u) / rate; }
  auto mass = -std::expm1(-rate * (hi - lo));
  auto v = lo - std::log1p(-u * mass) / rate;
  return std::min(v, std::nextafter(hi, lo));
}

// Maximal coupling of Exp(theta) restricted to [a_p, inf) and [a_q, inf).
inline auto couple_trunc_exponential(double theta, double a_p, double a_q, Random_stream& rng)
    -> Coupled_draw<double> {
  if (!(theta > 0.0)) { throw std::invalid_argument{"couple_trunc_exponential: theta must be > 0"}; }
  auto inf = std::numeric_limits<double>::infinity();
  auto match_prob = std::exp(-theta * std::abs(a_p - a_q));
  if (rng.uniform() < match_prob) {
    auto v = sample_trunc_exponential(theta, std::max(a_p, a_q), inf, rng);
    return {v, v, true};
  }
  if (a_p < a_q) {
    auto x = sample_trunc_exponential(theta, a_p, a_q, rng);
    auto y = sample_trunc_exponential(theta, a_q, inf, rng);
    return {x, y, false};
  }
  auto y = sample_trunc_exponential(theta, a_q, a_p, rng);
  auto x = sample_trunc_exponential(theta, a_p, inf, rng);
  return {x, y, false};
}

// --- Count laws -----------------------------------------------------------

struct Poisson_law {
  double rate;
};

// Gamma(size, rate beta) mixture of Poisson(rho * length):
// pmf(k) = Gamma(size + k) / (Gamma(size) k!) (1 - prob)^size prob^k,
// prob = length / (beta + length).
struct Neg_binomial_law {
  double size;
  double prob;
};

struct Binomial_law {
  int trials;
  double prob;
};

using Count_law = std::variant<Poisson_law, Neg_binomial_law, Binomial_law>;

inline auto log_pmf(const Poisson_law& law, int k) -> double {
  if (k < 0) { return -INFINITY; }
  if (law.rate == 0.0) { return k == 0 ? 0.0 : -INFINITY; }
  return k * std::log(law.rate) - law.rate - std::lgamma(k + 1.0);
}

inline auto log_pmf(const Neg_binomial_law& law, int k) -> double {
  if (k < 0) { return -INFINITY; }
  if (law.prob == 0.0) { return k == 0 ? 0.0 : -INFINITY; }
  return std::lgamma(law.size + k) - std::lgamma(law.size) - std::lgamma(k + 1.0) +
         law.size * std::log1p(-law.prob) + k * std::log(law.prob);
}

inline auto log_pmf(const Binomial_law& law, int k) -> double {
  if (k < 0 || k > law.trials) { return -INFINITY; }
  if (law.prob <= 0.0) { return k == 0 ? 0.0 : -INFINITY; }
  if (law.prob >= 1.0) { return k == law.trials ? 0.0 : -INFINITY; }
  return std::lgamma(law.trials + 1.0) - std::lgamma(k + 1.0) - std::lgamma(law.trials - k + 1.0) +
         k * std::log(law.prob) + (law.trials - k) * std::log1p(-law.prob);
}

inline auto log_pmf(const Count_law& law, int k) -> double {
  return std::visit([k](const auto& l) { return log_pmf(l, k); }, law);
}

inline auto pmf(const Count_law& law, int k) -> double { return std::exp(log_pmf(law, k)); }

inline auto sample_poisson(double rate, Random_stream& rng) -> int {
  if (rate <= 0.0) { return 0; }
  return std::poisson_distribution<int>{rate}(rng);
}

inline auto sample(const Poisson_law& law, Random_stream& rng) -> int { return sample_poisson(law.rate, rng); }

inline auto sample(const Neg_binomial_law& law, Random_stream& rng) -> int {
  if (law.prob <= 0.0) { return 0; }
  auto rho = std::gamma_distribution<double>{law.size, law.prob / (1.0 - law.prob)}(rng);
  return sample_poisson(rho, rng);
}

inline auto sample(const Binomial_law& law, Random_stream& rng) -> int {
  if (law.trials == 0 || law.prob <= 0.0) { return 0; }
  if (law.prob >= 1.0) { return law.trials; }
  return std::binomial_distribution<int>{law.trials, law.prob}(rng);
}

inline auto sample(const Count_law& law, Random_stream& rng) -> int {
  return std::visit([&rng](const auto& l) { return sample(l, rng); }, law);
}

inline auto couple_counts(const Count_law& p, const Count_law& q, Random_stream& rng) -> Coupled_draw<int> {
  return couple_generic(
      [&](Random_stream& r) { return sample(p, r); }, [&](int k) { return pmf(p, k); },
      [&](Random_stream& r) { return sample(q, r); }, [&](int k) { return pmf(q, k); }, rng);
}

// --- Multinomial ----------------------------------------------------------

inline auto multinomial_log_pmf(std::span<const int> counts, std::span<const double> probs) -> double {
  auto n = 0;
  auto result = 0.0;
  for (auto k = std::size_t{0}; k < counts.size(); ++k) {
    n += counts[k];
    result -= std::lgamma(counts[k] + 1.0);
    if (counts[k] > 0) {
      if (probs[k] <= 0.0) { return -INFINITY; }
      result += counts[k] * std::log(probs[k]);
    }
  }
  return result + std::lgamma(n + 1.0);
}

// Sequential-binomial multinomial sampler; probabilities need not be normalised.
inline auto sample_multinomial(int n, std::span<const double> probs, Random_stream& rng) -> std::vector<int> {
  auto out = std::vector<int>(probs.size(), 0);
  auto remaining_mass = std::accumulate(probs.begin(), probs.end(), 0.0);
  auto remaining = n;
  for (auto k = std::size_t{0}; k + 1 < probs.size() && remaining > 0; ++k) {
    auto p = remaining_mass > 0.0 ? std::clamp(probs[k] / remaining_mass, 0.0, 1.0) : 0.0;
    out[k] = sample(Binomial_law{remaining, p}, rng);
    remaining -= out[k];
    remaining_mass -= probs[k];
  }
  if (!probs.empty()) { out.back() += remaining; }
  return out;
}

// Maximal coupling of Multinomial(n_x, probs_x) and Multinomial(n_y, probs_y)
// when the totals agree; independent draws otherwise.
inline auto couple_multinomial(int n_x, int n_y, std::span<const double> probs_x, std::span<const double> probs_y,
                               Random_stream& rng) -> Coupled_draw<std::vector<int>> {
  auto normalise = [](std::span<const double> p) {
    auto v = std::vector<double>(p.begin(), p.end());
    auto s = std::accumulate(v.begin(), v.end(), 0.0);
    for (auto& e : v) { e /= s; }
    return v;
  };
  auto px = normalise(probs_x);
  auto py = normalise(probs_y);
  if (n_x != n_y) {
    auto x = sample_multinomial(n_x, px, rng);
    auto y = sample_multinomial(n_y, py, rng);
    return {std::move(x), std::move(y), false};
  }
  return couple_generic(
      [&](Random_stream& r) { return sample_multinomial(n_x, px, r); },
      [&](const std::vector<int>& v) { return std::exp(multinomial_log_pmf(v, px)); },
      [&](Random_stream& r) { return sample_multinomial(n_y, py, r); },
      [&](const std::vector<int>& v) { return std::exp(multinomial_log_pmf(v, py)); }, rng);
}

}  // namespace cphylo
