#pragma once

// Post-processing of meeting times and thinned samples: total variation
// bounds, meeting-time survival curves and split-frequency comparisons.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "random_stream.hpp"
#include "tree.hpp"

namespace cphylo {

struct Meeting_time {
  long tau = 0;
  bool censored = false;
};

// Mean over pairs of max(0, ceil((tau - l - s) / l)).  A censored tau is a
// lower bound, so the result is then a lower bound too.
inline auto tv_bound(const std::vector<Meeting_time>& taus, long lag, long s) -> double {
  if (taus.empty()) { throw std::invalid_argument{"tv_bound: no meeting times"}; }
  if (lag < 1) { throw std::invalid_argument{"tv_bound: lag must be at least 1"}; }
  auto total = 0L;
  for (const auto& t : taus) {
    if (t.tau < lag) { throw std::invalid_argument{"tv_bound: meeting time below the lag"}; }
    auto excess = t.tau - lag - s;
    if (excess > 0) { total += (excess + lag - 1) / lag; }
  }
  return static_cast<double>(total) / static_cast<double>(taus.size());
}

inline auto tv_bound(const std::vector<long>& taus, long lag, long s) -> double {
  auto wrapped = std::vector<Meeting_time>{};
  for (auto t : taus) { wrapped.push_back({t, false}); }
  return tv_bound(wrapped, lag, s);
}

struct Tv_curve {
  long lag = 0;
  std::vector<long> s;
  std::vector<double> bound;
  std::vector<double> lower;  // bootstrap band, empty unless requested
  std::vector<double> upper;
  int num_pairs = 0;
  bool censored = false;
};

// Evaluates the bound on s = 0, stride, ..., max(tau) - lag.
inline auto tv_curve(const std::vector<Meeting_time>& taus, long lag, long stride) -> Tv_curve {
  if (stride < 1) { throw std::invalid_argument{"tv_curve: stride must be positive"}; }
  auto out = Tv_curve{};
  out.lag = lag;
  out.num_pairs = static_cast<int>(taus.size());
  auto max_tau = lag;
  for (const auto& t : taus) {
    max_tau = std::max(max_tau, t.tau);
    out.censored = out.censored || t.censored;
  }
  for (auto s = 0L; s <= max_tau - lag; s += stride) {
    out.s.push_back(s);
    out.bound.push_back(tv_bound(taus, lag, s));
  }
  if (out.s.empty() || out.s.back() != max_tau - lag) {
    out.s.push_back(max_tau - lag);
    out.bound.push_back(tv_bound(taus, lag, max_tau - lag));
  }
  return out;
}

// Percentile bootstrap band over pairs.
inline auto add_bootstrap_band(Tv_curve& curve, const std::vector<Meeting_time>& taus, int resamples, double level,
                               Random_stream& rng) -> void {
  auto n = taus.size();
  auto draws = std::vector<std::vector<double>>(curve.s.size());
  auto sample = std::vector<Meeting_time>(n);
  for (auto b = 0; b < resamples; ++b) {
    for (auto& t : sample) { t = taus[rng.index(n)]; }
    for (auto k = std::size_t{0}; k < curve.s.size(); ++k) {
      draws[k].push_back(tv_bound(sample, curve.lag, curve.s[k]));
    }
  }
  auto alpha = (1.0 - level) / 2.0;
  curve.lower.clear();
  curve.upper.clear();
  for (auto& d : draws) {
    std::sort(d.begin(), d.end());
    auto at = [&](double q) { return d[std::min(d.size() - 1, static_cast<std::size_t>(q * (d.size() - 1) + 0.5))]; };
    curve.lower.push_back(at(alpha));
    curve.upper.push_back(at(1.0 - alpha));
  }
}

struct Survival_point {
  long s = 0;
  double survival = 0.0;  // P(tau - lag > s)
};

// Empirical survival of tau - lag at 0 and at each observed value.
inline auto ecdf_survival(const std::vector<Meeting_time>& taus, long lag) -> std::vector<Survival_point> {
  auto excess = std::vector<long>{};
  for (const auto& t : taus) { excess.push_back(t.tau - lag); }
  std::sort(excess.begin(), excess.end());
  auto grid = std::set<long>{0};
  grid.insert(excess.begin(), excess.end());
  auto out = std::vector<Survival_point>{};
  auto n = static_cast<double>(excess.size());
  for (auto s : grid) {
    auto above = excess.end() - std::upper_bound(excess.begin(), excess.end(), s);
    out.push_back({s, static_cast<double>(above) / n});
  }
  return out;
}

struct Line_fit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  int points = 0;
};

inline auto fit_line(const std::vector<double>& x, const std::vector<double>& y) -> Line_fit {
  auto n = static_cast<double>(x.size());
  if (x.size() < 2) { return {0.0, 0.0, 0.0, static_cast<int>(x.size())}; }
  auto mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  auto my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  auto sxx = 0.0;
  auto sxy = 0.0;
  auto syy = 0.0;
  for (auto k = std::size_t{0}; k < x.size(); ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    sxy += (x[k] - mx) * (y[k] - my);
    syy += (y[k] - my) * (y[k] - my);
  }
  auto slope = sxx > 0.0 ? sxy / sxx : 0.0;
  auto r2 = sxx > 0.0 && syy > 0.0 ? sxy * sxy / (sxx * syy) : 1.0;
  return {slope, my - slope * mx, r2, static_cast<int>(x.size())};
}

// Linear fit of log-survival over the upper half of the support (points with
// zero survival are dropped).
inline auto geometric_tail_fit(const std::vector<Survival_point>& curve) -> Line_fit {
  if (curve.empty()) { return {}; }
  auto top = 0L;
  for (const auto& p : curve) {
    if (p.survival > 0.0) { top = std::max(top, p.s); }
  }
  auto x = std::vector<double>{};
  auto y = std::vector<double>{};
  for (const auto& p : curve) {
    if (p.survival > 0.0 && 2 * p.s >= top) {
      x.push_back(static_cast<double>(p.s));
      y.push_back(std::log(p.survival));
    }
  }
  return fit_line(x, y);
}

// --- Split frequencies ----------------------------------------------------

enum class Window_rule {
  trailing_75,  // most recent 75% of samples at each checkpoint
  disjoint,     // consecutive non-overlapping blocks
};

struct Asdsf_point {
  long window_end = 0;  // index (exclusive) of the last sample used
  double value = 0.0;
  int num_splits = 0;   // splits surviving the frequency filter
  bool no_splits = false;
};

namespace detail {

inline auto split_frequencies(const std::vector<std::set<Split>>& samples, std::size_t begin, std::size_t end)
    -> std::map<Split, double> {
  auto out = std::map<Split, double>{};
  for (auto k = begin; k < end; ++k) {
    for (const auto& sp : samples[k]) { out[sp] += 1.0; }
  }
  auto n = static_cast<double>(end - begin);
  for (auto& [sp, f] : out) { f /= n; }
  return out;
}

}  // namespace detail

// Average over surviving splits of the across-chain standard deviation (M - 1
// divisor) of split frequencies.  A split survives when at least one chain
// has frequency above `min_freq`.
inline auto asdsf_from_frequencies(const std::vector<std::map<Split, double>>& freqs, double min_freq = 0.1)
    -> Asdsf_point {
  auto m = freqs.size();
  if (m < 2) { throw std::invalid_argument{"asdsf: need at least two chains"}; }
  auto all = std::set<Split>{};
  for (const auto& f : freqs) {
    for (const auto& [sp, v] : f) { all.insert(sp); }
  }
  auto total = 0.0;
  auto kept = 0;
  for (const auto& sp : all) {
    auto values = std::vector<double>{};
    auto keep = false;
    for (const auto& f : freqs) {
      auto it = f.find(sp);
      values.push_back(it == f.end() ? 0.0 : it->second);
      keep = keep || values.back() > min_freq;
    }
    if (!keep) { continue; }
    auto mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(m);
    auto ss = 0.0;
    for (auto v : values) { ss += (v - mean) * (v - mean); }
    total += std::sqrt(ss / static_cast<double>(m - 1));
    ++kept;
  }
  auto out = Asdsf_point{};
  out.num_splits = kept;
  out.no_splits = kept == 0;
  out.value = kept == 0 ? 0.0 : total / kept;
  return out;
}

// `chains[m][k]` is the split set of sample k of chain m; all chains must have
// the same number of samples.  One value per checkpoint, every `every` samples.
inline auto asdsf(const std::vector<std::vector<std::set<Split>>>& chains, Window_rule rule, long every,
                  double min_freq = 0.1) -> std::vector<Asdsf_point> {
  if (chains.size() < 2) { throw std::invalid_argument{"asdsf: need at least two chains"}; }
  auto n = chains.front().size();
  for (const auto& c : chains) {
    if (c.size() != n) { throw std::invalid_argument{"asdsf: chains have different sample counts"}; }
  }
  if (every < 1) { throw std::invalid_argument{"asdsf: checkpoint spacing must be positive"}; }
  auto out = std::vector<Asdsf_point>{};
  auto step = static_cast<std::size_t>(every);
  for (auto end = step; end <= n; end += step) {
    auto begin = rule == Window_rule::trailing_75 ? end - (3 * end) / 4 : end - step;
    if ((3 * end) / 4 == 0) { continue; }
    auto freqs = std::vector<std::map<Split, double>>{};
    for (const auto& c : chains) { freqs.push_back(detail::split_frequencies(c, begin, end)); }
    auto p = asdsf_from_frequencies(freqs, min_freq);
    p.window_end = static_cast<long>(end);
    out.push_back(p);
  }
  return out;
}

// Curves at different lags agree when their largest gap at shared s is within
// the noise band.  The band is `z` standard errors of the difference, from the
// per-pair spread of the integrand.  Bounds above one carry no information and
// are capped there before comparing.
inline auto curves_agree(const std::vector<Meeting_time>& taus_a, long lag_a, const std::vector<Meeting_time>& taus_b,
                         long lag_b, long stride, double z = 3.0) -> std::pair<bool, double> {
  auto integrand_se = [](const std::vector<Meeting_time>& taus, long lag, long s) {
    auto values = std::vector<double>{};
    for (const auto& t : taus) {
      auto excess = t.tau - lag - s;
      values.push_back(excess > 0 ? static_cast<double>((excess + lag - 1) / lag) : 0.0);
    }
    auto n = static_cast<double>(values.size());
    auto mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    auto ss = 0.0;
    for (auto v : values) { ss += (v - mean) * (v - mean); }
    return n > 1 ? std::sqrt(ss / (n - 1) / n) : 0.0;
  };
  auto max_tau = 0L;
  for (const auto& t : taus_a) { max_tau = std::max(max_tau, t.tau); }
  for (const auto& t : taus_b) { max_tau = std::max(max_tau, t.tau); }
  auto worst = 0.0;
  auto agree = true;
  for (auto s = 0L; s <= max_tau; s += stride) {
    auto gap = std::abs(std::min(1.0, tv_bound(taus_a, lag_a, s)) - std::min(1.0, tv_bound(taus_b, lag_b, s)));
    auto se_a = integrand_se(taus_a, lag_a, s);
    auto se_b = integrand_se(taus_b, lag_b, s);
    auto band = z * std::sqrt(se_a * se_a + se_b * se_b);
    worst = std::max(worst, gap);
    if (gap > band + 1e-12) { agree = false; }
  }
  return {agree, worst};
}

}  // namespace cphylo
