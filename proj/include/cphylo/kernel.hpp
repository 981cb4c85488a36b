#pragma once

// The mixture proposal kernel.
//
// Each move is written once, as a coroutine that suspends whenever it needs a
// random draw and hands the request to a driver.  The marginal driver answers
// requests from the chain's stream; the coupled driver runs the proposals for
// both chains in lockstep and answers paired requests from a maximal coupling
// (or common random numbers for shared scale factors).  When one side has
// finished (for example because its proposal failed) the other keeps drawing
// marginally from the same stream.

#include <array>
#include <cmath>
#include <coroutine>
#include <exception>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "couplers.hpp"
#include "random_stream.hpp"
#include "sd_model.hpp"
#include "tree.hpp"

namespace cphylo {

enum class Move_id : int {
  narrow_swap = 1,
  wide_swap = 2,
  narrow_spr = 3,
  wide_spr = 4,
  node_time = 5,
  leaf_time = 6,
  rescale_tree = 7,
  rescale_subtree = 8,
  rescale_above_clades = 9,
  add_catastrophe = 10,
  delete_catastrophe = 11,
  move_catastrophe = 12,
  resample_catastrophes = 13,
  rescale_mu = 15,
  rescale_kappa = 17,
  rescale_one_xi = 18,
  rescale_all_xi = 19,
};

inline constexpr std::array k_all_moves{
    Move_id::narrow_swap,     Move_id::wide_swap,          Move_id::narrow_spr,       Move_id::wide_spr,
    Move_id::node_time,       Move_id::leaf_time,          Move_id::rescale_tree,     Move_id::rescale_subtree,
    Move_id::rescale_above_clades, Move_id::add_catastrophe, Move_id::delete_catastrophe,
    Move_id::move_catastrophe, Move_id::resample_catastrophes, Move_id::rescale_mu, Move_id::rescale_kappa,
    Move_id::rescale_one_xi,  Move_id::rescale_all_xi,
};

inline auto move_name(Move_id m) -> std::string_view {
  switch (m) {
    case Move_id::narrow_swap: return "narrow_swap";
    case Move_id::wide_swap: return "wide_swap";
    case Move_id::narrow_spr: return "narrow_spr";
    case Move_id::wide_spr: return "wide_spr";
    case Move_id::node_time: return "node_time";
    case Move_id::leaf_time: return "leaf_time";
    case Move_id::rescale_tree: return "rescale_tree";
    case Move_id::rescale_subtree: return "rescale_subtree";
    case Move_id::rescale_above_clades: return "rescale_above_clades";
    case Move_id::add_catastrophe: return "add_catastrophe";
    case Move_id::delete_catastrophe: return "delete_catastrophe";
    case Move_id::move_catastrophe: return "move_catastrophe";
    case Move_id::resample_catastrophes: return "resample_catastrophes";
    case Move_id::rescale_mu: return "rescale_mu";
    case Move_id::rescale_kappa: return "rescale_kappa";
    case Move_id::rescale_one_xi: return "rescale_one_xi";
    case Move_id::rescale_all_xi: return "rescale_all_xi";
  }
  return "unknown";
}

inline auto parse_move_name(std::string_view name) -> std::optional<Move_id> {
  for (auto m : k_all_moves) {
    if (move_name(m) == name) { return m; }
  }
  return std::nullopt;
}

inline auto is_multi_scale(Move_id m) -> bool {
  return m == Move_id::rescale_tree || m == Move_id::rescale_subtree || m == Move_id::rescale_above_clades;
}

// --- Draw requests --------------------------------------------------------

struct Pick_uniform {
  std::vector<int> set;
};
struct Pick_weighted {
  std::vector<double> weights;
};
struct Uniform_draw {
  double lo;
  double hi;
};
struct Exp_draw {  // theta-rate exponential above lo
  double theta;
  double lo;
};
struct Count_draw {
  Count_law law;
};
struct Multinomial_draw {
  int n;
  std::vector<double> probs;
};
struct Scale_draw {};

using Draw_request =
    std::variant<Pick_uniform, Pick_weighted, Uniform_draw, Exp_draw, Count_draw, Multinomial_draw, Scale_draw>;

struct Draw_value {
  int index = 0;  // picked element, category or count
  double real = 0.0;
  std::vector<int> counts;
};

struct Proposal_outcome {
  Sd_state state;
  double log_hastings = 0.0;  // proposal ratio and Jacobian only
  bool failed = false;
  bool topology_changed = false;
};

class Proposal_task {
 public:
  struct promise_type {
    Draw_request request;
    bool pending = false;
    Draw_value value;
    std::optional<Proposal_outcome> outcome;
    std::exception_ptr error;

    auto get_return_object() -> Proposal_task {
      return Proposal_task{std::coroutine_handle<promise_type>::from_promise(*this)};
    }
    auto initial_suspend() noexcept -> std::suspend_always { return {}; }
    auto final_suspend() noexcept -> std::suspend_always { return {}; }
    auto return_value(Proposal_outcome o) -> void { outcome = std::move(o); }
    auto unhandled_exception() -> void { error = std::current_exception(); }
  };

  explicit Proposal_task(std::coroutine_handle<promise_type> h) : handle_{h} {}
  Proposal_task(Proposal_task&& other) noexcept : handle_{std::exchange(other.handle_, {})} {}
  Proposal_task(const Proposal_task&) = delete;
  auto operator=(const Proposal_task&) -> Proposal_task& = delete;
  auto operator=(Proposal_task&& other) noexcept -> Proposal_task& {
    if (this != &other) {
      if (handle_) { handle_.destroy(); }
      handle_ = std::exchange(other.handle_, {});
    }
    return *this;
  }
  ~Proposal_task() {
    if (handle_) { handle_.destroy(); }
  }

  // Runs to the next draw request; nullptr once the proposal is complete.
  auto next() -> const Draw_request* {
    auto& pr = handle_.promise();
    pr.pending = false;
    handle_.resume();
    if (pr.error) { std::rethrow_exception(pr.error); }
    return pr.pending ? &pr.request : nullptr;
  }
  auto supply(Draw_value v) -> void { handle_.promise().value = std::move(v); }
  auto take_outcome() -> Proposal_outcome { return std::move(*handle_.promise().outcome); }

 private:
  std::coroutine_handle<promise_type> handle_;
};

// The awaiter only points at a request held in a named local of the
// coroutine.  GCC 11 destroys non-trivial temporaries inside a co_await
// operand twice, so requests are never built inline.
struct Draw_awaiter {
  Draw_request* request = nullptr;
  Proposal_task::promise_type* promise = nullptr;

  auto await_ready() const noexcept -> bool { return false; }
  auto await_suspend(std::coroutine_handle<Proposal_task::promise_type> h) -> void {
    promise = &h.promise();
    promise->request = std::move(*request);
    promise->pending = true;
  }
  auto await_resume() -> Draw_value { return std::move(promise->value); }
};

inline auto draw(Draw_request& r) -> Draw_awaiter { return Draw_awaiter{&r, nullptr}; }

// --- Answering requests ---------------------------------------------------

inline auto sample_marginal(const Draw_request& req, Random_stream& rng) -> Draw_value {
  auto out = Draw_value{};
  std::visit(
      [&](const auto& r) {
        using R = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<R, Pick_uniform>) {
          out.index = r.set[rng.index(r.set.size())];
        } else if constexpr (std::is_same_v<R, Pick_weighted>) {
          out.index = static_cast<int>(sample_categorical(r.weights, rng));
        } else if constexpr (std::is_same_v<R, Uniform_draw>) {
          out.real = rng.uniform(r.lo, r.hi);
        } else if constexpr (std::is_same_v<R, Exp_draw>) {
          out.real = sample_trunc_exponential(r.theta, r.lo, k_inf, rng);
        } else if constexpr (std::is_same_v<R, Count_draw>) {
          out.index = sample(r.law, rng);
        } else if constexpr (std::is_same_v<R, Multinomial_draw>) {
          auto total = std::accumulate(r.probs.begin(), r.probs.end(), 0.0);
          auto p = r.probs;
          for (auto& e : p) { e /= total; }
          out.counts = sample_multinomial(r.n, p, rng);
        } else {
          out.real = shared_scale(rng);
        }
      },
      req);
  return out;
}

namespace detail {

inline auto time_density(const Draw_request& r, double v) -> double {
  if (const auto* u = std::get_if<Uniform_draw>(&r)) { return v >= u->lo && v < u->hi ? 1.0 / (u->hi - u->lo) : 0.0; }
  const auto& e = std::get<Exp_draw>(r);
  return v >= e.lo ? e.theta * std::exp(-e.theta * (v - e.lo)) : 0.0;
}

inline auto is_time(const Draw_request& r) -> bool {
  return std::holds_alternative<Uniform_draw>(r) || std::holds_alternative<Exp_draw>(r);
}

}  // namespace detail

// Answers a pair of requests from a maximal coupling where one applies.
inline auto sample_coupled(const Draw_request& a, const Draw_request& b, Random_stream& rng)
    -> std::pair<Draw_value, Draw_value> {
  auto va = Draw_value{};
  auto vb = Draw_value{};
  if (auto* pa = std::get_if<Pick_uniform>(&a); pa && std::holds_alternative<Pick_uniform>(b)) {
    auto c = couple_discrete_uniform(pa->set, std::get<Pick_uniform>(b).set, rng);
    va.index = c.x;
    vb.index = c.y;
    return {va, vb};
  }
  if (auto* pa = std::get_if<Pick_weighted>(&a); pa && std::holds_alternative<Pick_weighted>(b)) {
    auto c = couple_categorical(pa->weights, std::get<Pick_weighted>(b).weights, rng);
    va.index = static_cast<int>(c.x);
    vb.index = static_cast<int>(c.y);
    return {va, vb};
  }
  if (detail::is_time(a) && detail::is_time(b)) {
    auto c = Coupled_draw<double>{};
    auto* ua = std::get_if<Uniform_draw>(&a);
    auto* ub = std::get_if<Uniform_draw>(&b);
    auto* ea = std::get_if<Exp_draw>(&a);
    auto* eb = std::get_if<Exp_draw>(&b);
    if (ua && ub) {
      c = couple_uniform_interval({ua->lo, ua->hi}, {ub->lo, ub->hi}, rng);
    } else if (ea && eb && ea->theta == eb->theta) {
      c = couple_trunc_exponential(ea->theta, ea->lo, eb->lo, rng);
    } else {
      c = couple_generic([&](Random_stream& r) { return sample_marginal(a, r).real; },
                         [&](double v) { return detail::time_density(a, v); },
                         [&](Random_stream& r) { return sample_marginal(b, r).real; },
                         [&](double v) { return detail::time_density(b, v); }, rng);
    }
    va.real = c.x;
    vb.real = c.y;
    return {va, vb};
  }
  if (auto* ca = std::get_if<Count_draw>(&a); ca && std::holds_alternative<Count_draw>(b)) {
    auto c = couple_counts(ca->law, std::get<Count_draw>(b).law, rng);
    va.index = c.x;
    vb.index = c.y;
    return {va, vb};
  }
  if (auto* ma = std::get_if<Multinomial_draw>(&a);
      ma && std::holds_alternative<Multinomial_draw>(b) &&
      std::get<Multinomial_draw>(b).probs.size() == ma->probs.size()) {
    const auto& mb = std::get<Multinomial_draw>(b);
    auto c = couple_multinomial(ma->n, mb.n, ma->probs, mb.probs, rng);
    va.counts = std::move(c.x);
    vb.counts = std::move(c.y);
    return {va, vb};
  }
  if (std::holds_alternative<Scale_draw>(a) && std::holds_alternative<Scale_draw>(b)) {
    va.real = vb.real = shared_scale(rng);
    return {va, vb};
  }
  // Requests of different kinds: independent draws.
  va = sample_marginal(a, rng);
  vb = sample_marginal(b, rng);
  return {va, vb};
}

inline auto run_marginal(Proposal_task task, Random_stream& rng) -> Proposal_outcome {
  for (auto req = task.next(); req; req = task.next()) { task.supply(sample_marginal(*req, rng)); }
  return task.take_outcome();
}

inline auto run_coupled(Proposal_task tx, Proposal_task ty, Random_stream& rng)
    -> std::pair<Proposal_outcome, Proposal_outcome> {
  auto rx = tx.next();
  auto ry = ty.next();
  while (rx || ry) {
    if (rx && ry) {
      auto [vx, vy] = sample_coupled(*rx, *ry, rng);
      tx.supply(std::move(vx));
      ty.supply(std::move(vy));
      rx = tx.next();
      ry = ty.next();
    } else if (rx) {
      tx.supply(sample_marginal(*rx, rng));
      rx = tx.next();
    } else {
      ty.supply(sample_marginal(*ry, rng));
      ry = ty.next();
    }
  }
  return {tx.take_outcome(), ty.take_outcome()};
}

// --- Configuration --------------------------------------------------------

struct Kernel_config {
  std::map<Move_id, double> weights;  // empty: uniform over applicable moves
  double theta = 0.01;                // rate of the above-root exponential in SPR
  bool multi_scale_moves = false;     // moves 7-9
  double scale_exponent_offset = 0.0; // perturbs scaling Jacobians; for testing only
};

inline auto move_applicable(Move_id m, const Sd_model& model, int num_leaves) -> bool {
  switch (m) {
    case Move_id::narrow_swap:
    case Move_id::wide_swap:
    case Move_id::narrow_spr:
    case Move_id::wide_spr: return num_leaves >= 3;
    case Move_id::leaf_time:
      return std::any_of(model.leaf_ranges.begin(), model.leaf_ranges.end(),
                         [](const Interval& r) { return r.hi > r.lo; });
    case Move_id::rescale_above_clades: return !model.constraints.empty();
    case Move_id::add_catastrophe:
    case Move_id::delete_catastrophe:
    case Move_id::move_catastrophe:
    case Move_id::resample_catastrophes: return model.catastrophes;
    case Move_id::rescale_mu: return !model.mu_fixed;
    case Move_id::rescale_kappa: return model.catastrophes && !model.kappa_fixed;
    case Move_id::rescale_one_xi:
    case Move_id::rescale_all_xi: return !model.xi_fixed;
    default: return true;
  }
}

namespace detail {

inline auto non_root_nodes(const Tree& t) -> std::vector<int> {
  auto out = std::vector<int>{};
  for (auto i = 0; i < t.num_nodes(); ++i) {
    if (i != t.root()) { out.push_back(i); }
  }
  return out;
}

inline auto failed(const Sd_state& s) -> Proposal_outcome { return {s, 0.0, true, false}; }

inline auto swap_pairs(const Tree& t) -> std::vector<int> {
  auto out = std::vector<int>{};
  auto n = t.num_nodes();
  for (auto i = 0; i < n; ++i) {
    if (i == t.root()) { continue; }
    for (auto j = i + 1; j < n; ++j) {
      if (j == t.root()) { continue; }
      auto pi = t.parent(i);
      auto pj = t.parent(j);
      if (pi == pj || pi == j || pj == i) { continue; }
      if (t.age(j) < t.age(pi) && t.age(i) < t.age(pj)) { out.push_back(i * n + j); }
    }
  }
  return out;
}

// Branches j where pa(i) could be regrafted: t_pa(j) > t_i, plus the root.
inline auto spr_destinations(const Tree& t, Node_index i) -> std::vector<int> {
  auto out = std::vector<int>{};
  for (auto j = 0; j < t.num_nodes(); ++j) {
    if (j == i) { continue; }
    if (j == t.root() || t.age(t.parent(j)) > t.age(i)) { out.push_back(j); }
  }
  return out;
}

inline auto branch_lengths(const Tree& t) -> std::vector<double> {
  auto out = std::vector<double>(t.num_nodes());
  for (auto i = 0; i < t.num_nodes(); ++i) { out[i] = t.branch_length(i); }
  return out;
}

inline auto count_weights(const std::vector<int>& cats) -> std::vector<double> {
  return std::vector<double>(cats.begin(), cats.end());
}

// Branches sharing an endpoint with branch i, excluding the root.
inline auto neighbour_branches(const Tree& t, Node_index i) -> std::vector<int> {
  auto out = std::vector<int>{};
  auto p = t.parent(i);
  if (p != t.root()) { out.push_back(p); }
  out.push_back(t.sibling(i));
  if (!t.is_leaf(i)) {
    out.push_back(t.children(i)[0]);
    out.push_back(t.children(i)[1]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline auto ordered(const Tree& t) -> bool {
  for (auto i = 0; i < t.num_nodes(); ++i) {
    if (i != t.root() && !(t.age(i) < t.age(t.parent(i)))) { return false; }
  }
  return true;
}

inline auto subtree_nodes(const Tree& t, Node_index i) -> std::vector<Node_index> {
  auto out = std::vector<Node_index>{};
  auto stack = std::vector<Node_index>{i};
  while (!stack.empty()) {
    auto k = stack.back();
    stack.pop_back();
    out.push_back(k);
    if (!t.is_leaf(k)) {
      stack.push_back(t.children(k)[0]);
      stack.push_back(t.children(k)[1]);
    }
  }
  return out;
}

}  // namespace detail

class Kernel;

// --- Moves ----------------------------------------------------------------

namespace moves {

inline auto narrow_swap(const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto cands = std::vector<int>{};
  for (auto i = 0; i < t.num_nodes(); ++i) {
    if (i != t.root() && t.parent(i) != t.root()) { cands.push_back(i); }
  }
  if (cands.empty()) { co_return detail::failed(s); }
  auto v_req = Draw_request{Pick_uniform{std::move(cands)}};
  auto v = co_await draw(v_req);
  auto i = v.index;
  auto p = t.parent(i);
  auto j = t.sibling(p);
  if (t.age(j) >= t.age(p)) { co_return detail::failed(s); }
  auto tree = apply_swap(t, i, j);
  if (!tree) { co_return detail::failed(s); }
  auto out = s;
  out.tree = std::move(*tree);
  co_return Proposal_outcome{std::move(out), 0.0, false, true};
}

inline auto wide_swap(const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto pairs = detail::swap_pairs(t);
  if (pairs.empty()) { co_return detail::failed(s); }
  auto forward = static_cast<double>(pairs.size());
  auto v_req = Draw_request{Pick_uniform{std::move(pairs)}};
  auto v = co_await draw(v_req);
  auto i = v.index / t.num_nodes();
  auto j = v.index % t.num_nodes();
  auto tree = apply_swap(t, i, j);
  if (!tree) { co_return detail::failed(s); }
  auto reverse = static_cast<double>(detail::swap_pairs(*tree).size());
  auto out = s;
  out.tree = std::move(*tree);
  co_return Proposal_outcome{std::move(out), std::log(forward) - std::log(reverse), false, true};
}

// Shared tail of both SPR variants: regraft, update catastrophe counts and
// assemble the Hastings ratio.  `log_time_ratio` is the reverse minus forward
// log density of the regraft time; `log_dest_ratio` the same for the
// destination choice.
inline auto spr_finish(const Sd_model& model, const Sd_state& s, Node_index i, Node_index j, double t_new,
                       double log_time_ratio, double log_dest_ratio) -> Proposal_task {
  const auto& t = s.tree;
  auto tree = apply_spr(t, i, j, t_new);
  if (!tree) { co_return detail::failed(s); }
  auto p = t.parent(i);
  auto h = t.sibling(i);
  auto g = t.parent(p);
  auto r = t.root();
  auto out = s;
  out.tree = std::move(*tree);
  auto log_h = log_time_ratio + log_dest_ratio;
  if (model.catastrophes) {
    auto& c = out.cats;
    // Prune: branch p folds into h, or h becomes the root and loses its count.
    if (p != r) {
      c[h] = s.cats[h] + s.cats[p];
      log_h += log_pmf(Binomial_law{c[h], (t.age(p) - t.age(h)) / (t.age(g) - t.age(h))}, s.cats[h]);
    } else {
      c[h] = 0;
      log_h += log_pmf(conditional_count_law(model, t, s.cats, h), s.cats[h]);
    }
    c[p] = 0;
    if (j == r) {
      auto law = conditional_count_law(model, out.tree, c, r);
      auto v_req = Draw_request{Count_draw{law}};
      auto v = co_await draw(v_req);
      c[r] = v.index;
      log_h -= log_pmf(law, c[r]);
    } else {
      auto q = out.tree.parent(p);
      auto n_j = c[j];
      auto law = Binomial_law{n_j, (t_new - t.age(j)) / (out.tree.age(q) - t.age(j))};
      auto kept = 0;
      if (n_j > 0) {
        auto v_req = Draw_request{Count_draw{law}};
        auto v = co_await draw(v_req);
        kept = v.index;
      }
      c[j] = kept;
      c[p] = n_j - kept;
      log_h -= log_pmf(law, kept);
    }
  }
  co_return Proposal_outcome{std::move(out), log_h, false, true};
}

inline auto narrow_spr(const Sd_model& model, const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto v_req = Draw_request{Pick_uniform{detail::non_root_nodes(t)}};
  auto v = co_await draw(v_req);
  auto i = v.index;
  auto p = t.parent(i);
  if (p == t.root()) { co_return detail::failed(s); }
  auto g = t.parent(p);
  auto j = t.sibling(p);
  auto h = t.sibling(i);
  auto lo = std::max(t.age(i), t.age(j));
  auto hi = t.age(g);
  auto w_req = Draw_request{Uniform_draw{lo, hi}};
  auto w = co_await draw(w_req);
  auto log_time = std::log(hi - lo) - std::log(t.age(g) - std::max(t.age(i), t.age(h)));
  auto task = spr_finish(model, s, i, j, w.real, log_time, 0.0);
  for (auto req = task.next(); req; req = task.next()) {
    auto x_req = Draw_request{*req};
    auto x = co_await draw(x_req);
    task.supply(std::move(x));
  }
  co_return task.take_outcome();
}

inline auto wide_spr(const Sd_model& model, double theta, const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto v_req = Draw_request{Pick_uniform{detail::non_root_nodes(t)}};
  auto v = co_await draw(v_req);
  auto i = v.index;
  auto p = t.parent(i);
  auto h = t.sibling(i);
  auto g = t.parent(p);
  auto r = t.root();
  auto dests = detail::spr_destinations(t, i);
  auto n_forward = static_cast<double>(dests.size());
  auto w_req = Draw_request{Pick_uniform{std::move(dests)}};
  auto w = co_await draw(w_req);
  auto j = w.index;
  if (j == p || j == h) { co_return detail::failed(s); }

  auto t_new = 0.0;
  auto log_forward_time = 0.0;
  if (j == r) {
    auto x_req = Draw_request{Exp_draw{theta, t.age(r)}};
    auto x = co_await draw(x_req);
    t_new = x.real;
    log_forward_time = std::log(theta) - theta * (t_new - t.age(r));
  } else {
    auto lo = std::max(t.age(i), t.age(j));
    auto hi = t.age(t.parent(j));
    auto x_req = Draw_request{Uniform_draw{lo, hi}};
    auto x = co_await draw(x_req);
    t_new = x.real;
    log_forward_time = -std::log(hi - lo);
  }
  // Reverse move: regraft onto h at the current age of p.
  auto log_reverse_time = 0.0;
  if (p == r) {
    log_reverse_time = std::log(theta) - theta * (t.age(p) - t.age(h));
  } else {
    log_reverse_time = -std::log(t.age(g) - std::max(t.age(i), t.age(h)));
  }
  auto proposed = apply_spr(t, i, j, t_new);
  if (!proposed) { co_return detail::failed(s); }
  auto n_reverse = static_cast<double>(detail::spr_destinations(*proposed, i).size());
  auto task = spr_finish(model, s, i, j, t_new, log_reverse_time - log_forward_time,
                         std::log(n_forward) - std::log(n_reverse));
  for (auto req = task.next(); req; req = task.next()) {
    auto x_req = Draw_request{*req};
    auto x = co_await draw(x_req);
    task.supply(std::move(x));
  }
  co_return task.take_outcome();
}

inline auto node_time(const Sd_model& model, const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto internal = std::vector<int>{};
  for (auto i = t.num_leaves(); i < t.num_nodes(); ++i) { internal.push_back(i); }
  auto v_req = Draw_request{Pick_uniform{std::move(internal)}};
  auto v = co_await draw(v_req);
  auto i = v.index;
  auto j = t.eldest_child(i);
  auto out = s;
  auto log_h = 0.0;
  if (i == t.root()) {
    auto ti = t.age(i);
    auto tj = t.age(j);
    auto w_req = Draw_request{Uniform_draw{(ti + tj) / 2.0, 2.0 * ti - tj}};
    auto w = co_await draw(w_req);
    out.tree.set_age(i, w.real);
    log_h = std::log(ti - tj) - std::log(w.real - tj);
  } else {
    auto w_req = Draw_request{Uniform_draw{t.age(j), t.age(t.parent(i))}};
    auto w = co_await draw(w_req);
    out.tree.set_age(i, w.real);
  }
  if (!detail::ordered(out.tree)) { co_return detail::failed(s); }
  if (model.catastrophes) {
    auto branches = std::vector<Node_index>{};
    if (i != t.root()) { branches.push_back(i); }
    branches.push_back(t.children(i)[0]);
    branches.push_back(t.children(i)[1]);
    auto n = 0;
    auto old_counts = std::vector<int>{};
    auto old_probs = std::vector<double>{};
    auto new_probs = std::vector<double>{};
    for (auto b : branches) {
      n += s.cats[b];
      old_counts.push_back(s.cats[b]);
      old_probs.push_back(t.branch_length(b));
      new_probs.push_back(out.tree.branch_length(b));
    }
    if (n > 0) {
      auto norm = [](std::vector<double>& p) {
        auto total = std::accumulate(p.begin(), p.end(), 0.0);
        for (auto& e : p) { e /= total; }
      };
      norm(old_probs);
      norm(new_probs);
      auto w_req = Draw_request{Multinomial_draw{n, new_probs}};
      auto w = co_await draw(w_req);
      for (auto k = std::size_t{0}; k < branches.size(); ++k) { out.cats[branches[k]] = w.counts[k]; }
      log_h += multinomial_log_pmf(old_counts, old_probs) - multinomial_log_pmf(w.counts, new_probs);
    }
  }
  co_return Proposal_outcome{std::move(out), log_h, false, false};
}

inline auto leaf_time(const Sd_model& model, const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto cands = std::vector<int>{};
  for (auto i = 0; i < static_cast<int>(model.leaf_ranges.size()); ++i) {
    if (model.leaf_ranges[i].hi > model.leaf_ranges[i].lo) { cands.push_back(i); }
  }
  if (cands.empty()) { co_return detail::failed(s); }
  auto v_req = Draw_request{Pick_uniform{std::move(cands)}};
  auto v = co_await draw(v_req);
  auto i = v.index;
  auto range = model.leaf_ranges[i];
  auto w_req = Draw_request{Uniform_draw{range.lo, range.hi}};
  auto w = co_await draw(w_req);
  if (w.real >= t.age(t.parent(i))) { co_return detail::failed(s); }
  auto out = s;
  out.tree.set_age(i, w.real);
  co_return Proposal_outcome{std::move(out), 0.0, false, false};
}

// Rescales `targets` (internal nodes, `top` among them) about t0 so that `top`
// lands on a coupled uniform draw; shared by moves 7-9.
inline auto rescale_nodes(const Sd_state& s, std::vector<Node_index> targets, Node_index top, double t0,
                          double exponent_offset, bool co_scale_mu) -> Proposal_task {
  const auto& t = s.tree;
  auto span = t.age(top) - t0;
  if (!(span > 0.0) || targets.empty()) { co_return detail::failed(s); }
  auto v_req = Draw_request{Uniform_draw{t0 + span / 2.0, t0 + 2.0 * span}};
  auto v = co_await draw(v_req);
  auto nu = (v.real - t0) / span;
  auto out = s;
  for (auto k : targets) { out.tree.set_age(k, k == top ? v.real : t0 + nu * (t.age(k) - t0)); }
  if (!detail::ordered(out.tree)) { co_return detail::failed(s); }
  auto m = static_cast<double>(targets.size());
  auto log_h = (m - 2.0 + exponent_offset) * std::log(nu);
  if (co_scale_mu) {
    out.mu = s.mu / nu;
    log_h -= std::log(nu);
  }
  co_return Proposal_outcome{std::move(out), log_h, false, false};
}

inline auto relay(Proposal_task task) -> Proposal_task {
  for (auto req = task.next(); req; req = task.next()) {
    auto x_req = Draw_request{*req};
    auto x = co_await draw(x_req);
    task.supply(std::move(x));
  }
  co_return task.take_outcome();
}

inline auto rescale_tree(const Sd_model& model, double offset, const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto targets = std::vector<Node_index>{};
  for (auto i = t.num_leaves(); i < t.num_nodes(); ++i) { targets.push_back(i); }
  return relay(rescale_nodes(s, targets, t.root(), t.youngest_leaf_age(), offset, !model.mu_fixed));
}

inline auto rescale_subtree(double offset, const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto sets = leaf_sets(t);
  auto weights = std::vector<double>(t.num_nodes(), 0.0);
  for (auto i = t.num_leaves(); i < t.num_nodes(); ++i) { weights[i] = sets[i].count(); }
  auto v_req = Draw_request{Pick_weighted{std::move(weights)}};
  auto v = co_await draw(v_req);
  auto i = v.index;
  auto targets = std::vector<Node_index>{};
  auto t0 = k_inf;
  for (auto k : detail::subtree_nodes(t, i)) {
    if (t.is_leaf(k)) {
      t0 = std::min(t0, t.age(k));
    } else {
      targets.push_back(k);
    }
  }
  auto task = rescale_nodes(s, targets, i, t0, offset, false);
  for (auto req = task.next(); req; req = task.next()) {
    auto x_req = Draw_request{*req};
    auto x = co_await draw(x_req);
    task.supply(std::move(x));
  }
  co_return task.take_outcome();
}

inline auto rescale_above_clades(const Sd_model& model, double offset, const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto sets = leaf_sets(t);
  auto below = std::vector<bool>(t.num_nodes(), false);
  for (const auto& c : model.constraints) {
    auto it = std::find(sets.begin(), sets.end(), c.leaves);
    if (it == sets.end()) { continue; }
    for (auto k : detail::subtree_nodes(t, static_cast<Node_index>(it - sets.begin()))) { below[k] = true; }
  }
  auto targets = std::vector<Node_index>{};
  for (auto i = t.num_leaves(); i < t.num_nodes(); ++i) {
    if (!below[i]) { targets.push_back(i); }
  }
  if (below[t.root()]) { targets.clear(); }
  return relay(rescale_nodes(s, targets, t.root(), t.youngest_leaf_age(), offset, false));
}

inline auto add_catastrophe(double log_eps_ratio, const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto lengths = detail::branch_lengths(t);
  auto total_length = t.total_length();
  auto v_req = Draw_request{Pick_weighted{lengths}};
  auto v = co_await draw(v_req);
  auto i = v.index;
  auto n = s.total_cats();
  auto out = s;
  ++out.cats[i];
  auto log_h = std::log((s.cats[i] + 1.0) / (n + 1.0)) - std::log(lengths[i] / total_length) + log_eps_ratio;
  co_return Proposal_outcome{std::move(out), log_h, false, false};
}

inline auto delete_catastrophe(double log_eps_ratio, const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto n = s.total_cats();
  if (n == 0) { co_return detail::failed(s); }
  auto v_req = Draw_request{Pick_weighted{detail::count_weights(s.cats)}};
  auto v = co_await draw(v_req);
  auto i = v.index;
  auto out = s;
  --out.cats[i];
  auto log_h = std::log(t.branch_length(i) / t.total_length()) - std::log(static_cast<double>(s.cats[i]) / n) +
               log_eps_ratio;
  co_return Proposal_outcome{std::move(out), log_h, false, false};
}

inline auto move_catastrophe(const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  if (s.total_cats() == 0) { co_return detail::failed(s); }
  auto v_req = Draw_request{Pick_weighted{detail::count_weights(s.cats)}};
  auto v = co_await draw(v_req);
  auto i = v.index;
  auto from = detail::neighbour_branches(t, i);
  auto n_from = static_cast<double>(from.size());
  auto w_req = Draw_request{Pick_uniform{std::move(from)}};
  auto w = co_await draw(w_req);
  auto j = w.index;
  auto n_to = static_cast<double>(detail::neighbour_branches(t, j).size());
  auto out = s;
  --out.cats[i];
  ++out.cats[j];
  auto log_h = std::log(s.cats[j] + 1.0) - std::log(static_cast<double>(s.cats[i])) + std::log(n_from) -
               std::log(n_to);
  co_return Proposal_outcome{std::move(out), log_h, false, false};
}

inline auto resample_catastrophes(const Sd_model& model, const Sd_state& s) -> Proposal_task {
  const auto& t = s.tree;
  auto v_req = Draw_request{Pick_weighted{detail::branch_lengths(t)}};
  auto v = co_await draw(v_req);
  auto i = v.index;
  auto law = conditional_count_law(model, t, s.cats, i);
  auto w_req = Draw_request{Count_draw{law}};
  auto w = co_await draw(w_req);
  auto out = s;
  out.cats[i] = w.index;
  co_return Proposal_outcome{std::move(out), log_pmf(law, s.cats[i]) - log_pmf(law, w.index), false, false};
}

inline auto rescale_mu(const Sd_model& model, const Sd_state& s) -> Proposal_task {
  auto v_req = Draw_request{Uniform_draw{s.mu / 2.0, 2.0 * s.mu}};
  auto v = co_await draw(v_req);
  if (!(v.real > model.mu_bounds.lo && v.real < model.mu_bounds.hi)) { co_return detail::failed(s); }
  auto out = s;
  out.mu = v.real;
  co_return Proposal_outcome{std::move(out), std::log(s.mu) - std::log(v.real), false, false};
}

inline auto rescale_kappa(const Sd_model& model, const Sd_state& s) -> Proposal_task {
  if (!(s.kappa > 0.0)) { co_return detail::failed(s); }
  auto v_req = Draw_request{Uniform_draw{s.kappa / 2.0, 2.0 * s.kappa}};
  auto v = co_await draw(v_req);
  if (!(v.real >= model.kappa_bounds.lo && v.real <= model.kappa_bounds.hi && v.real < 1.0)) {
    co_return detail::failed(s);
  }
  auto out = s;
  out.kappa = v.real;
  co_return Proposal_outcome{std::move(out), std::log(s.kappa) - std::log(v.real), false, false};
}

inline auto rescale_one_xi(const Sd_state& s) -> Proposal_task {
  auto leaves = std::vector<int>(s.xi.size());
  std::iota(leaves.begin(), leaves.end(), 0);
  auto v_req = Draw_request{Pick_uniform{std::move(leaves)}};
  auto v = co_await draw(v_req);
  auto i = v.index;
  auto w = 1.0 - s.xi[i];
  if (!(w > 0.0)) { co_return detail::failed(s); }
  auto x_req = Draw_request{Uniform_draw{w / 2.0, 2.0 * w}};
  auto x = co_await draw(x_req);
  if (x.real > 1.0) { co_return detail::failed(s); }
  auto out = s;
  out.xi[i] = 1.0 - x.real;
  co_return Proposal_outcome{std::move(out), std::log(w) - std::log(x.real), false, false};
}

inline auto rescale_all_xi(double offset, const Sd_state& s) -> Proposal_task {
  auto v_req = Draw_request{Scale_draw{}};
  auto v = co_await draw(v_req);
  auto nu = v.real;
  auto out = s;
  for (auto& xi : out.xi) {
    auto w = nu * (1.0 - xi);
    if (w > 1.0) { co_return detail::failed(s); }
    xi = 1.0 - w;
  }
  auto m = static_cast<double>(s.xi.size());
  co_return Proposal_outcome{std::move(out), (m - 2.0 + offset) * std::log(nu), false, false};
}

}  // namespace moves

// --- Kernel ---------------------------------------------------------------

class Kernel {
 public:
  Kernel(Sd_model model, Kernel_config config, int num_leaves)
      : model_{std::move(model)}, config_{std::move(config)} {
    if (!(config_.theta > 0.0)) { throw std::invalid_argument{"kernel: theta must be positive"}; }
    for (auto m : k_all_moves) {
      auto w = 0.0;
      if (config_.weights.empty()) {
        w = 1.0;
      } else if (auto it = config_.weights.find(m); it != config_.weights.end()) {
        w = it->second;
      }
      if (w < 0.0) { throw std::invalid_argument{"kernel: negative weight for " + std::string{move_name(m)}}; }
      if (!move_applicable(m, model_, num_leaves)) { w = 0.0; }
      if (is_multi_scale(m) && !config_.multi_scale_moves) { w = 0.0; }
      if (w > 0.0) {
        moves_.push_back(m);
        weights_.push_back(w);
      }
    }
    if (moves_.empty()) { throw std::invalid_argument{"kernel: no applicable moves have positive weight"}; }
    auto total = std::accumulate(weights_.begin(), weights_.end(), 0.0);
    for (auto& w : weights_) { w /= total; }
    auto add = weight(Move_id::add_catastrophe);
    auto del = weight(Move_id::delete_catastrophe);
    if ((add > 0.0) != (del > 0.0)) {
      throw std::invalid_argument{"kernel: add_catastrophe and delete_catastrophe must be enabled together"};
    }
    if (add > 0.0) { log_add_over_delete_ = std::log(add) - std::log(del); }
  }

  auto model() const -> const Sd_model& { return model_; }
  auto config() const -> const Kernel_config& { return config_; }
  auto moves() const -> const std::vector<Move_id>& { return moves_; }
  auto weights() const -> const std::vector<double>& { return weights_; }

  auto weight(Move_id m) const -> double {
    for (auto k = std::size_t{0}; k < moves_.size(); ++k) {
      if (moves_[k] == m) { return weights_[k]; }
    }
    return 0.0;
  }

  // One categorical draw; in coupled mode the result drives both chains.
  auto pick(Random_stream& rng) const -> Move_id { return moves_[sample_categorical(weights_, rng)]; }

  // `s` must outlive the returned task.
  auto propose(Move_id m, const Sd_state& s) const -> Proposal_task {
    auto offset = config_.scale_exponent_offset;
    switch (m) {
      case Move_id::narrow_swap: return moves::narrow_swap(s);
      case Move_id::wide_swap: return moves::wide_swap(s);
      case Move_id::narrow_spr: return moves::narrow_spr(model_, s);
      case Move_id::wide_spr: return moves::wide_spr(model_, config_.theta, s);
      case Move_id::node_time: return moves::node_time(model_, s);
      case Move_id::leaf_time: return moves::leaf_time(model_, s);
      case Move_id::rescale_tree: return moves::rescale_tree(model_, offset, s);
      case Move_id::rescale_subtree: return moves::rescale_subtree(offset, s);
      case Move_id::rescale_above_clades: return moves::rescale_above_clades(model_, offset, s);
      case Move_id::add_catastrophe: return moves::add_catastrophe(-log_add_over_delete_, s);
      case Move_id::delete_catastrophe: return moves::delete_catastrophe(log_add_over_delete_, s);
      case Move_id::move_catastrophe: return moves::move_catastrophe(s);
      case Move_id::resample_catastrophes: return moves::resample_catastrophes(model_, s);
      case Move_id::rescale_mu: return moves::rescale_mu(model_, s);
      case Move_id::rescale_kappa: return moves::rescale_kappa(model_, s);
      case Move_id::rescale_one_xi: return moves::rescale_one_xi(s);
      case Move_id::rescale_all_xi: return moves::rescale_all_xi(offset, s);
    }
    throw std::logic_error{"kernel: unknown move"};
  }

 private:
  Sd_model model_;
  Kernel_config config_;
  std::vector<Move_id> moves_;
  std::vector<double> weights_;
  double log_add_over_delete_ = 0.0;
};

// --- Metropolis-Hastings --------------------------------------------------

// A state with its cached log prior and log likelihood.
struct Chain_state {
  Sd_state state;
  double log_prior = 0.0;
  double log_lik = 0.0;

  auto log_posterior() const -> double { return log_prior + log_lik; }
};

class Invariant_breach : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline auto evaluate(const Sd_model& model, Sd_state s) -> Chain_state {
  auto lp = log_prior(model, s);
  auto ll = lp == k_neg_inf ? 0.0 : log_likelihood(model, s);
  return Chain_state{std::move(s), lp, ll};
}

struct Step_result {
  Move_id move;
  bool accepted = false;
  bool topology_changed = false;
};

// Accepts iff log(u) <= log h + log pi(X') - log pi(X); failed proposals are
// rejected without evaluation.
inline auto mh_decide(const Sd_model& model, Chain_state& current, Proposal_outcome& outcome, double log_u) -> bool {
  if (!std::isfinite(current.log_posterior())) {
    throw Invariant_breach{"current state has non-finite log posterior"};
  }
  if (outcome.failed) { return false; }
  auto lp = log_prior(model, outcome.state);
  if (lp == k_neg_inf) { return false; }
  auto ll = log_likelihood(model, outcome.state);
  if (ll == k_neg_inf || std::isnan(ll)) { return false; }
  auto ratio = outcome.log_hastings + lp + ll - current.log_posterior();
  if (std::isnan(ratio) || !(log_u <= ratio)) { return false; }
  current = Chain_state{std::move(outcome.state), lp, ll};
  return true;
}

inline auto marginal_step(const Kernel& kernel, Chain_state& chain, Random_stream& rng) -> Step_result {
  auto m = kernel.pick(rng);
  auto outcome = run_marginal(kernel.propose(m, chain.state), rng);
  auto log_u = std::log(shared_uniform(rng));
  auto topology = outcome.topology_changed;
  auto accepted = mh_decide(kernel.model(), chain, outcome, log_u);
  return {m, accepted, accepted && topology};
}

inline auto coupled_step(const Kernel& kernel, Chain_state& x, Chain_state& y, Random_stream& rng)
    -> std::pair<Step_result, Step_result> {
  auto m = kernel.pick(rng);
  auto [ox, oy] = run_coupled(kernel.propose(m, x.state), kernel.propose(m, y.state), rng);
  auto log_u = std::log(shared_uniform(rng));
  auto tx = ox.topology_changed;
  auto ty = oy.topology_changed;
  auto ax = mh_decide(kernel.model(), x, ox, log_u);
  auto ay = mh_decide(kernel.model(), y, oy, log_u);
  return {Step_result{m, ax, ax && tx}, Step_result{m, ay, ay && ty}};
}

}  // namespace cphylo
