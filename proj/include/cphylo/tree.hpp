#pragma once

// Rooted bifurcating dated trees.
//
// Node indices are labels minus one: leaves occupy 0 .. |L|-1 and internal
// nodes |L| .. 2|L|-2.  Leaf indices are fixed; internal indices are an
// arbitrary permutation of the internal pool, which housekeeping rewrites so
// that clades shared by two trees carry the same index.  Children are always
// stored in increasing index order so that structurally identical trees with
// identical labels are bitwise identical.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "leaf_set.hpp"
#include "random_stream.hpp"

namespace cphylo {

using Node_index = int;
inline constexpr Node_index k_no_node = -1;

using Taxon_names = std::vector<std::string>;

struct Node {
  Node_index parent = k_no_node;
  std::array<Node_index, 2> children{k_no_node, k_no_node};
  double age = 0.0;

  friend auto operator==(const Node&, const Node&) -> bool = default;
};

class Tree_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tree {
 public:
  Tree() = default;
  Tree(std::shared_ptr<const Taxon_names> taxa, std::vector<Node> nodes, Node_index root)
      : taxa_{std::move(taxa)}, nodes_{std::move(nodes)}, root_{root} {
    for (auto i = num_leaves(); i < num_nodes(); ++i) { sort_children(i); }
  }

  auto num_leaves() const -> int { return static_cast<int>(taxa_->size()); }
  auto num_nodes() const -> int { return static_cast<int>(nodes_.size()); }
  auto root() const -> Node_index { return root_; }
  auto taxa() const -> const std::shared_ptr<const Taxon_names>& { return taxa_; }
  auto taxon(Node_index leaf) const -> const std::string& { return (*taxa_)[leaf]; }

  auto node(Node_index i) const -> const Node& { return nodes_[i]; }
  auto nodes() const -> const std::vector<Node>& { return nodes_; }
  auto parent(Node_index i) const -> Node_index { return nodes_[i].parent; }
  auto children(Node_index i) const -> const std::array<Node_index, 2>& { return nodes_[i].children; }
  auto age(Node_index i) const -> double { return nodes_[i].age; }
  auto is_leaf(Node_index i) const -> bool { return i < num_leaves(); }
  auto is_root(Node_index i) const -> bool { return i == root_; }

  auto sibling(Node_index i) const -> Node_index {
    auto p = parent(i);
    if (p == k_no_node) { return k_no_node; }
    const auto& c = children(p);
    return c[0] == i ? c[1] : c[0];
  }

  // Delta_i = t_pa(i) - t_i; zero for the root.
  auto branch_length(Node_index i) const -> double {
    auto p = parent(i);
    return p == k_no_node ? 0.0 : age(p) - age(i);
  }

  // Sum of branch lengths below the root.
  auto total_length() const -> double {
    auto total = 0.0;
    for (auto i = 0; i < num_nodes(); ++i) { total += branch_length(i); }
    return total;
  }

  auto eldest_child(Node_index i) const -> Node_index {
    const auto& c = children(i);
    return age(c[0]) >= age(c[1]) ? c[0] : c[1];
  }

  auto is_ancestor(Node_index anc, Node_index i) const -> bool {
    for (auto k = parent(i); k != k_no_node; k = parent(k)) {
      if (k == anc) { return true; }
    }
    return false;
  }

  auto youngest_leaf_age() const -> double {
    auto t = age(0);
    for (auto i = 1; i < num_leaves(); ++i) { t = std::min(t, age(i)); }
    return t;
  }

  auto post_order() const -> std::vector<Node_index> {
    auto order = std::vector<Node_index>{};
    order.reserve(nodes_.size());
    auto stack = std::vector<Node_index>{root_};
    while (!stack.empty()) {
      auto i = stack.back();
      stack.pop_back();
      order.push_back(i);
      if (!is_leaf(i)) {
        stack.push_back(children(i)[0]);
        stack.push_back(children(i)[1]);
      }
    }
    std::reverse(order.begin(), order.end());
    return order;
  }

  // Low-level mutation; callers restore the invariants.
  auto set_age(Node_index i, double t) -> void { nodes_[i].age = t; }
  auto mutable_node(Node_index i) -> Node& { return nodes_[i]; }
  auto set_root(Node_index r) -> void { root_ = r; }
  auto sort_children(Node_index i) -> void {
    auto& c = nodes_[i].children;
    if (c[0] > c[1]) { std::swap(c[0], c[1]); }
  }

  friend auto operator==(const Tree& a, const Tree& b) -> bool {
    return a.root_ == b.root_ && a.nodes_ == b.nodes_ &&
           (a.taxa_ == b.taxa_ || (a.taxa_ && b.taxa_ && *a.taxa_ == *b.taxa_));
  }

 private:
  std::shared_ptr<const Taxon_names> taxa_ = std::make_shared<const Taxon_names>();
  std::vector<Node> nodes_;
  Node_index root_ = k_no_node;
};

// Returns a description of the first broken invariant, if any.
inline auto validate(const Tree& tree) -> std::optional<std::string> {
  auto n = tree.num_leaves();
  if (n < 2) { return "tree needs at least two leaves"; }
  if (tree.num_nodes() != 2 * n - 1) { return "node count is not 2|L|-1"; }
  if (tree.root() < n || tree.root() >= tree.num_nodes()) { return "root is not an internal node"; }
  if (tree.parent(tree.root()) != k_no_node) { return "root has a parent"; }
  for (auto i = 0; i < tree.num_nodes(); ++i) {
    const auto& node = tree.node(i);
    if (tree.is_leaf(i)) {
      if (node.children[0] != k_no_node || node.children[1] != k_no_node) {
        return "leaf " + std::to_string(i) + " has children";
      }
    } else {
      for (auto c : node.children) {
        if (c < 0 || c >= tree.num_nodes()) { return "internal node " + std::to_string(i) + " lacks two children"; }
        if (tree.parent(c) != i) { return "child " + std::to_string(c) + " does not point back to " + std::to_string(i); }
        if (!(tree.age(c) < node.age)) { return "node " + std::to_string(c) + " is not younger than its parent"; }
      }
      if (node.children[0] >= node.children[1]) { return "children of " + std::to_string(i) + " not ordered"; }
    }
    if (i != tree.root() && node.parent == k_no_node) { return "node " + std::to_string(i) + " is detached"; }
  }
  auto seen = std::vector<bool>(tree.num_nodes(), false);
  auto order = tree.post_order();
  if (static_cast<int>(order.size()) != tree.num_nodes()) { return "tree is not connected"; }
  for (auto i : order) {
    if (seen[i]) { return "cycle through node " + std::to_string(i); }
    seen[i] = true;
  }
  return std::nullopt;
}

// Leaf set below every node.
inline auto leaf_sets(const Tree& tree) -> std::vector<Leaf_set> {
  auto sets = std::vector<Leaf_set>(tree.num_nodes(), Leaf_set{tree.num_leaves()});
  for (auto i : tree.post_order()) {
    if (tree.is_leaf(i)) {
      sets[i].set(i);
    } else {
      sets[i] = sets[tree.children(i)[0]];
      sets[i] |= sets[tree.children(i)[1]];
    }
  }
  return sets;
}

using Clade_map = std::map<Leaf_set, Node_index>;

// One entry per internal node; the full leaf set maps to the root.
inline auto clades(const Tree& tree) -> Clade_map {
  auto sets = leaf_sets(tree);
  auto out = Clade_map{};
  for (auto i = tree.num_leaves(); i < tree.num_nodes(); ++i) { out.emplace(sets[i], i); }
  return out;
}

// Nontrivial bipartitions of the unrooted tree, oriented to contain leaf 0.
using Split = Leaf_set;

inline auto canonical_split(const Leaf_set& side) -> Split { return side.test(0) ? side : side.complement(); }

inline auto splits(const Tree& tree) -> std::set<Split> {
  auto out = std::set<Split>{};
  auto n = tree.num_leaves();
  auto sets = leaf_sets(tree);
  for (auto i = n; i < tree.num_nodes(); ++i) {
    if (i == tree.root()) { continue; }
    auto k = sets[i].count();
    if (k >= 2 && n - k >= 2) { out.insert(canonical_split(sets[i])); }
  }
  return out;
}

// Same clades with bitwise-equal ages, and equal leaf ages.
inline auto tree_equal(const Tree& x, const Tree& y) -> bool {
  if (x.num_leaves() != y.num_leaves()) { return false; }
  for (auto i = 0; i < x.num_leaves(); ++i) {
    if (x.age(i) != y.age(i)) { return false; }
  }
  auto cx = clades(x);
  auto cy = clades(y);
  if (cx.size() != cy.size()) { return false; }
  for (const auto& [set, ix] : cx) {
    auto it = cy.find(set);
    if (it == cy.end() || x.age(ix) != y.age(it->second)) { return false; }
  }
  return true;
}

// --- Relabeling -----------------------------------------------------------

// new_index[old] for every node.
using Relabeling = std::vector<Node_index>;

inline auto relabel(const Tree& tree, const Relabeling& new_index) -> Tree {
  auto nodes = std::vector<Node>(tree.num_nodes());
  for (auto i = 0; i < tree.num_nodes(); ++i) {
    const auto& old = tree.node(i);
    auto& fresh = nodes[new_index[i]];
    fresh.age = old.age;
    fresh.parent = old.parent == k_no_node ? k_no_node : new_index[old.parent];
    for (auto k = 0; k < 2; ++k) {
      fresh.children[k] = old.children[k] == k_no_node ? k_no_node : new_index[old.children[k]];
    }
  }
  return Tree{tree.taxa(), std::move(nodes), new_index[tree.root()]};
}

namespace detail {

// In-order traversal with children visited in order of their smallest leaf,
// which depends on topology only and not on internal labels.
inline auto canonical_in_order(const Tree& tree, const std::vector<Leaf_set>& sets) -> std::vector<Node_index> {
  auto out = std::vector<Node_index>{};
  auto visit = [&](auto&& self, Node_index i) -> void {
    if (tree.is_leaf(i)) { return; }
    auto a = tree.children(i)[0];
    auto b = tree.children(i)[1];
    if (sets[a].first() > sets[b].first()) { std::swap(a, b); }
    self(self, a);
    out.push_back(i);
    self(self, b);
  };
  visit(visit, tree.root());
  return out;
}

// For each internal node, the nearest proper ancestor whose clade is in
// `matched` (k_no_node for matched nodes and the root).
inline auto region_roots(const Tree& tree, const std::vector<bool>& matched) -> std::vector<Node_index> {
  auto out = std::vector<Node_index>(tree.num_nodes(), k_no_node);
  auto order = tree.post_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto i = *it;
    if (tree.is_leaf(i) || matched[i]) { continue; }
    auto p = tree.parent(i);
    out[i] = matched[p] ? p : out[p];
  }
  return out;
}

}  // namespace detail

struct Housekeeping_result {
  Tree tree;
  Relabeling new_index;
};

// Relabels y so that every clade shared with x carries x's label, and the
// remaining nodes inside each shared clade draw their labels from the subset
// x uses there (assigned in canonical in-order order).
inline auto housekeeping_relabeling(const Tree& x, const Tree& y) -> Relabeling {
  if (x.num_leaves() != y.num_leaves() || *x.taxa() != *y.taxa()) {
    throw Tree_error{"housekeeping: trees have different leaf sets"};
  }
  auto sx = leaf_sets(x);
  auto sy = leaf_sets(y);
  auto cx = std::unordered_map<Leaf_set, Node_index, Leaf_set_hash>{};
  auto cy = std::unordered_map<Leaf_set, Node_index, Leaf_set_hash>{};
  for (auto i = x.num_leaves(); i < x.num_nodes(); ++i) { cx.emplace(sx[i], i); }
  for (auto i = y.num_leaves(); i < y.num_nodes(); ++i) { cy.emplace(sy[i], i); }

  auto matched_x = std::vector<bool>(x.num_nodes(), false);
  auto matched_y = std::vector<bool>(y.num_nodes(), false);
  auto new_index = Relabeling(y.num_nodes(), k_no_node);
  for (auto i = 0; i < y.num_leaves(); ++i) { new_index[i] = i; }
  for (auto i = y.num_leaves(); i < y.num_nodes(); ++i) {
    auto it = cx.find(sy[i]);
    if (it != cx.end()) {
      matched_y[i] = true;
      matched_x[it->second] = true;
      new_index[i] = it->second;
    }
  }

  auto region_x = detail::region_roots(x, matched_x);
  auto region_y = detail::region_roots(y, matched_y);
  auto free_labels = std::map<Node_index, std::vector<Node_index>>{};  // keyed by x region root
  for (auto i : detail::canonical_in_order(x, sx)) {
    if (!matched_x[i]) { free_labels[region_x[i]].push_back(i); }
  }
  auto cursor = std::map<Node_index, std::size_t>{};
  for (auto i : detail::canonical_in_order(y, sy)) {
    if (matched_y[i]) { continue; }
    auto key = new_index[region_y[i]];
    auto& pool = free_labels[key];
    auto& pos = cursor[key];
    if (pos >= pool.size()) { throw Tree_error{"housekeeping: label pools out of balance"}; }
    new_index[i] = pool[pos++];
  }
  return new_index;
}

inline auto housekeeping(const Tree& x, const Tree& y) -> Tree { return relabel(y, housekeeping_relabeling(x, y)); }

// --- Structural edits -----------------------------------------------------

// Prune pa(i) and regraft it on branch j at `new_parent_age`.  Returns nullopt
// when the reattachment is structurally or temporally impossible.
inline auto apply_spr(const Tree& tree, Node_index i, Node_index j, double new_parent_age) -> std::optional<Tree> {
  if (i == tree.root() || i == j || j < 0 || j >= tree.num_nodes()) { return std::nullopt; }
  auto p = tree.parent(i);
  if (j == p || tree.is_ancestor(i, j)) { return std::nullopt; }
  auto h = tree.sibling(i);
  auto g = tree.parent(p);
  auto q = tree.parent(j) == p ? g : tree.parent(j);
  if (!(new_parent_age > tree.age(i)) || !(new_parent_age > tree.age(j))) { return std::nullopt; }
  if (q != k_no_node && !(new_parent_age < tree.age(q))) { return std::nullopt; }

  auto out = tree;
  auto replace_child = [&out](Node_index parent, Node_index from, Node_index to) {
    auto& c = out.mutable_node(parent).children;
    (c[0] == from ? c[0] : c[1]) = to;
    out.sort_children(parent);
  };

  // Prune.
  if (g == k_no_node) {
    out.set_root(h);
    out.mutable_node(h).parent = k_no_node;
  } else {
    replace_child(g, p, h);
    out.mutable_node(h).parent = g;
  }
  // Regraft.
  out.mutable_node(p).children = {i, j};
  out.sort_children(p);
  out.mutable_node(j).parent = p;
  out.mutable_node(p).parent = q;
  if (q == k_no_node) {
    out.set_root(p);
  } else {
    replace_child(q, j, p);
  }
  out.set_age(p, new_parent_age);
  return out;
}

// Exchange the parents of i and j.
inline auto apply_swap(const Tree& tree, Node_index i, Node_index j) -> std::optional<Tree> {
  if (i == j || i == tree.root() || j == tree.root()) { return std::nullopt; }
  auto pi = tree.parent(i);
  auto pj = tree.parent(j);
  if (pi == pj) { return tree; }
  if (!(tree.age(j) < tree.age(pi)) || !(tree.age(i) < tree.age(pj))) { return std::nullopt; }
  auto out = tree;
  auto& ci = out.mutable_node(pi).children;
  (ci[0] == i ? ci[0] : ci[1]) = j;
  auto& cj = out.mutable_node(pj).children;
  (cj[0] == j ? cj[0] : cj[1]) = i;
  out.mutable_node(i).parent = pj;
  out.mutable_node(j).parent = pi;
  out.sort_children(pi);
  out.sort_children(pj);
  return out;
}

// --- Random trees ---------------------------------------------------------

// Sequential-coalescent topology, internal ages rescaled so the root sits at
// `root_age` and all leaves at 0.
inline auto random_tree(std::shared_ptr<const Taxon_names> taxa, double root_age, Random_stream& rng) -> Tree {
  auto n = static_cast<int>(taxa->size());
  if (n < 2) { throw Tree_error{"random_tree: need at least two leaves"}; }
  if (!(root_age > 0.0)) { throw Tree_error{"random_tree: root age must be positive"}; }
  auto nodes = std::vector<Node>(2 * n - 1);
  auto lineages = std::vector<Node_index>{};
  for (auto i = 0; i < n; ++i) { lineages.push_back(i); }
  auto t = 0.0;
  for (auto next = n; next < 2 * n - 1; ++next) {
    auto k = static_cast<double>(lineages.size());
    t += rng.exponential(k * (k - 1.0) / 2.0);
    auto a = rng.index(lineages.size());
    auto b = rng.index(lineages.size() - 1);
    if (b >= a) { ++b; }
    auto ca = lineages[a];
    auto cb = lineages[b];
    nodes[next].children = {ca, cb};
    nodes[next].age = t;
    nodes[ca].parent = next;
    nodes[cb].parent = next;
    lineages.erase(lineages.begin() + static_cast<std::ptrdiff_t>(std::max(a, b)));
    lineages.erase(lineages.begin() + static_cast<std::ptrdiff_t>(std::min(a, b)));
    lineages.push_back(next);
  }
  auto scale = root_age / t;
  for (auto i = n; i < 2 * n - 1; ++i) { nodes[i].age *= scale; }
  nodes[2 * n - 2].age = root_age;
  return Tree{std::move(taxa), std::move(nodes), 2 * n - 2};
}

}  // namespace cphylo
