#pragma once

// Rooted Newick with branch lengths.  Ages are reconstructed against a
// youngest-leaf-at-zero baseline; non-ultrametric input keeps its leaf ages.

#include <charconv>
#include <cctype>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tree.hpp"

namespace cphylo {

class Newick_error : public std::runtime_error {
 public:
  Newick_error(const std::string& what, std::size_t position)
      : std::runtime_error{what + " at position " + std::to_string(position)}, position_{position} {}
  auto position() const -> std::size_t { return position_; }

 private:
  std::size_t position_;
};

namespace detail {

struct Newick_parser {
  std::string_view text;
  std::size_t pos = 0;

  struct Raw_node {
    std::string label;
    double length = 0.0;
    bool has_length = false;
    std::vector<int> children;
    std::size_t position = 0;
  };
  std::vector<Raw_node> raw;

  auto skip_ws() -> void {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) { ++pos; }
  }
  auto peek() -> char {
    skip_ws();
    return pos < text.size() ? text[pos] : '\0';
  }
  auto expect(char c) -> void {
    if (peek() != c) { throw Newick_error{std::string{"expected '"} + c + "'", pos}; }
    ++pos;
  }

  auto parse_label() -> std::string {
    skip_ws();
    auto start = pos;
    while (pos < text.size()) {
      auto c = text[pos];
      if (c == '(' || c == ')' || c == ',' || c == ':' || c == ';' ||
          std::isspace(static_cast<unsigned char>(c))) {
        break;
      }
      if (c == '[') { throw Newick_error{"comments are not supported", pos}; }
      ++pos;
    }
    return std::string{text.substr(start, pos - start)};
  }

  auto parse_length(Raw_node& node) -> void {
    if (peek() != ':') { return; }
    ++pos;
    skip_ws();
    auto start = pos;
    while (pos < text.size() && (std::isdigit(static_cast<unsigned char>(text[pos])) || text[pos] == '.' ||
                                 text[pos] == 'e' || text[pos] == 'E' || text[pos] == '-' || text[pos] == '+')) {
      ++pos;
    }
    auto value = 0.0;
    auto [ptr, ec] = std::from_chars(text.data() + start, text.data() + pos, value);
    if (ec != std::errc{} || ptr != text.data() + pos || start == pos) {
      throw Newick_error{"malformed branch length", start};
    }
    if (value < 0.0) { throw Newick_error{"negative branch length", start}; }
    node.length = value;
    node.has_length = true;
  }

  auto parse_subtree() -> int {
    auto here = Raw_node{};
    here.position = pos;
    if (peek() == '(') {
      ++pos;
      here.children.push_back(parse_subtree());
      while (peek() == ',') {
        ++pos;
        here.children.push_back(parse_subtree());
      }
      expect(')');
      if (here.children.size() != 2) {
        throw Newick_error{"node of degree " + std::to_string(here.children.size()) + " (tree must be bifurcating)",
                           here.position};
      }
      here.label = parse_label();
    } else {
      here.label = parse_label();
      if (here.label.empty()) { throw Newick_error{"missing leaf name", pos}; }
    }
    parse_length(here);
    raw.push_back(std::move(here));
    return static_cast<int>(raw.size()) - 1;
  }
};

}  // namespace detail

// Parses `text`.  When `taxa` is given, leaf names are mapped onto that fixed
// ordering; otherwise leaves are indexed in order of appearance.
inline auto parse_newick(std::string_view text, std::shared_ptr<const Taxon_names> taxa = nullptr) -> Tree {
  auto parser = detail::Newick_parser{text, 0, {}};
  auto top = parser.parse_subtree();
  parser.expect(';');
  if (parser.peek() != '\0') { throw Newick_error{"trailing characters after ';'", parser.pos}; }
  auto& raw = parser.raw;

  auto leaves = std::vector<int>{};
  for (auto k = 0; k < static_cast<int>(raw.size()); ++k) {
    if (raw[k].children.empty()) { leaves.push_back(k); }
  }
  // Raw nodes are stored in post-order; appearance order of leaves is their
  // order in `raw` as well.
  auto names = std::unordered_map<std::string, int>{};
  for (auto k : leaves) {
    if (!names.emplace(raw[k].label, k).second) {
      throw Newick_error{"duplicate leaf name '" + raw[k].label + "'", raw[k].position};
    }
  }
  if (leaves.size() < 2) { throw Newick_error{"tree needs at least two leaves", 0}; }
  if (!taxa) {
    auto owned = std::make_shared<Taxon_names>();
    for (auto k : leaves) { owned->push_back(raw[k].label); }
    taxa = std::move(owned);
  } else if (taxa->size() != leaves.size()) {
    throw Newick_error{"leaf count does not match taxon set", 0};
  }
  auto n = static_cast<int>(leaves.size());

  auto index_of = std::vector<Node_index>(raw.size(), k_no_node);
  for (auto t = 0; t < n; ++t) {
    auto it = names.find((*taxa)[t]);
    if (it == names.end()) { throw Newick_error{"taxon '" + (*taxa)[t] + "' missing from tree", 0}; }
    index_of[it->second] = t;
  }
  auto next_internal = n;
  for (auto k = 0; k < static_cast<int>(raw.size()); ++k) {
    if (!raw[k].children.empty()) { index_of[k] = next_internal++; }
  }

  // Depths from the root, then ages against the deepest leaf.
  auto depth = std::vector<double>(raw.size(), 0.0);
  for (auto k = static_cast<int>(raw.size()) - 1; k >= 0; --k) {
    for (auto c : raw[k].children) {
      if (!raw[c].has_length) { throw Newick_error{"missing branch length", raw[c].position}; }
      depth[c] = depth[k] + raw[c].length;
    }
  }
  auto max_depth = 0.0;
  for (auto k : leaves) { max_depth = std::max(max_depth, depth[k]); }

  auto nodes = std::vector<Node>(2 * n - 1);
  for (auto k = 0; k < static_cast<int>(raw.size()); ++k) {
    auto i = index_of[k];
    nodes[i].age = max_depth - depth[k];
    for (auto c = 0; c < static_cast<int>(raw[k].children.size()); ++c) {
      auto child = index_of[raw[k].children[c]];
      nodes[i].children[c] = child;
      nodes[child].parent = i;
    }
  }
  for (auto k : leaves) {
    auto& a = nodes[index_of[k]].age;
    if (a < 1e-12 * std::max(1.0, max_depth)) { a = 0.0; }
  }
  auto tree = Tree{std::move(taxa), std::move(nodes), index_of[top]};
  if (auto err = validate(tree)) { throw Newick_error{"invalid tree: " + *err, 0}; }
  return tree;
}

inline auto format_number(double value) -> std::string {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

inline auto serialize_newick(const Tree& tree) -> std::string {
  auto out = std::string{};
  auto write = [&](auto&& self, Node_index i) -> void {
    if (tree.is_leaf(i)) {
      out += tree.taxon(i);
    } else {
      out += '(';
      self(self, tree.children(i)[0]);
      out += ',';
      self(self, tree.children(i)[1]);
      out += ')';
    }
    if (i != tree.root()) {
      out += ':';
      out += format_number(tree.branch_length(i));
    }
  };
  write(write, tree.root());
  out += ';';
  return out;
}

}  // namespace cphylo
