#pragma once

#include <bit>
#include <cstdint>
#include <functional>
#include <string>
#include <tuple>
#include <vector>

namespace cphylo {

// Fixed-width bitset over leaf indices, sized once for |L| leaves.
class Leaf_set {
 public:
  Leaf_set() = default;
  explicit Leaf_set(int num_leaves) : size_{num_leaves}, words_((num_leaves + 63) / 64, 0) {}

  auto size() const -> int { return size_; }
  auto set(int leaf) -> void { words_[leaf / 64] |= std::uint64_t{1} << (leaf % 64); }
  auto test(int leaf) const -> bool { return (words_[leaf / 64] >> (leaf % 64)) & 1u; }

  auto count() const -> int {
    auto c = 0;
    for (auto w : words_) { c += std::popcount(w); }
    return c;
  }

  auto empty() const -> bool { return count() == 0; }

  auto operator|=(const Leaf_set& other) -> Leaf_set& {
    for (auto k = std::size_t{0}; k < words_.size(); ++k) { words_[k] |= other.words_[k]; }
    return *this;
  }

  auto complement() const -> Leaf_set {
    auto out = *this;
    for (auto& w : out.words_) { w = ~w; }
    if (size_ % 64 != 0 && !out.words_.empty()) {
      out.words_.back() &= (std::uint64_t{1} << (size_ % 64)) - 1;
    }
    return out;
  }

  auto is_subset_of(const Leaf_set& other) const -> bool {
    for (auto k = std::size_t{0}; k < words_.size(); ++k) {
      if ((words_[k] & ~other.words_[k]) != 0) { return false; }
    }
    return true;
  }

  auto intersects(const Leaf_set& other) const -> bool {
    for (auto k = std::size_t{0}; k < words_.size(); ++k) {
      if ((words_[k] & other.words_[k]) != 0) { return true; }
    }
    return false;
  }

  auto first() const -> int {
    for (auto k = std::size_t{0}; k < words_.size(); ++k) {
      if (words_[k] != 0) { return static_cast<int>(k * 64) + std::countr_zero(words_[k]); }
    }
    return -1;
  }

  // Big-endian hex rendering: leaf 0 is the lowest bit of the last digit.
  auto to_hex() const -> std::string {
    static constexpr char digits[] = "0123456789abcdef";
    auto out = std::string{};
    auto num_digits = (size_ + 3) / 4;
    for (auto d = num_digits - 1; d >= 0; --d) {
      auto nibble = 0;
      for (auto b = 0; b < 4; ++b) {
        auto leaf = d * 4 + b;
        if (leaf < size_ && test(leaf)) { nibble |= 1 << b; }
      }
      out.push_back(digits[nibble]);
    }
    return out;
  }

  auto words() const -> const std::vector<std::uint64_t>& { return words_; }

  friend auto operator==(const Leaf_set&, const Leaf_set&) -> bool = default;
  friend auto operator<=>(const Leaf_set& a, const Leaf_set& b) {
    return std::tie(a.size_, a.words_) <=> std::tie(b.size_, b.words_);
  }

 private:
  int size_ = 0;
  std::vector<std::uint64_t> words_;
};

struct Leaf_set_hash {
  auto operator()(const Leaf_set& s) const noexcept -> std::size_t {
    auto h = std::size_t{0xcbf29ce484222325ull};
    for (auto w : s.words()) { h = (h ^ std::hash<std::uint64_t>{}(w)) * 0x100000001b3ull; }
    return h;
  }
};

}  // namespace cphylo
