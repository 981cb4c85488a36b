#pragma once

// Counter-based random streams (Philox4x32-10).
//
// A stream is identified by (seed, stream_id).  The 64-bit seed is the Philox
// key, the stream id occupies the upper half of the 128-bit counter and the
// lower half counts blocks, so streams with distinct ids never overlap.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

namespace cphylo {

class Random_stream {
 public:
  using result_type = std::uint32_t;

  Random_stream() : Random_stream{0, 0} {}
  Random_stream(std::uint64_t seed, std::uint64_t stream_id)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        stream_id_{stream_id} {}

  static constexpr auto min() -> result_type { return 0; }
  static constexpr auto max() -> result_type { return std::numeric_limits<result_type>::max(); }

  auto operator()() -> result_type {
    if (lane_ == 4) { refill(); }
    return buffer_[lane_++];
  }

  // Uniform on [0, 1) with 53 random bits.
  auto uniform() -> double {
    auto hi = static_cast<std::uint64_t>((*this)()) >> 5;   // 27 bits
    auto lo = static_cast<std::uint64_t>((*this)()) >> 6;   // 26 bits
    return static_cast<double>((hi << 26) | lo) * 0x1.0p-53;
  }

  // Uniform on (0, 1); safe to take logs of.
  auto uniform_pos() -> double {
    auto u = 0.0;
    do { u = uniform(); } while (u == 0.0);
    return u;
  }

  auto uniform(double lo, double hi) -> double { return lo + (hi - lo) * uniform(); }

  // Exp(rate) by inversion.
  auto exponential(double rate) -> double { return -std::log(uniform_pos()) / rate; }

  // Uniform index in [0, n).
  auto index(std::size_t n) -> std::size_t {
    auto i = static_cast<std::size_t>(uniform() * static_cast<double>(n));
    return i < n ? i : n - 1;
  }

  auto seed() const -> std::uint64_t {
    return static_cast<std::uint64_t>(key_[0]) | (static_cast<std::uint64_t>(key_[1]) << 32);
  }
  auto stream_id() const -> std::uint64_t { return stream_id_; }
  auto blocks_used() const -> std::uint64_t { return block_; }

  // Child stream for a sub-purpose; children of distinct (stream, purpose)
  // pairs never collide as long as purposes stay below 2^8 and stream ids
  // below 2^56.
  auto child(std::uint64_t purpose) const -> Random_stream {
    return Random_stream{seed(), (stream_id_ << 8) | (purpose & 0xff)};
  }

  // Raw Philox4x32-10 block function, exposed for known-answer tests.
  static auto philox(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key)
      -> std::array<std::uint32_t, 4> {
    constexpr std::uint32_t m0 = 0xD2511F53u;
    constexpr std::uint32_t m1 = 0xCD9E8D57u;
    constexpr std::uint32_t w0 = 0x9E3779B9u;
    constexpr std::uint32_t w1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
      auto p0 = static_cast<std::uint64_t>(m0) * ctr[0];
      auto p1 = static_cast<std::uint64_t>(m1) * ctr[2];
      auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
      auto lo0 = static_cast<std::uint32_t>(p0);
      auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
      auto lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
      key[0] += w0;
      key[1] += w1;
    }
    return ctr;
  }

 private:
  auto refill() -> void {
    auto ctr = std::array<std::uint32_t, 4>{
        static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
        static_cast<std::uint32_t>(stream_id_), static_cast<std::uint32_t>(stream_id_ >> 32)};
    buffer_ = philox(ctr, key_);
    ++block_;
    lane_ = 0;
  }

  std::array<std::uint32_t, 2> key_;
  std::uint64_t stream_id_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int lane_ = 4;
};

}  // namespace cphylo
