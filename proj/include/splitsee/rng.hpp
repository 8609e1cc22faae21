#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace splitsee {

/// Philox4x32-10 counter-based generator.
///
/// A generator is addressed by a 64-bit key and a 64-bit stream id; the
/// output is a pure function of (key, stream, position), so two generators
/// built from the same pair produce the same sequence regardless of which
/// thread or process owns them.
class Philox {
 public:
  Philox(std::uint64_t key, std::uint64_t stream)
      : key_{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)},
        stream_{static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)} {}

  std::uint32_t next_u32() {
    if (pos_ == 4) {
      refill();
    }
    return buffer_[pos_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    const std::uint64_t lo = next_u32();
    return (hi << 32) | lo;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform on [lo, hi]; returns lo when the interval is degenerate.
  double uniform(double lo, double hi) {
    if (lo == hi) {
      return lo;
    }
    return lo + (hi - lo) * uniform();
  }

  /// Uniform integer on [0, n) by rejection, free of modulo bias.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) {
      throw std::invalid_argument("uniform_int: empty range");
    }
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) {
        return r % n;
      }
    }
  }

  /// Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Fisher-Yates shuffle driven by this generator.
  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = i;
    }
    shuffle(std::span<std::size_t>(p));
    return p;
  }

 /// One Philox4x32-10 block: ten rounds over `counter` under `key`.
  static std::array<std::uint32_t, 4> bijection(std::array<std::uint32_t, 4> c, std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t kMul0 = 0xD2511F53u;
    constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
    std::uint32_t k0 = key[0];
    std::uint32_t k1 = key[1];
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const auto lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const auto lo1 = static_cast<std::uint32_t>(p1);
      c = {hi1 ^ c[1] ^ k0, lo1, hi0 ^ c[3] ^ k1, lo0};
      k0 += kWeyl0;
      k1 += kWeyl1;
    }
    return c;
  }

 private:
  void refill() {
    const std::array<std::uint32_t, 4> counter = {static_cast<std::uint32_t>(block_),
                                                  static_cast<std::uint32_t>(block_ >> 32), stream_[0], stream_[1]};
    const auto out = bijection(counter, {key_[0], key_[1]});
    std::copy(out.begin(), out.end(), buffer_);
    ++block_;
    pos_ = 0;
  }

  std::uint32_t key_[2];
  std::uint32_t stream_[2];
  std::uint64_t block_ = 0;
  std::uint32_t buffer_[4] = {};
  int pos_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Per-window augmentation seed: global_seed ^ window_index ^ (epoch << 32).
inline std::uint64_t window_seed(std::uint64_t global_seed, std::uint64_t window_index, std::uint64_t epoch) {
  return global_seed ^ window_index ^ (epoch << 32);
}

}  // namespace splitsee
