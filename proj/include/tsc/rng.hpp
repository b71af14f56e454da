#pragma once

// Counter-based random streams (Philox4x32-10).
//
// Every random draw in the testbed is addressed by (seed, purpose, index,
// counter). Two streams that differ in purpose or index never share
// counters, so adding draws to one consumer cannot shift another.

#include <array>
#include <cstdint>
#include <limits>

namespace tsc {

using PhiloxBlock = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

PhiloxBlock philox4x32_10(PhiloxBlock counter, PhiloxKey key);

enum class StreamPurpose : std::uint32_t {
  kSpawn = 1,
  kRoute = 2,
  kInit = 3,
  kAction = 4,
  kEpisode = 5,
  kTest = 99,
};

class RandomStream {
 public:
  using result_type = std::uint32_t;

  RandomStream() = default;
  RandomStream(std::uint64_t seed, StreamPurpose purpose, std::uint32_t index);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()();
  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n).
  std::uint32_t below(std::uint32_t n);
  /// Poisson-distributed count with the given mean.
  int poisson(double mean);
  /// Draw an index from an unnormalized non-negative weight list.
  template <typename Range>
  int categorical(const Range& weights);

  std::uint64_t counter() const { return counter_; }

 private:
  void refill();

  PhiloxKey key_{};
  std::uint32_t purpose_ = 0;
  std::uint32_t index_ = 0;
  std::uint64_t counter_ = 0;
  PhiloxBlock buffer_{};
  int buffered_ = 0;
};

/// Deterministic child seed, e.g. one per episode.
std::uint64_t derive_seed(std::uint64_t seed, StreamPurpose purpose, std::uint32_t index);

template <typename Range>
int RandomStream::categorical(const Range& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = uniform() * total;
  int last_positive = 0;
  int i = 0;
  for (double w : weights) {
    if (w > 0.0) {
      last_positive = i;
      if (u < w) return i;
    }
    u -= w;
    ++i;
  }
  // Rounding can leave u marginally above the final cumulative weight.
  return last_positive;
}

}  // namespace tsc
