#include "tsc/rng.hpp"

#include <cmath>

namespace tsc {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

}  // namespace

PhiloxBlock philox4x32_10(PhiloxBlock c, PhiloxKey k) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, c[0], hi0, lo0);
    mulhilo(kMul1, c[2], hi1, lo1);
    c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    k[0] += kWeyl0;
    k[1] += kWeyl1;
  }
  return c;
}

RandomStream::RandomStream(std::uint64_t seed, StreamPurpose purpose, std::uint32_t index)
    : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
      purpose_(static_cast<std::uint32_t>(purpose)),
      index_(index) {}

void RandomStream::refill() {
  buffer_ = philox4x32_10({static_cast<std::uint32_t>(counter_),
                           static_cast<std::uint32_t>(counter_ >> 32), index_, purpose_},
                          key_);
  ++counter_;
  buffered_ = 4;
}

RandomStream::result_type RandomStream::operator()() {
  if (buffered_ == 0) refill();
  return buffer_[4 - buffered_--];
}

std::uint64_t RandomStream::next_u64() {
  const std::uint64_t hi = (*this)();
  const std::uint64_t lo = (*this)();
  return (hi << 32) | lo;
}

double RandomStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint32_t RandomStream::below(std::uint32_t n) {
  if (n <= 1) return 0;
  // Rejection keeps the draw exactly uniform.
  const std::uint32_t limit = max() - (max() % n + 1) % n;
  std::uint32_t x;
  do {
    x = (*this)();
  } while (x > limit);
  return x % n;
}

int RandomStream::poisson(double mean) {
  if (!(mean > 0.0)) return 0;
  // Knuth's product method on chunks of at most 30 keeps exp(-mean) representable.
  int total = 0;
  while (mean > 0.0) {
    const double chunk = mean > 30.0 ? 30.0 : mean;
    mean -= chunk;
    const double limit = std::exp(-chunk);
    double prod = uniform();
    while (prod > limit) {
      ++total;
      prod *= uniform();
    }
  }
  return total;
}

std::uint64_t derive_seed(std::uint64_t seed, StreamPurpose purpose, std::uint32_t index) {
  RandomStream s(seed, purpose, index);
  return s.next_u64();
}

}  // namespace tsc
