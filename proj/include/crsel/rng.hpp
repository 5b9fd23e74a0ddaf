#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace crsel {

/// Philox4x32-10 block function (Salmon et al., "Parallel random numbers:
/// as easy as 1, 2, 3"). Output depends only on (counter, key).
inline std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                                  std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

/// 64-bit FNV-1a, used to turn sub-stream names into stream ids.
constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char ch : s) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ull;
  }
  return h;
}

/// One independent sample stream: Philox keyed by the seed, with the stream
/// id in the upper counter words and the draw index in the lower ones.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_(stream_id) {}

  std::array<std::uint32_t, 4> block(std::uint64_t index) const {
    return philox4x32_10({static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                          static_cast<std::uint32_t>(stream_),
                          static_cast<std::uint32_t>(stream_ >> 32)},
                         {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
  }

  /// 53-bit uniform in [0, 1).
  double uniform(std::uint64_t index) const { return bits53(index) * 0x1.0p-53; }

  /// 53-bit uniform strictly inside (0, 1).
  double uniform_open(std::uint64_t index) const {
    return (static_cast<double>(bits53(index)) + 0.5) * 0x1.0p-53;
  }

  /// Standard Gumbel sample -log(-log(u)).
  double gumbel(std::uint64_t index) const { return -std::log(-std::log(uniform_open(index))); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }

 private:
  std::uint64_t bits53(std::uint64_t index) const {
    const auto b = block(index);
    return (std::uint64_t{b[0]} << 21) ^ (std::uint64_t{b[1]} >> 11);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
};

/// Seed handle. Named sub-streams are independent, so adding a consumer never
/// shifts the samples another consumer sees.
struct RngState {
  std::uint64_t seed = 42;

  RngStream stream(std::string_view name) const { return RngStream(seed, fnv1a64(name)); }
};

/// Sequential cursor over a stream, for code that just wants "the next number".
class RngCursor {
 public:
  explicit RngCursor(RngStream s) : stream_(s) {}

  double uniform() { return stream_.uniform(next_++); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(bound)) % bound;
  }

 private:
  RngStream stream_;
  std::uint64_t next_ = 0;
};

}  // namespace crsel
