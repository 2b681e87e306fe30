#include "pluralfill/prng.hpp"

#include <cmath>
#include <numbers>

namespace pluralfill {
namespace {

constexpr uint32_t kMul0 = 0xD2511F53u;
constexpr uint32_t kMul1 = 0xCD9E8D57u;
constexpr uint32_t kWeyl0 = 0x9E3779B9u;
constexpr uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(uint32_t a, uint32_t b, uint32_t& hi, uint32_t& lo) {
  const uint64_t p = static_cast<uint64_t>(a) * b;
  hi = static_cast<uint32_t>(p >> 32);
  lo = static_cast<uint32_t>(p);
}

}  // namespace

std::array<uint32_t, 4> Prng::philox(std::array<uint32_t, 4> ctr, std::array<uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

Prng::Prng(uint64_t seed, uint64_t stream) {
  state_.seed = seed;
  state_.stream = stream;
}

Prng::Prng(const PrngState& state) : state_(state) {
  if (state_.lane < 4) {
    // Rebuild the partially consumed block.
    const uint64_t block = state_.counter - 1;
    block_ = philox({static_cast<uint32_t>(block), static_cast<uint32_t>(block >> 32),
                     static_cast<uint32_t>(state_.stream),
                     static_cast<uint32_t>(state_.stream >> 32)},
                    {static_cast<uint32_t>(state_.seed), static_cast<uint32_t>(state_.seed >> 32)});
  }
}

void Prng::refill() {
  const uint64_t block = state_.counter++;
  block_ = philox({static_cast<uint32_t>(block), static_cast<uint32_t>(block >> 32),
                   static_cast<uint32_t>(state_.stream), static_cast<uint32_t>(state_.stream >> 32)},
                  {static_cast<uint32_t>(state_.seed), static_cast<uint32_t>(state_.seed >> 32)});
  state_.lane = 0;
}

uint32_t Prng::next_u32() {
  if (state_.lane >= 4) refill();
  return block_[state_.lane++];
}

uint64_t Prng::next_u64() {
  const uint64_t lo = next_u32();
  const uint64_t hi = next_u32();
  return lo | (hi << 32);
}

float Prng::uniform() { return static_cast<float>(next_u32() >> 8) * 0x1.0p-24f; }

float Prng::normal() {
  // u1 in (0, 1] keeps the log finite.
  const double u1 = (static_cast<double>(next_u32() >> 8) + 1.0) * 0x1.0p-24;
  const double u2 = static_cast<double>(next_u32() >> 8) * 0x1.0p-24;
  return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                            std::cos(2.0 * std::numbers::pi * u2));
}

uint32_t Prng::below(uint32_t n) {
  if (n <= 1) return 0;
  const uint32_t limit = 0xffffffffu - (0xffffffffu % n);
  for (;;) {
    const uint32_t x = next_u32();
    if (x < limit) return x % n;
  }
}

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace pluralfill
