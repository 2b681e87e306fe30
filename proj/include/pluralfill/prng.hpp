#pragma once

#include <array>
#include <cstdint>

namespace pluralfill {

/// Serializable generator position.
struct PrngState {
  uint64_t seed = 0;
  uint64_t stream = 0;
  uint64_t counter = 0;  // index of the next 128-bit Philox block
  uint32_t lane = 4;     // next unread word of the current block (4 = exhausted)

  bool operator==(const PrngState&) const = default;
};

/// Philox4x32-10 (Salmon et al., "Parallel random numbers: as easy as
/// 1, 2, 3", SC'11). Key = seed, counter = (block, stream). Output depends
/// only on (seed, stream, counter), so results are identical on every
/// platform and streams can be drawn independently.
class Prng {
 public:
  using result_type = uint32_t;

  explicit Prng(uint64_t seed = 0, uint64_t stream = 0);
  explicit Prng(const PrngState& state);

  /// Raw block function: one Philox4x32-10 bijection.
  static std::array<uint32_t, 4> philox(std::array<uint32_t, 4> counter,
                                        std::array<uint32_t, 2> key);

  uint32_t next_u32();
  uint64_t next_u64();
  /// Uniform in [0, 1) with 24 bits of resolution.
  float uniform();
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller (consumes two uniforms).
  float normal();
  /// Uniform integer in [0, n). Rejection sampling, unbiased.
  uint32_t below(uint32_t n);

  PrngState state() const { return state_; }

  // UniformRandomBitGenerator
  static constexpr uint32_t min() { return 0; }
  static constexpr uint32_t max() { return 0xffffffffu; }
  uint32_t operator()() { return next_u32(); }

 private:
  void refill();

  PrngState state_;
  std::array<uint32_t, 4> block_{};
};

/// SplitMix64 finalizer, for deriving child seeds from a parent seed.
uint64_t mix_seed(uint64_t seed, uint64_t salt);

}  // namespace pluralfill
