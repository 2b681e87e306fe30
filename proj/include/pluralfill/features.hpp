#pragma once

#include <vector>

#include "pluralfill/params.hpp"

namespace pluralfill {

/// Frozen, randomly initialised 4-layer stride-2 conv stack. Serves as the
/// perceptual feature map for the codec loss, sample diversity and the
/// Fréchet distance. Never trained.
class FeatureExtractor {
 public:
  static constexpr uint64_t kDefaultSeed = 0x5EEDFEA7ULL;
  static constexpr int kLayers = 4;

  explicit FeatureExtractor(uint64_t seed = kDefaultSeed);

  /// images [B,3,H,W] -> the four relu activations.
  std::vector<Var> forward(Tape& tape, Var images) const;
  /// Mean over layers 2..4 of mean |phi(a) - phi(b)|, shape [1].
  Var perceptual_distance(Tape& tape, Var a, Var b) const;
  float perceptual_distance(const Array& a, const Array& b) const;
  /// Channel means of layers 2..4, one row per image: [B, D].
  Array pooled_features(const Array& images) const;
  int64_t pooled_dim() const;

  uint64_t seed() const { return seed_; }
  const ParamSet& params() const { return params_; }

 private:
  uint64_t seed_;
  ParamSet params_;
};

}  // namespace pluralfill
