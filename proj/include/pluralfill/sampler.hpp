#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pluralfill/features.hpp"
#include "pluralfill/transformer.hpp"

namespace pluralfill {

struct SampleConfig {
  /// "one_time", "autoregressive" or "top1"
  std::string mode = "one_time";
  int top_k = 20;
  int num_samples = 10;
  uint64_t seed = 0;
  bool keep_visible = true;

  void validate(int K) const;
};

void to_json(nlohmann::json& j, const SampleConfig& c);
void from_json(const nlohmann::json& j, SampleConfig& c);

/// The k highest logits (ties to the lower index) with their softmax mass
/// renormalised to 1.
struct TopK {
  std::vector<int32_t> index;
  std::vector<double> prob;
};
TopK top_k_distribution(std::span<const float> logits, int k);
int32_t draw(const TopK& dist, Prng& rng);

/// Sample i of a batch draws from this generator.
Prng sample_rng(uint64_t seed, int sample);

/// One index per (position, chunk) from logits [N,chunks,K]; positions with
/// weight 1 copy s_m when keep_visible.
std::vector<int32_t> one_time_sample(const Array& logits, const MaskedTokens& masked, const SampleConfig& cfg,
                                     Prng& rng);

/// Raster order over positions with weight < 1: one forward per position,
/// sampled tokens substituted back (and their weight set to 1) before the next.
std::vector<int32_t> autoregressive_sample(const MaskedTokens& masked, const CompletionTransformer& model,
                                           const SampleConfig& cfg, Prng& rng);

struct SampleReport {
  std::vector<std::vector<int32_t>> sequences;
  /// Token generation time (transformer forwards and draws), decoding excluded.
  double wall_clock_s = 0.0;
  /// Transformer forwards consumed by the whole batch; one_time and top1
  /// share a single forward across samples.
  int64_t forward_passes = 0;
  float diversity = 0.0f;
};

struct SampleBatch {
  SampleReport report;
  /// Decoded coarse images [3,S,S], one per sequence (not yet composed).
  std::vector<Array> images;
  MaskedTokens masked;
};

/// Coarse image [3,S,S] and mask [S,S] at the codec resolution.
SampleBatch sample_batch(const Array& image, const MaskSpec& mask, const CompletionTransformer& model,
                         const Codec& codec, const SampleConfig& cfg, const FeatureExtractor& fx);

/// Mean over unordered pairs of the perceptual feature distance.
float diversity_score(const std::vector<Array>& images, const FeatureExtractor& fx);
/// Same, from precomputed per-image feature maps (layers already selected).
float diversity_from_features(const std::vector<std::vector<Array>>& features);

}  // namespace pluralfill
