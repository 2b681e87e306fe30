#pragma once

#include <filesystem>
#include <functional>

#include "json.hpp"
#include "pluralfill/codec.hpp"
#include "pluralfill/masks.hpp"
#include "pluralfill/sampler.hpp"
#include "pluralfill/transformer.hpp"

namespace pluralfill {

struct RefineConfig {
  int channels = 32;
  int patch = 3;
  /// Cosine-similarity multiplier inside the copy softmax.
  float copy_scale = 10.0f;
  float lambda_rec = 1.0f;
  float lambda_per = 1.0f;
  float lambda_adv = 0.1f;
  float adv_warmup = 0.25f;
  float lr = 2e-4f;
  int batch_size = 4;
  /// Coarse fills used as refiner input during training.
  int top_k = 20;

  void validate() const;
};

void to_json(nlohmann::json& j, const RefineConfig& c);
void from_json(const nlohmann::json& j, RefineConfig& c);

/// Pixel select: mask 1 takes `visible`, 0 takes `generated`. Images are
/// [C,H,W] or [B,C,H,W]; the mask is [H,W] or [B,H,W].
Array compose(const Array& visible, const Array& generated, const Array& bitmap);
/// Differentiable form, gradient flows into `generated` on hidden pixels.
Var compose(Var visible, Var generated, const Array& bitmap);

/// feat [C,h,w], mask [h,w]. Hidden positions are replaced by a softmax
/// (over visible positions, cosine similarity of k x k patches) weighted sum
/// of visible feature vectors; visible positions pass through. With no
/// visible position the input is returned unchanged.
Var contextual_copy(Var feat, const Array& mask, int patch = 3, float scale = 10.0f, Var* attention = nullptr);


class Refiner {
 public:
  Refiner(const RefineConfig& config, uint64_t seed);
  Refiner(const RefineConfig& config, ParamSet params);

  const RefineConfig& config() const { return config_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  /// x_comp [B,3,S,S] coarse composite, coarse masks [B,S,S]; S divisible by
  /// 4. Returns the raw [B,3,2S,2S] output before composition.
  Var forward(const BoundParams& p, Var x_comp, const Array& coarse_masks) const;
  /// Refined output composed against the full-resolution visible pixels.
  Array refine(const Array& x_comp, const Array& coarse_masks, const Array& full_visible,
               const Array& full_masks) const;

 private:
  RefineConfig config_;
  ParamSet params_;
};

struct RefinerTrainOptions {
  int steps = 0;
  uint64_t seed = 1;
  int log_every = 50;
  RatioBucket mask_range{0.1f, 0.6f};
  std::filesystem::path checkpoint_path;
  std::filesystem::path log_path;
  std::function<void(int, float)> on_step;
};

/// Stage (c). `images` are full resolution, twice the codec's.
Refiner train_refiner_stage(const std::vector<Array>& images, const Codec& codec, const CompletionTransformer& model,
                            const FeatureExtractor& fx, const RefineConfig& cfg, const RefinerTrainOptions& opt);

nlohmann::json refiner_manifest(const RefineConfig& cfg, int step, const PrngState& rng);
Refiner load_refiner(const std::filesystem::path& path);

}  // namespace pluralfill
