#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "pluralfill/codec.hpp"
#include "pluralfill/masks.hpp"
#include "pluralfill/params.hpp"

namespace pluralfill {

struct TransformerConfig {
  int L = 6;
  int heads = 4;
  int C = 64;
  int N = 64;
  int K = 128;
  int chunks = 4;
  float w_floor = 0.02f;
  /// "all" or "hidden"
  std::string loss_positions = "all";
  /// "none" or "dihedral" (train on all 8 flips/rotations of each image)
  std::string augment = "none";
  float lr = 5e-4f;
  int batch_size = 16;

  int grid() const;
  int sub_width() const { return C / chunks; }
  void validate() const;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

/// Visible-pixel ratio of each of the h*w patches of the mask, clamped to
/// [floor, 1]. Returns [h*w] in raster order.
Array init_weights(const Array& bitmap, int64_t h, int64_t w, float floor = 0.02f);
Array init_weights(const MaskSpec& mask, int64_t h, int64_t w, float floor = 0.02f);
/// Elementwise square root.
Array update_weights(const Array& w);

/// Token sequences are row-major [batch, N, chunks] index vectors, the same
/// layout as ChunkedLatent::indices.
class CompletionTransformer {
 public:
  CompletionTransformer(const TransformerConfig& config, uint64_t seed);
  CompletionTransformer(const TransformerConfig& config, ParamSet params);

  const TransformerConfig& config() const { return config_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  /// tokens [B*N*chunks] -> [B,N,C]: per-chunk sub-embeddings from one shared
  /// table, concatenated, plus the position embedding.
  Var embed(const BoundParams& p, const std::vector<int32_t>& tokens, int64_t batch) const;
  /// E [B,N,C], w [B,N]. Attention logits get +log w_j on the key axis.
  /// When `probs` is given it receives the [B,heads,N,N] attention matrix.
  Var weighted_msa(const BoundParams& p, int layer, Var E, const Array& w, Var* probs = nullptr) const;
  /// Pre-norm residual block; the caller advances w with update_weights.
  Var block(const BoundParams& p, int layer, Var E, const Array& w, Var* probs = nullptr) const;
  /// Full stack: [B,N,chunks,K] logits. Counts one forward pass per call.
  Var logits(const BoundParams& p, const std::vector<int32_t>& tokens, const Array& w0, int64_t batch,
             std::vector<Var>* probs = nullptr) const;
  Array logits(const std::vector<int32_t>& tokens, const Array& w0, int64_t batch) const;

  int64_t forward_passes() const { return forward_passes_->load(); }
  void reset_forward_passes() const { forward_passes_->store(0); }

 private:
  TransformerConfig config_;
  ParamSet params_;
  std::shared_ptr<std::atomic<int64_t>> forward_passes_ = std::make_shared<std::atomic<int64_t>>(0);
};

/// Masked image with holes set to 0, [3,H,W] or [B,3,H,W]; mask [H,W] or [B,H,W].
Array zero_fill(const Array& image, const Array& bitmap);

struct MaskedTokens {
  std::vector<int32_t> tokens;  // s_m, [N*chunks]
  Array weights;                // w0, [N]
};

/// Zero-fill, encode and quantize one coarse masked image; weights from the mask.
MaskedTokens masked_tokens(const Codec& codec, const Array& image, const MaskSpec& mask, float floor);

struct Prediction {
  Array logits;  // [N, chunks, K]
  MaskedTokens masked;
};

Prediction predict_logits(const Array& image, const MaskSpec& mask, const Codec& codec,
                          const CompletionTransformer& model);

/// Mean over the selected positions and all chunks of -log softmax(logits)[target].
/// logits [B,N,chunks,K]; targets [B*N*chunks]. `positions` (optional, [B*N]
/// with 1 = included) restricts the mean.
Var nll_loss(Var logits, const std::vector<int32_t>& targets, const std::vector<float>* positions = nullptr);

struct TransformerTrainOptions {
  int steps = 0;
  uint64_t seed = 1;
  int log_every = 50;
  /// Hidden-ratio range masks are drawn from during training.
  RatioBucket mask_range{0.1f, 0.6f};
  std::filesystem::path checkpoint_path;
  std::filesystem::path log_path;
  std::function<void(int, float)> on_step;
};

/// Stage (b). `images` are full-resolution [3,S,S]; masks are drawn at that
/// resolution and reduced to the codec's with downsample_mask.
CompletionTransformer train_transformer_stage(const std::vector<Array>& images, const Codec& codec,
                                              const TransformerConfig& cfg, const TransformerTrainOptions& opt);

/// Mean NLL over the held-out (image, mask) pairs at hidden positions.
float heldout_nll(const CompletionTransformer& model, const Codec& codec, const std::vector<Array>& coarse_images,
                  const std::vector<MaskSpec>& coarse_masks);

nlohmann::json transformer_manifest(const TransformerConfig& cfg, int step, const PrngState& rng);
CompletionTransformer load_transformer(const std::filesystem::path& path);

}  // namespace pluralfill
