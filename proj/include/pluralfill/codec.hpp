#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pluralfill/features.hpp"
#include "pluralfill/params.hpp"

namespace pluralfill {

struct VQConfig {
  int K = 128;
  int chunks = 4;
  int n_z = 64;
  float beta = 0.25f;
  float lambda_rec = 1.0f;
  float lambda_per = 1.0f;
  float lambda_vq = 1.0f;
  float lambda_adv = 0.1f;
  /// Fraction of the steps trained with lambda_adv = 0.
  float adv_warmup = 0.25f;
  int image_size = 32;
  int latent_size = 8;
  int channels = 64;
  float lr = 2e-4f;
  float beta1 = 0.5f;
  float beta2 = 0.9f;
  int batch_size = 8;
  /// "none" or "dihedral"
  std::string augment = "none";

  int d_chunk() const { return n_z / chunks; }
  int factor() const { return image_size / latent_size; }
  int downsamples() const;
  void validate() const;
  AdamConfig adam() const { return {lr, beta1, beta2, 1e-8f}; }
};

void to_json(nlohmann::json& j, const VQConfig& c);
void from_json(const nlohmann::json& j, VQConfig& c);

/// Per-cell chunk indices plus the dequantized feature.
struct ChunkedLatent {
  int64_t batch = 0, h = 0, w = 0, chunks = 0;
  /// Row-major [batch, h, w, chunks].
  std::vector<int32_t> indices;
  /// [batch, n_z, h, w]; chunk c occupies channels [c*d, (c+1)*d).
  Array quantized;

  /// Flattened token count per image, h*w for every chunk count.
  int64_t sequence_length() const { return h * w; }
};

/// Nearest codebook row (squared Euclidean, accumulated in double) for every
/// chunk of every cell; ties go to the smallest index.
ChunkedLatent chunk_quantize(const Array& z, const Array& codebook, int chunks);
/// Feature [batch, chunks*d, h, w] from indices [batch, h, w, chunks].
Array dequantize(const std::vector<int32_t>& indices, const Array& codebook, int64_t batch, int64_t h, int64_t w,
                 int chunks);

/// Encoder, decoder and shared codebook. Parameters live under "enc.",
/// "dec." and "codebook".
class Codec {
 public:
  Codec(const VQConfig& config, uint64_t seed);
  Codec(const VQConfig& config, ParamSet params);

  const VQConfig& config() const { return config_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const Array& codebook() const { return params_.at("codebook"); }

  /// x [B,3,H,W] -> [B,n_z,h,w]
  Var encode(const BoundParams& p, Var x) const;
  /// zq [B,n_z,h,w] -> tanh image [B,3,H,W]
  Var decode(const BoundParams& p, Var zq) const;

  Array encode(const Array& x) const;
  Array decode(const Array& zq) const;
  ChunkedLatent quantize(const Array& z) const { return chunk_quantize(z, codebook(), config_.chunks); }
  Array dequantize(const std::vector<int32_t>& indices, int64_t batch) const;
  /// encode -> quantize, on [B,3,H,W] or a single [3,H,W].
  ChunkedLatent tokens(const Array& x) const;
  /// Encode, quantize, decode.
  Array reconstruct(const Array& x) const;

 private:
  void check_image(const Shape& s) const;
  VQConfig config_;
  ParamSet params_;
};

/// Patch discriminator: stride-2 convs with leaky relu, one score per patch.
class Discriminator {
 public:
  Discriminator(int channels, uint64_t seed, const std::string& prefix = "disc.");
  Discriminator(ParamSet params, const std::string& prefix = "disc.");

  Var forward(const BoundParams& p, Var x) const;
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

 private:
  std::string prefix_;
  ParamSet params_;
};

struct VQGraph {
  Var z;      // encoder output
  Var zq;     // dequantized, differentiable w.r.t. the codebook
  Var st;     // straight-through: value of zq, gradient into z
  Var x_hat;  // decoded image
  ChunkedLatent latent;
};

/// Forward pass of the codec with quantization wired for training.
VQGraph vq_forward(const Codec& codec, const BoundParams& p, Var x);

struct VQLosses {
  Var rec;       // mean |x - x_hat|
  Var per;       // perceptual feature distance
  Var codebook;  // |sg(z) - zq|^2
  Var commit;    // beta |z - sg(zq)|^2
  Var vq;        // codebook + commit
  Var adv;       // -mean D(x_hat)
  Var total;
};

/// All generator-side terms. `adv_weight` replaces lambda_adv (warm-up);
/// disc may be null when adv_weight is 0.
VQLosses vq_losses(const VQConfig& cfg, const FeatureExtractor& fx, Var x, const VQGraph& g,
                   const Discriminator* disc, const BoundParams* disc_params, float adv_weight);

/// Hinge loss mean max(0, 1 - D(x)) + mean max(0, 1 + D(x_hat)).
Var hinge_discriminator_loss(Var d_real, Var d_fake);

/// One optimizer step on the discriminator only; x_hat is treated as data.
float discriminator_step(Discriminator& disc, Adam& opt, const Array& x, const Array& x_hat);

struct CodecTrainOptions {
  int steps = 0;
  uint64_t seed = 1;
  int log_every = 50;
  /// Images used for the periodic reconstruction PSNR (taken from the set).
  int eval_images = 16;
  std::filesystem::path checkpoint_path;
  std::filesystem::path log_path;
  /// Called after each step with (step, total loss).
  std::function<void(int, float)> on_step;
  /// Extra manifest keys (object), e.g. model_id.
  nlohmann::json tags = nlohmann::json::object();
};

struct CodecTrainResult {
  Codec codec;
  Discriminator disc;
  float initial_psnr = 0.0f;
  float final_psnr = 0.0f;
};

/// Stage (a): alternating generator / discriminator updates on `images`
/// ([3,S,S] each, S = image_size). Writes the checkpoint and CSV log when
/// paths are set. Throws TrainingDiverged after saving the last good state.
CodecTrainResult train_codebook_stage(const std::vector<Array>& images, const VQConfig& cfg,
                                      const FeatureExtractor& fx, const CodecTrainOptions& opt);

/// Mean reconstruction PSNR over images.
float reconstruction_psnr(const Codec& codec, const std::vector<Array>& images);

Array stack_images(const std::vector<Array>& images, const std::vector<size_t>& order);

nlohmann::json codec_manifest(const VQConfig& cfg, int step, const PrngState& rng, uint64_t feature_seed);
Codec load_codec(const std::filesystem::path& path);

}  // namespace pluralfill
