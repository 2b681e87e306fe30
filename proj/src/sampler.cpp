#include "pluralfill/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "pluralfill/errors.hpp"

namespace pluralfill {

void SampleConfig::validate(int K) const {
  if (mode != "one_time" && mode != "autoregressive" && mode != "top1") {
    throw ConfigError("sample mode must be one_time, autoregressive or top1, got '" + mode + "'");
  }
  if (top_k < 1 || top_k > K) throw ConfigError("top_k must lie in [1, " + std::to_string(K) + "]");
  if (num_samples < 1) throw ConfigError("num_samples must be >= 1");
}

void to_json(nlohmann::json& j, const SampleConfig& c) {
  j = {{"mode", c.mode}, {"top_k", c.top_k}, {"num_samples", c.num_samples}, {"seed", c.seed},
       {"keep_visible", c.keep_visible}};
}

void from_json(const nlohmann::json& j, SampleConfig& c) {
  SampleConfig d;
  c.mode = j.value("mode", d.mode);
  c.top_k = j.value("top_k", d.top_k);
  c.num_samples = j.value("num_samples", d.num_samples);
  c.seed = j.value("seed", d.seed);
  c.keep_visible = j.value("keep_visible", d.keep_visible);
}

TopK top_k_distribution(std::span<const float> logits, int k) {
  const int K = static_cast<int>(logits.size());
  if (k < 1 || k > K) throw ConfigError("top_k " + std::to_string(k) + " outside [1, " + std::to_string(K) + "]");
  std::vector<int32_t> order(static_cast<size_t>(K));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int32_t a, int32_t b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  });
  TopK out;
  out.index.assign(order.begin(), order.begin() + k);
  const double mx = logits[out.index[0]];
  double z = 0.0;
  for (int32_t i : out.index) {
    out.prob.push_back(std::exp(static_cast<double>(logits[i]) - mx));
    z += out.prob.back();
  }
  for (double& p : out.prob) p /= z;
  return out;
}

int32_t draw(const TopK& dist, Prng& rng) {
  if (dist.index.size() == 1) return dist.index[0];
  const double u = (static_cast<double>(rng.next_u64() >> 11)) * 0x1.0p-53;
  double acc = 0.0;
  for (size_t i = 0; i < dist.prob.size(); ++i) {
    acc += dist.prob[i];
    if (u < acc) return dist.index[i];
  }
  return dist.index.back();
}

Prng sample_rng(uint64_t seed, int sample) { return Prng(seed + static_cast<uint64_t>(sample), 0x5A4D); }

namespace {

int effective_k(const SampleConfig& cfg) { return cfg.mode == "top1" ? 1 : cfg.top_k; }

void sample_position(const float* row_logits, int64_t chunks, int64_t K, int k, Prng& rng, int32_t* out) {
  for (int64_t c = 0; c < chunks; ++c) {
    out[c] = draw(top_k_distribution({row_logits + c * K, static_cast<size_t>(K)}, k), rng);
  }
}

}  // namespace

std::vector<int32_t> one_time_sample(const Array& logits, const MaskedTokens& masked, const SampleConfig& cfg,
                                     Prng& rng) {
  if (logits.rank() != 3) throw ShapeError("one_time_sample expects [N,chunks,K] logits");
  const int64_t N = logits.dim(0), chunks = logits.dim(1), K = logits.dim(2);
  cfg.validate(static_cast<int>(K));
  if (static_cast<int64_t>(masked.tokens.size()) != N * chunks || masked.weights.size() != N) {
    throw ShapeError("one_time_sample: masked tokens do not match logits");
  }
  std::vector<int32_t> out(static_cast<size_t>(N * chunks));
  for (int64_t n = 0; n < N; ++n) {
    if (cfg.keep_visible && masked.weights[n] == 1.0f) {
      std::copy_n(masked.tokens.begin() + n * chunks, chunks, out.begin() + n * chunks);
      continue;
    }
    sample_position(logits.data().data() + n * chunks * K, chunks, K, effective_k(cfg), rng, out.data() + n * chunks);
  }
  return out;
}

std::vector<int32_t> autoregressive_sample(const MaskedTokens& masked, const CompletionTransformer& model,
                                           const SampleConfig& cfg, Prng& rng) {
  const auto& mc = model.config();
  cfg.validate(mc.K);
  std::vector<int32_t> seq = masked.tokens;
  Array w = masked.weights;
  for (int64_t n = 0; n < mc.N; ++n) {
    if (masked.weights[n] == 1.0f) continue;
    const Array logits = model.logits(seq, w, 1);
    sample_position(logits.data().data() + n * mc.chunks * mc.K, mc.chunks, mc.K, effective_k(cfg), rng,
                    seq.data() + n * mc.chunks);
    w[n] = 1.0f;
  }
  return seq;
}

float diversity_from_features(const std::vector<std::vector<Array>>& features) {
  if (features.size() < 2) throw Error("diversity needs at least 2 images");
  double total = 0.0;
  int64_t pairs = 0;
  for (size_t a = 0; a < features.size(); ++a) {
    for (size_t b = a + 1; b < features.size(); ++b) {
      if (features[a].size() != features[b].size()) throw ShapeError("diversity: layer count mismatch");
      double d = 0.0;
      for (size_t l = 0; l < features[a].size(); ++l) {
        const Array &fa = features[a][l], &fb = features[b][l];
        if (fa.shape() != fb.shape()) throw ShapeError("diversity: feature shape mismatch");
        double s = 0.0;
        for (int64_t i = 0; i < fa.size(); ++i) s += std::fabs(static_cast<double>(fa[i]) - fb[i]);
        d += s / static_cast<double>(fa.size());
      }
      total += d / static_cast<double>(features[a].size());
      ++pairs;
    }
  }
  return static_cast<float>(total / static_cast<double>(pairs));
}

float diversity_score(const std::vector<Array>& images, const FeatureExtractor& fx) {
  if (images.size() < 2) throw Error("diversity needs at least 2 images");
  std::vector<std::vector<Array>> feats;
  for (const auto& img : images) {
    if (img.shape() != images[0].shape()) throw ShapeError("diversity: images differ in shape");
    Tape t;
    const Array batch = img.rank() == 3 ? img.reshape({1, img.dim(0), img.dim(1), img.dim(2)}) : img;
    auto maps = fx.forward(t, t.constant(batch));
    feats.push_back({maps[1].value(), maps[2].value(), maps[3].value()});
  }
  return diversity_from_features(feats);
}

SampleBatch sample_batch(const Array& image, const MaskSpec& mask, const CompletionTransformer& model,
                         const Codec& codec, const SampleConfig& cfg, const FeatureExtractor& fx) {
  cfg.validate(model.config().K);
  SampleBatch out;
  out.masked = masked_tokens(codec, image, mask, model.config().w_floor);
  const auto& mc = model.config();

  const int64_t before = model.forward_passes();
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.mode == "autoregressive") {
    for (int i = 0; i < cfg.num_samples; ++i) {
      Prng rng = sample_rng(cfg.seed, i);
      out.report.sequences.push_back(autoregressive_sample(out.masked, model, cfg, rng));
    }
  } else {
    const Array logits = model.logits(out.masked.tokens, out.masked.weights, 1).reshape({mc.N, mc.chunks, mc.K});
    for (int i = 0; i < cfg.num_samples; ++i) {
      Prng rng = sample_rng(cfg.seed, i);
      out.report.sequences.push_back(one_time_sample(logits, out.masked, cfg, rng));
    }
  }
  out.report.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.report.forward_passes = model.forward_passes() - before;

  std::vector<int32_t> all;
  for (const auto& s : out.report.sequences) all.insert(all.end(), s.begin(), s.end());
  const Array decoded = codec.decode(codec.dequantize(all, cfg.num_samples));
  const int64_t S = codec.config().image_size, per = 3 * S * S;
  for (int i = 0; i < cfg.num_samples; ++i) {
    std::vector<float> v(decoded.data().begin() + i * per, decoded.data().begin() + (i + 1) * per);
    out.images.emplace_back(Shape{3, S, S}, std::move(v));
  }
  out.report.diversity = cfg.num_samples >= 2 ? diversity_score(out.images, fx) : 0.0f;
  return out;
}

}  // namespace pluralfill
