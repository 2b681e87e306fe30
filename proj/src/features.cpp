#include "pluralfill/features.hpp"

#include "pluralfill/errors.hpp"
#include "pluralfill/ops.hpp"

namespace pluralfill {

namespace {
constexpr int64_t kChannels[FeatureExtractor::kLayers + 1] = {3, 16, 32, 64, 64};
}

FeatureExtractor::FeatureExtractor(uint64_t seed) : seed_(seed) {
  Prng rng(seed, 0xFEA7);
  for (int l = 0; l < kLayers; ++l) {
    const std::string p = "phi" + std::to_string(l + 1);
    params_.add(p + ".w", init::conv_he(kChannels[l + 1], kChannels[l], 3, rng));
    params_.add(p + ".b", Array({kChannels[l + 1]}));
  }
}

std::vector<Var> FeatureExtractor::forward(Tape& tape, Var images) const {
  if (images.value().rank() != 4 || images.value().dim(1) != 3) {
    throw ShapeError("feature extractor expects [B,3,H,W], got " + shape_str(images.shape()));
  }
  BoundParams p(tape, params_, false);
  std::vector<Var> out;
  Var h = images;
  for (int l = 0; l < kLayers; ++l) {
    const std::string n = "phi" + std::to_string(l + 1);
    h = relu(conv2d(h, p[n + ".w"], p[n + ".b"], 2, 1));
    out.push_back(h);
  }
  return out;
}

Var FeatureExtractor::perceptual_distance(Tape& tape, Var a, Var b) const {
  auto fa = forward(tape, a);
  auto fb = forward(tape, b);
  Var total = l1_distance(fa[1], fb[1]);
  for (int l = 2; l < kLayers; ++l) total = total + l1_distance(fa[l], fb[l]);
  return scale(total, 1.0f / static_cast<float>(kLayers - 1));
}

float FeatureExtractor::perceptual_distance(const Array& a, const Array& b) const {
  Tape tape;
  auto as4 = [](const Array& x) { return x.rank() == 3 ? x.reshape({1, x.dim(0), x.dim(1), x.dim(2)}) : x; };
  return perceptual_distance(tape, tape.constant(as4(a)), tape.constant(as4(b))).value().item();
}

int64_t FeatureExtractor::pooled_dim() const {
  int64_t d = 0;
  for (int l = 2; l <= kLayers; ++l) d += kChannels[l];
  return d;
}

Array FeatureExtractor::pooled_features(const Array& images) const {
  Tape tape;
  const Array batch = images.rank() == 3 ? images.reshape({1, images.dim(0), images.dim(1), images.dim(2)}) : images;
  auto maps = forward(tape, tape.constant(batch));
  const int64_t B = batch.dim(0);
  Array out({B, pooled_dim()});
  for (int64_t b = 0; b < B; ++b) {
    int64_t col = 0;
    for (int l = 1; l < kLayers; ++l) {
      const Array& m = maps[l].value();
      const int64_t C = m.dim(1), HW = m.dim(2) * m.dim(3);
      for (int64_t c = 0; c < C; ++c) {
        double s = 0.0;
        const float* src = m.data().data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) s += src[i];
        out[b * pooled_dim() + col++] = static_cast<float>(s / static_cast<double>(HW));
      }
    }
  }
  return out;
}

}  // namespace pluralfill
