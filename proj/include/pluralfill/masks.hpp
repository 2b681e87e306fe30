#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pluralfill/array.hpp"

namespace pluralfill {

/// Binary pixel mask, bitmap [H,W] with 1 = visible, 0 = hole.
struct MaskSpec {
  Array bitmap;
  float hidden_ratio = 0.0f;

  /// Validates that the bitmap is binary and derives hidden_ratio.
  static MaskSpec from_bitmap(Array bitmap);
  static MaskSpec all_visible(int64_t H, int64_t W);
  int64_t height() const { return bitmap.dim(0); }
  int64_t width() const { return bitmap.dim(1); }
  int64_t hidden_count() const;
};

/// Half-open hidden-ratio interval [lo, hi).
struct RatioBucket {
  float lo = 0.2f;
  float hi = 0.3f;

  /// "20-30" style label (percent).
  std::string label() const;
  static RatioBucket parse(const std::string& text);
  bool contains(float r) const { return r >= lo && r < hi; }
};

std::vector<RatioBucket> standard_buckets();
std::vector<RatioBucket> parse_buckets(const std::string& csv);

void require_binary(const Array& bitmap);

/// Random-walk brush strokes (and the odd rectangle) drawn until the
/// hidden ratio reaches a target drawn from the bucket; retried with fresh
/// randomness up to kMaxMaskAttempts times.
MaskSpec gen_freeform_mask(int64_t H, int64_t W, RatioBucket bucket, uint64_t seed);
constexpr int kMaxMaskAttempts = 100;

/// Centred hole covering `fraction` of the pixels: a square of side
/// round(sqrt(fraction) * H) on square images, a same-aspect rectangle otherwise.
MaskSpec center_mask(int64_t H, int64_t W, float fraction);

struct Stroke {
  std::vector<std::pair<float, float>> points;  // (x, y) in pixels
  float radius = 1.0f;
};

/// Hidden = every pixel whose centre lies within `radius` of a polyline.
MaskSpec rasterize_strokes(int64_t H, int64_t W, const std::vector<Stroke>& strokes);

}  // namespace pluralfill
