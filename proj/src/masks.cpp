#include "pluralfill/masks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pluralfill/errors.hpp"
#include "pluralfill/prng.hpp"

namespace pluralfill {

namespace {

void stamp_capsule(Array& bm, float x0, float y0, float x1, float y1, float r) {
  const int64_t H = bm.dim(0), W = bm.dim(1);
  const int64_t ylo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(y0, y1) - r)));
  const int64_t yhi = std::min<int64_t>(H - 1, static_cast<int64_t>(std::ceil(std::max(y0, y1) + r)));
  const int64_t xlo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(x0, x1) - r)));
  const int64_t xhi = std::min<int64_t>(W - 1, static_cast<int64_t>(std::ceil(std::max(x0, x1) + r)));
  const float dx = x1 - x0, dy = y1 - y0;
  const float len2 = dx * dx + dy * dy;
  for (int64_t y = ylo; y <= yhi; ++y) {
    for (int64_t x = xlo; x <= xhi; ++x) {
      const float px = static_cast<float>(x) + 0.5f, py = static_cast<float>(y) + 0.5f;
      float t = len2 > 0.0f ? ((px - x0) * dx + (py - y0) * dy) / len2 : 0.0f;
      t = std::clamp(t, 0.0f, 1.0f);
      const float ex = px - (x0 + t * dx), ey = py - (y0 + t * dy);
      if (ex * ex + ey * ey <= r * r) bm[y * W + x] = 0.0f;
    }
  }
}

void stamp_rect(Array& bm, int64_t y0, int64_t x0, int64_t h, int64_t w) {
  const int64_t H = bm.dim(0), W = bm.dim(1);
  for (int64_t y = std::max<int64_t>(0, y0); y < std::min(H, y0 + h); ++y)
    for (int64_t x = std::max<int64_t>(0, x0); x < std::min(W, x0 + w); ++x) bm[y * W + x] = 0.0f;
}

float ratio_of(const Array& bm) {
  int64_t hidden = 0;
  for (float v : bm.data()) hidden += v == 0.0f;
  return static_cast<float>(static_cast<double>(hidden) / static_cast<double>(bm.size()));
}

}  // namespace

void require_binary(const Array& bitmap) {
  if (bitmap.rank() != 2) throw ShapeError("mask bitmap must be [H,W], got " + shape_str(bitmap.shape()));
  for (float v : bitmap.data()) {
    if (v != 0.0f && v != 1.0f) throw Error("mask bitmap is not binary");
  }
}

MaskSpec MaskSpec::from_bitmap(Array bitmap) {
  require_binary(bitmap);
  MaskSpec m;
  m.hidden_ratio = ratio_of(bitmap);
  m.bitmap = std::move(bitmap);
  return m;
}

MaskSpec MaskSpec::all_visible(int64_t H, int64_t W) { return from_bitmap(Array({H, W}, 1.0f)); }

int64_t MaskSpec::hidden_count() const {
  int64_t n = 0;
  for (float v : bitmap.data()) n += v == 0.0f;
  return n;
}

std::string RatioBucket::label() const {
  std::ostringstream os;
  os << std::lround(lo * 100.0f) << "-" << std::lround(hi * 100.0f);
  return os.str();
}

RatioBucket RatioBucket::parse(const std::string& text) {
  const auto dash = text.find('-');
  if (dash == std::string::npos) throw ConfigError("bucket must look like 20-30, got '" + text + "'");
  RatioBucket b;
  try {
    b.lo = std::stof(text.substr(0, dash)) / 100.0f;
    b.hi = std::stof(text.substr(dash + 1)) / 100.0f;
  } catch (const std::exception&) {
    throw ConfigError("bad bucket '" + text + "'");
  }
  if (!(b.lo >= 0.0f && b.lo < b.hi && b.hi <= 1.0f)) throw ConfigError("bad bucket range '" + text + "'");
  return b;
}

std::vector<RatioBucket> standard_buckets() { return {{0.2f, 0.3f}, {0.3f, 0.4f}, {0.4f, 0.5f}}; }

std::vector<RatioBucket> parse_buckets(const std::string& csv) {
  std::vector<RatioBucket> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(RatioBucket::parse(item));
  }
  if (out.empty()) throw ConfigError("no buckets given");
  return out;
}

MaskSpec gen_freeform_mask(int64_t H, int64_t W, RatioBucket bucket, uint64_t seed) {
  if (H <= 0 || W <= 0) throw ShapeError("mask dims must be positive");
  const float side = static_cast<float>(std::min(H, W));
  for (int attempt = 0; attempt < kMaxMaskAttempts; ++attempt) {
    Prng rng(seed, static_cast<uint64_t>(attempt));
    const float target = rng.uniform(bucket.lo, bucket.hi);
    Array bm({H, W}, 1.0f);
    float ratio = 0.0f;
    int shapes = 0;
    while (ratio < target && shapes < 64) {
      ++shapes;
      if (rng.uniform() < 0.1f) {
        const auto h = static_cast<int64_t>(rng.uniform(0.1f, 0.3f) * static_cast<float>(H));
        const auto w = static_cast<int64_t>(rng.uniform(0.1f, 0.3f) * static_cast<float>(W));
        stamp_rect(bm, static_cast<int64_t>(rng.below(static_cast<uint32_t>(H))),
                   static_cast<int64_t>(rng.below(static_cast<uint32_t>(W))), h, w);
        ratio = ratio_of(bm);
        continue;
      }
      float x = rng.uniform(0.0f, static_cast<float>(W));
      float y = rng.uniform(0.0f, static_cast<float>(H));
      float angle = rng.uniform(0.0f, 6.2831853f);
      const float radius = rng.uniform(0.025f, 0.07f) * side + 0.5f;
      const int vertices = 4 + static_cast<int>(rng.below(9));
      for (int v = 0; v < vertices && ratio < target; ++v) {
        angle += rng.uniform(-1.2f, 1.2f);
        const float len = rng.uniform(0.05f, 0.15f) * side;
        const float nx = std::clamp(x + len * std::cos(angle), 0.0f, static_cast<float>(W));
        const float ny = std::clamp(y + len * std::sin(angle), 0.0f, static_cast<float>(H));
        stamp_capsule(bm, x, y, nx, ny, radius);
        x = nx;
        y = ny;
        ratio = ratio_of(bm);
      }
    }
    if (bucket.contains(ratio)) return MaskSpec::from_bitmap(std::move(bm));
  }
  throw Error("could not reach hidden ratio bucket " + bucket.label() + " in " + std::to_string(kMaxMaskAttempts) +
              " attempts");
}

MaskSpec center_mask(int64_t H, int64_t W, float fraction) {
  if (!(fraction > 0.0f && fraction < 1.0f)) throw Error("center_mask fraction must lie in (0, 1)");
  const double s = std::sqrt(static_cast<double>(fraction));
  const auto h = static_cast<int64_t>(std::lround(s * static_cast<double>(H)));
  const auto w = static_cast<int64_t>(std::lround(s * static_cast<double>(W)));
  Array bm({H, W}, 1.0f);
  stamp_rect(bm, (H - h) / 2, (W - w) / 2, h, w);
  return MaskSpec::from_bitmap(std::move(bm));
}

MaskSpec rasterize_strokes(int64_t H, int64_t W, const std::vector<Stroke>& strokes) {
  Array bm({H, W}, 1.0f);
  for (const auto& s : strokes) {
    if (s.points.empty()) continue;
    if (!(s.radius >= 0.0f)) throw Error("stroke radius must be non-negative");
    if (s.points.size() == 1) {
      stamp_capsule(bm, s.points[0].first, s.points[0].second, s.points[0].first, s.points[0].second, s.radius);
    }
    for (size_t i = 1; i < s.points.size(); ++i) {
      stamp_capsule(bm, s.points[i - 1].first, s.points[i - 1].second, s.points[i].first, s.points[i].second,
                    s.radius);
    }
  }
  return MaskSpec::from_bitmap(std::move(bm));
}

}  // namespace pluralfill
