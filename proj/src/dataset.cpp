#include "pluralfill/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "pluralfill/errors.hpp"
#include "pluralfill/image_io.hpp"
#include "pluralfill/prng.hpp"

namespace pluralfill {

namespace {

constexpr float kPalette[][3] = {
    {0.90f, 0.20f, 0.15f}, {0.95f, 0.75f, 0.10f}, {0.20f, 0.60f, 0.25f}, {0.15f, 0.35f, 0.80f},
    {0.55f, 0.25f, 0.70f}, {0.95f, 0.95f, 0.90f}, {0.10f, 0.10f, 0.12f}, {0.35f, 0.75f, 0.85f},
};
constexpr int kPaletteSize = 8;

struct Shape2 {
  int kind;  // 0 disc, 1 box, 2 ring
  float cx, cy, r, rx, ry;
  int color, stripe_color;
  bool striped;
  float freq, angle;
};

bool inside(const Shape2& s, float x, float y) {
  const float dx = x - s.cx, dy = y - s.cy;
  switch (s.kind) {
    case 0: return dx * dx + dy * dy <= s.r * s.r;
    case 1: return std::fabs(dx) <= s.rx && std::fabs(dy) <= s.ry;
    default: {
      const float d = std::sqrt(dx * dx + dy * dy);
      return d <= s.r && d >= 0.55f * s.r;
    }
  }
}

}  // namespace

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"source", s.source},         {"directory", s.directory},     {"image_size", s.image_size},
       {"split_seed", s.split_seed}, {"train_count", s.train_count}, {"test_count", s.test_count}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  DatasetSpec d;
  s.source = j.value("source", d.source);
  s.directory = j.value("directory", d.directory);
  s.image_size = j.value("image_size", d.image_size);
  s.split_seed = j.value("split_seed", d.split_seed);
  s.train_count = j.value("train_count", d.train_count);
  s.test_count = j.value("test_count", d.test_count);
}

Array gen_synthetic_image(int64_t size, uint64_t seed) {
  Prng rng(seed, 0xDA7A);
  const int c0 = static_cast<int>(rng.below(kPaletteSize));
  const int c1 = static_cast<int>(rng.below(kPaletteSize));
  const float ga = rng.uniform(0.0f, 6.2831853f);
  const float gx = std::cos(ga), gy = std::sin(ga);

  std::vector<Shape2> shapes(1 + rng.below(3));
  for (auto& s : shapes) {
    s.kind = static_cast<int>(rng.below(3));
    s.cx = rng.uniform(0.15f, 0.85f);
    s.cy = rng.uniform(0.15f, 0.85f);
    s.r = rng.uniform(0.12f, 0.3f);
    s.rx = rng.uniform(0.1f, 0.3f);
    s.ry = rng.uniform(0.1f, 0.3f);
    s.color = static_cast<int>(rng.below(kPaletteSize));
    s.stripe_color = static_cast<int>(rng.below(kPaletteSize));
    s.striped = rng.uniform() < 0.5f;
    s.freq = rng.uniform(4.0f, 8.0f);
    s.angle = rng.uniform(0.0f, 3.1415927f);
  }

  Array img({3, size, size});
  const int64_t HW = size * size;
  const float inv = 1.0f / static_cast<float>(size);
  for (int64_t py = 0; py < size; ++py) {
    for (int64_t px = 0; px < size; ++px) {
      float acc[3] = {0, 0, 0};
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const float x = (static_cast<float>(px) + 0.25f + 0.5f * sx) * inv;
          const float y = (static_cast<float>(py) + 0.25f + 0.5f * sy) * inv;
          const float t = std::clamp(0.5f + (x - 0.5f) * gx + (y - 0.5f) * gy, 0.0f, 1.0f);
          float rgb[3];
          for (int c = 0; c < 3; ++c) rgb[c] = kPalette[c0][c] * (1 - t) + kPalette[c1][c] * t;
          for (const auto& s : shapes) {
            if (!inside(s, x, y)) continue;
            int col = s.color;
            if (s.striped) {
              const float u = (x * std::cos(s.angle) + y * std::sin(s.angle)) * s.freq;
              if (u - std::floor(u) < 0.5f) col = s.stripe_color;
            }
            for (int c = 0; c < 3; ++c) rgb[c] = kPalette[col][c];
          }
          for (int c = 0; c < 3; ++c) acc[c] += rgb[c];
        }
      }
      for (int c = 0; c < 3; ++c) img[c * HW + py * size + px] = acc[c] * 0.5f - 1.0f;
    }
  }
  return img;
}

std::vector<Array> gen_synthetic_dataset(int count, int64_t size, uint64_t seed) {
  std::vector<Array> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(gen_synthetic_image(size, mix_seed(seed, static_cast<uint64_t>(i))));
  return out;
}

uint64_t image_hash(const Array& img) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (int64_t d : img.shape()) feed(&d, sizeof d);
  feed(img.data().data(), static_cast<size_t>(img.size()) * sizeof(float));
  return h;
}

Dataset make_dataset(const DatasetSpec& spec) {
  if (spec.train_count < 0 || spec.test_count < 0) throw ConfigError("dataset counts must be non-negative");
  std::vector<Array> pool;
  const int wanted = spec.train_count + spec.test_count;
  if (spec.source == "synthetic_textures") {
    pool = gen_synthetic_dataset(wanted, spec.image_size, spec.split_seed);
  } else if (spec.source == "image_directory") {
    pool = load_png_directory(spec.directory, spec.image_size);
    // Deterministic shuffle so the split does not follow filename order.
    Prng rng(spec.split_seed, 0x5B11);
    for (size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(static_cast<uint32_t>(i))]);
  } else {
    throw ConfigError("unknown dataset source '" + spec.source + "'");
  }

  Dataset ds;
  std::unordered_set<uint64_t> seen;
  for (auto& img : pool) {
    if (!seen.insert(image_hash(img)).second) continue;
    if (static_cast<int>(ds.train.size()) < spec.train_count) {
      ds.train.push_back(std::move(img));
    } else if (static_cast<int>(ds.test.size()) < spec.test_count) {
      ds.test.push_back(std::move(img));
    }
  }
  if (spec.source == "synthetic_textures") {
    // Duplicates are dropped above; top up with fresh seeds.
    uint64_t extra = static_cast<uint64_t>(wanted);
    while (static_cast<int>(ds.test.size()) < spec.test_count || static_cast<int>(ds.train.size()) < spec.train_count) {
      Array img = gen_synthetic_image(spec.image_size, mix_seed(spec.split_seed, extra++));
      if (!seen.insert(image_hash(img)).second) continue;
      if (static_cast<int>(ds.train.size()) < spec.train_count) {
        ds.train.push_back(std::move(img));
      } else {
        ds.test.push_back(std::move(img));
      }
    }
  }
  return ds;
}

}  // namespace pluralfill
