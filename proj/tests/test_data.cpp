#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <unordered_set>

#include "pluralfill/dataset.hpp"
#include "pluralfill/errors.hpp"
#include "pluralfill/image_io.hpp"
#include "pluralfill/masks.hpp"
#include "support/test_support.hpp"

using namespace pluralfill;
using pluralfill::testing::random_array;

namespace {
double mean_of(const Array& a) {
  double s = 0;
  for (float v : a.data()) s += v;
  return s / static_cast<double>(a.size());
}
}  // namespace

TEST_CASE("freeform masks land in the requested bucket") {
  for (const auto& b : standard_buckets()) {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      const MaskSpec m = gen_freeform_mask(32, 32, b, seed);
      CHECK(b.contains(m.hidden_ratio));
      CHECK(std::fabs(m.hidden_ratio - (1.0 - mean_of(m.bitmap))) < 1e-6);
      CHECK_NOTHROW(require_binary(m.bitmap));
    }
  }
  const MaskSpec big = gen_freeform_mask(64, 48, {0.3f, 0.4f}, 5);
  CHECK(big.bitmap.shape() == Shape{64, 48});
  CHECK(big.hidden_ratio >= 0.3f);
}

TEST_CASE("freeform masks are seed-deterministic") {
  const auto a = gen_freeform_mask(32, 32, {0.2f, 0.3f}, 123);
  const auto b = gen_freeform_mask(32, 32, {0.2f, 0.3f}, 123);
  const auto c = gen_freeform_mask(32, 32, {0.2f, 0.3f}, 124);
  CHECK(bit_equal(a.bitmap, b.bitmap));
  CHECK_FALSE(bit_equal(a.bitmap, c.bitmap));
}

TEST_CASE("freeform mask ratios centre on the bucket") {
  for (const auto& b : standard_buckets()) {
    double total = 0;
    for (uint64_t seed = 0; seed < 1000; ++seed) total += gen_freeform_mask(32, 32, b, 10'000 + seed).hidden_ratio;
    const double mean = total / 1000.0;
    CHECK(std::fabs(mean - 0.5 * (b.lo + b.hi)) <= 0.04);
  }
}

TEST_CASE("freeform mask errors on unreachable bucket") {
  // A 2x2 image only has ratios in steps of 0.25.
  CHECK_THROWS_AS(gen_freeform_mask(2, 2, {0.3f, 0.4f}, 1), Error);
}

TEST_CASE("buckets parse") {
  auto bs = parse_buckets("20-30,30-40,40-50");
  REQUIRE(bs.size() == 3);
  CHECK(bs[1].lo == doctest::Approx(0.3f));
  CHECK(bs[2].label() == "40-50");
  CHECK_THROWS_AS(parse_buckets("20"), ConfigError);
  CHECK_THROWS_AS(parse_buckets("50-20"), ConfigError);
}

TEST_CASE("center mask") {
  const MaskSpec m = center_mask(32, 32, 0.25f);
  CHECK(m.hidden_count() == 256);
  for (int64_t y = 0; y < 32; ++y)
    for (int64_t x = 0; x < 32; ++x) {
      const bool hole = y >= 8 && y < 24 && x >= 8 && x < 24;
      CHECK(m.bitmap[y * 32 + x] == (hole ? 0.0f : 1.0f));
    }
  CHECK(center_mask(32, 32, 1e-4f).hidden_count() == 0);
  CHECK_THROWS_AS(center_mask(32, 32, 0.0f), Error);
  CHECK_THROWS_AS(center_mask(32, 32, 1.0f), Error);

  for (int64_t n : {8, 13, 16, 31, 32, 64}) {
    for (float f : {0.05f, 0.1f, 0.2f, 0.25f, 0.4f, 0.5f, 0.75f, 0.9f}) {
      const MaskSpec c = center_mask(n, n, f);
      CHECK(std::fabs(c.hidden_ratio - f) <= 2.0f / static_cast<float>(n));
    }
  }
}

TEST_CASE("stroke rasterisation") {
  const MaskSpec none = rasterize_strokes(16, 16, {});
  CHECK(none.hidden_count() == 0);
  const MaskSpec dot = rasterize_strokes(16, 16, {{{{8.0f, 8.0f}}, 1.0f}});
  // Pixel centres within distance 1 of (8,8): (7.5,7.5),(8.5,7.5),(7.5,8.5),(8.5,8.5)
  CHECK(dot.hidden_count() == 4);
  const MaskSpec line = rasterize_strokes(16, 16, {{{{0.0f, 4.5f}, {16.0f, 4.5f}}, 0.5f}});
  CHECK(line.hidden_count() == 16);
  for (int64_t x = 0; x < 16; ++x) CHECK(line.bitmap[4 * 16 + x] == 0.0f);
}

TEST_CASE("mask spec validation") {
  Array bad({2, 2}, 1.0f);
  bad[1] = 0.5f;
  CHECK_THROWS_AS(MaskSpec::from_bitmap(bad), Error);
  CHECK_THROWS_AS(MaskSpec::from_bitmap(Array({4})), ShapeError);
  CHECK(MaskSpec::all_visible(3, 5).hidden_ratio == 0.0f);
}

TEST_CASE("synthetic dataset") {
  const auto a = gen_synthetic_dataset(64, 32, 7);
  REQUIRE(a.size() == 64);
  for (const auto& img : a) {
    CHECK(img.shape() == Shape{3, 32, 32});
    for (float v : img.data()) {
      CHECK(v >= -1.0f);
      CHECK(v <= 1.0f);
    }
  }
  const auto b = gen_synthetic_dataset(64, 32, 7);
  for (size_t i = 0; i < a.size(); ++i) CHECK(bit_equal(a[i], b[i]));

  const auto c = gen_synthetic_dataset(64, 32, 8);
  double diff = 0;
  for (size_t i = 0; i < a.size(); ++i)
    for (int64_t k = 0; k < a[i].size(); ++k) diff += std::fabs(a[i][k] - c[i][k]);
  CHECK(diff / (64.0 * 3 * 32 * 32) > 0.0);
}

TEST_CASE("train and test splits are disjoint") {
  DatasetSpec spec;
  spec.image_size = 16;
  spec.train_count = 64;
  spec.test_count = 16;
  const Dataset ds = make_dataset(spec);
  CHECK(ds.train.size() == 64);
  CHECK(ds.test.size() == 16);
  std::unordered_set<uint64_t> train;
  for (const auto& img : ds.train) train.insert(image_hash(img));
  CHECK(train.size() == 64);
  for (const auto& img : ds.test) CHECK(train.count(image_hash(img)) == 0);

  spec.source = "nonsense";
  CHECK_THROWS_AS(make_dataset(spec), ConfigError);
}

TEST_CASE("png round trips") {
  Rgb8 img{5, 3, {}};
  for (int i = 0; i < 45; ++i) img.pixels.push_back(static_cast<uint8_t>(i * 5 + 1));
  const auto bytes = encode_png(img);
  const Rgb8 back = decode_png(bytes);
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.pixels == img.pixels);

  Array mask({3, 11}, 1.0f);
  mask[0] = 0.0f;
  mask[12] = 0.0f;
  mask[32] = 0.0f;
  const auto mbytes = encode_mask_png(mask);
  CHECK(mbytes[24] == 1);  // IHDR bit depth
  CHECK(bit_equal(decode_mask_png(mbytes), mask));

  CHECK_THROWS_AS(decode_png(std::vector<uint8_t>{1, 2, 3}), Error);
  auto truncated = bytes;
  truncated.resize(truncated.size() / 2);
  CHECK_THROWS_AS(decode_png(truncated), Error);
}

TEST_CASE("float and 8-bit conversion") {
  const Array a = random_array({3, 4, 4}, 1);
  const Rgb8 q = to_rgb8(a);
  const Array back = to_float(q);
  CHECK(max_abs_diff(a, back) <= 1.0f / 255.0f + 1e-6f);
  CHECK(to_rgb8(back).pixels == q.pixels);
  CHECK(quantize_u8(-1.0f) == 0);
  CHECK(quantize_u8(1.0f) == 255);
  CHECK(quantize_u8(5.0f) == 255);
}

TEST_CASE("png directory loader") {
  const auto dir = std::filesystem::temp_directory_path() / "pluralfill_test_pngs";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  for (int i = 0; i < 3; ++i) {
    Array img = gen_synthetic_image(32, static_cast<uint64_t>(i));
    write_file(dir / ("img" + std::to_string(i) + ".png"), encode_png(to_rgb8(img)));
  }
  write_file(dir / "notes.txt", std::vector<uint8_t>{'x'});
  const auto imgs = load_png_directory(dir, 16);
  REQUIRE(imgs.size() == 3);
  CHECK(imgs[0].shape() == Shape{3, 16, 16});
  CHECK_THROWS_AS(load_png_directory(dir / "missing", 16), NotFoundError);
}

TEST_CASE("base64") {
  for (size_t n = 0; n < 10; ++n) {
    std::vector<uint8_t> v;
    for (size_t i = 0; i < n; ++i) v.push_back(static_cast<uint8_t>(i * 37 + 250));
    CHECK(base64_decode(base64_encode(v)) == v);
  }
  CHECK(base64_encode(std::vector<uint8_t>{'M', 'a', 'n'}) == "TWFu");
  CHECK(base64_encode(std::vector<uint8_t>{'M'}) == "TQ==");
  CHECK(base64_decode("data:image/png;base64,TWE=") == std::vector<uint8_t>{'M', 'a'});
  CHECK_THROWS_AS(base64_decode("TWF"), Error);
  CHECK_THROWS_AS(base64_decode("TW!u"), Error);
  CHECK_THROWS_AS(base64_decode("T=Fu"), Error);
}

TEST_CASE("resampling") {
  const Array a = random_array({2, 4, 6}, 3);
  const Array d = downsample_area(a, 2);
  CHECK(d.shape() == Shape{2, 2, 3});
  const float want = (a[0] + a[1] + a[6] + a[7]) / 4.0f;
  CHECK(d[0] == doctest::Approx(want).epsilon(1e-6));
  CHECK_THROWS_AS(downsample_area(a, 4), ShapeError);

  Array flat({1, 3, 3}, 0.25f);
  const Array up = resize_bilinear(flat, 6, 6);
  for (float v : up.data()) CHECK(v == doctest::Approx(0.25f));
  // Half-pixel bilinear x2 of a 2-pixel ramp.
  const Array ramp({1, 1, 2}, {0.0f, 1.0f});
  const Array r2 = resize_bilinear(ramp, 1, 4);
  CHECK(r2.vec() == std::vector<float>{0.0f, 0.25f, 0.75f, 1.0f});

  Array m({4, 4}, 1.0f);
  m[5] = 0.0f;
  const Array dm = downsample_mask(m, 2);
  CHECK(dm.vec() == std::vector<float>{0.0f, 1.0f, 1.0f, 1.0f});
}

TEST_CASE("dihedral symmetries") {
  const Array x = random_array({3, 5, 5}, 4);
  CHECK(bit_equal(dihedral(x, 0), x));
  // quarter turn counter-clockwise: out(y, x) = in(x, n-1-y)
  const Array r = dihedral(x, 1);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < 5; ++y)
      for (int64_t i = 0; i < 5; ++i) REQUIRE(r[(c * 5 + y) * 5 + i] == x[(c * 5 + i) * 5 + 4 - y]);
  const Array f = dihedral(x, 4);
  for (int64_t y = 0; y < 5; ++y)
    for (int64_t i = 0; i < 5; ++i) REQUIRE(f[y * 5 + i] == x[y * 5 + 4 - i]);

  CHECK(bit_equal(dihedral(dihedral(x, 4), 4), x));
  CHECK(bit_equal(dihedral(dihedral(dihedral(dihedral(x, 1), 1), 1), 1), x));
  CHECK(bit_equal(dihedral(dihedral(x, 1), 1), dihedral(x, 2)));
  std::unordered_set<uint64_t> distinct;
  for (int k = 0; k < 8; ++k) distinct.insert(image_hash(dihedral(x, k)));
  CHECK(distinct.size() == 8);

  CHECK_THROWS_AS(dihedral(random_array({3, 4, 5}, 1), 1), ShapeError);
  CHECK_THROWS_AS(dihedral(x, 8), ConfigError);
}
