#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "pluralfill/checkpoint.hpp"
#include "pluralfill/errors.hpp"
#include "pluralfill/ops.hpp"
#include "support/test_support.hpp"

using namespace pluralfill;
using pluralfill::testing::random_array;

namespace {
std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "pluralfill_test_params";
  std::filesystem::create_directories(dir);
  return dir / name;
}
}  // namespace

TEST_CASE("param set basics") {
  ParamSet p;
  p.add("b", Array({2}, 1.0f));
  p.add("a.w", Array({2, 3}, 0.5f));
  CHECK_THROWS_AS(p.add("b", Array({1})), Error);
  CHECK_THROWS_AS(p.at("missing"), NotFoundError);
  CHECK(p.size() == 2);
  CHECK(p.total_elements() == 8);
  CHECK(p.begin()->first == "a.w");
  auto sub = p.subset("a.");
  CHECK(sub.size() == 1);
  CHECK(sub.contains("a.w"));
  ParamSet q = p;
  CHECK(q.bit_equal(p));
  q.at("b")[0] = 2.0f;
  CHECK_FALSE(q.bit_equal(p));
}

TEST_CASE("bound params route gradients by name") {
  ParamSet p;
  p.add("x", Array({3}, {1, 2, 3}));
  p.add("y", Array({3}, {4, 5, 6}));
  Tape tape;
  BoundParams b(tape, p, true);
  Var loss = sum(mul(b["x"], b["y"]));
  auto g = b.gradients(tape.backward(loss));
  CHECK(g.at("x").vec() == std::vector<float>{4, 5, 6});
  CHECK(g.at("y").vec() == std::vector<float>{1, 2, 3});

  Tape frozen;
  BoundParams f(frozen, p, false);
  CHECK_FALSE(frozen.is_trainable(f["x"]));
  CHECK_THROWS_AS(f["z"], NotFoundError);
}

TEST_CASE("adam first step is lr times the gradient sign") {
  ParamSet p;
  p.add("w", Array({3}, {1.0f, -2.0f, 0.5f}));
  Adam opt({0.01f, 0.5f, 0.9f, 1e-8f});
  std::map<std::string, Array> g{{"w", Array({3}, {0.3f, -4.0f, 1e-3f})}};
  opt.step(p, g);
  // Bias-corrected moments equal g and g^2 on the first step.
  CHECK(p.at("w")[0] == doctest::Approx(0.99f).epsilon(1e-5));
  CHECK(p.at("w")[1] == doctest::Approx(-1.99f).epsilon(1e-5));
  CHECK(p.at("w")[2] == doctest::Approx(0.49f).epsilon(1e-4));
  CHECK(opt.steps() == 1);
}

TEST_CASE("adam minimises a quadratic") {
  ParamSet p;
  p.add("w", random_array({8}, 3, -2.0f, 2.0f));
  Adam opt({0.05f, 0.9f, 0.999f, 1e-8f});
  for (int i = 0; i < 500; ++i) {
    Tape t;
    BoundParams b(t, p, true);
    Var loss = sum(mul(b["w"], b["w"]));
    opt.step(p, b.gradients(t.backward(loss)));
  }
  for (float v : p.at("w").data()) CHECK(std::fabs(v) < 0.05f);
}

TEST_CASE("checkpoint round trip is bit faithful") {
  Checkpoint c;
  c.manifest = {{"kind", "test"}, {"step", 17}, {"config", {{"K", 128}}}};
  Prng rng(9, 2);
  rng.next_u32();
  c.manifest["prng"] = prng_to_json(rng.state());
  Array special({6}, {0.0f, -0.0f, std::numeric_limits<float>::denorm_min(), std::numeric_limits<float>::max(),
                      -1.5e-30f, 3.14159265f});
  c.arrays.add("special", special);
  c.arrays.add("big.w", random_array({4, 5, 3}, 11));
  c.arrays.add("empty", Array({0}));
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(path, c);
  CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));

  const Checkpoint r = load_checkpoint(path);
  CHECK(r.arrays.bit_equal(c.arrays));
  CHECK(r.manifest == c.manifest);
  Prng resumed(prng_from_json(r.manifest["prng"]));
  CHECK(resumed.next_u32() == rng.next_u32());

  // Saving what was loaded reproduces the same bytes.
  const auto path2 = temp_path("roundtrip2.ckpt");
  save_checkpoint(path2, r);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
}

TEST_CASE("checkpoint data is little-endian f32 after the manifest") {
  Checkpoint c;
  c.arrays.add("x", Array({2}, {1.0f, -2.0f}));
  const auto path = temp_path("layout.ckpt");
  save_checkpoint(path, c);
  std::ifstream is(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)), {});
  REQUIRE(bytes.size() >= 16 + 8);
  CHECK(bytes.substr(0, 8) == "PLFCKPT1");
  const std::string tail = bytes.substr(bytes.size() - 8);
  const unsigned char want[8] = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  CHECK(std::memcmp(tail.data(), want, 8) == 0);
}

TEST_CASE("checkpoint errors") {
  CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist.ckpt")), NotFoundError);
  const auto bad = temp_path("bad.ckpt");
  { std::ofstream(bad) << "not a checkpoint"; }
  CHECK_THROWS_AS(load_checkpoint(bad), Error);

  Checkpoint c;
  c.arrays.add("x", random_array({64}, 1));
  const auto path = temp_path("trunc.ckpt");
  save_checkpoint(path, c);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 10);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
}
