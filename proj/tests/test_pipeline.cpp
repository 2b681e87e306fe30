#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>

#include "pluralfill/checkpoint.hpp"
#include "pluralfill/errors.hpp"
#include "pluralfill/image_io.hpp"
#include "pluralfill/log.hpp"
#include "pluralfill/pipeline.hpp"
#include "support/test_support.hpp"

using namespace pluralfill;
using pluralfill::testing::random_array;
namespace fs = std::filesystem;

namespace {

// The micro refiner's 4x4 bottleneck is often fully hidden; that warning is expected here.
[[maybe_unused]] const bool quiet = [] {
  set_warning_sink([](const std::string&) {});
  return true;
}();

RunConfig micro() {
  RunConfig c;
  c.seed = 3;
  c.dataset.image_size = 32;
  c.dataset.train_count = 8;
  c.dataset.test_count = 8;
  c.codec.K = 16;
  c.codec.chunks = 2;
  c.codec.n_z = 8;
  c.codec.image_size = 16;
  c.codec.latent_size = 4;
  c.codec.channels = 8;
  c.codec.batch_size = 2;
  c.transformer.L = 1;
  c.transformer.heads = 2;
  c.transformer.C = 8;
  c.transformer.N = 16;
  c.transformer.K = 16;
  c.transformer.chunks = 2;
  c.transformer.batch_size = 2;
  c.refiner.channels = 8;
  c.refiner.batch_size = 2;
  c.refiner.top_k = 5;
  c.sampling.top_k = 5;
  c.sampling.num_samples = 2;
  c.steps = {3, 3, 2};
  c.eval.random_samples = 2;
  c.eval.random_top_k = 5;
  c.eval.bench_images = 1;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pluralfill_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("run config round trip and validation") {
  const RunConfig c = micro();
  CHECK_NOTHROW(c.validate());
  const nlohmann::json j = c;
  const RunConfig back = j.get<RunConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(c).size() == 16);

  RunConfig d = c;
  d.seed = 4;
  CHECK(config_hash(d) != config_hash(c));
  d = c;
  d.output_dir = "elsewhere";
  CHECK(config_hash(d) == config_hash(c));

  // Materialized defaults: an empty document fills every field.
  const nlohmann::json full = nlohmann::json::object().get<RunConfig>();
  CHECK(nlohmann::json(full).contains("steps"));
  CHECK(nlohmann::json(full)["codec"]["K"] == 128);
  CHECK(nlohmann::json(full)["codec"]["beta2"] == 0.9);

  RunConfig bad = c;
  bad.transformer.K = 32;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.transformer.N = 9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.dataset.image_size = 48;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.eval.buckets = "20-x";
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  const fs::path dir = scratch("config");
  save_run_config(dir / "c.json", c);
  CHECK(nlohmann::json(load_run_config(dir / "c.json")) == j);
  {
    std::ofstream(dir / "broken.json") << "{ not json";
  }
  CHECK_THROWS_AS(load_run_config(dir / "broken.json"), ConfigError);
  CHECK_THROWS_AS(load_run_config(dir / "missing.json"), NotFoundError);
  fs::remove_all(dir);
}

TEST_CASE("train stages, determinism and upstream errors") {
  const RunConfig c = micro();
  const fs::path a = scratch("train_a"), b = scratch("train_b");
  CHECK_THROWS_AS(train_stages(c, "transformer", a), NotFoundError);
  CHECK_THROWS_AS(train_stages(c, "refiner", a), NotFoundError);
  CHECK_THROWS_AS(train_stages(c, "everything", a), ConfigError);

  const auto outs = train_stages(c, "all", a);
  REQUIRE(outs.size() == 3);
  for (const auto& o : outs) {
    CHECK(fs::exists(o.checkpoint));
    CHECK(fs::exists(o.log));
  }
  CHECK(fs::exists(a / "config.json"));
  train_stages(c, "codebook", b);
  train_stages(c, "transformer", b);
  train_stages(c, "refiner", b);
  for (const char* s : {"codebook", "transformer", "refiner"}) {
    CHECK(testing::read_text(checkpoint_file(a, s)) == testing::read_text(checkpoint_file(b, s)));
    CHECK(testing::read_text(a / (std::string(s) + ".csv")) == testing::read_text(b / (std::string(s) + ".csv")));
  }
  const Checkpoint ck = load_checkpoint(checkpoint_file(a, "codebook"));
  CHECK(ck.manifest["model_id"] == model_id(c));
  CHECK(ck.manifest["config_hash"] == config_hash(c));

  const Pipeline p = load_pipeline(a);
  CHECK(p.refiner.has_value());
  CHECK(p.full_size() == 32);
  CHECK_THROWS_AS(load_pipeline(scratch("empty")), NotFoundError);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("complete, eval and bench") {
  const RunConfig c = micro();
  const fs::path dir = scratch("eval");
  train_stages(c, "all", dir);
  const Pipeline p = load_pipeline(dir);
  const Dataset data = make_dataset(c.dataset);

  SampleConfig sc;
  sc.top_k = 5;
  sc.num_samples = 3;
  const MaskSpec fm = eval_mask(c, 32, RatioBucket{0.3f, 0.4f}, 0, 0);
  for (bool refine : {false, true}) {
    const Completion out = complete(p, data.test[0], fm, sc, refine);
    CHECK(out.coarse.size() == 3);
    CHECK(out.full.size() == 3);
    for (const auto& f : out.full) {
      CHECK(f.shape() == Shape{3, 32, 32});
      for (int ch = 0; ch < 3; ++ch)
        for (int i = 0; i < 32 * 32; ++i)
          if (fm.bitmap[i] == 1.0f) REQUIRE(f[ch * 1024 + i] == data.test[0][ch * 1024 + i]);
    }
  }
  CHECK_THROWS_AS(complete(p, random_array({3, 16, 16}, 1), fm, sc, false), ShapeError);

  const nlohmann::json report = evaluate(c, p, data.test, standard_buckets());
  CHECK(report["config_hash"] == config_hash(c));
  CHECK(report.contains("build_id"));
  std::set<std::string> keys;
  for (const auto& r : report["rows"]) {
    keys.insert(r["variant"].get<std::string>() + "/" + r["sampling"].get<std::string>() + "/" +
                r["bucket"].get<std::string>());
    CHECK(r["psnr"].get<double>() > 0.0);
    CHECK(!r["desk_fid"].is_null());
  }
  for (const char* v : {"Coarse", "Refine"})
    for (const char* s : {"Top1", "Random"})
      for (const char* b : {"20-30", "30-40", "40-50"}) CHECK(keys.count(std::string(v) + "/" + s + "/" + b) == 1);
  CHECK(keys.count("Coarse/MeanFill/20-30") == 1);
  CHECK(report["summary"].contains("40-50"));
  CHECK(evaluate(c, p, data.test, standard_buckets()) == report);
  CHECK_THROWS_AS(evaluate(c, p, {}, standard_buckets()), Error);

  const nlohmann::json bench = bench_sampling(c, p, data.test, 1);
  CHECK(bench["hidden_tokens"] == 16);
  for (const auto& r : bench["rows"]) {
    CHECK(r["forward_passes"] == (r["mode"] == "one_time" ? 1 : 16));
    if (r["top_k"] == 1) CHECK(r["diversity"] == 0.0);
  }
  CHECK(bench["speedup"].contains("20"));
  fs::remove_all(dir);
}

TEST_CASE("mean fill and median") {
  const Array img = random_array({3, 4, 4}, 2);
  Array m({4, 4}, 1.0f);
  m[5] = m[6] = 0.0f;
  const Array f = mean_fill(img, m);
  for (int ch = 0; ch < 3; ++ch) {
    double s = 0.0;
    for (int i = 0; i < 16; ++i)
      if (m[i] == 1.0f) s += img[ch * 16 + i];
    CHECK(f[ch * 16 + 5] == doctest::Approx(s / 14.0).epsilon(1e-6));
    CHECK(f[ch * 16 + 0] == img[ch * 16 + 0]);
  }
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
}
