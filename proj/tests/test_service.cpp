#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <thread>

#include "httplib.h"
#include "pluralfill/errors.hpp"
#include "pluralfill/image_io.hpp"
#include "pluralfill/service.hpp"

using namespace pluralfill;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

RunConfig micro() {
  RunConfig c;
  c.seed = 5;
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
  c.eval.random_top_k = 5;
  c.steps = {3, 3, 2};
  return c;
}

// Trained once per process.
const fs::path& model_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "pluralfill_service_model";
    fs::remove_all(d);
    train_stages(micro(), "all", d);
    return d;
  }();
  return dir;
}

std::string png_b64(const Rgb8& img) { return base64_encode(encode_png(img)); }

Rgb8 test_image(int64_t W, int64_t H, uint64_t seed) {
  const Array f = resize_bilinear(gen_synthetic_image(32, seed), H, W);
  return to_rgb8(f);
}

json request(const Rgb8& img, json strokes, int n = 3, int top_k = 10) {
  return {{"image", png_b64(img)}, {"strokes", std::move(strokes)}, {"num_samples", n}, {"top_k", top_k},
          {"seed", 42}};
}

json hole_strokes() { return json::array({{{"points", {{8, 8}, {20, 20}}}, {"radius", 5}}}); }

}  // namespace

TEST_CASE("health and models before and after loading") {
  EditService svc;
  json h = json::parse(svc.health().body);
  CHECK(h["status"] == "loading");
  CHECK(json::parse(svc.models().body)["models"].empty());
  CHECK(svc.complete(request(test_image(32, 32, 1), json::array()).dump()).status == 503);

  svc.set_ready();
  CHECK(json::parse(svc.health().body)["status"] == "ready");
  CHECK(svc.models().status == 200);
  CHECK(json::parse(svc.models().body)["models"].empty());
  CHECK(svc.complete(request(test_image(32, 32, 1), json::array()).dump()).status == 503);

  svc.load(model_dir());
  const json models = json::parse(svc.models().body)["models"];
  REQUIRE(models.size() == 1);
  const Pipeline p = load_pipeline(model_dir());
  const json& man = p.manifests["codec"];
  CHECK(models[0]["model_id"] == man["model_id"]);
  CHECK(models[0]["dataset"] == man["dataset"]);
  CHECK(models[0]["K"] == man["config"]["K"]);
  CHECK(models[0]["chunks"] == man["config"]["chunks"]);
  CHECK(models[0]["resolutions"]["coarse"] == man["config"]["image_size"]);
  CHECK(models[0]["resolutions"]["full"] == 32);
  CHECK_THROWS_AS(svc.load(model_dir()), ConfigError);

  const double u1 = json::parse(svc.health().body)["uptime_s"];
  std::this_thread::sleep_for(std::chrono::milliseconds(5));
  const double u2 = json::parse(svc.health().body)["uptime_s"];
  CHECK(u2 > u1);
}

TEST_CASE("completion contracts") {
  EditService svc;
  svc.load(model_dir());
  svc.set_ready();
  const ParamSet before = load_pipeline(model_dir()).codec.params();

  SUBCASE("empty mask returns the input") {
    const Rgb8 img = test_image(32, 32, 2);
    for (bool refine : {false, true}) {
      json req = request(img, json::array());
      req["refine"] = refine;
      const HttpReply r = svc.complete(req.dump());
      REQUIRE(r.status == 200);
      const json body = json::parse(r.body);
      CHECK(body["samples"].size() == 3);
      for (const auto& s : body["samples"]) {
        CHECK(decode_png(base64_decode(s["image"].get<std::string>())).pixels == img.pixels);
      }
      CHECK(r.headers.count("X-Timing-Ms") == 1);
      CHECK_FALSE(body.contains("timing_ms"));
    }
  }

  SUBCASE("seeded requests are byte identical and visible pixels kept") {
    const Rgb8 img = test_image(40, 24, 3);
    json req = request(img, hole_strokes(), 4, 16);
    const HttpReply a = svc.complete(req.dump()), b = svc.complete(req.dump());
    REQUIRE(a.status == 200);
    CHECK(a.body == b.body);
    const json body = json::parse(a.body);
    const MaskSpec m = rasterize_strokes(24, 40, {Stroke{{{8, 8}, {20, 20}}, 5}});
    std::set<std::vector<uint8_t>> distinct;
    int i = 0;
    for (const auto& s : body["samples"]) {
      CHECK(s["sample_seed"] == 42 + i++);
      const Rgb8 out = decode_png(base64_decode(s["image"].get<std::string>()));
      REQUIRE(out.width == 40);
      REQUIRE(out.height == 24);
      for (int64_t k = 0; k < 24 * 40; ++k)
        if (m.bitmap[k] == 1.0f)
          for (int ch = 0; ch < 3; ++ch) REQUIRE(out.pixels[k * 3 + ch] == img.pixels[k * 3 + ch]);
      distinct.insert(out.pixels);
    }
    CHECK(distinct.size() >= 2);

    req["report_timing"] = true;
    CHECK(json::parse(svc.complete(req.dump()).body).contains("timing_ms"));

    // A sample is reproducible from its own seed.
    json one = request(img, hole_strokes(), 1, 16);
    one["seed"] = 43;
    CHECK(json::parse(svc.complete(one.dump()).body)["samples"][0]["image"] == body["samples"][1]["image"]);
  }

  SUBCASE("bitmap mask") {
    const Rgb8 img = test_image(32, 32, 4);
    Array m({32, 32}, 1.0f);
    for (int i = 0; i < 200; ++i) m[300 + i] = 0.0f;
    json req = request(img, nullptr);
    req.erase("strokes");
    req["mask"] = base64_encode(encode_mask_png(m));
    const HttpReply r = svc.complete(req.dump());
    REQUIRE(r.status == 200);
    const Rgb8 out = decode_png(base64_decode(json::parse(r.body)["samples"][0]["image"].get<std::string>()));
    for (int64_t k = 0; k < 1024; ++k)
      if (m[k] == 1.0f) CHECK(out.pixels[k * 3] == img.pixels[k * 3]);

    req["mask"] = base64_encode(encode_mask_png(Array({16, 32}, 1.0f)));
    CHECK(svc.complete(req.dump()).status == 422);
  }

  SUBCASE("errors") {
    const Rgb8 img = test_image(32, 32, 5);
    CHECK(svc.complete("{not json").status == 400);
    CHECK(svc.complete("[1,2]").status == 400);
    json req = request(img, json::array());
    req["image"] = "@@@";
    CHECK(svc.complete(req.dump()).status == 400);
    req["image"] = base64_encode(std::vector<uint8_t>{1, 2, 3, 4});
    CHECK(svc.complete(req.dump()).status == 400);
    req = request(img, json::array());
    req.erase("strokes");
    CHECK(svc.complete(req.dump()).status == 400);
    req = request(img, json::array());
    req["num_samples"] = 17;
    CHECK(svc.complete(req.dump()).status == 422);
    req["num_samples"] = 2;
    req["top_k"] = 17;
    CHECK(svc.complete(req.dump()).status == 422);
    req["top_k"] = 5;
    req["model_id"] = "nope";
    CHECK(svc.complete(req.dump()).status == 404);
    const HttpReply big = svc.complete(request(test_image(513, 8, 1), json::array()).dump());
    CHECK(big.status == 413);
    CHECK(json::parse(big.body).contains("error"));
  }

  SUBCASE("concurrent identical requests") {
    const std::string req = request(test_image(32, 32, 6), hole_strokes(), 2, 8).dump();
    std::vector<std::string> bodies(4);
    std::vector<std::thread> ts;
    for (int i = 0; i < 4; ++i) ts.emplace_back([&, i] { bodies[i] = svc.complete(req).body; });
    for (auto& t : ts) t.join();
    for (const auto& b : bodies) CHECK(b == bodies[0]);
  }

  CHECK(load_pipeline(model_dir()).codec.params().bit_equal(before));
}

TEST_CASE("http round trip") {
  EditService svc;
  svc.load(model_dir());
  svc.set_ready();
  httplib::Server server;
  svc.mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto h = cli.Get("/v1/health");
  REQUIRE(h);
  CHECK(h->status == 200);
  CHECK(json::parse(h->body)["status"] == "ready");
  auto m = cli.Get("/v1/models");
  REQUIRE(m);
  CHECK(json::parse(m->body)["models"].size() == 1);
  auto c = cli.Post("/v1/complete", request(test_image(32, 32, 7), hole_strokes(), 2, 8).dump(), "application/json");
  REQUIRE(c);
  CHECK(c->status == 200);
  CHECK(c->has_header("X-Timing-Ms"));
  CHECK(json::parse(c->body)["samples"].size() == 2);
  auto bad = cli.Post("/v1/complete", "nope", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  server.stop();
  th.join();
}

TEST_CASE("bind address") {
  unsetenv("PLURALFILL_BIND");
  CHECK(bind_address() == "127.0.0.1");
  setenv("PLURALFILL_BIND", "0.0.0.0", 1);
  CHECK(bind_address() == "0.0.0.0");
  unsetenv("PLURALFILL_BIND");
}
