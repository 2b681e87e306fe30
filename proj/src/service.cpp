#include "pluralfill/service.hpp"

#include <cstdlib>
#include <random>

#include "httplib.h"
#include "pluralfill/errors.hpp"
#include "pluralfill/image_io.hpp"

namespace pluralfill {

using nlohmann::json;

namespace {

// Carries an HTTP status out of request parsing.
class RequestError : public Error {
 public:
  RequestError(int status, const std::string& what) : Error(what), status(status) {}
  int status;
};

HttpReply json_reply(int status, const json& j) {
  HttpReply r;
  r.status = status;
  r.body = j.dump();
  r.headers["Content-Type"] = "application/json";
  return r;
}

HttpReply error_reply(int status, const std::string& message) { return json_reply(status, {{"error", message}}); }

Rgb8 decode_image_field(const json& req) {
  if (!req.contains("image") || !req["image"].is_string()) throw RequestError(400, "image: base64 PNG string required");
  try {
    return decode_png(base64_decode(req["image"].get<std::string>()));
  } catch (const RequestError&) {
    throw;
  } catch (const Error& e) {
    throw RequestError(400, std::string("image: ") + e.what());
  }
}

Array decode_mask_field(const json& req, int64_t H, int64_t W) {
  const bool has_mask = req.contains("mask") && !req["mask"].is_null();
  const bool has_strokes = req.contains("strokes") && !req["strokes"].is_null();
  if (has_mask == has_strokes) throw RequestError(400, "give exactly one of mask or strokes");
  if (has_mask) {
    if (!req["mask"].is_string()) throw RequestError(400, "mask: base64 PNG string required");
    Array m;
    try {
      m = decode_mask_png(base64_decode(req["mask"].get<std::string>()));
    } catch (const Error& e) {
      throw RequestError(400, std::string("mask: ") + e.what());
    }
    if (m.dim(0) != H || m.dim(1) != W) {
      throw RequestError(422, "mask is " + std::to_string(m.dim(1)) + "x" + std::to_string(m.dim(0)) +
                                  ", image is " + std::to_string(W) + "x" + std::to_string(H));
    }
    return m;
  }
  if (!req["strokes"].is_array()) throw RequestError(400, "strokes must be a list");
  std::vector<Stroke> strokes;
  try {
    for (const auto& s : req["strokes"]) {
      Stroke st;
      st.radius = s.at("radius").get<float>();
      for (const auto& pt : s.at("points")) st.points.emplace_back(pt.at(0).get<float>(), pt.at(1).get<float>());
      if (!(st.radius > 0.0f) || st.points.empty()) throw RequestError(400, "stroke needs points and radius > 0");
      strokes.push_back(std::move(st));
    }
  } catch (const json::exception& e) {
    throw RequestError(400, std::string("strokes: ") + e.what());
  }
  return rasterize_strokes(H, W, strokes).bitmap;
}

// Fits an image into the model's full resolution.
Array to_model_size(const Array& img, int64_t F) {
  const int64_t H = img.dim(1), W = img.dim(2);
  if (H == F && W == F) return img;
  if (H == W && H % F == 0) return downsample_area(img, H / F);
  return resize_bilinear(img, F, F);
}

}  // namespace

EditService::EditService(ServiceLimits limits) : limits_(limits), started_(std::chrono::steady_clock::now()) {}

void EditService::load(const std::filesystem::path& dir) {
  Pipeline p = load_pipeline(dir);
  const json& cm = p.manifests["codec"];
  LoadedModel m{cm.value("model_id", dir.filename().string()), cm.value("dataset", "unknown"), std::move(p)};
  add_model(std::move(m));
}

void EditService::add_model(LoadedModel model) {
  std::lock_guard lock(mutex_);
  for (const auto& m : models_)
    if (m->id == model.id) throw ConfigError("model '" + model.id + "' already loaded");
  models_.push_back(std::make_shared<const LoadedModel>(std::move(model)));
}

void EditService::set_ready() { ready_ = true; }

std::shared_ptr<const LoadedModel> EditService::find(const std::string& id) const {
  std::lock_guard lock(mutex_);
  if (models_.empty()) return nullptr;
  if (id.empty()) return models_.front();
  for (const auto& m : models_)
    if (m->id == id) return m;
  return nullptr;
}

HttpReply EditService::complete(const std::string& body) const {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception& e) {
      throw RequestError(400, std::string("malformed JSON: ") + e.what());
    }
    if (!req.is_object()) throw RequestError(400, "request must be a JSON object");
    const std::string want = req.value("model_id", std::string());
    const auto model = find(want);
    if (!model) {
      if (!want.empty() && ready_) throw RequestError(404, "unknown model '" + want + "'");
      throw RequestError(503, ready_ ? "no model loaded" : "model loading");
    }
    const Pipeline& p = model->pipeline;

    const Rgb8 rgb = decode_image_field(req);
    const int64_t H = rgb.height, W = rgb.width;
    if (H > limits_.max_side || W > limits_.max_side) {
      throw RequestError(413, "image side exceeds " + std::to_string(limits_.max_side) + " px");
    }
    const Array bitmap = decode_mask_field(req, H, W);

    SampleConfig sc;
    try {
      sc.mode = req.value("mode", std::string("one_time"));
      sc.num_samples = req.value("num_samples", 4);
      sc.top_k = req.value("top_k", 20);
      sc.seed = req.contains("seed") && !req["seed"].is_null() ? req["seed"].get<uint64_t>() : std::random_device{}();
    } catch (const json::exception& e) {
      throw RequestError(400, e.what());
    }
    if (sc.num_samples < 1 || sc.num_samples > limits_.max_samples) {
      throw RequestError(422, "num_samples must lie in [1, " + std::to_string(limits_.max_samples) + "]");
    }
    try {
      sc.validate(p.codec.config().K);
    } catch (const ConfigError& e) {
      throw RequestError(422, e.what());
    }
    const bool refine = req.value("refine", p.refiner.has_value());
    if (refine && !p.refiner) throw RequestError(422, "model has no refiner");

    const int64_t F = p.full_size();
    const Array img = to_float(rgb);
    const Array model_img = to_model_size(img, F);
    const MaskSpec model_mask = MaskSpec::from_bitmap(resample_mask(bitmap, F, F));
    const Completion c = pluralfill::complete(p, model_img, model_mask, sc, refine);

    json samples = json::array();
    for (size_t i = 0; i < c.full.size(); ++i) {
      const Array& out = c.full[i];
      Rgb8 res = to_rgb8(out.dim(1) == H && out.dim(2) == W ? out : resize_bilinear(out, H, W));
      for (int64_t k = 0; k < H * W; ++k) {
        if (bitmap[k] != 1.0f) continue;
        for (int ch = 0; ch < 3; ++ch) res.pixels[k * 3 + ch] = rgb.pixels[k * 3 + ch];
      }
      for (int64_t k = 0; k < H * W * 3; ++k) {
        if (bitmap[k / 3] == 1.0f && res.pixels[k] != rgb.pixels[k]) {
          return error_reply(500, "visible pixel check failed");
        }
      }
      samples.push_back({{"image", base64_encode(encode_png(res))}, {"sample_seed", sc.seed + i}});
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    json resp = {{"model_id", model->id}, {"samples", samples}};
    if (req.value("report_timing", false)) resp["timing_ms"] = ms;
    HttpReply r = json_reply(200, resp);
    r.headers["X-Timing-Ms"] = std::to_string(ms);
    return r;
  } catch (const RequestError& e) {
    return error_reply(e.status, e.what());
  } catch (const ShapeError& e) {
    return error_reply(422, e.what());
  } catch (const std::exception& e) {
    return error_reply(500, e.what());
  }
}

HttpReply EditService::models() const {
  json list = json::array();
  std::lock_guard lock(mutex_);
  for (const auto& m : models_) {
    const auto& vc = m->pipeline.codec.config();
    list.push_back({{"model_id", m->id},
                    {"dataset", m->dataset},
                    {"K", vc.K},
                    {"chunks", vc.chunks},
                    {"resolutions", {{"coarse", m->pipeline.coarse_size()}, {"full", m->pipeline.full_size()}}},
                    {"refiner", m->pipeline.refiner.has_value()}});
  }
  return json_reply(200, {{"models", list}});
}

HttpReply EditService::health() const {
  const double up = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  return json_reply(200, {{"status", ready_ ? "ready" : "loading"}, {"uptime_s", up}});
}

void EditService::mount(httplib::Server& server) const {
  auto send = [](httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    for (const auto& [k, v] : r.headers)
      if (k != "Content-Type") res.set_header(k, v);
    res.set_content(r.body, "application/json");
  };
  server.Post("/v1/complete",
              [this, send](const httplib::Request& req, httplib::Response& res) { send(res, complete(req.body)); });
  server.Get("/v1/models", [this, send](const httplib::Request&, httplib::Response& res) { send(res, models()); });
  server.Get("/v1/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
}

std::string bind_address() {
  const char* env = std::getenv("PLURALFILL_BIND");
  return env && *env ? env : "127.0.0.1";
}

}  // namespace pluralfill
