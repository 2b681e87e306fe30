#include "pluralfill/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>

#include "pluralfill/checkpoint.hpp"
#include "pluralfill/errors.hpp"
#include "pluralfill/image_io.hpp"
#include "pluralfill/metrics.hpp"

#ifndef PLURALFILL_BUILD_ID
#define PLURALFILL_BUILD_ID "unknown"
#endif

namespace pluralfill {

using nlohmann::json;

void RunConfig::validate() const {
  codec.validate();
  transformer.validate();
  refiner.validate();
  sampling.validate(codec.K);
  if (transformer.K != codec.K) throw ConfigError("transformer.K must equal codec.K");
  if (transformer.chunks != codec.chunks) throw ConfigError("transformer.chunks must equal codec.chunks");
  if (transformer.N != codec.latent_size * codec.latent_size) {
    throw ConfigError("transformer.N must equal codec.latent_size^2");
  }
  if (dataset.image_size != 2 * codec.image_size) {
    throw ConfigError("dataset.image_size must be twice codec.image_size");
  }
  if (codec.image_size % 4) throw ConfigError("codec.image_size must be divisible by 4");
  if (steps.codebook < 0 || steps.transformer < 0 || steps.refiner < 0) throw ConfigError("steps must be >= 0");
  if (eval.random_samples < 1 || eval.random_top_k < 1 || eval.random_top_k > codec.K) {
    throw ConfigError("eval: random_samples >= 1 and 1 <= random_top_k <= K required");
  }
  parse_buckets(eval.buckets);
}

void to_json(json& j, const RunConfig& c) {
  j = {{"seed", c.seed},
       {"output_dir", c.output_dir},
       {"dataset", c.dataset},
       {"codec", c.codec},
       {"transformer", c.transformer},
       {"refiner", c.refiner},
       {"sampling", c.sampling},
       {"steps", {{"codebook", c.steps.codebook}, {"transformer", c.steps.transformer}, {"refiner", c.steps.refiner}}},
       {"train_masks", c.train_masks.label()},
       {"eval",
        {{"buckets", c.eval.buckets},
         {"random_samples", c.eval.random_samples},
         {"random_top_k", c.eval.random_top_k},
         {"bench_images", c.eval.bench_images}}},
       {"log_every", c.log_every}};
}

void from_json(const json& j, RunConfig& c) {
  RunConfig d;
  c.seed = j.value("seed", d.seed);
  c.output_dir = j.value("output_dir", d.output_dir);
  c.dataset = j.value("dataset", json::object()).get<DatasetSpec>();
  c.codec = j.value("codec", json::object()).get<VQConfig>();
  c.transformer = j.value("transformer", json::object()).get<TransformerConfig>();
  c.refiner = j.value("refiner", json::object()).get<RefineConfig>();
  c.sampling = j.value("sampling", json::object()).get<SampleConfig>();
  const json s = j.value("steps", json::object());
  c.steps.codebook = s.value("codebook", d.steps.codebook);
  c.steps.transformer = s.value("transformer", d.steps.transformer);
  c.steps.refiner = s.value("refiner", d.steps.refiner);
  c.train_masks = RatioBucket::parse(j.value("train_masks", d.train_masks.label()));
  const json e = j.value("eval", json::object());
  c.eval.buckets = e.value("buckets", d.eval.buckets);
  c.eval.random_samples = e.value("random_samples", d.eval.random_samples);
  c.eval.random_top_k = e.value("random_top_k", d.eval.random_top_k);
  c.eval.bench_images = e.value("bench_images", d.eval.bench_images);
  c.log_every = j.value("log_every", d.log_every);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("config not found: " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  os << json(cfg).dump(2) << '\n';
}

std::string config_hash(const RunConfig& cfg) {
  json j = cfg;
  j.erase("output_dir");
  const std::string text = j.dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string build_id() { return PLURALFILL_BUILD_ID; }

std::string model_id(const RunConfig& cfg) { return "pluralfill-" + config_hash(cfg).substr(0, 8); }

RunConfig toy_config() {
  RunConfig c;
  c.codec.lr = 1e-3f;
  c.codec.augment = "dihedral";
  c.transformer.augment = "dihedral";
  c.transformer.loss_positions = "hidden";
  c.steps.transformer = 2000;
  return c;
}

std::filesystem::path checkpoint_file(const std::filesystem::path& dir, const std::string& stage) {
  return dir / (stage + ".ckpt");
}

namespace {

std::vector<Array> coarse_images(const std::vector<Array>& images) {
  std::vector<Array> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(downsample_area(img, 2));
  return out;
}

void require_file(const std::filesystem::path& p, const std::string& stage) {
  if (!std::filesystem::exists(p)) {
    throw NotFoundError("stage " + stage + " needs " + p.string() + "; train the earlier stage first");
  }
}

std::function<void(int, float)> progress_fn(std::ostream* os, const std::string& stage, int steps, int every) {
  if (!os) return {};
  return [os, stage, steps, every](int step, float loss) {
    if (step % std::max(1, every) == 0 || step == steps) {
      *os << '[' << stage << "] step " << step << '/' << steps << " loss " << loss << '\n';
      os->flush();
    }
  };
}

}  // namespace

std::vector<StageOutput> train_stages(const RunConfig& cfg, const std::string& stage, const std::filesystem::path& dir,
                                      std::ostream* progress) {
  static const std::vector<std::string> order{"codebook", "transformer", "refiner"};
  std::vector<std::string> todo;
  if (stage == "all") {
    todo = order;
  } else if (std::find(order.begin(), order.end(), stage) != order.end()) {
    todo = {stage};
  } else {
    throw ConfigError("unknown stage '" + stage + "' (codebook, transformer, refiner, all)");
  }
  cfg.validate();
  std::filesystem::create_directories(dir);
  save_run_config(dir / "config.json", cfg);

  // Upstream checks come before the dataset is built.
  if (todo.front() != "codebook") require_file(checkpoint_file(dir, "codebook"), todo.front());
  if (todo.front() == "refiner") require_file(checkpoint_file(dir, "transformer"), "refiner");

  const Dataset data = make_dataset(cfg.dataset);
  if (data.train.empty()) throw Error("training set is empty");
  const FeatureExtractor fx;
  std::vector<StageOutput> out;
  for (const auto& s : todo) {
    const auto t0 = std::chrono::steady_clock::now();
    StageOutput so{s, checkpoint_file(dir, s), dir / (s + ".csv"), 0.0};
    if (s == "codebook") {
      CodecTrainOptions o;
      o.steps = cfg.steps.codebook;
      o.seed = cfg.seed;
      o.log_every = cfg.log_every;
      o.checkpoint_path = so.checkpoint;
      o.log_path = so.log;
      o.on_step = progress_fn(progress, s, o.steps, cfg.log_every);
      o.tags = {{"model_id", model_id(cfg)}, {"dataset", cfg.dataset.source}, {"config_hash", config_hash(cfg)}};
      train_codebook_stage(coarse_images(data.train), cfg.codec, fx, o);
    } else if (s == "transformer") {
      require_file(checkpoint_file(dir, "codebook"), s);
      const Codec codec = load_codec(checkpoint_file(dir, "codebook"));
      TransformerTrainOptions o;
      o.steps = cfg.steps.transformer;
      o.seed = cfg.seed;
      o.log_every = cfg.log_every;
      o.mask_range = cfg.train_masks;
      o.checkpoint_path = so.checkpoint;
      o.log_path = so.log;
      o.on_step = progress_fn(progress, s, o.steps, cfg.log_every);
      train_transformer_stage(data.train, codec, cfg.transformer, o);
    } else {
      require_file(checkpoint_file(dir, "codebook"), s);
      require_file(checkpoint_file(dir, "transformer"), s);
      const Codec codec = load_codec(checkpoint_file(dir, "codebook"));
      const CompletionTransformer model = load_transformer(checkpoint_file(dir, "transformer"));
      RefinerTrainOptions o;
      o.steps = cfg.steps.refiner;
      o.seed = cfg.seed;
      o.log_every = cfg.log_every;
      o.mask_range = cfg.train_masks;
      o.checkpoint_path = so.checkpoint;
      o.log_path = so.log;
      o.on_step = progress_fn(progress, s, o.steps, cfg.log_every);
      train_refiner_stage(data.train, codec, model, fx, cfg.refiner, o);
    }
    so.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(so);
  }
  return out;
}

Pipeline load_pipeline(const std::filesystem::path& dir) {
  const auto cpath = checkpoint_file(dir, "codebook"), tpath = checkpoint_file(dir, "transformer"),
             rpath = checkpoint_file(dir, "refiner");
  if (!std::filesystem::exists(cpath)) throw NotFoundError("missing codebook checkpoint " + cpath.string());
  if (!std::filesystem::exists(tpath)) throw NotFoundError("missing transformer checkpoint " + tpath.string());
  const json cman = load_checkpoint(cpath).manifest;
  Pipeline p{load_codec(cpath), load_transformer(tpath), std::nullopt,
             FeatureExtractor(cman.value("feature_seed", FeatureExtractor::kDefaultSeed)), json::object()};
  p.manifests["codec"] = cman;
  p.manifests["transformer"] = load_checkpoint(tpath).manifest;
  if (std::filesystem::exists(rpath)) {
    p.refiner = load_refiner(rpath);
    p.manifests["refiner"] = load_checkpoint(rpath).manifest;
  }
  const auto& tc = p.transformer.config();
  const auto& vc = p.codec.config();
  if (tc.K != vc.K || tc.chunks != vc.chunks || tc.N != vc.latent_size * vc.latent_size) {
    throw ConfigError("checkpoints in " + dir.string() + " do not belong together");
  }
  return p;
}

Completion complete(const Pipeline& p, const Array& image, const MaskSpec& mask, const SampleConfig& sc, bool refine) {
  const int64_t S = p.coarse_size(), F = p.full_size();
  if (image.shape() != Shape{3, F, F}) {
    throw ShapeError("complete: image must be [3," + std::to_string(F) + "," + std::to_string(F) + "], got " +
                     shape_str(image.shape()));
  }
  if (mask.bitmap.shape() != Shape{F, F}) throw ShapeError("complete: mask does not match the image");
  if (refine && !p.refiner) throw NotFoundError("refinement requested but no refiner is loaded");

  const Array coarse = downsample_area(image, 2);
  Completion c;
  c.coarse_mask = MaskSpec::from_bitmap(downsample_mask(mask.bitmap, 2));
  SampleBatch b = sample_batch(coarse, c.coarse_mask, p.transformer, p.codec, sc, p.fx);
  c.report = std::move(b.report);
  for (const auto& fill : b.images) c.coarse.push_back(compose(coarse, fill, c.coarse_mask.bitmap));

  const int64_t n = static_cast<int64_t>(c.coarse.size());
  if (refine) {
    Array xs({n, 3, S, S}), cms({n, S, S}), full({n, 3, F, F}), fms({n, F, F});
    for (int64_t i = 0; i < n; ++i) {
      std::copy(c.coarse[i].data().begin(), c.coarse[i].data().end(), xs.data().begin() + i * 3 * S * S);
      std::copy(c.coarse_mask.bitmap.data().begin(), c.coarse_mask.bitmap.data().end(), cms.data().begin() + i * S * S);
      std::copy(image.data().begin(), image.data().end(), full.data().begin() + i * 3 * F * F);
      std::copy(mask.bitmap.data().begin(), mask.bitmap.data().end(), fms.data().begin() + i * F * F);
    }
    const Array r = p.refiner->refine(xs, cms, full, fms);
    for (int64_t i = 0; i < n; ++i) {
      std::vector<float> v(r.data().begin() + i * 3 * F * F, r.data().begin() + (i + 1) * 3 * F * F);
      c.full.emplace_back(Shape{3, F, F}, std::move(v));
    }
  } else {
    for (const auto& x : c.coarse) c.full.push_back(compose(image, resize_bilinear(x, F, F), mask.bitmap));
  }
  return c;
}

Array mean_fill(const Array& image, const Array& bitmap) {
  const int64_t C = image.dim(0), hw = image.dim(1) * image.dim(2);
  if (bitmap.shape() != Shape{image.dim(1), image.dim(2)}) throw ShapeError("mean_fill: mask does not match image");
  Array out = image;
  double visible = 0.0;
  for (int64_t i = 0; i < hw; ++i) visible += bitmap[i];
  for (int64_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (int64_t i = 0; i < hw; ++i) s += bitmap[i] * image[c * hw + i];
    const float m = visible > 0.0 ? static_cast<float>(s / visible) : 0.0f;
    for (int64_t i = 0; i < hw; ++i)
      if (bitmap[i] != 1.0f) out[c * hw + i] = m;
  }
  return out;
}

MaskSpec eval_mask(const RunConfig& cfg, int64_t size, const RatioBucket& bucket, size_t bucket_index, size_t index) {
  const uint64_t s = mix_seed(mix_seed(cfg.seed, 0xE7A1), bucket_index * 1000003ULL + index);
  return gen_freeform_mask(size, size, bucket, s);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

struct Accum {
  std::vector<double> psnr, ssim, lpips, masked;
  std::vector<Array> outputs, targets;

  void add(const FeatureExtractor& fx, const Array& out, const Array& gt, const Array& mask) {
    psnr.push_back(pluralfill::psnr(out, gt));
    ssim.push_back(pluralfill::ssim(out, gt));
    lpips.push_back(fx.perceptual_distance(out.reshape({1, out.dim(0), out.dim(1), out.dim(2)}),
                                           gt.reshape({1, gt.dim(0), gt.dim(1), gt.dim(2)})));
    masked.push_back(masked_psnr(out, gt, mask));
    outputs.push_back(out);
  }
};

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

json evaluate(const RunConfig& cfg, const Pipeline& p, const std::vector<Array>& test,
              const std::vector<RatioBucket>& buckets) {
  if (test.empty()) throw Error("eval: test set is empty");
  if (!p.refiner) throw NotFoundError("eval: refiner checkpoint missing");
  const int64_t F = p.full_size();
  for (const auto& img : test)
    if (img.shape() != Shape{3, F, F}) throw ShapeError("eval: test images must match the full resolution");

  json rows = json::array(), metric_rows = json::array(), summary = json::object();
  for (size_t bi = 0; bi < buckets.size(); ++bi) {
    const RatioBucket& bucket = buckets[bi];
    std::map<std::string, Accum> acc;
    std::vector<double> gain;
    for (size_t i = 0; i < test.size(); ++i) {
      const Array& img = test[i];
      const MaskSpec fm = eval_mask(cfg, F, bucket, bi, i);
      const Array gt_c = downsample_area(img, 2);

      SampleConfig top1;
      top1.mode = "top1";
      top1.top_k = 1;
      top1.num_samples = 1;
      top1.seed = mix_seed(cfg.seed, i);
      SampleConfig random;
      random.mode = "one_time";
      random.top_k = cfg.eval.random_top_k;
      random.num_samples = cfg.eval.random_samples;
      random.seed = mix_seed(cfg.seed, i);

      const Completion t = complete(p, img, fm, top1, true);
      const Completion r = complete(p, img, fm, random, true);
      const Array& cm = t.coarse_mask.bitmap;
      acc["Coarse/Top1"].add(p.fx, t.coarse[0], gt_c, cm);
      acc["Refine/Top1"].add(p.fx, t.full[0], img, fm.bitmap);
      for (const auto& x : r.coarse) acc["Coarse/Random"].add(p.fx, x, gt_c, cm);
      for (const auto& x : r.full) acc["Refine/Random"].add(p.fx, x, img, fm.bitmap);
      const Array mf = mean_fill(gt_c, cm);
      acc["Coarse/MeanFill"].add(p.fx, mf, gt_c, cm);
      gain.push_back(acc["Coarse/Top1"].masked.back() - acc["Coarse/MeanFill"].masked.back());
      for (const char* key : {"Coarse/Top1", "Coarse/Random", "Coarse/MeanFill"}) acc[key].targets.push_back(gt_c);
      for (const char* key : {"Refine/Top1", "Refine/Random"}) acc[key].targets.push_back(img);
    }
    for (const char* key : {"Coarse/Top1", "Coarse/Random", "Refine/Top1", "Refine/Random", "Coarse/MeanFill"}) {
      const Accum& a = acc[key];
      const std::string k = key;
      const std::string variant = k.substr(0, k.find('/')), sampling = k.substr(k.find('/') + 1);
      json row = {{"variant", variant},
                  {"sampling", sampling},
                  {"bucket", bucket.label()},
                  {"n", a.psnr.size()},
                  {"psnr", mean_of(a.psnr)},
                  {"psnr_median", median(a.psnr)},
                  {"ssim", mean_of(a.ssim)},
                  {"desk_lpips", mean_of(a.lpips)},
                  {"masked_psnr", mean_of(a.masked)},
                  {"masked_psnr_median", median(a.masked)}};
      if (a.outputs.size() >= 8 && a.targets.size() >= 8) {
        row["desk_fid"] = frechet_feature_distance(a.outputs, a.targets, p.fx);
      } else {
        row["desk_fid"] = nullptr;
      }
      for (const char* m : {"psnr", "ssim", "desk_lpips", "desk_fid", "masked_psnr"}) {
        if (row[m].is_null()) continue;
        metric_rows.push_back(MetricRow{k + "/" + m, bucket.label(), row[m].get<double>(), cfg.seed});
      }
      rows.push_back(std::move(row));
    }
    summary[bucket.label()] = {{"top1_gain_over_mean_fill_db_median", median(gain)}, {"top1_gain_over_mean_fill_db", gain}};
  }
  return {{"config_hash", config_hash(cfg)},
          {"build_id", build_id()},
          {"model_id", p.manifests["codec"].value("model_id", "")},
          {"test_images", test.size()},
          {"metric_note", "desk_lpips and desk_fid use a frozen random-feature extractor, not LPIPS/Inception"},
          {"rows", rows},
          {"summary", summary},
          {"metric_rows", metric_rows}};
}

json bench_sampling(const RunConfig& cfg, const Pipeline& p, const std::vector<Array>& test, int timing_runs) {
  if (test.empty()) throw Error("bench-sampling: test set is empty");
  if (timing_runs < 1) throw ConfigError("bench-sampling: timing_runs must be >= 1");
  const int64_t S = p.coarse_size(), F = p.full_size();
  const Array coarse0 = downsample_area(test[0], 2);
  const MaskSpec hidden = MaskSpec::from_bitmap(Array({S, S}, 0.0f));

  const size_t n_set = std::min<size_t>(test.size(), static_cast<size_t>(std::max(1, cfg.eval.bench_images)));
  std::vector<Array> set_images;
  std::vector<MaskSpec> set_masks;
  for (size_t i = 0; i < n_set; ++i) {
    set_images.push_back(downsample_area(test[i], 2));
    set_masks.push_back(MaskSpec::from_bitmap(
        downsample_mask(eval_mask(cfg, F, RatioBucket{0.4f, 0.5f}, 99, i).bitmap, 2)));
  }
  const double nll = heldout_nll(p.transformer, p.codec, set_images, set_masks);
  const int samples = std::max(2, std::min(cfg.sampling.num_samples, 10));

  json rows = json::array();
  std::map<int, double> one_time_s, ar_s;
  int64_t hidden_tokens = 0;
  for (const char* mode : {"one_time", "autoregressive"}) {
    for (int k : {1, 5, 20}) {
      SampleConfig sc;
      sc.mode = mode;
      sc.top_k = std::min(k, p.codec.config().K);
      sc.num_samples = 1;
      sc.seed = cfg.seed;
      sample_batch(coarse0, hidden, p.transformer, p.codec, sc, p.fx);  // warm-up
      std::vector<double> times;
      int64_t forwards = 0;
      for (int r = 0; r < timing_runs; ++r) {
        const SampleBatch b = sample_batch(coarse0, hidden, p.transformer, p.codec, sc, p.fx);
        times.push_back(b.report.wall_clock_s);
        forwards = b.report.forward_passes;
        hidden_tokens = 0;
        for (float w : b.masked.weights.data()) hidden_tokens += w < 1.0f;
      }
      sc.num_samples = samples;
      std::vector<double> div;
      for (size_t i = 0; i < n_set; ++i) {
        sc.seed = mix_seed(cfg.seed, i);
        div.push_back(sample_batch(set_images[i], set_masks[i], p.transformer, p.codec, sc, p.fx).report.diversity);
      }
      const double t = median(times);
      (std::string(mode) == "one_time" ? one_time_s : ar_s)[k] = t;
      rows.push_back({{"mode", mode},
                      {"top_k", k},
                      {"time_s_median", t},
                      {"time_s_runs", times},
                      {"forward_passes", forwards},
                      {"diversity", mean_of(div)},
                      {"nll", nll}});
    }
  }
  json speedup = json::object();
  for (const auto& [k, t] : one_time_s) speedup[std::to_string(k)] = t > 0.0 ? ar_s[k] / t : 0.0;
  return {{"config_hash", config_hash(cfg)},
          {"build_id", build_id()},
          {"hidden_tokens", hidden_tokens},
          {"timing", "median of " + std::to_string(timing_runs) + " warm runs, fully hidden grid, 1 sample"},
          {"diversity_note", "desk_lpips over " + std::to_string(samples) + " samples, mean over " +
                                 std::to_string(n_set) + " masked test images"},
          {"rows", rows},
          {"speedup", speedup}};
}

}  // namespace pluralfill
