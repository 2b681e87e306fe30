#include "pluralfill/refiner.hpp"

#include <cmath>
#include <fstream>

#include "pluralfill/checkpoint.hpp"
#include "pluralfill/errors.hpp"
#include "pluralfill/json_util.hpp"
#include "pluralfill/image_io.hpp"
#include "pluralfill/log.hpp"
#include "pluralfill/ops.hpp"

namespace pluralfill {

void RefineConfig::validate() const {
  if (channels < 4 || channels % 2) throw ConfigError("refiner: channels must be even and >= 4");
  if (patch < 1 || patch % 2 == 0) throw ConfigError("refiner: patch must be odd");
  if (!(copy_scale > 0.0f)) throw ConfigError("refiner: copy_scale must be positive");
  if (batch_size < 1) throw ConfigError("refiner: batch_size must be >= 1");
  if (top_k < 1) throw ConfigError("refiner: top_k must be >= 1");
  if (adv_warmup < 0.0f || adv_warmup > 1.0f) throw ConfigError("refiner: adv_warmup must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const RefineConfig& c) {
  j = {{"channels", c.channels},     {"patch", c.patch},           {"copy_scale", json_float(c.copy_scale)},
       {"lambda_rec", json_float(c.lambda_rec)}, {"lambda_per", json_float(c.lambda_per)}, {"lambda_adv", json_float(c.lambda_adv)},
       {"adv_warmup", json_float(c.adv_warmup)}, {"lr", json_float(c.lr)},                 {"batch_size", c.batch_size},
       {"top_k", c.top_k}};
}

void from_json(const nlohmann::json& j, RefineConfig& c) {
  RefineConfig d;
  c.channels = j.value("channels", d.channels);
  c.patch = j.value("patch", d.patch);
  c.copy_scale = j.value("copy_scale", d.copy_scale);
  c.lambda_rec = j.value("lambda_rec", d.lambda_rec);
  c.lambda_per = j.value("lambda_per", d.lambda_per);
  c.lambda_adv = j.value("lambda_adv", d.lambda_adv);
  c.adv_warmup = j.value("adv_warmup", d.adv_warmup);
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.top_k = j.value("top_k", d.top_k);
  c.validate();
}

namespace {

// Image [.., C, H, W] against mask [.., H, W]: per-pixel mask index.
void check_compose(const Shape& img, const Shape& mask) {
  if (img.size() != 3 && img.size() != 4) throw ShapeError("compose: image must be [C,H,W] or [B,C,H,W]");
  if (mask.size() != img.size() - 1) throw ShapeError("compose: mask rank must be image rank - 1");
  const size_t r = img.size();
  if (mask[mask.size() - 1] != img[r - 1] || mask[mask.size() - 2] != img[r - 2] ||
      (r == 4 && mask[0] != img[0])) {
    throw ShapeError("compose: mask " + shape_str(mask) + " does not fit image " + shape_str(img));
  }
}

// Mask broadcast to the image shape.
Array expand_mask(const Array& bitmap, const Shape& img) {
  const int64_t B = img.size() == 4 ? img[0] : 1, C = img[img.size() - 3], hw = img[img.size() - 1] * img[img.size() - 2];
  Array out(img);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < hw; ++i) out[(b * C + c) * hw + i] = bitmap[b * hw + i];
  return out;
}

}  // namespace

Array compose(const Array& visible, const Array& generated, const Array& bitmap) {
  if (visible.shape() != generated.shape()) throw ShapeError("compose: image shapes differ");
  check_compose(visible.shape(), bitmap.shape());
  for (float v : bitmap.data()) {
    if (v != 0.0f && v != 1.0f) throw Error("compose: mask must be binary");
  }
  const Shape& s = visible.shape();
  const int64_t B = s.size() == 4 ? s[0] : 1, C = s[s.size() - 3], hw = s[s.size() - 1] * s[s.size() - 2];
  Array out(s);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < hw; ++i) {
        const int64_t k = (b * C + c) * hw + i;
        out[k] = bitmap[b * hw + i] == 1.0f ? visible[k] : generated[k];
      }
  return out;
}

Var compose(Var visible, Var generated, const Array& bitmap) {
  if (visible.shape() != generated.shape()) throw ShapeError("compose: image shapes differ");
  check_compose(visible.shape(), bitmap.shape());
  Tape& t = *generated.tape;
  const Array m = expand_mask(bitmap, visible.shape());
  Array inv(m.shape());
  for (int64_t i = 0; i < m.size(); ++i) inv[i] = 1.0f - m[i];
  return visible * t.constant(m) + generated * t.constant(inv);
}

Var contextual_copy(Var feat, const Array& mask, int patch, float scale_factor, Var* attention) {
  if (feat.shape().size() != 3) throw ShapeError("contextual_copy: features must be [C,h,w]");
  const int64_t C = feat.shape()[0], h = feat.shape()[1], w = feat.shape()[2], n = h * w;
  if (mask.shape() != Shape{h, w}) {
    throw ShapeError("contextual_copy: mask " + shape_str(mask.shape()) + " does not match features " +
                     shape_str(feat.shape()));
  }
  int64_t visible = 0;
  for (float v : mask.data()) visible += v == 1.0f;
  if (visible == n) return feat;
  if (visible == 0) {
    warn("contextual_copy: no visible region, features passed through");
    return feat;
  }
  Tape& t = *feat.tape;
  Var P = normalize_rows(unfold_patches(feat, patch));
  Array bias({1, n});
  for (int64_t j = 0; j < n; ++j) bias[j] = mask[j] == 1.0f ? 0.0f : -1e4f;
  Var A = softmax(scale(matmul(P, permute(P, {1, 0})), scale_factor) + t.constant(bias));
  if (attention) *attention = A;
  Var V = permute(reshape(feat, {C, n}), {1, 0});
  Array keep({n, 1}), fill({n, 1});
  for (int64_t i = 0; i < n; ++i) {
    keep[i] = mask[i];
    fill[i] = 1.0f - mask[i];
  }
  Var mixed = V * t.constant(keep) + matmul(A, V) * t.constant(fill);
  return reshape(permute(mixed, {1, 0}), {C, h, w});
}

namespace {
constexpr int kBottleneckFactor = 4;
}

Refiner::Refiner(const RefineConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  Prng rng(seed, 0x4EF1);
  const int64_t c = config_.channels, c2 = 2 * c, half = c / 2;
  auto conv = [&](const std::string& name, int64_t out, int64_t in) {
    params_.add("ref." + name + ".w", init::conv_he(out, in, 3, rng));
    params_.add("ref." + name + ".b", Array({out}));
  };
  conv("enc0", c, 4);
  conv("enc1", c, c);
  conv("enc2", c2, c);
  conv("enc3", c2, c2);
  conv("dec0", c2, c2);
  conv("dec1", c, c2);
  conv("dec2", c, c);
  conv("dec3", half, c);
  params_.add("ref.out.w", Array({3, half, 3, 3}));
  params_.add("ref.out.b", Array({3}));
}

Refiner::Refiner(const RefineConfig& config, ParamSet params) : config_(config), params_(std::move(params)) {
  config_.validate();
  if (!params_.contains("ref.enc0.w") || !params_.contains("ref.out.w")) throw NotFoundError("refiner: missing parameters");
}

Var Refiner::forward(const BoundParams& p, Var x_comp, const Array& coarse_masks) const {
  const Shape& s = x_comp.shape();
  if (s.size() != 4 || s[1] != 3) throw ShapeError("refiner: input must be [B,3,S,S]");
  const int64_t B = s[0], H = s[2], W = s[3];
  if (H % kBottleneckFactor || W % kBottleneckFactor) throw ShapeError("refiner: input side must be divisible by 4");
  if (coarse_masks.shape() != Shape{B, H, W}) throw ShapeError("refiner: masks must be [B,S,S]");
  Tape& t = *x_comp.tape;
  auto conv = [&](const std::string& name, Var x, int stride) {
    return conv2d(x, p["ref." + name + ".w"], p["ref." + name + ".b"], stride, 1);
  };
  Var m = t.constant(coarse_masks.reshape({B, 1, H, W}));
  Var x = relu(conv("enc0", concat({x_comp, m}, 1), 1));
  x = relu(conv("enc1", x, 2));
  x = relu(conv("enc2", x, 1));
  x = relu(conv("enc3", x, 2));

  const int64_t h = H / kBottleneckFactor, w = W / kBottleneckFactor, C = x.shape()[1];
  std::vector<Var> copied;
  for (int64_t b = 0; b < B; ++b) {
    Array mb({H, W});
    std::copy(coarse_masks.data().begin() + b * H * W, coarse_masks.data().begin() + (b + 1) * H * W,
              mb.data().begin());
    Var cb = contextual_copy(slice0(x, b), downsample_mask(mb, kBottleneckFactor), config_.patch, config_.copy_scale);
    copied.push_back(reshape(cb, {1, C, h, w}));
  }
  x = B == 1 ? copied[0] : concat(copied, 0);

  x = relu(conv("dec0", x, 1));
  x = relu(conv("dec1", upsample2x(x), 1));
  x = relu(conv("dec2", upsample2x(x), 1));
  x = relu(conv("dec3", upsample2x(x), 1));
  Var residual = conv("out", x, 1);

  Array base({B, 3, 2 * H, 2 * W});
  const int64_t n = 3 * 4 * H * W;
  for (int64_t b = 0; b < B; ++b) {
    Array img({3, H, W});
    std::copy(x_comp.value().data().begin() + b * 3 * H * W, x_comp.value().data().begin() + (b + 1) * 3 * H * W,
              img.data().begin());
    const Array up = resize_bilinear(img, 2 * H, 2 * W);
    std::copy(up.data().begin(), up.data().end(), base.data().begin() + b * n);
  }
  return t.constant(std::move(base)) + residual;
}

Array Refiner::refine(const Array& x_comp, const Array& coarse_masks, const Array& full_visible,
                      const Array& full_masks) const {
  const bool single = x_comp.rank() == 3;
  const Array x = single ? x_comp.reshape({1, x_comp.dim(0), x_comp.dim(1), x_comp.dim(2)}) : x_comp;
  const Array cm = single ? coarse_masks.reshape({1, coarse_masks.dim(0), coarse_masks.dim(1)}) : coarse_masks;
  Tape t;
  BoundParams p(t, params_, false);
  const Array raw = forward(p, t.constant(x), cm).value();
  const Array out = single ? raw.reshape({3, raw.dim(2), raw.dim(3)}) : raw;
  return compose(full_visible, out, full_masks);
}

nlohmann::json refiner_manifest(const RefineConfig& cfg, int step, const PrngState& rng) {
  return {{"kind", "refiner"}, {"config", cfg}, {"step", step}, {"prng", prng_to_json(rng)}};
}

Refiner load_refiner(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.manifest.value("kind", "") != "refiner") throw Error(path.string() + " is not a refiner checkpoint");
  return Refiner(ckpt.manifest.at("config").get<RefineConfig>(), ckpt.arrays.subset("ref."));
}

Refiner train_refiner_stage(const std::vector<Array>& images, const Codec& codec, const CompletionTransformer& model,
                            const FeatureExtractor& fx, const RefineConfig& cfg, const RefinerTrainOptions& opt) {
  if (images.empty()) throw Error("refiner stage: dataset is empty");
  if (opt.steps < 0) throw ConfigError("refiner stage: steps must be >= 0");
  cfg.validate();
  const int64_t S = codec.config().image_size, F = 2 * S;
  for (const auto& img : images) {
    if (img.shape() != Shape{3, F, F}) {
      throw ShapeError("refiner stage: images must be [3," + std::to_string(F) + "," + std::to_string(F) + "]");
    }
  }
  Refiner ref(cfg, mix_seed(opt.seed, 4));
  Discriminator disc(cfg.channels, mix_seed(opt.seed, 5), "rdisc.");
  const AdamConfig ac{cfg.lr, 0.5f, 0.9f, 1e-8f};
  Adam gen_opt(ac), disc_opt(ac);
  Prng rng(opt.seed, 0xC);
  SampleConfig sc;
  sc.top_k = cfg.top_k;
  sc.validate(codec.config().K);

  std::ofstream log;
  if (!opt.log_path.empty()) {
    if (opt.log_path.has_parent_path()) std::filesystem::create_directories(opt.log_path.parent_path());
    log.open(opt.log_path, std::ios::trunc);
    log << "step,total,rec,per,adv,disc\n";
    log.precision(9);
  }
  auto save = [&](int step) {
    if (opt.checkpoint_path.empty()) return;
    Checkpoint ck;
    ck.manifest = refiner_manifest(cfg, step, rng.state());
    ck.arrays = ref.params();
    ck.arrays.merge(disc.params());
    save_checkpoint(opt.checkpoint_path, ck);
  };

  const int warmup_steps = static_cast<int>(std::ceil(cfg.adv_warmup * static_cast<float>(opt.steps)));
  const int64_t B = cfg.batch_size;
  int step = 0;
  try {
    for (; step < opt.steps; ++step) {
      Array gt({B, 3, F, F}), comp({B, 3, S, S}), cms({B, S, S}), fms({B, F, F});
      for (int64_t b = 0; b < B; ++b) {
        const Array& img = images[rng.below(static_cast<uint32_t>(images.size()))];
        const MaskSpec fm = gen_freeform_mask(F, F, opt.mask_range, rng.next_u64());
        const MaskSpec cm = MaskSpec::from_bitmap(downsample_mask(fm.bitmap, 2));
        const Array coarse = downsample_area(img, 2);
        const Prediction pred = predict_logits(coarse, cm, codec, model);
        const auto seq = one_time_sample(pred.logits, pred.masked, sc, rng);
        const Array fill = codec.decode(codec.dequantize(seq, 1)).reshape({3, S, S});
        const Array c = compose(coarse, fill, cm.bitmap);
        std::copy(img.data().begin(), img.data().end(), gt.data().begin() + b * 3 * F * F);
        std::copy(c.data().begin(), c.data().end(), comp.data().begin() + b * 3 * S * S);
        std::copy(cm.bitmap.data().begin(), cm.bitmap.data().end(), cms.data().begin() + b * S * S);
        std::copy(fm.bitmap.data().begin(), fm.bitmap.data().end(), fms.data().begin() + b * F * F);
      }
      const float adv_weight = step < warmup_steps ? 0.0f : cfg.lambda_adv;

      Tape tape;
      BoundParams gp(tape, ref.params(), true);
      BoundParams dp(tape, disc.params(), false);
      Var x = tape.constant(gt);
      Var out = compose(x, ref.forward(gp, tape.constant(comp), cms), fms);
      Var rec = l1_distance(x, out);
      Var per = fx.perceptual_distance(tape, x, out);
      Var adv = scale(mean(disc.forward(dp, out)), -1.0f);
      Var total = scale(rec, cfg.lambda_rec) + scale(per, cfg.lambda_per);
      if (adv_weight != 0.0f) total = total + scale(adv, adv_weight);
      auto grads = gp.gradients(tape.backward(total));
      for (const auto& [name, g] : grads) {
        if (!g.all_finite()) throw NumericError("non-finite gradient for " + name);
      }
      gen_opt.step(ref.params(), grads);
      const float d_loss = discriminator_step(disc, disc_opt, gt, out.value());

      const int done = step + 1;
      if (log.is_open() && (done % std::max(1, opt.log_every) == 0 || done == opt.steps)) {
        log << done << ',' << total.value().item() << ',' << rec.value().item() << ',' << per.value().item() << ','
            << adv.value().item() << ',' << d_loss << '\n';
      }
      if (opt.on_step) opt.on_step(done, total.value().item());
    }
  } catch (const NumericError& e) {
    save(step);
    throw TrainingDiverged("refiner stage diverged at step " + std::to_string(step + 1) + ": " + e.what(),
                           opt.checkpoint_path.string());
  }
  save(opt.steps);
  return ref;
}

}  // namespace pluralfill
