#include "pluralfill/transformer.hpp"

#include <cmath>
#include <fstream>

#include "pluralfill/checkpoint.hpp"
#include "pluralfill/errors.hpp"
#include "pluralfill/json_util.hpp"
#include "pluralfill/image_io.hpp"
#include "pluralfill/ops.hpp"

namespace pluralfill {

int TransformerConfig::grid() const {
  const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(N))));
  return g * g == N ? g : -1;
}

void TransformerConfig::validate() const {
  if (L < 0) throw ConfigError("transformer: L must be >= 0");
  if (heads < 1 || C % heads != 0) throw ConfigError("transformer: C must be divisible by heads");
  if (chunks < 1 || C % chunks != 0) throw ConfigError("transformer: C must be divisible by chunks");
  if (grid() < 1) throw ConfigError("transformer: N must be a square grid");
  if (K < 2) throw ConfigError("transformer: K must be >= 2");
  if (!(w_floor > 0.0f && w_floor < 1.0f)) throw ConfigError("transformer: w_floor must lie in (0, 1)");
  if (loss_positions != "all" && loss_positions != "hidden") {
    throw ConfigError("transformer: loss_positions must be 'all' or 'hidden'");
  }
  if (augment != "none" && augment != "dihedral") throw ConfigError("transformer: augment must be 'none' or 'dihedral'");
  if (batch_size < 1) throw ConfigError("transformer: batch_size must be >= 1");
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = {{"L", c.L},       {"heads", c.heads},     {"C", c.C},
       {"N", c.N},       {"K", c.K},             {"chunks", c.chunks},
       {"w_floor", json_float(c.w_floor)}, {"loss_positions", c.loss_positions}, {"augment", c.augment}, {"lr", json_float(c.lr)},
       {"batch_size", c.batch_size}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  TransformerConfig d;
  c.L = j.value("L", d.L);
  c.heads = j.value("heads", d.heads);
  c.C = j.value("C", d.C);
  c.N = j.value("N", d.N);
  c.K = j.value("K", d.K);
  c.chunks = j.value("chunks", d.chunks);
  c.w_floor = j.value("w_floor", d.w_floor);
  c.loss_positions = j.value("loss_positions", d.loss_positions);
  c.augment = j.value("augment", d.augment);
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
}

Array init_weights(const Array& bitmap, int64_t h, int64_t w, float floor) {
  require_binary(bitmap);
  const int64_t H = bitmap.dim(0), W = bitmap.dim(1);
  if (h < 1 || w < 1 || H % h != 0 || W % w != 0) {
    throw ShapeError("init_weights: mask " + shape_str(bitmap.shape()) + " not divisible into " + std::to_string(h) +
                     "x" + std::to_string(w) + " patches");
  }
  const int64_t ph = H / h, pw = W / w;
  Array out({h * w});
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      int64_t visible = 0;
      for (int64_t y = 0; y < ph; ++y)
        for (int64_t x = 0; x < pw; ++x) visible += bitmap[(i * ph + y) * W + j * pw + x] != 0.0f;
      const float r = static_cast<float>(visible) / static_cast<float>(ph * pw);
      out[i * w + j] = std::max(r, floor);
    }
  return out;
}

Array init_weights(const MaskSpec& mask, int64_t h, int64_t w, float floor) {
  return init_weights(mask.bitmap, h, w, floor);
}

Array update_weights(const Array& w) {
  Array out = w;
  for (float& v : out.data()) {
    if (!(v > 0.0f && v <= 1.0f)) throw Error("update_weights: weight outside (0, 1]");
    v = std::sqrt(v);
  }
  return out;
}

CompletionTransformer::CompletionTransformer(const TransformerConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  Prng rng(seed, 0x7F);
  const int64_t C = config_.C;
  const float out_std = 0.02f / std::sqrt(2.0f * static_cast<float>(std::max(1, config_.L)));
  params_.add("tok.table", init::normal({config_.K, config_.sub_width()}, 0.02f, rng));
  params_.add("pos", init::normal({config_.N, C}, 0.02f, rng));
  for (int l = 0; l < config_.L; ++l) {
    const std::string b = "blk" + std::to_string(l) + ".";
    params_.add(b + "qkv.w", init::normal({C, 3 * C}, 0.02f, rng));
    params_.add(b + "qkv.b", Array({3 * C}));
    params_.add(b + "proj.w", init::normal({C, C}, out_std, rng));
    params_.add(b + "proj.b", Array({C}));
    params_.add(b + "mlp1.w", init::normal({C, 4 * C}, 0.02f, rng));
    params_.add(b + "mlp1.b", Array({4 * C}));
    params_.add(b + "mlp2.w", init::normal({4 * C, C}, out_std, rng));
    params_.add(b + "mlp2.b", Array({C}));
  }
  params_.add("head.w", init::normal({C, static_cast<int64_t>(config_.chunks) * config_.K}, 0.02f, rng));
  params_.add("head.b", Array({static_cast<int64_t>(config_.chunks) * config_.K}));
}

CompletionTransformer::CompletionTransformer(const TransformerConfig& config, ParamSet params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  if (params_.at("tok.table").shape() != Shape{config_.K, config_.sub_width()}) {
    throw ShapeError("transformer: token table does not match config");
  }
}

Var CompletionTransformer::embed(const BoundParams& p, const std::vector<int32_t>& tokens, int64_t batch) const {
  const int64_t N = config_.N, C = config_.C;
  if (static_cast<int64_t>(tokens.size()) != batch * N * config_.chunks) {
    throw ShapeError("embed: expected " + std::to_string(batch * N * config_.chunks) + " indices, got " +
                     std::to_string(tokens.size()));
  }
  Var e = reshape(embedding_gather(p["tok.table"], tokens), {batch, N, C});
  return e + p["pos"];
}

Var CompletionTransformer::weighted_msa(const BoundParams& p, int layer, Var E, const Array& w, Var* probs) const {
  const int64_t B = E.value().dim(0), N = config_.N, C = config_.C, H = config_.heads, Ch = C / H;
  if (w.size() != B * N) throw ShapeError("weighted_msa: weights must be [B,N]");
  const std::string b = "blk" + std::to_string(layer) + ".";
  Var qkv = permute(reshape(linear(E, p[b + "qkv.w"], p[b + "qkv.b"]), {B, N, 3, H, Ch}), {2, 0, 3, 1, 4});
  Var q = reshape(slice0(qkv, 0), {B * H, N, Ch});
  Var k = reshape(slice0(qkv, 1), {B * H, N, Ch});
  Var v = reshape(slice0(qkv, 2), {B * H, N, Ch});
  Array bias({B, 1, 1, N});
  for (int64_t i = 0; i < B * N; ++i) bias[i] = std::log(w[i]);
  Var scores = reshape(scale(bmm(q, k, true), 1.0f / std::sqrt(static_cast<float>(Ch))), {B, H, N, N});
  Var P = softmax(scores + E.tape->constant(std::move(bias)));
  if (probs) *probs = P;
  Var o = bmm(reshape(P, {B * H, N, N}), v);
  o = reshape(permute(reshape(o, {B, H, N, Ch}), {0, 2, 1, 3}), {B, N, C});
  return linear(o, p[b + "proj.w"], p[b + "proj.b"]);
}

Var CompletionTransformer::block(const BoundParams& p, int layer, Var E, const Array& w, Var* probs) const {
  const std::string b = "blk" + std::to_string(layer) + ".";
  Var e1 = weighted_msa(p, layer, layernorm(E), w, probs) + E;
  Var h = gelu(linear(layernorm(e1), p[b + "mlp1.w"], p[b + "mlp1.b"]));
  return linear(h, p[b + "mlp2.w"], p[b + "mlp2.b"]) + e1;
}

Var CompletionTransformer::logits(const BoundParams& p, const std::vector<int32_t>& tokens, const Array& w0,
                                  int64_t batch, std::vector<Var>* probs) const {
  forward_passes_->fetch_add(1);
  Var E = embed(p, tokens, batch);
  Array w = w0;
  for (int l = 0; l < config_.L; ++l) {
    Var P;
    E = block(p, l, E, w, probs ? &P : nullptr);
    if (probs) probs->push_back(P);
    w = update_weights(w);
  }
  Var out = linear(layernorm(E), p["head.w"], p["head.b"]);
  return reshape(out, {batch, config_.N, config_.chunks, config_.K});
}

Array CompletionTransformer::logits(const std::vector<int32_t>& tokens, const Array& w0, int64_t batch) const {
  Tape t;
  BoundParams p(t, params_, false);
  return logits(p, tokens, w0, batch).value();
}

Array zero_fill(const Array& image, const Array& bitmap) {
  const int64_t HW = bitmap.dim(-1) * bitmap.dim(-2);
  const int64_t planes = image.size() / HW;
  const int64_t masks = bitmap.size() / HW;
  if (image.dim(-1) != bitmap.dim(-1) || image.dim(-2) != bitmap.dim(-2) || planes % masks != 0) {
    throw ShapeError("zero_fill: image " + shape_str(image.shape()) + " vs mask " + shape_str(bitmap.shape()));
  }
  const int64_t per_mask = planes / masks;
  Array out = image;
  for (int64_t pl = 0; pl < planes; ++pl) {
    const float* m = bitmap.data().data() + (pl / per_mask) * HW;
    float* o = out.data().data() + pl * HW;
    for (int64_t i = 0; i < HW; ++i)
      if (m[i] == 0.0f) o[i] = 0.0f;
  }
  return out;
}

MaskedTokens masked_tokens(const Codec& codec, const Array& image, const MaskSpec& mask, float floor) {
  const int64_t S = codec.config().image_size, h = codec.config().latent_size;
  if (image.shape() != Shape{3, S, S} || mask.bitmap.shape() != Shape{S, S}) {
    throw ShapeError("expected a " + std::to_string(S) + "x" + std::to_string(S) + " image and mask, got " +
                     shape_str(image.shape()) + " and " + shape_str(mask.bitmap.shape()));
  }
  MaskedTokens m;
  m.tokens = codec.tokens(zero_fill(image, mask.bitmap)).indices;
  m.weights = init_weights(mask, h, h, floor);
  return m;
}

Prediction predict_logits(const Array& image, const MaskSpec& mask, const Codec& codec,
                          const CompletionTransformer& model) {
  Prediction pr;
  pr.masked = masked_tokens(codec, image, mask, model.config().w_floor);
  const auto& c = model.config();
  pr.logits = model.logits(pr.masked.tokens, pr.masked.weights, 1).reshape({c.N, c.chunks, c.K});
  return pr;
}

Var nll_loss(Var logits, const std::vector<int32_t>& targets, const std::vector<float>* positions) {
  const Shape& s = logits.shape();
  if (s.size() != 4) throw ShapeError("nll_loss expects [B,N,chunks,K] logits");
  const int64_t rows = s[0] * s[1] * s[2], chunks = s[2];
  if (static_cast<int64_t>(targets.size()) != rows) throw ShapeError("nll_loss: target count mismatch");
  Var picked = select_last(log_softmax(reshape(logits, {rows, s[3]})), targets);
  if (!positions) return scale(mean(picked), -1.0f);
  if (static_cast<int64_t>(positions->size()) != s[0] * s[1]) throw ShapeError("nll_loss: position mask size");
  Array sel({rows});
  double count = 0;
  for (int64_t r = 0; r < rows; ++r) {
    sel[r] = (*positions)[r / chunks] != 0.0f ? 1.0f : 0.0f;
    count += sel[r];
  }
  if (count == 0) return scale(sum(picked), 0.0f);
  return scale(sum(mul(picked, logits.tape->constant(std::move(sel)))), static_cast<float>(-1.0 / count));
}

nlohmann::json transformer_manifest(const TransformerConfig& cfg, int step, const PrngState& rng) {
  return {{"kind", "transformer"}, {"config", cfg}, {"step", step}, {"prng", prng_to_json(rng)}};
}

CompletionTransformer load_transformer(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.manifest.value("kind", "") != "transformer") throw Error(path.string() + " is not a transformer checkpoint");
  return CompletionTransformer(ckpt.manifest.at("config").get<TransformerConfig>(), std::move(ckpt.arrays));
}

namespace {

Array to_coarse(const Array& img, int64_t S) {
  const int64_t full = img.dim(1);
  if (full == S) return img;
  if (full % S != 0) throw ShapeError("image size must be a multiple of the codec resolution");
  return downsample_area(img, full / S);
}

}  // namespace

float heldout_nll(const CompletionTransformer& model, const Codec& codec, const std::vector<Array>& coarse_images,
                  const std::vector<MaskSpec>& coarse_masks) {
  if (coarse_images.size() != coarse_masks.size() || coarse_images.empty()) throw Error("heldout_nll: bad inputs");
  double total = 0.0;
  for (size_t i = 0; i < coarse_images.size(); ++i) {
    const MaskedTokens m = masked_tokens(codec, coarse_images[i], coarse_masks[i], model.config().w_floor);
    const auto gt = codec.tokens(coarse_images[i]).indices;
    std::vector<float> hidden(static_cast<size_t>(model.config().N));
    for (int64_t n = 0; n < model.config().N; ++n) hidden[n] = m.weights[n] < 1.0f ? 1.0f : 0.0f;
    Tape t;
    BoundParams p(t, model.params(), false);
    total += nll_loss(model.logits(p, m.tokens, m.weights, 1), gt, &hidden).value().item();
  }
  return static_cast<float>(total / static_cast<double>(coarse_images.size()));
}

CompletionTransformer train_transformer_stage(const std::vector<Array>& images, const Codec& codec,
                                              const TransformerConfig& cfg, const TransformerTrainOptions& opt) {
  if (images.empty()) throw Error("transformer stage: dataset is empty");
  if (cfg.K != codec.config().K || cfg.chunks != codec.config().chunks ||
      cfg.N != codec.config().latent_size * codec.config().latent_size) {
    throw ConfigError("transformer stage: K, chunks and N must match the codec");
  }
  CompletionTransformer model(cfg, mix_seed(opt.seed, 3));
  Adam adam({cfg.lr, 0.9f, 0.99f, 1e-8f});
  Prng rng(opt.seed, 0xB);
  const int64_t S = codec.config().image_size, full = images[0].dim(1);
  const int64_t factor = full / S;

  std::vector<Array> coarse;
  std::vector<std::vector<int32_t>> gt;
  for (const auto& img : images) {
    const Array c = to_coarse(img, S);
    for (int k = 0; k < (cfg.augment == "dihedral" ? 8 : 1); ++k) {
      coarse.push_back(k ? dihedral(c, k) : c);
      gt.push_back(codec.tokens(coarse.back()).indices);
    }
  }

  std::ofstream log;
  if (!opt.log_path.empty()) {
    if (opt.log_path.has_parent_path()) std::filesystem::create_directories(opt.log_path.parent_path());
    log.open(opt.log_path, std::ios::trunc);
    log << "step,nll\n";
    log.precision(9);
  }
  auto save = [&](int step) {
    if (opt.checkpoint_path.empty()) return;
    Checkpoint ck;
    ck.manifest = transformer_manifest(cfg, step, rng.state());
    ck.arrays = model.params();
    save_checkpoint(opt.checkpoint_path, ck);
  };

  const int64_t B = cfg.batch_size, N = cfg.N;
  int step = 0;
  try {
    for (; step < opt.steps; ++step) {
      std::vector<size_t> pick(static_cast<size_t>(B));
      std::vector<Array> masked, bitmaps;
      std::vector<int32_t> targets;
      Array w0({B, N});
      std::vector<float> hidden(static_cast<size_t>(B * N));
      for (int64_t b = 0; b < B; ++b) {
        pick[b] = rng.below(static_cast<uint32_t>(coarse.size()));
        const MaskSpec full_mask = gen_freeform_mask(full, full, opt.mask_range, rng.next_u64());
        const Array cm = factor > 1 ? downsample_mask(full_mask.bitmap, factor) : full_mask.bitmap;
        masked.push_back(zero_fill(coarse[pick[b]], cm));
        const Array w = init_weights(cm, codec.config().latent_size, codec.config().latent_size, cfg.w_floor);
        for (int64_t n = 0; n < N; ++n) {
          w0[b * N + n] = w[n];
          hidden[b * N + n] = w[n] < 1.0f ? 1.0f : 0.0f;
        }
        targets.insert(targets.end(), gt[pick[b]].begin(), gt[pick[b]].end());
      }
      std::vector<size_t> order(masked.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      const auto s_m = codec.tokens(stack_images(masked, order)).indices;

      Tape tape;
      BoundParams p(tape, model.params(), true);
      Var loss = nll_loss(model.logits(p, s_m, w0, B), targets, cfg.loss_positions == "hidden" ? &hidden : nullptr);
      auto grads = p.gradients(tape.backward(loss));
      for (const auto& [name, g] : grads) {
        if (!g.all_finite()) throw NumericError("non-finite gradient for " + name);
      }
      adam.step(model.params(), grads);
      const int done = step + 1;
      if (log.is_open() && (done % std::max(1, opt.log_every) == 0 || done == opt.steps)) {
        log << done << ',' << loss.value().item() << '\n';
      }
      if (opt.on_step) opt.on_step(done, loss.value().item());
    }
  } catch (const NumericError& e) {
    save(step);
    throw TrainingDiverged("transformer stage diverged at step " + std::to_string(step + 1) + ": " + e.what(),
                           opt.checkpoint_path.string());
  }
  save(opt.steps);
  model.reset_forward_passes();
  return model;
}

}  // namespace pluralfill
