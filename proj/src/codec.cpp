#include "pluralfill/codec.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "pluralfill/checkpoint.hpp"
#include "pluralfill/errors.hpp"
#include "pluralfill/image_io.hpp"
#include "pluralfill/json_util.hpp"
#include "pluralfill/metrics.hpp"
#include "pluralfill/ops.hpp"

namespace pluralfill {

int VQConfig::downsamples() const {
  int f = factor(), d = 0;
  while (f > 1) {
    f /= 2;
    ++d;
  }
  return d;
}

void VQConfig::validate() const {
  if (K < 2) throw ConfigError("codec: K must be >= 2");
  if (chunks < 1 || n_z % chunks != 0) throw ConfigError("codec: n_z must be divisible by chunks");
  if (!(beta > 0.0f)) throw ConfigError("codec: beta must be positive");
  if (latent_size < 1 || image_size % latent_size != 0) throw ConfigError("codec: latent size must divide image size");
  const int f = factor();
  if ((f & (f - 1)) != 0) throw ConfigError("codec: downsample factor must be a power of two");
  if (channels < 2 || channels % 2) throw ConfigError("codec: channels must be even");
  if (batch_size < 1) throw ConfigError("codec: batch_size must be >= 1");
  if (augment != "none" && augment != "dihedral") throw ConfigError("codec: augment must be 'none' or 'dihedral'");
  if (adv_warmup < 0.0f || adv_warmup > 1.0f) throw ConfigError("codec: adv_warmup must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const VQConfig& c) {
  j = {{"K", c.K},
       {"chunks", c.chunks},
       {"n_z", c.n_z},
       {"beta", json_float(c.beta)},
       {"lambda_rec", json_float(c.lambda_rec)},
       {"lambda_per", json_float(c.lambda_per)},
       {"lambda_vq", json_float(c.lambda_vq)},
       {"lambda_adv", json_float(c.lambda_adv)},
       {"adv_warmup", json_float(c.adv_warmup)},
       {"image_size", c.image_size},
       {"latent_size", c.latent_size},
       {"channels", c.channels},
       {"lr", json_float(c.lr)},
       {"beta1", json_float(c.beta1)},
       {"beta2", json_float(c.beta2)},
       {"batch_size", c.batch_size},
       {"augment", c.augment}};
}

void from_json(const nlohmann::json& j, VQConfig& c) {
  VQConfig d;
  c.K = j.value("K", d.K);
  c.chunks = j.value("chunks", d.chunks);
  c.n_z = j.value("n_z", d.n_z);
  c.beta = j.value("beta", d.beta);
  c.lambda_rec = j.value("lambda_rec", d.lambda_rec);
  c.lambda_per = j.value("lambda_per", d.lambda_per);
  c.lambda_vq = j.value("lambda_vq", d.lambda_vq);
  c.lambda_adv = j.value("lambda_adv", d.lambda_adv);
  c.adv_warmup = j.value("adv_warmup", d.adv_warmup);
  c.image_size = j.value("image_size", d.image_size);
  c.latent_size = j.value("latent_size", d.latent_size);
  c.channels = j.value("channels", d.channels);
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.augment = j.value("augment", d.augment);
}

ChunkedLatent chunk_quantize(const Array& z, const Array& codebook, int chunks) {
  if (z.rank() != 4) throw ShapeError("chunk_quantize expects [B,n_z,h,w], got " + shape_str(z.shape()));
  if (codebook.rank() != 2) throw ShapeError("codebook must be [K,d]");
  const int64_t B = z.dim(0), nz = z.dim(1), h = z.dim(2), w = z.dim(3);
  const int64_t K = codebook.dim(0), d = codebook.dim(1);
  if (chunks < 1 || nz % chunks != 0 || nz / chunks != d) {
    throw ShapeError("chunk_quantize: n_z " + std::to_string(nz) + " incompatible with " + std::to_string(chunks) +
                     " chunks of width " + std::to_string(d));
  }
  ChunkedLatent out;
  out.batch = B;
  out.h = h;
  out.w = w;
  out.chunks = chunks;
  out.indices.resize(static_cast<size_t>(B * h * w * chunks));
  const int64_t hw = h * w;
  const float* Z = z.data().data();
  const float* E = codebook.data().data();
  std::vector<float> v(static_cast<size_t>(d));
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t p = 0; p < hw; ++p) {
      for (int c = 0; c < chunks; ++c) {
        for (int64_t k = 0; k < d; ++k) v[k] = Z[(b * nz + c * d + k) * hw + p];
        double best = std::numeric_limits<double>::infinity();
        int32_t arg = 0;
        for (int64_t e = 0; e < K; ++e) {
          double s = 0.0;
          const float* row = E + e * d;
          for (int64_t k = 0; k < d; ++k) {
            const double diff = static_cast<double>(v[k]) - row[k];
            s += diff * diff;
          }
          if (s < best) {
            best = s;
            arg = static_cast<int32_t>(e);
          }
        }
        out.indices[(b * hw + p) * chunks + c] = arg;
      }
    }
  }
  out.quantized = dequantize(out.indices, codebook, B, h, w, chunks);
  return out;
}

Array dequantize(const std::vector<int32_t>& indices, const Array& codebook, int64_t B, int64_t h, int64_t w,
                 int chunks) {
  const int64_t K = codebook.dim(0), d = codebook.dim(1), hw = h * w;
  if (static_cast<int64_t>(indices.size()) != B * hw * chunks) throw ShapeError("dequantize: index count mismatch");
  Array out({B, chunks * d, h, w});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < hw; ++p)
      for (int c = 0; c < chunks; ++c) {
        const int32_t e = indices[(b * hw + p) * chunks + c];
        if (e < 0 || e >= K) throw ShapeError("dequantize: index " + std::to_string(e) + " out of range");
        for (int64_t k = 0; k < d; ++k) out[((b * chunks + c) * d + k) * hw + p] = codebook[e * d + k];
      }
  return out;
}

Codec::Codec(const VQConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  Prng rng(seed, 0xC0DEC);
  const int64_t ch = config_.channels, half = ch / 2;
  auto conv = [&](const std::string& name, int64_t out, int64_t in, int k) {
    params_.add(name + ".w", init::conv_he(out, in, k, rng));
    params_.add(name + ".b", Array({out}));
  };
  conv("enc.in", half, 3, 3);
  for (int i = 0; i < config_.downsamples(); ++i) conv("enc.down" + std::to_string(i), ch, i == 0 ? half : ch, 3);
  conv("enc.mid", ch, ch, 3);
  conv("enc.out", config_.n_z, ch, 3);
  conv("dec.in", ch, config_.n_z, 3);
  conv("dec.mid", ch, ch, 3);
  const int ups = config_.downsamples();
  for (int i = 0; i < ups; ++i) conv("dec.up" + std::to_string(i), i + 1 == ups ? half : ch, ch, 3);
  conv("dec.out", 3, ups ? half : ch, 3);
  const float r = 1.0f / static_cast<float>(config_.K);
  params_.add("codebook", init::uniform({config_.K, config_.d_chunk()}, -r, r, rng));
}

Codec::Codec(const VQConfig& config, ParamSet params) : config_(config), params_(std::move(params)) {
  config_.validate();
  if (codebook().shape() != Shape{config_.K, config_.d_chunk()}) throw ShapeError("codec: codebook shape mismatch");
}

void Codec::check_image(const Shape& s) const {
  if (s.size() != 4 || s[1] != 3 || s[2] != config_.image_size || s[3] != config_.image_size) {
    throw ShapeError("codec expects [B,3," + std::to_string(config_.image_size) + "," +
                     std::to_string(config_.image_size) + "], got " + shape_str(s));
  }
}

Var Codec::encode(const BoundParams& p, Var x) const {
  check_image(x.shape());
  auto conv = [&](Var h, const std::string& n, int stride) { return conv2d(h, p[n + ".w"], p[n + ".b"], stride, 1); };
  Var h = relu(conv(x, "enc.in", 1));
  for (int i = 0; i < config_.downsamples(); ++i) h = relu(conv(h, "enc.down" + std::to_string(i), 2));
  h = relu(conv(h, "enc.mid", 1));
  return conv(h, "enc.out", 1);
}

Var Codec::decode(const BoundParams& p, Var zq) const {
  const Shape& s = zq.shape();
  if (s.size() != 4 || s[1] != config_.n_z || s[2] != config_.latent_size || s[3] != config_.latent_size) {
    throw ShapeError("decoder expects [B," + std::to_string(config_.n_z) + "," + std::to_string(config_.latent_size) +
                     "," + std::to_string(config_.latent_size) + "], got " + shape_str(s));
  }
  auto conv = [&](Var h, const std::string& n) { return conv2d(h, p[n + ".w"], p[n + ".b"], 1, 1); };
  Var h = relu(conv(zq, "dec.in"));
  h = relu(conv(h, "dec.mid"));
  for (int i = 0; i < config_.downsamples(); ++i) h = relu(conv(upsample2x(h), "dec.up" + std::to_string(i)));
  return tanh(conv(h, "dec.out"));
}

namespace {
Array as_batch(const Array& x) { return x.rank() == 3 ? x.reshape({1, x.dim(0), x.dim(1), x.dim(2)}) : x; }
}  // namespace

Array Codec::encode(const Array& x) const {
  Tape t;
  BoundParams p(t, params_, false);
  return encode(p, t.constant(as_batch(x))).value();
}

Array Codec::decode(const Array& zq) const {
  Tape t;
  BoundParams p(t, params_, false);
  return decode(p, t.constant(zq)).value();
}

Array Codec::dequantize(const std::vector<int32_t>& indices, int64_t batch) const {
  return pluralfill::dequantize(indices, codebook(), batch, config_.latent_size, config_.latent_size, config_.chunks);
}

ChunkedLatent Codec::tokens(const Array& x) const { return quantize(encode(x)); }

Array Codec::reconstruct(const Array& x) const {
  const Array out = decode(quantize(encode(x)).quantized);
  return x.rank() == 3 ? out.reshape(x.shape()) : out;
}

Discriminator::Discriminator(int channels, uint64_t seed, const std::string& prefix) : prefix_(prefix) {
  Prng rng(seed, 0xD15C);
  const int64_t c = channels;
  auto conv = [&](const std::string& name, int64_t out, int64_t in) {
    params_.add(prefix_ + name + ".w", init::conv_he(out, in, 3, rng));
    params_.add(prefix_ + name + ".b", Array({out}));
  };
  conv("c0", c / 2, 3);
  conv("c1", c, c / 2);
  conv("out", 1, c);
}

Discriminator::Discriminator(ParamSet params, const std::string& prefix)
    : prefix_(prefix), params_(params.subset(prefix)) {
  if (params_.size() == 0) throw NotFoundError("no discriminator parameters under '" + prefix + "'");
}

Var Discriminator::forward(const BoundParams& p, Var x) const {
  auto conv = [&](Var h, const std::string& n, int stride) {
    return conv2d(h, p[prefix_ + n + ".w"], p[prefix_ + n + ".b"], stride, 1);
  };
  Var h = leaky_relu(conv(x, "c0", 2), 0.2f);
  h = leaky_relu(conv(h, "c1", 2), 0.2f);
  return conv(h, "out", 1);
}

VQGraph vq_forward(const Codec& codec, const BoundParams& p, Var x) {
  const VQConfig& cfg = codec.config();
  VQGraph g;
  g.z = codec.encode(p, x);
  g.latent = chunk_quantize(g.z.value(), p["codebook"].value(), cfg.chunks);
  const int64_t B = g.latent.batch, h = g.latent.h, w = g.latent.w;
  Var rows = embedding_gather(p["codebook"], g.latent.indices);  // [B*h*w*chunks, d]
  g.zq = permute(reshape(rows, {B, h, w, cfg.n_z}), {0, 3, 1, 2});
  g.st = straight_through(g.z, g.zq);
  g.x_hat = codec.decode(p, g.st);
  return g;
}

VQLosses vq_losses(const VQConfig& cfg, const FeatureExtractor& fx, Var x, const VQGraph& g,
                   const Discriminator* disc, const BoundParams* disc_params, float adv_weight) {
  VQLosses L;
  L.rec = l1_distance(x, g.x_hat);
  L.per = fx.perceptual_distance(*x.tape, x, g.x_hat);
  L.codebook = squared_distance(stop_gradient(g.z), g.zq);
  L.commit = scale(squared_distance(g.z, stop_gradient(g.zq)), cfg.beta);
  L.vq = L.codebook + L.commit;
  Var total = scale(L.rec, cfg.lambda_rec) + scale(L.per, cfg.lambda_per) + scale(L.vq, cfg.lambda_vq);
  if (disc && disc_params) {
    L.adv = scale(mean(disc->forward(*disc_params, g.x_hat)), -1.0f);
    if (adv_weight != 0.0f) total = total + scale(L.adv, adv_weight);
  }
  L.total = total;
  return L;
}

Var hinge_discriminator_loss(Var d_real, Var d_fake) {
  Var real = mean(relu(add_scalar(scale(d_real, -1.0f), 1.0f)));
  Var fake = mean(relu(add_scalar(d_fake, 1.0f)));
  return real + fake;
}

float discriminator_step(Discriminator& disc, Adam& opt, const Array& x, const Array& x_hat) {
  Tape t;
  BoundParams p(t, disc.params(), true);
  Var loss = hinge_discriminator_loss(disc.forward(p, t.constant(x)), disc.forward(p, t.constant(x_hat)));
  opt.step(disc.params(), p.gradients(t.backward(loss)));
  return loss.value().item();
}

Array stack_images(const std::vector<Array>& images, const std::vector<size_t>& order) {
  if (order.empty()) throw ShapeError("stack_images: empty selection");
  const Shape& s = images.at(order[0]).shape();
  Shape out_shape{static_cast<int64_t>(order.size())};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Array out(out_shape);
  const int64_t n = numel(s);
  for (size_t i = 0; i < order.size(); ++i) {
    const Array& img = images.at(order[i]);
    if (img.shape() != s) throw ShapeError("stack_images: mixed shapes");
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<int64_t>(i) * n);
  }
  return out;
}

float reconstruction_psnr(const Codec& codec, const std::vector<Array>& images) {
  if (images.empty()) return 0.0f;
  double total = 0.0;
  for (const auto& img : images) total += psnr(img, codec.reconstruct(img));
  return static_cast<float>(total / static_cast<double>(images.size()));
}

nlohmann::json codec_manifest(const VQConfig& cfg, int step, const PrngState& rng, uint64_t feature_seed) {
  return {{"kind", "codec"}, {"config", cfg}, {"step", step}, {"prng", prng_to_json(rng)},
          {"feature_seed", feature_seed}};
}

Codec load_codec(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.manifest.value("kind", "") != "codec") throw Error(path.string() + " is not a codec checkpoint");
  ParamSet p = ckpt.arrays.subset("enc.");
  p.merge(ckpt.arrays, "dec.");
  p.add("codebook", ckpt.arrays.at("codebook"));
  return Codec(ckpt.manifest.at("config").get<VQConfig>(), std::move(p));
}

CodecTrainResult train_codebook_stage(const std::vector<Array>& images, const VQConfig& cfg,
                                      const FeatureExtractor& fx, const CodecTrainOptions& opt) {
  if (images.empty()) throw Error("codebook stage: dataset is empty");
  if (opt.steps < 0) throw ConfigError("codebook stage: steps must be >= 0");
  Codec codec(cfg, mix_seed(opt.seed, 1));
  Discriminator disc(cfg.channels, mix_seed(opt.seed, 2));
  Adam gen_opt(cfg.adam()), disc_opt(cfg.adam());
  Prng rng(opt.seed, 0xA);

  std::vector<Array> eval_set(images.begin(),
                              images.begin() + std::min<int64_t>(opt.eval_images, static_cast<int64_t>(images.size())));
  CodecTrainResult result{codec, disc, reconstruction_psnr(codec, eval_set), 0.0f};

  std::ofstream log;
  if (!opt.log_path.empty()) {
    if (opt.log_path.has_parent_path()) std::filesystem::create_directories(opt.log_path.parent_path());
    log.open(opt.log_path, std::ios::trunc);
    log << "step,total,rec,per,vq,adv,disc,psnr\n";
    log.precision(9);
  }
  auto save = [&](int step) {
    if (opt.checkpoint_path.empty()) return;
    Checkpoint ck;
    ck.manifest = codec_manifest(cfg, step, rng.state(), fx.seed());
    ck.manifest.update(opt.tags);
    ck.arrays = codec.params();
    ck.arrays.merge(disc.params());
    save_checkpoint(opt.checkpoint_path, ck);
  };

  const int warmup_steps = static_cast<int>(std::ceil(cfg.adv_warmup * static_cast<float>(opt.steps)));
  int step = 0;
  std::vector<Array> pool;
  for (const auto& img : images)
    for (int k = 0; k < (cfg.augment == "dihedral" ? 8 : 1); ++k) pool.push_back(k ? dihedral(img, k) : img);

  try {
    for (; step < opt.steps; ++step) {
      std::vector<size_t> pick(static_cast<size_t>(cfg.batch_size));
      for (auto& i : pick) i = rng.below(static_cast<uint32_t>(pool.size()));
      const Array batch = stack_images(pool, pick);
      const float adv_weight = step < warmup_steps ? 0.0f : cfg.lambda_adv;

      Tape tape;
      BoundParams gp(tape, codec.params(), true);
      BoundParams dp(tape, disc.params(), false);
      Var x = tape.constant(batch);
      VQGraph g = vq_forward(codec, gp, x);
      VQLosses L = vq_losses(cfg, fx, x, g, &disc, &dp, adv_weight);
      auto grads = gp.gradients(tape.backward(L.total));
      for (const auto& [name, gr] : grads) {
        if (!gr.all_finite()) throw NumericError("non-finite gradient for " + name);
      }
      gen_opt.step(codec.params(), grads);
      const float d_loss = discriminator_step(disc, disc_opt, batch, g.x_hat.value());

      const int done = step + 1;
      if (log.is_open() && (done % std::max(1, opt.log_every) == 0 || done == opt.steps)) {
        log << done << ',' << L.total.value().item() << ',' << L.rec.value().item() << ',' << L.per.value().item()
            << ',' << L.vq.value().item() << ',' << L.adv.value().item() << ',' << d_loss << ','
            << psnr(batch, g.x_hat.value()) << '\n';
      }
      if (opt.on_step) opt.on_step(done, L.total.value().item());
    }
  } catch (const NumericError& e) {
    save(step);
    throw TrainingDiverged("codebook stage diverged at step " + std::to_string(step + 1) + ": " + e.what(),
                           opt.checkpoint_path.string());
  }
  save(opt.steps);
  result.codec = codec;
  result.disc = disc;
  result.final_psnr = reconstruction_psnr(codec, eval_set);
  return result;
}

}  // namespace pluralfill
