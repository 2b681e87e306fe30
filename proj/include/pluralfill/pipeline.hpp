#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pluralfill/codec.hpp"
#include "pluralfill/dataset.hpp"
#include "pluralfill/refiner.hpp"
#include "pluralfill/sampler.hpp"
#include "pluralfill/transformer.hpp"

namespace pluralfill {

struct StageSteps {
  int codebook = 1500;
  int transformer = 1200;
  int refiner = 300;
};

struct EvalConfig {
  std::string buckets = "20-30,30-40,40-50";
  int random_samples = 10;
  int random_top_k = 20;
  /// Test images used by bench-sampling's masked set.
  int bench_images = 4;
};

struct RunConfig {
  uint64_t seed = 1;
  std::string output_dir = "runs/toy";
  DatasetSpec dataset;
  VQConfig codec;
  TransformerConfig transformer;
  RefineConfig refiner;
  SampleConfig sampling;
  StageSteps steps;
  RatioBucket train_masks{0.1f, 0.6f};
  EvalConfig eval;
  int log_every = 50;

  /// Shared K / chunks / N and the 2x coarse-to-full law.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);
/// Writes the config with every default filled in.
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);
/// 16 hex digits, FNV-1a over the materialized JSON minus output_dir.
std::string config_hash(const RunConfig& cfg);
std::string build_id();
std::string model_id(const RunConfig& cfg);

/// The 64-image toy run.
RunConfig toy_config();

struct StageOutput {
  std::string stage;
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  double seconds = 0.0;
};

std::filesystem::path checkpoint_file(const std::filesystem::path& dir, const std::string& stage);

/// stage: codebook, transformer, refiner or all. Checkpoints and CSV logs
/// land in `dir`; later stages load earlier ones from there.
std::vector<StageOutput> train_stages(const RunConfig& cfg, const std::string& stage, const std::filesystem::path& dir,
                                      std::ostream* progress = nullptr);

struct Pipeline {
  Codec codec;
  CompletionTransformer transformer;
  std::optional<Refiner> refiner;
  FeatureExtractor fx;
  /// Stage manifests as stored (codec, transformer, refiner when present).
  nlohmann::json manifests = nlohmann::json::object();

  int64_t coarse_size() const { return codec.config().image_size; }
  int64_t full_size() const { return 2 * coarse_size(); }
};

/// Throws NotFoundError when the codebook or transformer checkpoint is missing.
Pipeline load_pipeline(const std::filesystem::path& dir);

struct Completion {
  /// Composed at the coarse resolution, one per sample.
  std::vector<Array> coarse;
  /// Full resolution, composed against the input: refined output when
  /// refinement ran, otherwise the bilinearly upsampled coarse fill.
  std::vector<Array> full;
  SampleReport report;
  MaskSpec coarse_mask;
};

/// image [3,F,F] with F = 2 * coarse size, mask [F,F].
Completion complete(const Pipeline& p, const Array& image, const MaskSpec& mask, const SampleConfig& sc, bool refine);

/// Hidden pixels set to the mean colour of the visible ones.
Array mean_fill(const Array& image, const Array& bitmap);

/// Mask for test image `index` in bucket `bucket_index` of an eval run.
MaskSpec eval_mask(const RunConfig& cfg, int64_t size, const RatioBucket& bucket, size_t bucket_index, size_t index);

/// Table-shaped grid: {Coarse, Refine} x {Top1, Random} x buckets, plus a
/// coarse mean-fill baseline. Throws on an empty test set.
nlohmann::json evaluate(const RunConfig& cfg, const Pipeline& p, const std::vector<Array>& test,
                        const std::vector<RatioBucket>& buckets);

/// {one_time, autoregressive} x top_k {1, 5, 20}: timing on a fully hidden
/// grid, forward passes, diversity and NLL on a seeded mask set.
nlohmann::json bench_sampling(const RunConfig& cfg, const Pipeline& p, const std::vector<Array>& test,
                              int timing_runs = 5);

/// Median of a copy.
double median(std::vector<double> v);

}  // namespace pluralfill
