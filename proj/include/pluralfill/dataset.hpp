#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "pluralfill/array.hpp"

namespace pluralfill {

struct DatasetSpec {
  std::string source = "synthetic_textures";  // or "image_directory"
  std::string directory;
  int64_t image_size = 64;
  uint64_t split_seed = 1;
  int train_count = 64;
  int test_count = 16;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

struct Dataset {
  std::vector<Array> train;
  std::vector<Array> test;
};

/// Gradient background, striped and plain shapes from a shared palette.
/// Rendered with 2x2 supersampling; [3,size,size] in [-1,1].
Array gen_synthetic_image(int64_t size, uint64_t seed);
std::vector<Array> gen_synthetic_dataset(int count, int64_t size, uint64_t seed);

/// FNV-1a over the raw float bits.
uint64_t image_hash(const Array& img);

/// Train and test sets with no image in common (checked by hash).
Dataset make_dataset(const DatasetSpec& spec);

}  // namespace pluralfill
