#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "pluralfill/params.hpp"

namespace pluralfill {

/// Container file: magic, u64 manifest length, JSON manifest, then the
/// named arrays as little-endian row-major f32 in manifest order.
struct Checkpoint {
  nlohmann::json manifest = nlohmann::json::object();
  ParamSet arrays;
};

/// Writes via a temporary file and rename, so an existing file at `path`
/// is only replaced by a complete checkpoint.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json prng_to_json(const PrngState& s);
PrngState prng_from_json(const nlohmann::json& j);

}  // namespace pluralfill
