#include "pluralfill/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "pluralfill/errors.hpp"

namespace pluralfill {

namespace {

constexpr char kMagic[8] = {'P', 'L', 'F', 'C', 'K', 'P', 'T', '1'};

uint32_t to_le(uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

void put_u64(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

nlohmann::json prng_to_json(const PrngState& s) {
  return {{"seed", s.seed}, {"stream", s.stream}, {"counter", s.counter}, {"lane", s.lane}};
}

PrngState prng_from_json(const nlohmann::json& j) {
  PrngState s;
  s.seed = j.at("seed").get<uint64_t>();
  s.stream = j.at("stream").get<uint64_t>();
  s.counter = j.at("counter").get<uint64_t>();
  s.lane = j.at("lane").get<uint32_t>();
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json manifest = ckpt.manifest;
  nlohmann::json table = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, a] : ckpt.arrays) {
    table.push_back({{"name", name}, {"shape", a.shape()}, {"offset", offset}});
    offset += static_cast<uint64_t>(a.size()) * 4;
  }
  manifest["arrays"] = table;
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::vector<uint32_t> buf;
    for (const auto& [name, a] : ckpt.arrays) {
      buf.resize(static_cast<size_t>(a.size()));
      std::memcpy(buf.data(), a.data().data(), buf.size() * 4);
      for (auto& w : buf) w = to_le(w);
      os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    }
    if (!os) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("checkpoint not found: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw Error("not a checkpoint file: " + path.string());
  const uint64_t len = get_u64(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw Error("truncated checkpoint manifest: " + path.string());

  Checkpoint ckpt;
  ckpt.manifest = nlohmann::json::parse(text);
  const auto data_start = is.tellg();
  for (const auto& entry : ckpt.manifest.at("arrays")) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<uint64_t>();
    std::vector<uint32_t> buf(static_cast<size_t>(numel(shape)));
    is.seekg(data_start + static_cast<std::streamoff>(offset));
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!is) throw Error("truncated checkpoint data: " + path.string());
    std::vector<float> values(buf.size());
    for (size_t i = 0; i < buf.size(); ++i) {
      const uint32_t w = to_le(buf[i]);
      std::memcpy(&values[i], &w, 4);
    }
    ckpt.arrays.add(entry.at("name").get<std::string>(), Array(std::move(shape), std::move(values)));
  }
  ckpt.manifest.erase("arrays");
  return ckpt;
}

}  // namespace pluralfill
