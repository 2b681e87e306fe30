#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "json.hpp"
#include "pluralfill/pipeline.hpp"

namespace httplib {
class Server;
}

namespace pluralfill {

struct ServiceLimits {
  int64_t max_side = 512;
  int max_samples = 16;
};

struct HttpReply {
  int status = 200;
  std::string body;
  std::map<std::string, std::string> headers;
};

struct LoadedModel {
  std::string id;
  std::string dataset;
  Pipeline pipeline;
};

/// Request handling for the editor's JSON API, independent of the HTTP
/// layer. Handlers are const and safe to call concurrently once models are
/// loaded.
class EditService {
 public:
  explicit EditService(ServiceLimits limits = {});

  /// Loads the pipeline in `dir`; the id comes from the codec manifest.
  void load(const std::filesystem::path& dir);
  void add_model(LoadedModel model);
  /// Flips health to "ready"; called once loading is over (even with no models).
  void set_ready();

  HttpReply complete(const std::string& body) const;
  HttpReply models() const;
  HttpReply health() const;

  /// Registers /v1/complete, /v1/models and /v1/health.
  void mount(httplib::Server& server) const;

 private:
  std::shared_ptr<const LoadedModel> find(const std::string& id) const;

  ServiceLimits limits_;
  std::vector<std::shared_ptr<const LoadedModel>> models_;
  mutable std::mutex mutex_;
  std::atomic<bool> ready_{false};
  std::chrono::steady_clock::time_point started_;
};

/// Address from PLURALFILL_BIND, default 127.0.0.1.
std::string bind_address();

}  // namespace pluralfill
