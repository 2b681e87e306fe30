#pragma once

#include <map>
#include <string>

#include "pluralfill/prng.hpp"
#include "pluralfill/tape.hpp"

namespace pluralfill {

/// Named parameter arrays, iterated in name order.
class ParamSet {
 public:
  void add(const std::string& name, Array value);
  bool contains(const std::string& name) const { return items_.count(name) != 0; }
  const Array& at(const std::string& name) const;
  Array& at(const std::string& name);
  size_t size() const { return items_.size(); }
  int64_t total_elements() const;

  const std::map<std::string, Array>& items() const { return items_; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  /// Copies every entry of `other` whose name starts with `prefix`.
  void merge(const ParamSet& other, const std::string& prefix = "");
  ParamSet subset(const std::string& prefix) const;

  bool bit_equal(const ParamSet& other) const;

 private:
  std::map<std::string, Array> items_;
};

/// A ParamSet placed on a tape, either trainable or frozen.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamSet& params, bool trainable);

  Var operator[](const std::string& name) const;
  /// Picks this set's entries out of Tape::backward's result.
  std::map<std::string, Array> gradients(const std::map<int, Array>& grads) const;

 private:
  std::map<std::string, Var> vars_;
};

namespace init {
Array normal(Shape shape, float stddev, Prng& rng);
Array uniform(Shape shape, float lo, float hi, Prng& rng);
/// He-normal for [O, C, k, k] conv kernels (fan-in C*k*k).
Array conv_he(int64_t out_ch, int64_t in_ch, int k, Prng& rng);
}  // namespace init

struct AdamConfig {
  float lr = 2e-4f;
  float beta1 = 0.5f;
  float beta2 = 0.9f;
  float eps = 1e-8f;
};

/// Adam with bias correction. Moments are keyed by parameter name.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(ParamSet& params, const std::map<std::string, Array>& grads);
  int64_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  int64_t steps_ = 0;
  std::map<std::string, Array> m_, v_;
};

}  // namespace pluralfill
