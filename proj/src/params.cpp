#include "pluralfill/params.hpp"

#include <cmath>

#include "pluralfill/errors.hpp"

namespace pluralfill {

void ParamSet::add(const std::string& name, Array value) {
  if (!items_.emplace(name, std::move(value)).second) throw Error("duplicate parameter " + name);
}

const Array& ParamSet::at(const std::string& name) const {
  auto it = items_.find(name);
  if (it == items_.end()) throw NotFoundError("no parameter named " + name);
  return it->second;
}

Array& ParamSet::at(const std::string& name) {
  auto it = items_.find(name);
  if (it == items_.end()) throw NotFoundError("no parameter named " + name);
  return it->second;
}

int64_t ParamSet::total_elements() const {
  int64_t n = 0;
  for (const auto& [_, a] : items_) n += a.size();
  return n;
}

void ParamSet::merge(const ParamSet& other, const std::string& prefix) {
  for (const auto& [name, a] : other.items_) {
    if (name.rfind(prefix, 0) == 0) items_[name] = a;
  }
}

ParamSet ParamSet::subset(const std::string& prefix) const {
  ParamSet out;
  out.merge(*this, prefix);
  return out;
}

bool ParamSet::bit_equal(const ParamSet& other) const {
  if (items_.size() != other.items_.size()) return false;
  for (const auto& [name, a] : items_) {
    auto it = other.items_.find(name);
    if (it == other.items_.end() || !pluralfill::bit_equal(a, it->second)) return false;
  }
  return true;
}

BoundParams::BoundParams(Tape& tape, const ParamSet& params, bool trainable) {
  for (const auto& [name, a] : params) {
    vars_.emplace(name, trainable ? tape.parameter(a) : tape.constant(a));
  }
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw NotFoundError("parameter " + name + " is not bound");
  return it->second;
}

std::map<std::string, Array> BoundParams::gradients(const std::map<int, Array>& grads) const {
  std::map<std::string, Array> out;
  for (const auto& [name, v] : vars_) {
    auto it = grads.find(v.id);
    if (it != grads.end()) out.emplace(name, it->second);
  }
  return out;
}

namespace init {

Array normal(Shape shape, float stddev, Prng& rng) {
  Array a(std::move(shape));
  for (float& v : a.data()) v = stddev * rng.normal();
  return a;
}

Array uniform(Shape shape, float lo, float hi, Prng& rng) {
  Array a(std::move(shape));
  for (float& v : a.data()) v = rng.uniform(lo, hi);
  return a;
}

Array conv_he(int64_t out_ch, int64_t in_ch, int k, Prng& rng) {
  const float stddev = std::sqrt(2.0f / static_cast<float>(in_ch * k * k));
  return normal({out_ch, in_ch, k, k}, stddev, rng);
}

}  // namespace init

void Adam::step(ParamSet& params, const std::map<std::string, Array>& grads) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(steps_));
  const float step_size = static_cast<float>(config_.lr * std::sqrt(bc2) / bc1);
  for (const auto& [name, g] : grads) {
    Array& p = params.at(name);
    if (g.shape() != p.shape()) throw ShapeError("gradient shape mismatch for " + name);
    auto [mit, mnew] = m_.try_emplace(name, p.shape(), 0.0f);
    auto [vit, vnew] = v_.try_emplace(name, p.shape(), 0.0f);
    auto m = mit->second.data();
    auto v = vit->second.data();
    auto pd = p.data();
    const auto gd = g.data();
    for (size_t i = 0; i < pd.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0f - config_.beta1) * gd[i];
      v[i] = config_.beta2 * v[i] + (1.0f - config_.beta2) * gd[i] * gd[i];
      pd[i] -= step_size * m[i] / (std::sqrt(v[i]) + config_.eps);
    }
  }
}

}  // namespace pluralfill
