#include "pluralfill/array.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "pluralfill/errors.hpp"

namespace pluralfill {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Array::Array(Shape shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(numel(shape_)), fill) {}

Array::Array(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

int64_t Array::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[static_cast<size_t>(axis)];
}

float Array::item() const {
  if (data_.size() != 1) throw ShapeError("item() on array of shape " + shape_str(shape_));
  return data_[0];
}

Array Array::reshape(Shape shape) const& {
  Array out = *this;
  return std::move(out).reshape(std::move(shape));
}

Array Array::reshape(Shape shape) && {
  if (numel(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

bool Array::all_finite() const noexcept {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool bit_equal(const Array& a, const Array& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), sizeof(float) * a.data().size()) == 0;
}

float max_abs_diff(const Array& a, const Array& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  float m = 0.0f;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace pluralfill
