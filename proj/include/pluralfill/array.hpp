#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace pluralfill {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major f32 array. Value type: copies own their data.
class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, float fill = 0.0f);
  Array(Shape shape, std::vector<float> values);

  static Array scalar(float v) { return Array({1}, {v}); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  /// Negative axes count from the end.
  int64_t dim(int axis) const;
  int64_t size() const noexcept { return static_cast<int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const float> data() const noexcept { return data_; }
  std::span<float> data() noexcept { return data_; }
  const std::vector<float>& vec() const noexcept { return data_; }

  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }

  /// Value of a single-element array.
  float item() const;

  Array reshape(Shape shape) const&;
  Array reshape(Shape shape) &&;

  bool all_finite() const noexcept;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Bitwise equality of shape and every float (distinguishes -0 and NaN payloads).
bool bit_equal(const Array& a, const Array& b);

float max_abs_diff(const Array& a, const Array& b);

}  // namespace pluralfill
