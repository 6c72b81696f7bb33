#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace actxfer {

/// Raised for shape mismatches, bad arguments and invalid configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces NaN/Inf or is otherwise unusable.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array. `S` is float for training and double for
/// finite-difference checking.
template <typename S>
class BasicTensor {
 public:
  using value_type = S;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, S fill = S(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    validate_shape();
  }

  BasicTensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
    }
  }

  static BasicTensor scalar(S v) { return BasicTensor(Shape{1}, std::vector<S>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<S> data() noexcept { return data_; }
  std::span<const S> data() const noexcept { return data_; }
  S* raw() noexcept { return data_.data(); }
  const S* raw() const noexcept { return data_.data(); }
  std::vector<S>& storage() noexcept { return data_; }
  const std::vector<S>& storage() const noexcept { return data_; }

  S& operator[](std::size_t i) noexcept { return data_[i]; }
  const S& operator[](std::size_t i) const noexcept { return data_[i]; }

  S item() const {
    if (data_.size() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  void reshape(Shape shape) {
    if (shape_numel(shape) != data_.size()) {
      throw ConfigError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
  }

  BasicTensor reshaped(Shape shape) const {
    BasicTensor t = *this;
    t.reshape(std::move(shape));
    return t;
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](S v) { return std::isfinite(v); });
  }

  template <typename T>
  BasicTensor<T> cast() const {
    std::vector<T> out(data_.begin(), data_.end());
    return BasicTensor<T>(shape_, std::move(out));
  }

  /// Byte-level equality (distinguishes -0.0 from 0.0, treats identical NaNs as equal).
  bool bit_equal(const BasicTensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(S)) == 0);
  }

 private:
  void validate_shape() const {
    for (int d : shape_) {
      if (d < 0) throw ConfigError("negative dimension in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<S> data_;
};

using Tensor = BasicTensor<float>;

}  // namespace actxfer
