#pragma once

// Dense row-major tensors. Shapes are dynamic; scalar type is a template
// parameter (double for gradient checking, float acceptable for training).

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hafusion {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor extent must be positive, got " + shape_str(shape_));
    }
  }

  static Tensor from_values(Shape shape, std::vector<T> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    if (t.data_.size() != shape_numel(t.shape_)) {
      throw ShapeError("value count " + std::to_string(t.data_.size()) +
                       " does not match shape " + shape_str(t.shape_));
    }
    return t;
  }

  static Tensor scalar(T v) { return from_values({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at3(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at3(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  T& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  const T& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Reinterprets the flat buffer under a new shape with the same element count.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                       " changes element count");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) t[i] = static_cast<U>(data_[i]);
    return t;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
inline void require_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by op '") + op + "' with shape " +
                       shape_str(t.shape()));
  }
}

}  // namespace hafusion
