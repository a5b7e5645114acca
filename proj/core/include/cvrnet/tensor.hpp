#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cvrnet/errors.hpp"
#include "cvrnet/rng.hpp"

namespace cvrnet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (const std::int64_t e : s) n *= e;
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

/// True when the CVRNET_CHECK_FINITE=1 environment variable is set; operators
/// then assert their outputs are free of NaN/Inf.
bool finite_checks_enabled();

/// Dense row-major N-d array of floats. Layout convention for rank-4 data is
/// batch x height x width x channels (B×H×W×C); vectors are B×C.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), T(0));
  }

  TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  TensorT(Shape shape, std::initializer_list<T> data)
      : TensorT(std::move(shape), std::vector<T>(data)) {}

  static TensorT full(Shape shape, T value) {
    TensorT t(std::move(shape));
    t.fill(value);
    return t;
  }

  static TensorT randn(Shape shape, Rng& rng, T stddev = T(1)) {
    TensorT t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // rank-4 accessor (B×H×W×C)
  T& operator()(std::int64_t b, std::int64_t h, std::int64_t w, std::int64_t c) {
    return data_[static_cast<std::size_t>(((b * shape_[1] + h) * shape_[2] + w) * shape_[3] + c)];
  }
  const T& operator()(std::int64_t b, std::int64_t h, std::int64_t w, std::int64_t c) const {
    return data_[static_cast<std::size_t>(((b * shape_[1] + h) * shape_[2] + w) * shape_[3] + c)];
  }

  // rank-2 accessor (B×C)
  T& operator()(std::int64_t r, std::int64_t c) {
    return data_[static_cast<std::size_t>(r * shape_[1] + c)];
  }
  const T& operator()(std::int64_t r, std::int64_t c) const {
    return data_[static_cast<std::size_t>(r * shape_[1] + c)];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

  void add_(const TensorT& other) {
    if (!same_shape(other)) {
      throw ShapeError("elementwise add: shape " + shape_str(shape_) + " vs " +
                       shape_str(other.shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  }

  void scale_(T a) {
    for (auto& v : data_) v *= a;
  }

  bool all_finite() const {
    for (const T v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  /// Casts elementwise to another float type (used by the float64
  /// gradient-check paths).
  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (const std::int64_t e : shape_) {
      if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

template <typename T>
void check_finite(const TensorT<T>& t, const char* op_name) {
  if (!finite_checks_enabled()) return;
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op_name);
  }
}

}  // namespace cvrnet
