#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cais/error.hpp"

namespace cais {

using shape_t = std::vector<std::size_t>;

std::string shape_string(const shape_t& shape);

inline std::size_t shape_volume(const shape_t& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major array, last index fastest. Layout conventions used across
// the library:
//   image          (H, W)
//   feature map    (C, H, W)
//   guidance field (K, H, W), K = w_s * w_s directions
//   cost volume    (H, W, D)
template <typename T>
class basic_tensor {
 public:
  using value_type = T;

  basic_tensor() = default;

  explicit basic_tensor(shape_t shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_volume(shape_), fill);
  }

  basic_tensor(shape_t shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_volume(shape_)) {
      throw shape_error("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                        shape_string(shape_));
    }
  }

  const shape_t& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(std::size_t i) noexcept { return data_[i]; }
  const T& operator()(std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  basic_tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return basic_tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const basic_tensor& a, const basic_tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (auto e : shape_) {
      if (e == 0) throw shape_error("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  shape_t shape_;
  std::vector<T> data_;
};

using tensor = basic_tensor<float>;
using tensor_d = basic_tensor<double>;

template <typename T>
void require_rank(const basic_tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw shape_error(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                      shape_string(t.shape()));
  }
}

template <typename T>
void require_shape(const basic_tensor<T>& t, const shape_t& shape, const char* what) {
  if (t.shape() != shape) {
    throw shape_error(std::string(what) + ": expected shape " + shape_string(shape) + ", got " +
                      shape_string(t.shape()));
  }
}

template <typename T>
void require_finite(const basic_tensor<T>& t, const char* what) {
  if (!t.all_finite()) throw numeric_error(std::string(what) + ": non-finite value");
}

template <typename T>
double dot(const basic_tensor<T>& a, const basic_tensor<T>& b) {
  require_shape(b, a.shape(), "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

// Per-channel 2x2 mean pooling over the last two axes of a (C, H, W) or (H, W)
// tensor. Both spatial extents must be even.
template <typename T>
basic_tensor<T> avg_pool2(const basic_tensor<T>& f);

}  // namespace cais
