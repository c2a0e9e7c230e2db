#include "cais/regression.hpp"

#include <cmath>

namespace cais {
namespace {

template <typename T>
void softmax_neg(const T* cost, std::size_t d, std::vector<T>& p) {
  p.resize(d);
  T lo = cost[0];
  for (std::size_t i = 1; i < d; ++i) lo = cost[i] < lo ? cost[i] : lo;
  T sum = T{0};
  for (std::size_t i = 0; i < d; ++i) {
    p[i] = std::exp(lo - cost[i]);
    sum += p[i];
  }
  for (auto& v : p) v = v / sum;
}

std::size_t mask_count(const tensor& mask) {
  std::size_t n = 0;
  for (float m : mask.data()) n += m > 0.0f;
  if (n == 0) throw config_error("mask selects no pixels");
  return n;
}

}  // namespace

template <typename T>
basic_tensor<T> soft_argmin(const basic_tensor<T>& cost) {
  require_rank(cost, 3, "soft_argmin");
  const std::size_t h = cost.extent(0), w = cost.extent(1), d = cost.extent(2);
  basic_tensor<T> out({h, w});
  std::vector<T> p;
  for (std::size_t i = 0; i < h * w; ++i) {
    softmax_neg(cost.data().data() + i * d, d, p);
    T acc = T{0};
    for (std::size_t k = 0; k < d; ++k) acc += static_cast<T>(k) * p[k];
    out[i] = acc;
  }
  return out;
}

template <typename T>
basic_tensor<T> soft_argmin_backward(const basic_tensor<T>& cost, const basic_tensor<T>& upstream) {
  require_rank(cost, 3, "soft_argmin_backward");
  const std::size_t h = cost.extent(0), w = cost.extent(1), d = cost.extent(2);
  require_shape(upstream, {h, w}, "soft_argmin upstream");
  basic_tensor<T> grad(cost.shape());
  std::vector<T> p;
  for (std::size_t i = 0; i < h * w; ++i) {
    softmax_neg(cost.data().data() + i * d, d, p);
    T mean = T{0};
    for (std::size_t k = 0; k < d; ++k) mean += static_cast<T>(k) * p[k];
    for (std::size_t k = 0; k < d; ++k) grad[i * d + k] = -upstream[i] * p[k] * (static_cast<T>(k) - mean);
  }
  return grad;
}

template <typename T>
loss_result<T> smooth_l1(const basic_tensor<T>& pred, const basic_tensor<T>& gt, const basic_tensor<T>& mask) {
  require_shape(gt, pred.shape(), "smooth_l1 ground truth");
  require_shape(mask, pred.shape(), "smooth_l1 mask");
  std::size_t n = 0;
  for (T m : mask.data()) n += m > T{0};
  if (n == 0) throw config_error("mask selects no pixels");
  loss_result<T> r;
  r.grad = basic_tensor<T>(pred.shape());
  const T inv = T{1} / static_cast<T>(n);
  T acc = T{0};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!(mask[i] > T{0})) continue;
    const T e = pred[i] - gt[i];
    const T a = std::abs(e);
    if (a < T{1}) {
      acc += T(0.5) * e * e;
      r.grad[i] = e * inv;
    } else {
      acc += a - T(0.5);
      r.grad[i] = (e > T{0} ? T{1} : T{-1}) * inv;
    }
  }
  r.loss = acc * inv;
  return r;
}

double epe(const tensor& pred, const tensor& gt, const tensor& mask) {
  require_shape(gt, pred.shape(), "epe ground truth");
  require_shape(mask, pred.shape(), "epe mask");
  const std::size_t n = mask_count(mask);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] > 0.0f) acc += std::abs(static_cast<double>(pred[i]) - static_cast<double>(gt[i]));
  }
  return acc / static_cast<double>(n);
}

double bad_ratio(const tensor& pred, const tensor& gt, const tensor& mask, double delta) {
  require_shape(gt, pred.shape(), "bad_ratio ground truth");
  require_shape(mask, pred.shape(), "bad_ratio mask");
  const std::size_t n = mask_count(mask);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] > 0.0f && std::abs(static_cast<double>(pred[i]) - static_cast<double>(gt[i])) > delta) ++bad;
  }
  return static_cast<double>(bad) / static_cast<double>(n);
}

template basic_tensor<float> soft_argmin(const basic_tensor<float>&);
template basic_tensor<double> soft_argmin(const basic_tensor<double>&);
template basic_tensor<float> soft_argmin_backward(const basic_tensor<float>&, const basic_tensor<float>&);
template basic_tensor<double> soft_argmin_backward(const basic_tensor<double>&, const basic_tensor<double>&);
template loss_result<float> smooth_l1(const basic_tensor<float>&, const basic_tensor<float>&, const basic_tensor<float>&);
template loss_result<double> smooth_l1(const basic_tensor<double>&, const basic_tensor<double>&, const basic_tensor<double>&);

}  // namespace cais
