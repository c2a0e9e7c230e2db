#pragma once

#include "cais/tensor.hpp"

namespace cais {

// Expected disparity under softmax(-cost) along the last axis: (H, W, D) -> (H, W).
template <typename T>
basic_tensor<T> soft_argmin(const basic_tensor<T>& cost);

template <typename T>
basic_tensor<T> soft_argmin_backward(const basic_tensor<T>& cost, const basic_tensor<T>& upstream);

template <typename T>
struct loss_result {
  T loss{};
  basic_tensor<T> grad;  // d loss / d pred
};

// Smooth-L1 averaged over mask > 0. Throws config_error on an empty mask.
template <typename T>
loss_result<T> smooth_l1(const basic_tensor<T>& pred, const basic_tensor<T>& gt, const basic_tensor<T>& mask);

// Mean |pred - gt| over mask > 0.
double epe(const tensor& pred, const tensor& gt, const tensor& mask);

// Fraction of mask > 0 pixels with |pred - gt| > delta.
double bad_ratio(const tensor& pred, const tensor& gt, const tensor& mask, double delta);

}  // namespace cais
