#pragma once

#include <cstdint>
#include <vector>

#include "cais/tensor.hpp"

namespace cais {

template <typename T>
struct adam_state {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<basic_tensor<T>> m, v;  // created on the first step
};

// Bias-corrected Adam, in place. params and grads are matched by position.
template <typename T>
void adam_step(adam_state<T>& state, const std::vector<basic_tensor<T>*>& params, const std::vector<const basic_tensor<T>*>& grads);

}  // namespace cais
