#include "cais/adam.hpp"

#include <cmath>

namespace cais {

template <typename T>
void adam_step(adam_state<T>& state, const std::vector<basic_tensor<T>*>& params, const std::vector<const basic_tensor<T>*>& grads) {
  if (params.size() != grads.size()) throw shape_error("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw shape_error("adam_step: state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_shape(*grads[i], params[i]->shape(), "adam gradient");
    require_shape(state.m[i], params[i]->shape(), "adam state");
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& g = *grads[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = state.beta1 * static_cast<double>(m[j]) + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * static_cast<double>(v[j]) + (1.0 - state.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = state.lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
    }
  }
}

template void adam_step(adam_state<float>&, const std::vector<basic_tensor<float>*>&, const std::vector<const basic_tensor<float>*>&);
template void adam_step(adam_state<double>&, const std::vector<basic_tensor<double>*>&, const std::vector<const basic_tensor<double>*>&);

}  // namespace cais
