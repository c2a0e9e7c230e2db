#include "cais/tensor.hpp"

namespace cais {

std::string shape_string(const shape_t& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
basic_tensor<T> avg_pool2(const basic_tensor<T>& f) {
  if (f.rank() != 2 && f.rank() != 3) throw shape_error("avg_pool2: expected (H,W) or (C,H,W), got " + shape_string(f.shape()));
  const std::size_t channels = f.rank() == 3 ? f.extent(0) : 1;
  const std::size_t h = f.extent(f.rank() - 2);
  const std::size_t w = f.extent(f.rank() - 1);
  if (h % 2 || w % 2) throw shape_error("avg_pool2: odd spatial extent in " + shape_string(f.shape()));

  shape_t out_shape = f.shape();
  out_shape[f.rank() - 2] = h / 2;
  out_shape[f.rank() - 1] = w / 2;
  basic_tensor<T> out(out_shape);
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = f.data().data() + c * h * w;
    T* dst = out.data().data() + c * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const T a = src[(2 * y) * w + 2 * x];
        const T b = src[(2 * y) * w + 2 * x + 1];
        const T c0 = src[(2 * y + 1) * w + 2 * x];
        const T d = src[(2 * y + 1) * w + 2 * x + 1];
        dst[y * ow + x] = ((a + b) + (c0 + d)) / T{4};
      }
    }
  }
  return out;
}

template basic_tensor<float> avg_pool2(const basic_tensor<float>&);
template basic_tensor<double> avg_pool2(const basic_tensor<double>&);

}  // namespace cais
