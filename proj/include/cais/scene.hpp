#pragma once

#include <cstdint>

#include "cais/tensor.hpp"

namespace cais {

// Left-referenced synthetic stereo pair: for every pixel with mask = 1,
// right(y, x - gt(y, x)) == left(y, x).
struct synthetic_scene {
  tensor left;   // (H, W)
  tensor right;  // (H, W)
  tensor gt;     // (H, W), integer disparities in fine pixels, 0 <= gt < d_max
  tensor mask;   // (H, W), 1 = visible in both views
  std::uint64_t seed = 0;
  int d_max = 0;
};

struct scene_options {
  float contrast = 160.0f;  // spread of per-region base intensity
  float texture = 80.0f;    // amplitude of the band-limited texture
};

// Background plane plus `rect_count` axis-aligned rectangles, every surface
// at a distinct integer disparity; each surface carries its own texture.
// Requires 1 <= d_max < width / 2 and rect_count < d_max.
synthetic_scene gen_scene(std::uint64_t seed, std::size_t height, std::size_t width, int rect_count, int d_max,
                          const scene_options& opts = {});

// (4, H, W): intensity, horizontal and vertical central differences, 3x3
// local variance. Borders replicate.
template <typename T>
basic_tensor<T> extract_features(const basic_tensor<T>& image);

// Features of the image average-pooled down by s (s a power of two).
template <typename T>
basic_tensor<T> extract_features_at_scale(const basic_tensor<T>& image, int s);

// (H, W, D) absolute-difference cost, averaged over channels. Columns with
// x - d < 0 take the largest in-range cost of the volume.
template <typename T>
basic_tensor<T> build_cost_volume(const basic_tensor<T>& left, const basic_tensor<T>& right, std::size_t disparities);

}  // namespace cais
