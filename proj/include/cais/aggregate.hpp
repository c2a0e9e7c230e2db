#pragma once

#include "cais/config.hpp"
#include "cais/flops.hpp"
#include "cais/tensor.hpp"

namespace cais {

// Inter-scale cost aggregation. Cost volumes are (H, W, D), guidance fields
// (K, H*s, W*s) with K = w_s^2. Fine coordinates are primed in the comments
// below: x' = column, y' = row, d' = disparity.
//
// Right-guidance lookup shared by both aggregation forms, for fine (x', y', d')
// and coarse (x, y, d). The right fine pixel is column x' - d', clamped into
// the image, and it is anchored at coarse cell floor(x'/s) - floor(d'/s):
//   col = clamp(x' - d', 0, W*s - 1)
//   dir = ((x - d) - (floor(x'/s) - floor(d'/s)), y - floor(y'/s))
//   R   = G_R[dir][y'][col]   if dir lies in the w_s window, else 0.
// The right direction is the left direction shifted by the disparity offset
// d - floor(d'/s), so one-hot centre guidance on both views reduces every
// form to nearest-neighbour upsampling.
//
// Every tap of every window is evaluated; taps that fall outside the volume
// or the window read zero padding. Reductions run in a fixed order
// (documented per operator) so results are bitwise reproducible under any
// thread count.

template <typename T>
struct aggregation_gradients {
  basic_tensor<T> cost;        // d/dCV_c
  basic_tensor<T> guidance_left;
  basic_tensor<T> guidance_right;
};

// Stage 1, (H, W, D) -> (H, W, D*s). For coarse cell (x, y) and fine
// disparity d', with candidates d_t = floor(d'/s) - n + t, t = 0..w_d-1:
//   w_t   = block reduction over the s x s block of (x, y) of R, rows outer;
//   w_t  /= sum_t w_t                 (stage1_renormalize; uniform over valid
//                                      candidates when the sum is < 1e-12);
//   out   = sum_t w_t * CV_c(x, y, d_t);
//   out  *= block reduction of G_L[center]   (left_center_scale).
// Candidates outside [0, D) carry zero weight.
template <typename T>
basic_tensor<T> disparity_upsample(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_right,
                                   const basic_tensor<T>& guidance_left, const aggregation_config& cfg,
                                   flop_counter* counter = nullptr);

// Stage 2, (H, W, D*s) -> (H*s, W*s, D*s):
//   out(x', y', :) = sum_dir G_L[dir][y'][x'] * CV1(x'/s + dir.dx, y'/s + dir.dy, :)
// directions in index order; out-of-range neighbours read zero. With
// border_renormalize_spatial the sum is divided by the in-range weight total.
template <typename T>
basic_tensor<T> spatial_upsample(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_left, const aggregation_config& cfg,
                                 flop_counter* counter = nullptr);

// spatial_upsample(disparity_upsample(...)).
template <typename T>
basic_tensor<T> cais_upsample(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_left, const basic_tensor<T>& guidance_right,
                              const aggregation_config& cfg, flop_counter* counter = nullptr);

// Full 3D form with kernel G_L * R built on the spot over the w_s x w_s x w_d
// coarse neighbourhood of (x'/s, y'/s, d'/s). Summation: d outer, y, x inner.
template <typename T>
basic_tensor<T> full3d_upsample(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_left,
                                const basic_tensor<T>& guidance_right, const aggregation_config& cfg,
                                flop_counter* counter = nullptr);

template <typename T>
aggregation_gradients<T> cais_backward(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_left,
                                       const basic_tensor<T>& guidance_right, const aggregation_config& cfg,
                                       const basic_tensor<T>& upstream);

template <typename T>
aggregation_gradients<T> full3d_backward(const basic_tensor<T>& cost, const basic_tensor<T>& guidance_left,
                                         const basic_tensor<T>& guidance_right, const aggregation_config& cfg,
                                         const basic_tensor<T>& upstream);

enum class upsample_method { nearest, trilinear, deconv_bilinear };

std::string_view to_string(upsample_method m);
upsample_method parse_upsample_method(std::string_view s);

// Fixed-weight baselines, all (H, W, D) -> (H*s, W*s, D*s).
//   nearest          blockwise copy in all three dimensions.
//   trilinear        separable linear interpolation, half-pixel aligned,
//                    source index clamped at the borders; passes d, x, y.
//   deconv_bilinear  transposed convolution, stride s, padding (k - s)/2,
//                    separable bilinear kernel of support k = 2s - s%2.
template <typename T>
basic_tensor<T> upsample_baseline(const basic_tensor<T>& cost, int s, upsample_method method, flop_counter* counter = nullptr);

// Transpose of upsample_baseline (all three are linear).
template <typename T>
basic_tensor<T> upsample_baseline_adjoint(const basic_tensor<T>& fine, int s, upsample_method method);

// 1D bilinear deconvolution kernel of support 2s - s%2.
std::vector<double> bilinear_kernel(int s);

}  // namespace cais
