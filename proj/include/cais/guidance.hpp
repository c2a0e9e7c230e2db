#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include "cais/config.hpp"
#include "cais/flops.hpp"
#include "cais/tensor.hpp"

namespace cais {

// Weights of the shared three-layer 1x1 mapping (layer1 -> relu -> layer2 ->
// relu -> layer3). Weight matrices are stored (out, in).
template <typename T>
struct guidance_params {
  guidance_encoding encoding = guidance_encoding::explicit_shift;
  std::size_t channels = 0;  // C of each feature map
  std::size_t hidden = 0;
  basic_tensor<T> w1, b1, w2, b2, w3, b3;

  std::size_t input_width() const { return encoding == guidance_encoding::explicit_shift ? 2 * channels + 2 : 2 * channels; }
  std::size_t outputs() const { return w3.extent(0); }

  // All-zero parameters. `window` only matters for plain_concat, whose last
  // layer emits one logit per direction.
  static guidance_params zeros(std::size_t channels, std::size_t hidden, guidance_encoding encoding = guidance_encoding::explicit_shift,
                               int window = 3);

  std::array<basic_tensor<T>*, 6> tensors() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
  std::array<const basic_tensor<T>*, 6> tensors() const { return {&w1, &b1, &w2, &b2, &w3, &b3}; }

  template <typename U>
  guidance_params<U> cast() const {
    guidance_params<U> out;
    out.encoding = encoding;
    out.channels = channels;
    out.hidden = hidden;
    out.w1 = w1.template cast<U>();
    out.b1 = b1.template cast<U>();
    out.w2 = w2.template cast<U>();
    out.b2 = b2.template cast<U>();
    out.w3 = w3.template cast<U>();
    out.b3 = b3.template cast<U>();
    return out;
  }
};

// Uniform in +-sqrt(1/fan_in), seeded.
guidance_params<float> init_guidance_params(std::size_t channels, std::size_t hidden, std::uint64_t seed,
                                            guidance_encoding encoding = guidance_encoding::explicit_shift, int window = 3);

// Bundle layout: <dir>/layer{1,2,3}_{weight,bias}.cvt1. The encoding is
// recovered from the layer-3 row count (1 = explicit_shift).
void save_guidance_params(const std::filesystem::path& dir, const guidance_params<float>& p);
guidance_params<float> load_guidance_params(const std::filesystem::path& dir);

template <typename T>
struct guidance_gradients {
  guidance_params<T> params;
  basic_tensor<T> fine;    // d/dF_f
  basic_tensor<T> coarse;  // d/dF_c
};

// Identity-mapping nearest upsampling of a (C, H, W) map by s.
template <typename T>
basic_tensor<T> nearest_expand(const basic_tensor<T>& coarse, int s);

// Signed distance, in fine pixels, from in-block offset o to the centre of the
// block, skipping zero: o - s/2 for o < s/2, o - s/2 + 1 otherwise.
int block_offset(int s, int o);

// (2, H, W) map: channel 0 = horizontal displacement (positive right),
// channel 1 = vertical displacement (positive up) of each fine pixel relative
// to the coarse cell selected by `dir`.
tensor make_location_map(int s, direction dir, int window, std::size_t fine_h, std::size_t fine_w);

// The concatenated MLP input as a (input_width, H_f, W_f) map. For
// explicit_shift the coarse part is F_c(y/s + dir.dy, x/s + dir.dx), zero when
// out of range; plain_concat ignores `dir`.
template <typename T>
basic_tensor<T> guidance_input(const basic_tensor<T>& fine, const basic_tensor<T>& coarse, direction dir, int s, int window,
                               guidance_encoding encoding = guidance_encoding::explicit_shift);

// Pre-softmax logit map for one direction (H_f, W_f).
template <typename T>
basic_tensor<T> guidance_logit_map(const guidance_params<T>& params, const basic_tensor<T>& fine, const basic_tensor<T>& coarse,
                                   direction dir, int s, int window);

// Guidance field (K, H_f, W_f): logits for every direction, softmax over the
// direction axis per pixel. Out-of-range directions still take part.
template <typename T>
basic_tensor<T> guidance_forward(const guidance_params<T>& params, const basic_tensor<T>& fine, const basic_tensor<T>& coarse, int s,
                                 int window, flop_counter* counter = nullptr);

// With feature_grads false only the parameter gradients are filled; the
// feature gradients are left empty.
template <typename T>
guidance_gradients<T> guidance_backward(const guidance_params<T>& params, const basic_tensor<T>& fine, const basic_tensor<T>& coarse,
                                        int s, int window, const basic_tensor<T>& upstream, bool feature_grads = true);

}  // namespace cais
