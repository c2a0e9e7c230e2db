#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string_view>
#include <vector>

#include "cais/config.hpp"
#include "cais/guidance.hpp"
#include "cais/scene.hpp"

namespace cais {

// left_only reuses the left guidance field for the right role; no_encoding
// swaps in plain_concat guidance.
enum class ablation { none, left_only, no_encoding };

std::string_view to_string(ablation a);
ablation parse_ablation(std::string_view s);

// Everything the pipeline needs from one scene.
template <typename T>
struct stereo_sample {
  basic_tensor<T> left_fine, right_fine;      // (4, H, W)
  basic_tensor<T> left_coarse, right_coarse;  // (4, H/s, W/s)
  basic_tensor<T> cost;                       // (H/s, W/s, ceil(d_max/s))
  basic_tensor<T> gt, mask;                   // (H, W)

  template <typename U>
  stereo_sample<U> cast() const {
    return {left_fine.template cast<U>(),  right_fine.template cast<U>(), left_coarse.template cast<U>(),
            right_coarse.template cast<U>(), cost.template cast<U>(),     gt.template cast<U>(),
            mask.template cast<U>()};
  }
};

stereo_sample<float> make_sample(const synthetic_scene& scene, int s);

template <typename T>
struct pipeline_result {
  T loss{};
  basic_tensor<T> prediction;  // (H, W) fine disparities
};

// guidance -> cais_upsample -> soft_argmin -> smooth_l1. When `grad` is given
// it receives d loss / d params.
template <typename T>
pipeline_result<T> run_pipeline(const guidance_params<T>& params, const stereo_sample<T>& sample, const aggregation_config& cfg,
                                ablation mode, guidance_params<T>* grad = nullptr);

struct train_config {
  std::uint64_t seed = 0;
  int iterations = 500;
  int batch = 4;  // scenes per optimizer step, gradients averaged
  aggregation_config agg;
  ablation mode = ablation::none;
  std::size_t height = 32, width = 32;
  int d_max = 8;
  int rects = 3;
  std::size_t hidden = 16;
  double lr = 1e-3;
  int heldout = 4;
  scene_options scene;
};

struct train_report {
  train_config config;
  std::vector<double> losses;
  std::optional<double> epe_initial, epe_final;  // absent when no training ran
  double epe_nearest = 0, epe_trilinear = 0, epe_deconv = 0;
  std::optional<double> bad1_final;

  void write(std::ostream& os) const;
};

struct train_result {
  guidance_params<float> params;
  train_report report;
};

// Scenes are drawn from (seed, stream, index); stream 0 trains, 1 is held out.
std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

train_result train_toy(const train_config& cfg);

// Mean held-out EPE of the CAIS pipeline with `params`.
double heldout_epe(const guidance_params<float>& params, const train_config& cfg);

}  // namespace cais
