#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace cais {

enum class block_reduce { mean, sum };

// How the guidance MLP sees a direction.
//   explicit_shift: per-direction input [F_f ; shifted coarse F_c ; location
//                   map], one logit out, shared across directions.
//   plain_concat:   one input [F_f ; own-cell F_c] per pixel, K logits out
//                   (no shift, no location map).
enum class guidance_encoding { explicit_shift, plain_concat };

// Upsampling configuration shared by the CAIS pipeline and the full-3D form.
struct aggregation_config {
  int scale = 2;          // s in {2, 4, 8}
  int spatial_window = 3; // w_s, odd
  int disparity_window = 3;  // w_d = 2n + 1, odd
  block_reduce reduce = block_reduce::mean;
  bool stage1_renormalize = true;
  bool left_center_scale = true;
  bool border_renormalize_spatial = false;

  int spatial_radius() const { return (spatial_window - 1) / 2; }
  int disparity_radius() const { return (disparity_window - 1) / 2; }
  int directions() const { return spatial_window * spatial_window; }
  int center_direction() const { return (directions() - 1) / 2; }
};

// Throws config_error unless s is one of 2, 4, 8.
void validate_scale(int s);

// Throws config_error on an unsupported scale or an even/non-positive window.
void validate(const aggregation_config& cfg);

// Direction offset from a fine pixel's own coarse cell to a neighbouring cell.
struct direction {
  int dx = 0;
  int dy = 0;
};

inline int direction_index(direction dir, int window) {
  const int r = (window - 1) / 2;
  return (dir.dy + r) * window + (dir.dx + r);
}

inline direction direction_at(int k, int window) {
  const int r = (window - 1) / 2;
  return {k % window - r, k / window - r};
}

std::string_view to_string(block_reduce r);
block_reduce parse_block_reduce(std::string_view s);

}  // namespace cais
