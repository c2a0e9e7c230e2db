#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cais/config.hpp"

namespace cais {

// Arithmetic tallies. One FLOP per add, multiply or divide; exponentials are
// kept apart and never enter total().
struct flop_counts {
  std::uint64_t adds = 0;
  std::uint64_t muls = 0;
  std::uint64_t divs = 0;
  std::uint64_t exps = 0;

  std::uint64_t total() const;
  // Throws numeric_error on 64-bit overflow.
  flop_counts& operator+=(const flop_counts& other);
  friend bool operator==(const flop_counts&, const flop_counts&) = default;
};

struct flop_report {
  std::string mode;
  std::size_t height = 0, width = 0, disparities = 0;
  aggregation_config cfg;
  std::vector<std::pair<std::string, flop_counts>> stages;

  flop_counts totals() const;
  const flop_counts* stage(std::string_view name) const;
  // key = value lines, prefixed with `prefix` when non-empty.
  void write(std::ostream& os, std::string_view prefix = {}) const;
};

// Runtime accumulator. Operators take an optional pointer; a null pointer
// disables counting. Parallel sections tally into per-task locals which are
// merged here once the section has finished.
class flop_counter {
 public:
  void record(std::string_view stage, const flop_counts& counts);
  const std::vector<std::pair<std::string, flop_counts>>& stages() const { return stages_; }
  void clear() { stages_.clear(); }

 private:
  std::vector<std::pair<std::string, flop_counts>> stages_;
};

// Merges per-task tallies in index order and records them under `stage`.
void record_tallies(flop_counter* counter, std::string_view stage, const std::vector<flop_counts>& tallies);

enum class flop_mode { full3d, decomposed, deconv_bilinear, trilinear, nearest };

std::string_view to_string(flop_mode m);
flop_mode parse_flop_mode(std::string_view s);

// Closed-form counts for upsampling a coarse (H, W, D) volume by cfg.scale.
//   full3d      per fine output, per w_s^2 w_d tap: 1 weight product + 1 MAC.
//   decomposed  stage "disparity": per (H, W, D s) output and per w_d tap,
//                 s^2 block adds, a mean divide (mean mode), a weight-sum add
//                 and renormalizing divide (renormalize on), 1 MAC;
//               stage "left_center_scale": s^2 adds + mean divide per coarse
//                 cell, 1 multiply per (H, W, D s) output;
//               stage "spatial": w_s^2 MACs per fine output, plus w_s^2
//                 weight-sum adds per fine pixel and 1 divide per output when
//                 border renormalization is on.
//   trilinear   3 FLOPs per element of each separable 1D pass (d, x, y).
//   deconv_bilinear  per fine output, 8 taps of 2 kernel products + 1 MAC.
//   nearest     copies only.
// Out-of-range taps execute on zero padding and are counted like any other.
flop_report flops_analytic(std::size_t height, std::size_t width, std::size_t disparities,
                           const aggregation_config& cfg, flop_mode mode);

// Guidance generation for one view at fine resolution (fine_h, fine_w). Not
// part of any aggregation total: both aggregation forms consume the same field.
flop_report flops_guidance(std::size_t fine_h, std::size_t fine_w, std::size_t channels, std::size_t hidden,
                           int spatial_window, guidance_encoding encoding);

// Report built from a runtime counter.
flop_report flops_runtime(const flop_counter& counter, std::string mode = "runtime");

}  // namespace cais
