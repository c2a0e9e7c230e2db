#pragma once

#include <cstdint>
#include <string_view>

namespace cais {

enum class gradcheck_target { guidance, cais, full3d, soft_argmin, loss, end_to_end };

std::string_view to_string(gradcheck_target t);
gradcheck_target parse_gradcheck_target(std::string_view s);

// Pass threshold on max_rel_error for each target.
double gradcheck_tolerance(gradcheck_target t);

struct gradcheck_result {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  double min_relu_margin = 0.0;  // smallest |pre-activation| / reach; 0 when no MLP is involved
};

// Central differences (default step 1e-4, double precision) against the manual
// backward on a small seeded instance (coarse volume at most 4x4x2).
// Per coordinate the error is |a - n| / max(|a|, |n|, 1e-3 * max_j |n_j|).
// The MLP hidden biases are shifted into gaps of their pre-activation sets so
// no perturbation crosses a ReLU kink; min_relu_margin reports the clearance
// in units of a coordinate step (kinks are safe while step < min_relu_margin).
// zero_upstream swaps the random upstream gradient for zeros (operator
// targets only).
gradcheck_result gradcheck(gradcheck_target target, std::uint64_t seed, int s = 2, bool zero_upstream = false,
                           double step = 1e-4);

enum class adjoint_target { cais, full3d, nearest, trilinear, deconv_bilinear };

std::string_view to_string(adjoint_target t);

// |<A x, y> - <x, A^T y>| / max(|<A x, y>|, |<x, A^T y>|) for a seeded
// instance; for the guided operators the guidance is frozen.
double adjoint_error(adjoint_target target, std::uint64_t seed, int s = 2);

}  // namespace cais
