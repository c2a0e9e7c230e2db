#pragma once

#include <cstddef>
#include <functional>

namespace cais {

// Caps worker parallelism for every operator. 0 restores the default
// (all available cores).
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Runs body(i) for i in [0, n). Bodies must write disjoint outputs; every
// reduction inside a body runs in a fixed order, so results do not depend on
// the schedule.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace cais
