#pragma once

#include <cstddef>
#include <functional>

namespace memlab {

// Worker cap for data-parallel loops. Defaults to LAB_THREADS (or 1).
std::size_t max_threads();
void set_max_threads(std::size_t n);

// Runs fn(i) for i in [0, n). Each index is handled exactly once; callers
// write results into per-index slots so the output never depends on the
// thread count. The first exception thrown by any task is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace memlab
