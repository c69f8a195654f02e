#pragma once

#include <cstddef>
#include <functional>

namespace m3ad {

// Worker count: M3AD_THREADS if set (>= 1), else the hardware concurrency.
std::size_t worker_count();

// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index
// runs exactly once; the first exception is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace m3ad
