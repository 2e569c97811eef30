#pragma once

#include <cstddef>
#include <functional>

namespace hmmpanel {

// Runs fn(i) for i in [0, n) on up to `workers` threads. workers <= 1 runs
// inline. The first exception thrown by any task is rethrown on the caller
// after all threads join; callers that need per-task error handling must
// catch inside fn.
void parallel_for(std::size_t n, int workers,
                  const std::function<void(std::size_t)>& fn);

int resolve_workers(int requested);

}  // namespace hmmpanel
