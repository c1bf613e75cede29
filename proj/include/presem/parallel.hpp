#pragma once

#include <functional>

namespace presem {

/// Runs fn(i) for i in [0, n) on up to `threads` workers (0 = hardware concurrency).
/// The first exception thrown by any call is rethrown after all workers stop.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);
int resolve_threads(int requested);

}  // namespace presem
