#pragma once

#include <cstddef>
#include <functional>

namespace kk {

/// Worker count: KK_THREADS if set and positive, else hardware concurrency.
int worker_count();

/// Runs body(i) for i in [0, n) on up to `workers` threads (0 = worker_count()).
/// Indices are split into contiguous blocks; results must be written per index
/// so the outcome does not depend on scheduling. The first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, int workers = 0);

}  // namespace kk
