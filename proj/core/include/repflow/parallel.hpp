#pragma once

#include <cstddef>
#include <functional>

namespace repflow {

/// Worker count: REPFLOW_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t thread_count();

/// Runs fn(i) for i in [0, n) on up to thread_count() threads. Indices are
/// split into contiguous blocks; the first exception is rethrown after all
/// workers finish. Callers write results into per-index slots so output never
/// depends on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace repflow
