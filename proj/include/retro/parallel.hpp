#pragma once

#include <cstddef>
#include <functional>

namespace retro {

/// Worker count: RETRO_THREADS if set and positive, else hardware concurrency.
int thread_count();

/// Runs fn(begin, end) over contiguous slices of [0, n). Slices are fixed by n
/// and the thread count, so per-index results are independent of scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace retro
