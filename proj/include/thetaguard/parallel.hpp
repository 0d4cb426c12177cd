#pragma once

#include <cstddef>
#include <functional>

namespace thetaguard {

// Runs fn(0..n-1) on up to `threads` workers. Callers write results into
// index-addressed slots, so output order never depends on scheduling. The
// exception from the lowest failing index is rethrown.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

// 0 means hardware concurrency.
unsigned resolve_threads(unsigned requested);

} // namespace thetaguard
