#pragma once

#include <cstddef>
#include <functional>
#include <span>

namespace rlsf {

/// Worker count from RLSF_THREADS (default 1, capped at 64).
int thread_count();

/// Runs fn(0) .. fn(n - 1) on up to thread_count() threads. Each index must
/// write only to its own output slot. The lowest-index exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Sums per-item gradients in index order, so the result does not depend on
/// the thread count. `item(i, grad)` accumulates into a zeroed buffer of
/// grad.size() and returns the item's loss contribution; returns the loss sum.
double accumulate_gradients(std::size_t n, std::span<double> grad,
                            const std::function<double(std::size_t, std::span<double>)>& item);

}  // namespace rlsf
