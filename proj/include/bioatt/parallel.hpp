#ifndef BIOATT_PARALLEL_HPP
#define BIOATT_PARALLEL_HPP

#include <cstddef>
#include <functional>

namespace bioatt {

/// Worker cap: BIOATT_THREADS if set and positive, else hardware concurrency.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker;
/// callers keep per-index outputs so results do not depend on the split.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace bioatt

#endif  // BIOATT_PARALLEL_HPP
