#pragma once

#include <cstdint>
#include <functional>

#include "lfm/tensor.hpp"

namespace lfm {

/// Independent generator for (seed, stream index).
Rng derive_rng(std::uint64_t seed, std::uint64_t index);

/// Worker count from LFM_THREADS, else the hardware concurrency.
std::size_t thread_count();

/// Runs fn(i) for i in [0, n) on up to thread_count() workers. The first
/// exception (by index) is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace lfm
