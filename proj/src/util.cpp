#include "lfm/util.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <random>
#include <thread>
#include <vector>

namespace lfm {

Rng derive_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(index),
                    std::uint32_t(index >> 32), 0x5eedu};
  return Rng(seq);
}

std::size_t thread_count() {
  if (const char* env = std::getenv("LFM_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return std::size_t(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::min(thread_count(), n);
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace lfm
