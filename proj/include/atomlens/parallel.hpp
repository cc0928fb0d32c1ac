#pragma once

#include <functional>
#include <thread>
#include <vector>

namespace atomlens {

// Static range split across n_threads. Chunks are disjoint, so per-item work
// that writes to preassigned slots is deterministic for any thread count.
inline void parallel_for(std::ptrdiff_t n, int n_threads,
                         const std::function<void(std::ptrdiff_t, std::ptrdiff_t)>& run_range) {
  if (n <= 0) return;
  if (n_threads <= 1 || n == 1) {
    run_range(0, n);
    return;
  }
  const int workers = static_cast<int>(std::min<std::ptrdiff_t>(n_threads, n));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(workers));
  const std::ptrdiff_t chunk = (n + workers - 1) / workers;
  for (int t = 0; t < workers; ++t) {
    const std::ptrdiff_t lo = t * chunk;
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(lo + chunk, n);
    if (lo >= hi) break;
    threads.emplace_back([&run_range, lo, hi] { run_range(lo, hi); });
  }
  for (auto& th : threads) th.join();
}

}  // namespace atomlens
