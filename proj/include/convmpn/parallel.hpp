#pragma once

// Kernel parallelism helper. Work is split into contiguous index chunks and
// every index is written by exactly one worker, so results are independent of
// the worker count. CONVMPN_THREADS caps the number of workers.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace convmpn {

inline int max_threads() {
  static const int cap = [] {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (const char* env = std::getenv("CONVMPN_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) hw = std::min(hw, v);
    }
    return hw;
  }();
  return cap;
}

// Calls fn(i) for i in [0, n). grain is the minimum chunk per worker.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn, std::int64_t grain = 1) {
  if (n <= 0) return;
  if (grain < 1) grain = 1;
  const std::int64_t max_workers = (n + grain - 1) / grain;
  const int workers = static_cast<int>(
      std::min<std::int64_t>(max_threads(), max_workers));
  if (workers <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace convmpn
