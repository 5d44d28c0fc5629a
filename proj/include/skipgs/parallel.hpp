#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace skipgs {

// Runs fn(i) for i in [0, n) on up to `workers` threads. Work items are
// independent; callers reduce per-item results in index order, so output never
// depends on the worker count.
template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  workers = std::clamp(workers, 1, std::max(n, 1));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto body = [&] {
    for (int i = next++; i < n; i = next++) fn(i);
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (int w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
}

// Worker count from SKIPGS_THREADS when set, else `fallback`.
inline int default_threads(int fallback = 1) {
  if (const char* env = std::getenv("SKIPGS_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return fallback;
}

}  // namespace skipgs
