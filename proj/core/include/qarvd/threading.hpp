#ifndef QARVD_THREADING_HPP
#define QARVD_THREADING_HPP

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace qarvd {

// Process-wide worker count for parallel_for. Results are identical for any
// value: every task writes only its own slot and reductions run after join.
inline std::atomic<unsigned>& thread_count_ref() {
  static std::atomic<unsigned> n{std::max(1u, std::thread::hardware_concurrency())};
  return n;
}

inline void set_num_threads(unsigned n) { thread_count_ref() = std::max(1u, n); }
inline unsigned num_threads() { return thread_count_ref().load(); }

// Runs fn(i) for i in [0, n). Static block partition, no work stealing.
inline void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
  const unsigned workers = std::min<size_t>(num_threads(), n);
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const size_t chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    const size_t lo = w * chunk;
    const size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace qarvd

#endif  // QARVD_THREADING_HPP
