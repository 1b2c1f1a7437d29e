#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace mvtt {

// Process-wide execution knobs. Every parallel loop in the library partitions
// its output so each element is produced by exactly one worker with a fixed
// reduction order; the thread count never changes numeric results.
struct ExecutionConfig {
  std::size_t threads = 1;
  bool deterministic = false;
};

inline ExecutionConfig& execution_config() {
  static ExecutionConfig config = [] {
    ExecutionConfig c;
    c.threads = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("MVTT_THREADS")) {
      try {
        const long cap = std::stol(env);
        if (cap >= 1) c.threads = std::min<std::size_t>(c.threads, static_cast<std::size_t>(cap));
      } catch (...) {
      }
    }
    return c;
  }();
  return config;
}

inline void set_deterministic(bool on) { execution_config().deterministic = on; }

inline std::size_t worker_count() {
  const auto& c = execution_config();
  return c.deterministic ? 1 : c.threads;
}

/// Runs body(i) for i in [0, count). Work is split into contiguous chunks.
template <typename Body>
void parallel_for(std::size_t count, Body&& body, std::size_t min_per_worker = 1) {
  const std::size_t workers =
      std::min(worker_count(), std::max<std::size_t>(1, count / std::max<std::size_t>(1, min_per_worker)));
  if (workers <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(count, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body] {
      for (std::size_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace mvtt
