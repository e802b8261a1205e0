#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace brainage {

/// Run fn(i) for i in [0, n) on up to n_threads threads. Each index writes
/// only its own output slot, and callers reduce slots in index order, so the
/// result is bit-identical for any thread count. The first exception thrown
/// by any task is rethrown on the calling thread.
inline void parallel_for(std::size_t n, std::size_t n_threads,
                         const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  n_threads = std::max<std::size_t>(1, std::min(n_threads, n));
  if (n_threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }

  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  workers.reserve(n_threads);
  for (std::size_t t = 0; t < n_threads; ++t) {
    workers.emplace_back([&, t] {
      // Static block partition: thread t owns a contiguous index range.
      const std::size_t chunk = (n + n_threads - 1) / n_threads;
      const std::size_t begin = t * chunk;
      const std::size_t end = std::min(n, begin + chunk);
      for (std::size_t i = begin; i < end; ++i) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace brainage
