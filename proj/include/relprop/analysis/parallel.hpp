#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "relprop/errors.hpp"

namespace relprop {

/// Thread count from RELPROP_THREADS, or `fallback` when unset.
inline std::size_t threads_from_env(std::size_t fallback = 1) {
  const char* v = std::getenv("RELPROP_THREADS");
  if (!v || !*v) {
    return fallback;
  }
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) {
    throw ConfigError(std::string("RELPROP_THREADS must be a positive integer, got '") + v + "'");
  }
  return static_cast<std::size_t>(n);
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers, each taking a
/// contiguous block. Callers write results by index, so the outcome does not
/// depend on the thread count. The first exception (lowest block) is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      fn(i);
    }
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  const std::size_t block = (n + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w * block; i < std::min(n, (w + 1) * block); ++i) {
          fn(i);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) {
    t.join();
  }
  for (auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
}

}  // namespace relprop
