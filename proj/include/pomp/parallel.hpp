#pragma once

#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace pomp {

/// 0 means "one per hardware thread".
inline std::size_t resolve_threads(std::size_t requested) {
  if (requested != 0) return requested;
  const auto hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

/// Reads POMP_THREADS; unset or malformed values fall back to `fallback`.
inline std::size_t threads_from_env(std::size_t fallback = 0) {
  const char* raw = std::getenv("POMP_THREADS");
  if (raw == nullptr || *raw == '\0') return fallback;
  char* end = nullptr;
  const auto value = std::strtoull(raw, &end, 10);
  if (end == raw || *end != '\0') return fallback;
  return static_cast<std::size_t>(value);
}

/// Calls fn(i) for i in [0, n) over contiguous chunks. Each index is handled
/// by exactly one worker, so writes to per-index slots need no locking. The
/// first exception by chunk order is rethrown.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::min(resolve_threads(threads), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> workers;
    workers.reserve(threads);
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      workers.emplace_back([&, t] {
        const std::size_t lo = t * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        try {
          for (std::size_t i = lo; i < hi; ++i) fn(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
}

}  // namespace pomp
