#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace fblcrd {

inline unsigned default_threads() {
  return std::max(1u, std::thread::hardware_concurrency());
}

struct ChunkRange {
  std::size_t index;
  std::size_t begin;
  std::size_t end;
};

/// Applies `fn(ChunkRange)` to every chunk of [0, total) and returns the
/// per-chunk results in chunk order. Reductions over the returned vector are
/// therefore independent of `threads`.
template <class Fn>
auto map_chunks(std::size_t total, std::size_t chunk_size, unsigned threads,
                Fn&& fn) {
  using Result = decltype(fn(ChunkRange{0, 0, 0}));
  chunk_size = std::max<std::size_t>(chunk_size, 1);
  const std::size_t n_chunks = (total + chunk_size - 1) / chunk_size;
  std::vector<Result> results(n_chunks);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= n_chunks) return;
      try {
        const std::size_t b = c * chunk_size;
        results[c] = fn(ChunkRange{c, b, std::min(total, b + chunk_size)});
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };

  const unsigned n_workers =
      static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), n_chunks));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(n_workers);
    for (unsigned t = 0; t < n_workers; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

}  // namespace fblcrd
