#pragma once
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace ionread {

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Run fn(begin, end, chunk) over [0, n) split into `threads` contiguous
/// chunks. Chunk boundaries depend only on (n, threads); outputs that are
/// merged associatively per chunk index are therefore reproducible for any
/// thread count.
inline void parallel_chunks(
    std::uint64_t n, int threads,
    const std::function<void(std::uint64_t, std::uint64_t, int)>& fn) {
  threads = resolve_threads(threads);
  if (n == 0) return;
  const auto t = static_cast<std::uint64_t>(threads);
  const std::uint64_t chunk = (n + t - 1) / t;
  if (threads == 1 || chunk == n) {
    fn(0, n, 0);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int c = 0; c < threads; ++c) {
    const std::uint64_t begin = static_cast<std::uint64_t>(c) * chunk;
    if (begin >= n) break;
    const std::uint64_t end = std::min(n, begin + chunk);
    pool.emplace_back([&fn, begin, end, c] { fn(begin, end, c); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace ionread
