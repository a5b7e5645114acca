#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace cvrnet {

/// Worker count for intra-op parallelism. 1 (the default) runs everything
/// on the calling thread. Parallel paths only ever split loops whose
/// iterations write disjoint output slices, so results are bit-identical
/// for every worker count.
int intra_op_workers();
void set_intra_op_workers(int workers);

/// Runs fn(begin, end) over contiguous chunks of [0, n).
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  const int workers = intra_op_workers();
  if (workers <= 1 || n < 2) {
    fn(0, n);
    return;
  }
  const std::int64_t parts = std::min<std::int64_t>(workers, n);
  const std::int64_t chunk = (n + parts - 1) / parts;
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(parts - 1));
  for (std::int64_t p = 1; p < parts; ++p) {
    const std::int64_t b = p * chunk;
    const std::int64_t e = std::min(n, b + chunk);
    if (b >= e) break;
    threads.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min(n, chunk));
  for (auto& t : threads) t.join();
}

}  // namespace cvrnet
