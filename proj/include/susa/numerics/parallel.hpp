#pragma once

#include <cstddef>
#include <functional>

namespace susa {

/// Number of worker threads kernels may use. Defaults to 1.
std::size_t worker_count();
void set_worker_count(std::size_t workers);

/// Splits [0, n) into at most worker_count() contiguous chunks and runs
/// fn(chunk_index, begin, end) on each. Chunk boundaries depend only on n and
/// the worker count, so per-chunk partial results reduced in chunk order are
/// reproducible for a fixed worker count.
void parallel_chunks(std::size_t n,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

std::size_t chunk_count(std::size_t n);

}  // namespace susa
