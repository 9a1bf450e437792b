#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "encap/tensor.hpp"

namespace encap::detail {

inline void same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw ContractError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                        dtype_name(b.dtype()) + ")");
}

inline std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

/// (outer, n, inner) decomposition around one axis.
struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t n = 1;
  std::int64_t inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::int64_t axis) {
  AxisSplit s;
  const auto r = static_cast<std::int64_t>(shape.size());
  for (std::int64_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.n = shape[axis];
  for (std::int64_t d = axis + 1; d < r; ++d) s.inner *= shape[d];
  return s;
}

inline bool wants(const Tensor& t) { return needs_grad(t.impl()); }

/// Runs fn(begin, end) over [0, n), split into chunks across ENCAP_THREADS
/// worker threads (default 1). Chunk boundaries depend only on n and the
/// thread count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);
int thread_count();

}  // namespace encap::detail
