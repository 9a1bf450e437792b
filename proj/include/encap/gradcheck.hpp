#pragma once

#include <functional>
#include <string>
#include <vector>

#include "encap/tensor.hpp"

namespace encap {

struct GradcheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  /// Probe at most this many entries per tensor (evenly strided); 0 probes all.
  std::int64_t max_probes = 0;
  /// A tensor whose gradient vanishes (for instance through a scale-invariant
  /// loss) is judged against this fraction of the largest gradient norm in
  /// the check rather than against its own roundoff.
  double zero_floor = 1e-6;
};

struct GradcheckReport {
  /// Worst per-tensor error ||analytic - numeric|| / max(||analytic||, ||numeric||,
  /// zero_floor * largest gradient norm) over the probed entries.
  double max_rel_err = 0;
  std::string worst;
  bool ok = true;
};

/// Compares reverse-mode gradients of the scalar `loss()` against central
/// differences for every tensor in `inputs` (which must be f64 leaves).
GradcheckReport gradcheck(const std::function<Tensor()>& loss, const std::vector<Tensor>& inputs,
                          const std::vector<std::string>& names = {}, GradcheckOptions opts = {});

}  // namespace encap
