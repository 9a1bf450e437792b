#pragma once

#include <string>
#include <vector>

namespace encap {

struct GradSuiteResult {
  std::string name;
  double rel_err = 0;
  std::string worst;  // tensor with the largest error
  double seconds = 0;
  bool ok = false;
};

/// Names accepted by run_gradient_suite, in execution order.
std::vector<std::string> gradient_suite_names();

/// Central-difference checks at 64-bit for every differentiable layer, the
/// stop-gradient transport loss and a two-module toy network under the total
/// loss. `only` selects one entry; empty runs all. Unknown names throw
/// ConfigError.
std::vector<GradSuiteResult> run_gradient_suite(const std::string& only = "", double tol = 1e-4);

}  // namespace encap
