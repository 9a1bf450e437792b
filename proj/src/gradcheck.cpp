#include "encap/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace encap {

GradcheckReport gradcheck(const std::function<Tensor()>& loss, const std::vector<Tensor>& inputs,
                          const std::vector<std::string>& names, GradcheckOptions opts) {
  for (const auto& t : inputs)
    if (t.dtype() != DType::f64) throw ContractError("gradcheck needs 64-bit inputs");
  std::vector<Tensor> leaves = inputs;
  for (auto& t : leaves) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  loss().backward();

  GradcheckReport report;
  NoGradGuard ng;
  struct Sums {
    double diff2 = 0, a2 = 0, n2 = 0;
  };
  std::vector<Sums> sums(leaves.size());
  double scale = 0;
  for (std::size_t ti = 0; ti < leaves.size(); ++ti) {
    auto& t = leaves[ti];
    const Tensor g = t.grad();
    const auto n = t.numel();
    const std::int64_t step =
        opts.max_probes > 0 && n > opts.max_probes ? (n + opts.max_probes - 1) / opts.max_probes : 1;
    auto& [diff2, a2, n2] = sums[ti];
    auto x = t.data<double>();
    for (std::int64_t i = 0; i < n; i += step) {
      const double orig = x[i];
      x[i] = orig + opts.h;
      const double fp = loss().item();
      x[i] = orig - opts.h;
      const double fm = loss().item();
      x[i] = orig;
      const double num = (fp - fm) / (2 * opts.h);
      const double ana = g.defined() ? g.data<double>()[i] : 0.0;
      diff2 += (ana - num) * (ana - num);
      a2 += ana * ana;
      n2 += num * num;
    }
    scale = std::max({scale, std::sqrt(a2), std::sqrt(n2)});
  }
  for (std::size_t ti = 0; ti < leaves.size(); ++ti) {
    const auto& [diff2, a2, n2] = sums[ti];
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), opts.zero_floor * scale});
    const double err = denom > 0 ? std::sqrt(diff2) / denom : std::sqrt(diff2);
    if (err > report.max_rel_err || report.worst.empty()) {
      report.max_rel_err = err;
      report.worst = ti < names.size() ? names[ti] : "input " + std::to_string(ti);
    }
  }
  report.ok = report.max_rel_err < opts.tol;
  for (auto& t : leaves) t.zero_grad();
  return report;
}

}  // namespace encap
