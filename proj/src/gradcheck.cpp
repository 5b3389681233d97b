#include "gaitforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace gaitforge {

GradCheckReport grad_check(const GradCheckFn& fn,
                           std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& opts) {
  check(opts.epsilon >= 1e-7 && opts.epsilon <= 1e-4,
        "grad_check: epsilon must lie in [1e-7, 1e-4]");
  check(!inputs.empty(), "grad_check: no inputs");

  // Analytic pass.
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    for (auto& t : inputs) tape.watch(t);
    Tensor<double> loss = fn(inputs, &tape);
    check(loss.defined() && loss.numel() == 1,
          "grad_check: fn must return a scalar loss");
    tape.backward(loss);
    for (auto& t : inputs) analytic.push_back(t.grad());
  }

  GradCheckReport rep;
  Rng rng(opts.seed);
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor<double>& t = inputs[ti];
    int64_t n = t.numel();
    std::vector<int64_t> coords;
    if (n <= opts.max_coords) {
      coords.resize(n);
      for (int64_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      auto perm = rng.permutation(n);
      coords.assign(perm.begin(), perm.begin() + opts.max_coords);
    }
    double* p = t.data();
    for (int64_t c : coords) {
      double saved = p[c];
      p[c] = saved + opts.epsilon;
      double f_plus = fn(inputs, nullptr).value();
      p[c] = saved - opts.epsilon;
      double f_minus = fn(inputs, nullptr).value();
      p[c] = saved;
      double numeric = (f_plus - f_minus) / (2.0 * opts.epsilon);
      double a = analytic[ti][c];
      double denom = std::max({std::fabs(a), std::fabs(numeric),
                               opts.denom_floor});
      double rel = std::fabs(a - numeric) / denom;
      rep.max_relative_error = std::max(rep.max_relative_error, rel);
      ++rep.coords_checked;
    }
  }
  rep.pass = rep.max_relative_error < opts.tolerance;
  return rep;
}

}  // namespace gaitforge
