#pragma once

// Central-difference gradient verification. 64-bit only: float slack would
// drown the signal, so the engine's double instantiation is mandatory here.

#include <functional>
#include <string>
#include <vector>

#include "gaitforge/tensor.hpp"

namespace gaitforge {

struct GradCheckOptions {
  double epsilon = 1e-5;        // must lie in [1e-7, 1e-4]
  double tolerance = 1e-5;      // max relative error accepted
  int64_t max_coords = 64;      // coordinates sampled per input tensor
  uint64_t seed = 7;            // coordinate sampling stream
  double denom_floor = 1e-6;    // relative-error denominator floor
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  int64_t coords_checked = 0;
  bool pass = false;
};

// `fn` must build a scalar loss from `inputs`; when `tape` is non-null every
// input is already watched on it. The same fn is replayed for the numeric
// probes with tape == nullptr.
using GradCheckFn = std::function<Tensor<double>(
    const std::vector<Tensor<double>>&, Tape<double>*)>;

GradCheckReport grad_check(const GradCheckFn& fn,
                           std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& opts = {});

}  // namespace gaitforge
