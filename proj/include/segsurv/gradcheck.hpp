// Central finite-difference verification of tape gradients (64-bit only).
#pragma once

#include "segsurv/tape.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace segsurv {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
  // Entries probed per tensor; negative probes all of them. Sampled entries are
  // drawn with a fixed seed so reports are reproducible.
  Index max_entries = -1;
  std::uint64_t seed = 7;
};

struct GradCheckEntry {
  std::string name;
  Index checked = 0;
  double max_abs_error = 0;
  double max_rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  double tolerance = 0;
  bool passed = false;
};

using ScalarFunction = std::function<Var<double>(Tape<double>&)>;

/// Compares d f / d p for every trainable parameter in params. f must build a
/// scalar on the tape it receives; it is re-run on a fresh tape per probe.
GradCheckReport grad_check(const ScalarFunction& f, ParameterSet<double>& params, const GradCheckOptions& opts = {});

/// Convenience overload over raw input tensors, named input0, input1, ...
GradCheckReport grad_check(const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>& f,
                           const std::vector<Tensor<double>>& inputs, const GradCheckOptions& opts = {});

}  // namespace segsurv
