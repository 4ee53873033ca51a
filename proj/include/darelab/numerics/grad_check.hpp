#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "darelab/numerics/tape.hpp"

namespace darelab {

// Builds a scalar on the given tape from parameter leaves bound in order.
using ScalarFn = std::function<Var(Tape&, std::span<const Var> params)>;

struct GradCheckOptions {
  double eps = 1e-5;
  // Denominator floor for the relative error, so entries whose true
  // gradient is ~0 are judged on an absolute scale.
  double abs_floor = 1e-6;
  // Parameters that sit behind a declared stop-gradient. Their tape gradient
  // must be exactly zero; a nonzero finite difference is reported as an
  // intentional mismatch instead of an error.
  std::vector<std::size_t> stop_gradient_params;
};

struct GradMismatch {
  std::size_t param = 0;
  std::size_t index = 0;
  double tape_grad = 0.0;
  double fd_grad = 0.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  GradMismatch worst;
  std::size_t checked = 0;
  std::vector<GradMismatch> intentional;
};

// Central finite differences against tape gradients for every element of
// every parameter. Throws NumericalError if f evaluates to a non-finite value.
GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor>& params, const GradCheckOptions& opts = {});

}  // namespace darelab
