#include "darelab/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "darelab/error.hpp"

namespace darelab {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& params) {
  Tape tape;
  Tape::NoGradScope no_grad(tape);
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  const double v = f(tape, vars).value().item();
  if (!std::isfinite(v)) throw NumericalError("grad_check: function evaluated to a non-finite value");
  return v;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor>& params, const GradCheckOptions& opts) {
  if (!(opts.eps > 0.0)) throw DomainError("grad_check: eps must be positive");

  std::vector<Tensor> tape_grads;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.parameter(p));
    Var out = f(tape, vars);
    if (!std::isfinite(out.value().item())) {
      throw NumericalError("grad_check: function evaluated to a non-finite value");
    }
    tape.backward(out);
    for (const Var& v : vars) tape_grads.push_back(tape.grad(v));
  }

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const bool declared = std::find(opts.stop_gradient_params.begin(), opts.stop_gradient_params.end(), p) !=
                          opts.stop_gradient_params.end();
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p][i];
      params[p][i] = orig + opts.eps;
      const double up = evaluate(f, params);
      params[p][i] = orig - opts.eps;
      const double down = evaluate(f, params);
      params[p][i] = orig;

      const double fd = (up - down) / (2.0 * opts.eps);
      const double tg = tape_grads[p][i];
      ++result.checked;

      double rel = 0.0;
      if (declared) {
        if (tg != 0.0) {
          rel = std::abs(tg) / std::max(std::abs(tg), opts.abs_floor);
        } else if (fd != 0.0) {
          result.intentional.push_back({p, i, tg, fd});
        }
      } else {
        rel = std::abs(tg - fd) / std::max({std::abs(tg), std::abs(fd), opts.abs_floor});
      }
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = {p, i, tg, fd};
      }
    }
  }
  return result;
}

}  // namespace darelab
