#include "darelab/dare/optim.hpp"

#include <cmath>
#include <string>

#include "darelab/error.hpp"

namespace darelab {

AdamState AdamState::zeros_like(std::span<Tensor* const> params) {
  AdamState s;
  for (const Tensor* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

double global_norm(std::span<const Tensor> grads) {
  double ss = 0.0;
  for (const auto& g : grads) {
    for (double x : g.data()) ss += x * x;
  }
  return std::sqrt(ss);
}

double adam_clip_update(std::span<Tensor* const> params, std::span<Tensor> grads, AdamState& state, double lr,
                        const AdamConfig& cfg) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam: params, grads and state disagree in count");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    require_same_shape(*params[i], grads[i], "adam");
    if (!grads[i].all_finite()) throw NumericalError("adam: non-finite gradient in tensor " + std::to_string(i));
  }
  const double norm = global_norm(grads);
  if (cfg.max_norm > 0.0 && norm > cfg.max_norm) {
    const double s = cfg.max_norm / norm;
    for (auto& g : grads) {
      for (double& x : g.data()) x *= s;
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  return norm;
}

double warmup_lr(double base_lr, std::uint64_t iter, std::uint64_t warmup) {
  if (warmup == 0 || iter >= warmup) return base_lr;
  return base_lr * static_cast<double>(iter) / static_cast<double>(warmup);
}

}  // namespace darelab
