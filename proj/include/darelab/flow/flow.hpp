#pragma once

#include <cstddef>
#include <cstdint>

#include "darelab/model/model.hpp"
#include "darelab/numerics/tape.hpp"

namespace darelab {

struct FlowPoint {
  Tensor x;    // clean grid
  Tensor eps;  // noise grid
  double t = 0.0;
  Tensor x_t;  // (1 - t) x + t eps
  Tensor v;    // eps - x
};

FlowPoint make_flow_point(Tensor x, Tensor eps, double t);

// Elementwise (u - v)^2.
Tensor fm_residual(const Tensor& u, const Tensor& v);
double fm_loss(const Tensor& u, const Tensor& v);
Var fm_residual(Var u, const Tensor& v);
Var fm_loss(Var u, const Tensor& v);

// u_uncond + s (u_cond - u_uncond). s == 1 and s == 0 return the matching
// branch unchanged.
Tensor cfg_combine(const Tensor& u_cond, const Tensor& u_uncond, double s);

struct SamplerConfig {
  std::size_t steps = 40;
  double cfg_scale = 5.0;
  std::uint64_t seed = 0;
};

// Forward-call counters, for checking which guidance branches ran.
struct SamplerStats {
  std::size_t cond_calls = 0;
  std::size_t uncond_calls = 0;
};

// Integrates from t = 1 (pure noise drawn from cfg.seed) down to t = 0 with
// uniform Euler steps. With s == 1 only the conditional branch is evaluated,
// with s == 0 only the unconditional one. NumericalError names the step
// where the state stopped being finite.
Tensor euler_sample(const ModelParams& params, const Caption& caption, const SamplerConfig& cfg,
                    SamplerStats* stats = nullptr);

}  // namespace darelab
