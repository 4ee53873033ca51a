#include "darelab/flow/flow.hpp"

#include "darelab/error.hpp"
#include "darelab/numerics/rng.hpp"

namespace darelab {

FlowPoint make_flow_point(Tensor x, Tensor eps, double t) {
  require_same_shape(x, eps, "make_flow_point");
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("make_flow_point: t=" + std::to_string(t) + " outside [0,1]");
  FlowPoint p;
  p.t = t;
  p.x_t = Tensor(x.shape());
  p.v = Tensor(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    p.x_t[i] = (1.0 - t) * x[i] + t * eps[i];
    p.v[i] = eps[i] - x[i];
  }
  p.x = std::move(x);
  p.eps = std::move(eps);
  return p;
}

Tensor fm_residual(const Tensor& u, const Tensor& v) {
  require_same_shape(u, v, "fm_residual");
  Tensor r(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = u[i] - v[i];
    r[i] = d * d;
  }
  return r;
}

double fm_loss(const Tensor& u, const Tensor& v) { return mean(fm_residual(u, v)); }

Var fm_residual(Var u, const Tensor& v) {
  require_same_shape(u.value(), v, "fm_residual");
  return square(sub(u, u.tape().constant(v)));
}

Var fm_loss(Var u, const Tensor& v) { return mean(fm_residual(u, v)); }

Tensor cfg_combine(const Tensor& u_cond, const Tensor& u_uncond, double s) {
  require_same_shape(u_cond, u_uncond, "cfg_combine");
  if (s == 1.0) return u_cond;
  if (s == 0.0) return u_uncond;
  Tensor out(u_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = u_uncond[i] + s * (u_cond[i] - u_uncond[i]);
  return out;
}

Tensor euler_sample(const ModelParams& params, const Caption& caption, const SamplerConfig& cfg,
                    SamplerStats* stats) {
  if (cfg.steps == 0) throw ConfigError("euler_sample: steps must be at least 1");
  Rng rng(cfg.seed);
  Tensor x = gaussian(rng, params.dims.grid.shape());
  const Condition cond = Condition::full(caption);
  const Condition uncond = Condition::all_null(caption);
  const double dt = 1.0 / static_cast<double>(cfg.steps);
  const bool need_cond = cfg.cfg_scale != 0.0;
  const bool need_uncond = cfg.cfg_scale != 1.0;
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) * dt;
    Tensor u_c, u_u;
    if (need_cond) {
      u_c = forward(params, x, t, cond).u;
      if (stats) ++stats->cond_calls;
    }
    if (need_uncond) {
      u_u = forward(params, x, t, uncond).u;
      if (stats) ++stats->uncond_calls;
    }
    const Tensor u = !need_uncond ? u_c : !need_cond ? u_u : cfg_combine(u_c, u_u, cfg.cfg_scale);
    axpy(x, u, -dt);
    if (!x.all_finite()) {
      throw NumericalError("euler_sample diverged at step " + std::to_string(k + 1) + " of " +
                           std::to_string(cfg.steps) + " (t=" + std::to_string(t) + ")");
    }
  }
  return x;
}

}  // namespace darelab
