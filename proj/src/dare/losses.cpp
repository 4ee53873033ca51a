#include "darelab/dare/losses.hpp"

#include <algorithm>
#include <cmath>

#include "darelab/error.hpp"

namespace darelab {

std::string_view pw_mode_name(PwMode mode) {
  return mode == PwMode::two_sigma_minus_one ? "two_sigma_minus_one" : "sigma_only";
}

PwMode parse_pw_mode(std::string_view name) {
  if (name == "two_sigma_minus_one") return PwMode::two_sigma_minus_one;
  if (name == "sigma_only") return PwMode::sigma_only;
  throw ConfigError("unknown pw_map mode '" + std::string(name) + "'");
}

Tensor pw_map(const Tensor& raw, PwMode mode) {
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!(raw[i] >= 0.0)) {
      throw DomainError("pw_map: input " + std::to_string(raw[i]) + " at index " + std::to_string(i) +
                        " is not a non-negative number");
    }
  }
  // Both maps approach 1 but never reach it; past raw ~ 37 the double
  // result would round to 1, so it is held at the last value below.
  const double below_one = std::nextafter(1.0, 0.0);
  Tensor out(raw.shape());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    // 2 sigmoid(x) - 1 == tanh(x / 2), without the cancellation near 0.
    const double p = mode == PwMode::two_sigma_minus_one ? std::tanh(0.5 * raw[i]) : sigmoid(raw[i]);
    out[i] = std::min(p, below_one);
  }
  return out;
}

void DrCfgConfig::validate() const {
  if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("rho must lie in (0, 1)");
}

void SraConfig::validate() const {
  if (!(epsilon_std > 0.0)) throw ConfigError("epsilon_std must be positive");
}

void ScheduleConfig::validate() const {
  if (!(hbar >= 0.0)) throw ConfigError("hbar must be non-negative");
  if (!(slope > 0.0)) throw ConfigError("slope must be positive");
}

double alpha(double iter, const ScheduleConfig& cfg) {
  if (!(iter >= 0.0)) throw DomainError("alpha: iteration must be non-negative");
  return std::max(0.0, sigmoid(-cfg.slope * (iter - cfg.hbar)));
}

Var weighted_fm_loss(Var u, const Tensor& v, const Tensor& pw) {
  require_same_shape(u.value(), pw, "weighted_fm_loss");
  Tape& tape = u.tape();
  return mean(mul(tape.constant(pw), fm_residual(u, v)));
}

DrResult dr_cfg_loss(const ModelParams& params, Var u, const FlowPoint& fp, const Condition& cond,
                     const Registry& registry, const DrCfgConfig& cfg, const Tensor* pw_override) {
  cfg.validate();
  DrResult r;
  if (pw_override != nullptr) {
    r.pw = *pw_override;
  } else {
    r.kept = select_low_semantic(registry, cond, cfg.rho);
    if (r.kept.empty()) {
      r.fallback = true;
      r.loss = fm_loss(u, fp.v);
      return r;
    }
    std::vector<bool> keep(cond.size(), false);
    for (std::size_t i : r.kept) keep[i] = true;
    Condition low = cond;
    for (std::size_t i = 0; i < cond.size(); ++i) low.null_flags[i] = cond.null_flags[i] || !keep[i];
    const Tensor u_low = forward(params, fp.x_t, fp.t, low).u;
    r.pw = pw_map(fm_residual(fp.v, u_low), cfg.pw_mode);
  }
  r.loss = weighted_fm_loss(u, fp.v, r.pw);
  return r;
}

std::vector<double> caption_weights(const Registry& registry, const Condition& cond) {
  std::vector<double> w(cond.size(), 0.0);
  std::vector<bool> seen(cond.size(), false);
  double max_seen = 0.0;
  bool any = false;
  for (std::size_t i = 0; i < cond.size(); ++i) {
    const TokenStats& st = registry.stats(cond.token_ids[i]);
    if (st.count == 0) continue;
    w[i] = weight(st);
    seen[i] = true;
    max_seen = any ? std::max(max_seen, w[i]) : w[i];
    any = true;
  }
  if (!any) return {};
  for (std::size_t i = 0; i < cond.size(); ++i) {
    if (!seen[i]) w[i] = max_seen;
  }
  return w;
}

std::vector<double> sra_factors(const std::vector<double>& weights, const SraConfig& cfg) {
  cfg.validate();
  if (weights.empty()) return {};
  const double n = static_cast<double>(weights.size());
  double mu = 0.0;
  for (double w : weights) mu += w;
  mu /= n;
  double var = 0.0;
  for (double w : weights) var += (w - mu) * (w - mu);
  const double sd = std::max(std::sqrt(var / n), cfg.epsilon_std);
  std::vector<double> f(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) f[i] = weights[i] / sd;
  return f;
}

Var sra_loss_with_factors(const std::vector<AttnCapture>& clean_captures, const ForwardGraph& live,
                          const std::vector<double>& factors) {
  if (live.layers.empty()) throw DimensionError("sra_loss: live pass kept no text attention");
  if (clean_captures.size() != live.layers.size()) {
    throw DimensionError("sra_loss: " + std::to_string(clean_captures.size()) + " clean captures for " +
                         std::to_string(live.layers.size()) + " live layers");
  }
  Tape& tape = live.u.tape();
  Var total;
  for (std::size_t l = 0; l < live.layers.size(); ++l) {
    const auto& lay = live.layers[l];
    const Tensor& a0 = clean_captures[l].a_text;
    const std::size_t heads = lay.a_text.size();
    if (a0.rank() != 3 || a0.dim(0) != heads) throw DimensionError("sra_loss: clean capture head count differs");
    const std::size_t nq = a0.dim(1);
    const std::size_t k = a0.dim(2);
    const Tensor& v0 = clean_captures[l].v_text;
    if (v0.rank() != 3 || v0.dim(0) != heads || v0.dim(1) != k) {
      throw DimensionError("sra_loss: clean capture V_text shape differs");
    }
    const std::size_t dh = v0.dim(2);
    if (factors.size() != k) throw DimensionError("sra_loss: factor count differs from token count");
    Var layer_sum;
    std::size_t elems = 0;
    for (std::size_t h = 0; h < heads; ++h) {
      if (lay.a_text[h].value().shape() != Shape{nq, k}) throw DimensionError("sra_loss: live attention shape differs");
      Tensor scaled({nq, k});
      const double* src = a0.data().data() + h * nq * k;
      for (std::size_t q = 0; q < nq; ++q) {
        for (std::size_t j = 0; j < k; ++j) scaled.at(q, j) = src[q * k + j] * factors[j];
      }
      // The text stream ignores x_t and t, so the clean V_text equals the live one.
      const Tensor vh({k, dh}, std::vector<double>(v0.data().begin() + static_cast<std::ptrdiff_t>(h * k * dh),
                                                   v0.data().begin() + static_cast<std::ptrdiff_t>((h + 1) * k * dh)));
      Var target = tape.constant(matmul(scaled, vh));
      Var out = matmul(lay.a_text[h], lay.v_text[h]);
      Var s = sum(square(sub(target, out)));
      layer_sum = layer_sum.valid() ? add(layer_sum, s) : s;
      elems += out.value().size();
    }
    Var layer_mean = scale(layer_sum, 1.0 / static_cast<double>(elems));
    total = total.valid() ? add(total, layer_mean) : layer_mean;
  }
  return total;
}

SraResult sra_loss(const std::vector<AttnCapture>& clean_captures, const ForwardGraph& live, const Condition& cond,
                   const Registry& registry, const SraConfig& cfg) {
  SraResult r;
  const std::vector<double> w = caption_weights(registry, cond);
  if (w.empty()) {
    r.skipped = true;
    r.loss = live.u.tape().constant(Tensor::scalar(0.0));
    return r;
  }
  r.factors = sra_factors(w, cfg);
  r.loss = sra_loss_with_factors(clean_captures, live, r.factors);
  return r;
}

}  // namespace darelab
