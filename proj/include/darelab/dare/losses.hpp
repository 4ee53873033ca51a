#pragma once

#include <cstddef>
#include <optional>
#include <string_view>
#include <vector>

#include "darelab/flow/flow.hpp"
#include "darelab/model/model.hpp"
#include "darelab/registry/registry.hpp"

namespace darelab {

enum class PwMode { two_sigma_minus_one, sigma_only };

std::string_view pw_mode_name(PwMode mode);
PwMode parse_pw_mode(std::string_view name);

// Elementwise 2 sigmoid(raw) - 1 (range [0, 1)) or sigmoid(raw) (range
// [0.5, 1)). DomainError on negative or NaN input.
Tensor pw_map(const Tensor& raw, PwMode mode);

struct DrCfgConfig {
  double rho = 0.15;
  PwMode pw_mode = PwMode::two_sigma_minus_one;
  void validate() const;
};

struct SraConfig {
  double epsilon_std = 1e-8;
  void validate() const;
};

struct ScheduleConfig {
  double hbar = 0.0;
  double slope = 0.001;
  void validate() const;
};

// max(0, sigmoid(-slope (iter - hbar))).
double alpha(double iter, const ScheduleConfig& cfg);

// mean(pw * (u - v)^2) with pw held constant.
Var weighted_fm_loss(Var u, const Tensor& v, const Tensor& pw);

struct DrResult {
  Var loss;
  Tensor pw;
  std::vector<std::size_t> kept;  // low-semantic positions left un-nulled in c'
  bool fallback = false;          // no seen tokens: loss is plain L_fm
};

// u is the live, gradient-tracked prediction for fp.x_t under the full
// condition. The c' prediction is made without gradient from params. A
// non-null pw_override replaces the computed weights.
DrResult dr_cfg_loss(const ModelParams& params, Var u, const FlowPoint& fp, const Condition& cond,
                     const Registry& registry, const DrCfgConfig& cfg, const Tensor* pw_override = nullptr);

// Per-position registry weights for SRA: unseen tokens take the largest seen
// weight in the caption. Empty when nothing in the caption has been seen.
std::vector<double> caption_weights(const Registry& registry, const Condition& cond);

// W_j / max(std(W), epsilon_std), population standard deviation.
std::vector<double> sra_factors(const std::vector<double>& weights, const SraConfig& cfg);

struct SraResult {
  Var loss;
  std::vector<double> factors;
  bool skipped = false;  // nothing seen: zero contribution
};

// clean_captures come from the gradient-free t = 0 pass. live holds the
// text-attention slices of the tracked pass at time t. The loss is the sum
// over layers of mean((stopgrad(A'_text(0) V_text(0)) - A_text(t) V_text(t))^2).
SraResult sra_loss(const std::vector<AttnCapture>& clean_captures, const ForwardGraph& live, const Condition& cond,
                   const Registry& registry, const SraConfig& cfg);

// Same loss with the column factors given directly.
Var sra_loss_with_factors(const std::vector<AttnCapture>& clean_captures, const ForwardGraph& live,
                          const std::vector<double>& factors);

}  // namespace darelab
