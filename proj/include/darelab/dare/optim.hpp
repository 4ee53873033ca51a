#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "darelab/numerics/tensor.hpp"

namespace darelab {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_norm = 1.0;  // global gradient-norm clip
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  static AdamState zeros_like(std::span<Tensor* const> params);
};

double global_norm(std::span<const Tensor> grads);

// Clips grads to max_norm (in place), then takes one bias-corrected Adam
// step. Returns the norm before clipping. NumericalError on non-finite grads.
double adam_clip_update(std::span<Tensor* const> params, std::span<Tensor> grads, AdamState& state, double lr,
                        const AdamConfig& cfg);

// Linear warmup to base_lr over warmup iterations (1-based iter).
double warmup_lr(double base_lr, std::uint64_t iter, std::uint64_t warmup);

}  // namespace darelab
