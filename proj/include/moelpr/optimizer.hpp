// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moelpr/errors.hpp"
#include "moelpr/tensor.hpp"

namespace moelpr {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

/// Adam moments, kept only for trainable parameters and keyed by name.
struct OptimizerState {
  AdamConfig cfg;
  int64_t step_count = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

/// One parameter slot for adam_step. Entries with trainable=false are left
/// bit-identical and never acquire optimizer state.
struct ParamUpdate {
  std::string name;
  Tensor* param = nullptr;
  const Tensor* grad = nullptr;  // may be null for frozen entries
  bool trainable = false;
};

/// Adam with decoupled weight decay. Frozen parameters are untouched;
/// a non-finite gradient aborts with the parameter's name.
inline void adam_step(std::vector<ParamUpdate>& updates, OptimizerState& state, double lr) {
  state.step_count += 1;
  const AdamConfig& c = state.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step_count));
  for (ParamUpdate& u : updates) {
    if (!u.trainable) continue;
    if (u.param == nullptr || u.grad == nullptr)
      throw Error("adam_step: trainable parameter '" + u.name + "' missing data");
    if (!u.grad->same_shape(*u.param))
      throw ShapeError("adam_step: gradient shape " + u.grad->shape_str() + " vs param " +
                       u.param->shape_str() + " for '" + u.name + "'");
    if (!u.grad->all_finite())
      throw NumericError("adam_step: non-finite gradient for parameter '" + u.name + "'");
    Tensor& m = state.m.try_emplace(u.name, u.param->rows, u.param->cols).first->second;
    Tensor& v = state.v.try_emplace(u.name, u.param->rows, u.param->cols).first->second;
    for (int64_t i = 0; i < u.param->numel(); ++i) {
      const double g = u.grad->data[i];
      m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * g;
      v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      double& p = u.param->data[i];
      p -= lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * p);
    }
  }
}

/// Linear warmup to base_lr over warmup_steps, then cosine decay to min_lr
/// at total_steps.
inline double cosine_lr(int64_t step, int64_t total_steps, double base_lr,
                        int64_t warmup_steps, double min_lr = 0.0) {
  if (total_steps < warmup_steps)
    throw ConfigError("cosine_lr: total_steps " + std::to_string(total_steps) +
                      " < warmup_steps " + std::to_string(warmup_steps));
  if (step < 0 || step > total_steps)
    throw ConfigError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(total_steps) + "]");
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return base_lr;
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(M_PI * t));
}

}  // namespace moelpr
