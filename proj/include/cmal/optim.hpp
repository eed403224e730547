#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cmal/model.hpp"

namespace cmal {

enum class LrSchedule { Constant, WarmupInvSqrt };

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  LrSchedule schedule = LrSchedule::Constant;
  std::size_t warmup_steps = 0;
};

/// Adam over a model's named parameters.
///
/// With WarmupInvSqrt the rate ramps linearly to `lr` over `warmup_steps`
/// and then decays as sqrt(warmup / step).
class Adam {
 public:
  Adam(NamedParameters& params, AdamConfig config);

  void step();
  double current_lr() const;
  std::size_t steps() const { return step_; }
  /// Global gradient norm observed at the most recent step (before clipping).
  double last_grad_norm() const { return last_norm_; }

 private:
  NamedParameters* params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
  double last_norm_ = 0.0;
};

}  // namespace cmal
