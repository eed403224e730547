#include "cmal/optim.hpp"

#include <algorithm>
#include <cmath>

namespace cmal {

Adam::Adam(NamedParameters& params, AdamConfig config) : params_(&params), config_(config) {
  for (const auto& [name, t] : params) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

double Adam::current_lr() const {
  if (config_.schedule == LrSchedule::Constant || config_.warmup_steps == 0) return config_.lr;
  const double s = static_cast<double>(std::max<std::size_t>(step_, 1));
  const double w = static_cast<double>(config_.warmup_steps);
  return config_.lr * std::min(s / w, std::sqrt(w / s));
}

void Adam::step() {
  ++step_;
  double norm_sq = 0.0;
  for (auto& [name, t] : *params_)
    if (t.has_grad())
      for (double g : t.grad()) norm_sq += g * g;
  last_norm_ = std::sqrt(norm_sq);
  const double clip =
      config_.clip_norm > 0.0 && last_norm_ > config_.clip_norm ? config_.clip_norm / last_norm_ : 1.0;
  const double lr = current_lr();
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_->size(); ++i) {
    Tensor& t = (*params_)[i].second;
    if (!t.has_grad()) continue;
    auto data = t.data();
    auto grad = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j] * clip;
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
      data[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
    }
  }
}

}  // namespace cmal
