#include "mwt/schedule.h"

#include <cmath>

#include "mwt/tensor.h"

namespace mwt {

double lr_at(std::int64_t step, const Schedule& s) {
  tcheck(step >= 0, "lr_at: negative step");
  tcheck(s.warmup_steps < s.total_steps, "lr_at: warmup_steps must be < total_steps");
  tcheck(s.floor_lr >= 0.0, "lr_at: negative floor_lr");

  if (step <= s.warmup_steps) {
    if (s.warmup_steps == 0) return s.peak_lr;
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (step >= s.total_steps) return s.floor_lr;
  double progress = static_cast<double>(step - s.warmup_steps) /
                    static_cast<double>(s.total_steps - s.warmup_steps);
  return s.floor_lr + (s.peak_lr - s.floor_lr) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

double layerwise_lr(double base_lr, double decay, int layer, int num_layers) {
  tcheck(decay > 0.0 && decay <= 1.0, "layerwise_lr: decay must be in (0,1]");
  tcheck(layer >= 0 && layer <= num_layers, "layerwise_lr: layer out of range");
  return base_lr * std::pow(decay, num_layers - layer);
}

}  // namespace mwt
