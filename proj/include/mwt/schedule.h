#pragma once

#include <cstdint>

namespace mwt {

/// Warmup + cosine decay learning rate schedule.
struct Schedule {
  double peak_lr = 1e-3;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
  double floor_lr = 0.0;
};

/// Linear 0->peak over warmup, cosine peak->floor until total_steps,
/// constant floor afterward. Continuous at the warmup boundary.
double lr_at(std::int64_t step, const Schedule& s);

/// base_lr * decay^(num_layers - layer); layer 0 is the embedding level,
/// layer num_layers (the top) gets multiplier 1.
double layerwise_lr(double base_lr, double decay, int layer, int num_layers);

}  // namespace mwt
