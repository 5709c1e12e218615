#pragma once

#include <cstdint>

#include "seqrl/model.hpp"

namespace seqrl {

/// Adam with bias correction. The momentum constants are the usual
/// defaults; only the learning rate is tuned per dataset.
struct AdamConfig {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates for one parameter set plus its update count.
struct AdamState {
  Network first;
  Network second;
  std::int64_t step = 0;
};

AdamState init_adam(const Network& params);

/// One Adam update of a single array; `step` is the 1-based update index.
void adam_update(Matrix& param, const Matrix& grad, Matrix& first, Matrix& second, std::int64_t step,
                 const AdamConfig& config);

/// Updates every parameter of `params`. Throws a numeric error and leaves
/// params and moments untouched if any gradient entry is non-finite.
void adam_step(Network& params, const Network& grads, AdamState& state, const AdamConfig& config);

}  // namespace seqrl
