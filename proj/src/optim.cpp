#include "seqrl/optim.hpp"

#include <cmath>

namespace seqrl {

AdamState init_adam(const Network& params) {
  return AdamState{zeros_like(params), zeros_like(params), 0};
}

void adam_update(Matrix& param, const Matrix& grad, Matrix& first, Matrix& second, std::int64_t step,
                 const AdamConfig& config) {
  require(param.rows() == grad.rows() && param.cols() == grad.cols() && first.size() == param.size() &&
              second.size() == param.size(),
          ErrorCategory::Shape, "adam_update shape mismatch");
  require(step >= 1, ErrorCategory::Config, "adam step index starts at 1");
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  first = config.beta1 * first + (1.0 - config.beta1) * grad;
  second = config.beta2 * second + (1.0 - config.beta2) * grad.cwiseProduct(grad);
  param.array() -= config.learning_rate * (first.array() / c1) / ((second.array() / c2).sqrt() + config.epsilon);
}

void adam_step(Network& params, const Network& grads, AdamState& state, const AdamConfig& config) {
  const auto p = param_list(params);
  const auto g = param_list(grads);
  const auto m = param_list(state.first);
  const auto v = param_list(state.second);
  require(p.size() == g.size() && p.size() == m.size() && p.size() == v.size(), ErrorCategory::Shape,
          "adam_step parameter sets differ");
  for (const Matrix* grad : g) {
    if (!grad->allFinite()) fail(ErrorCategory::Numeric, "non-finite gradient; update aborted");
  }
  ++state.step;
  for (std::size_t i = 0; i < p.size(); ++i) adam_update(*p[i], *g[i], *m[i], *v[i], state.step, config);
}

}  // namespace seqrl
