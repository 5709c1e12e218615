#include "seqrl/heads.hpp"

#include <cmath>

namespace seqrl {

LinearHead init_head(int hidden_dim, int n_items, Rng& rng) {
  require(hidden_dim > 0 && n_items > 0, ErrorCategory::Config, "head dims must be > 0");
  LinearHead head;
  head.weight.resize(hidden_dim, n_items);
  const double bound = std::sqrt(6.0 / static_cast<double>(hidden_dim + n_items));
  for (Eigen::Index j = 0; j < head.weight.cols(); ++j)
    for (Eigen::Index i = 0; i < head.weight.rows(); ++i) head.weight(i, j) = (2.0 * uniform01(rng) - 1.0) * bound;
  head.bias = Matrix::Zero(1, n_items);
  return head;
}

std::string_view to_string(QActivation activation) {
  return activation == QActivation::Identity ? "identity" : "relu";
}

QActivation parse_q_activation(std::string_view text) {
  if (text == "identity") return QActivation::Identity;
  if (text == "relu") return QActivation::Relu;
  fail(ErrorCategory::Config, "unknown q activation '" + std::string(text) + "'");
}

double apply_activation(QActivation activation, double pre) {
  return activation == QActivation::Relu ? std::max(pre, 0.0) : pre;
}

double activation_slope(QActivation activation, double pre) {
  if (activation == QActivation::Relu) return pre > 0.0 ? 1.0 : 0.0;
  return 1.0;
}

namespace {

void check_state(const LinearHead& head, Eigen::Index cols) {
  require(cols == head.weight.rows(), ErrorCategory::Shape,
          "state dim " + std::to_string(cols) + " != head input dim " + std::to_string(head.weight.rows()));
}

}  // namespace

Vector supervised_logits(const LinearHead& head, const Vector& state) {
  check_state(head, state.size());
  return head.weight.transpose() * state + head.bias.row(0).transpose();
}

Matrix supervised_logits(const LinearHead& head, const Matrix& states) {
  check_state(head, states.cols());
  Matrix out = states * head.weight;
  out.rowwise() += head.bias.row(0);
  return out;
}

Vector q_values(const LinearHead& head, const Vector& state, QActivation activation) {
  Vector q = supervised_logits(head, state);
  if (activation != QActivation::Identity) q = q.unaryExpr([&](double v) { return apply_activation(activation, v); });
  return q;
}

Matrix q_values(const LinearHead& head, const Matrix& states, QActivation activation) {
  Matrix q = supervised_logits(head, states);
  if (activation != QActivation::Identity) q = q.unaryExpr([&](double v) { return apply_activation(activation, v); });
  return q;
}

Vector q_taken(const LinearHead& head, const Matrix& states, std::span<const ItemId> actions, QActivation activation,
               Vector* pre_activation) {
  check_state(head, states.cols());
  require(static_cast<Eigen::Index>(actions.size()) == states.rows(), ErrorCategory::Shape,
          "one action per state required");
  Vector out(states.rows());
  if (pre_activation) pre_activation->resize(states.rows());
  for (Eigen::Index b = 0; b < states.rows(); ++b) {
    const ItemId a = actions[static_cast<std::size_t>(b)];
    require(a >= 0 && a < head.n_items(), ErrorCategory::Shape, "action outside the item range");
    const double pre = states.row(b).dot(head.weight.col(a)) + head.bias(0, a);
    if (pre_activation) (*pre_activation)(b) = pre;
    out(b) = apply_activation(activation, pre);
  }
  return out;
}

CrossEntropy cross_entropy_loss(const Vector& logits, ItemId action) {
  require(action >= 0 && action < logits.size(), ErrorCategory::Shape, "action outside the logit range");
  require(logits.allFinite(), ErrorCategory::Numeric, "non-finite logits");
  const double mx = logits.maxCoeff();
  Vector p = (logits.array() - mx).exp();
  const double total = p.sum();
  p /= total;
  CrossEntropy out;
  out.loss = -(logits(action) - mx - std::log(total));
  out.grad = p;
  out.grad(action) -= 1.0;
  return out;
}

Vector cross_entropy_batch(const Matrix& logits, std::span<const ItemId> actions, Matrix* grad) {
  require(static_cast<Eigen::Index>(actions.size()) == logits.rows(), ErrorCategory::Shape,
          "one action per logit row required");
  require(logits.allFinite(), ErrorCategory::Numeric, "non-finite logits");
  Vector losses(logits.rows());
  if (grad) grad->resize(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    const ItemId a = actions[static_cast<std::size_t>(b)];
    require(a >= 0 && a < logits.cols(), ErrorCategory::Shape, "action outside the logit range");
    const auto row = logits.row(b);
    const double mx = row.maxCoeff();
    const double total = (row.array() - mx).exp().sum();
    losses(b) = -(row(a) - mx - std::log(total));
    if (grad) {
      grad->row(b) = (row.array() - mx).exp() / total;
      (*grad)(b, a) -= 1.0;
    }
  }
  return losses;
}

Eigen::Index argmax_lowest(const Vector& values) {
  require(values.size() > 0, ErrorCategory::Shape, "argmax of an empty vector");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < values.size(); ++i)
    if (values(i) > values(best)) best = i;
  return best;
}

double double_q_target(double reward, double gamma, const Vector& q_next_selector, const Vector& q_next_evaluator,
                       bool terminal) {
  require(q_next_selector.size() == q_next_evaluator.size(), ErrorCategory::Shape,
          "selector and evaluator Q vectors differ in length");
  if (terminal) return reward;
  return reward + gamma * q_next_evaluator(argmax_lowest(q_next_selector));
}

}  // namespace seqrl
