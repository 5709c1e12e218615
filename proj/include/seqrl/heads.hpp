#pragma once

#include <span>
#include <string>

#include "seqrl/common.hpp"
#include "seqrl/random.hpp"

namespace seqrl {

/// Fully connected output layer over the real items (the pad item has no column).
struct LinearHead {
  Matrix weight;  // hidden x n_items
  Matrix bias;    // 1 x n_items

  int n_items() const { return static_cast<int>(weight.cols()); }
  int hidden_dim() const { return static_cast<int>(weight.rows()); }
};

template <class Head, class Fn>
void for_each_head_param(Head& head, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".weight", head.weight);
  fn(prefix + ".bias", head.bias);
}

LinearHead init_head(int hidden_dim, int n_items, Rng& rng);

/// Activation applied on top of the Q head's affine map.
enum class QActivation { Identity, Relu };

std::string_view to_string(QActivation activation);
QActivation parse_q_activation(std::string_view text);

/// y = s W + bias for a single state.
Vector supervised_logits(const LinearHead& head, const Vector& state);
/// Row-wise logits for a batch of states (B x hidden).
Matrix supervised_logits(const LinearHead& head, const Matrix& states);

Vector q_values(const LinearHead& head, const Vector& state, QActivation activation = QActivation::Identity);
Matrix q_values(const LinearHead& head, const Matrix& states, QActivation activation = QActivation::Identity);

/// Q(s, a) for one action per row, without materialising the full Q matrix.
/// `pre_activation` receives the affine value when non-null.
Vector q_taken(const LinearHead& head, const Matrix& states, std::span<const ItemId> actions,
               QActivation activation, Vector* pre_activation = nullptr);

double apply_activation(QActivation activation, double pre);
double activation_slope(QActivation activation, double pre);

struct CrossEntropy {
  double loss = 0.0;
  Vector grad;  // softmax(logits) - onehot(action)
};

/// -log softmax(logits)[action], stable under large logits.
CrossEntropy cross_entropy_loss(const Vector& logits, ItemId action);

/// Per-row losses; if `grad` is non-null it receives softmax - onehot per row.
Vector cross_entropy_batch(const Matrix& logits, std::span<const ItemId> actions, Matrix* grad);

/// Index of the largest entry; ties resolve to the lowest index.
Eigen::Index argmax_lowest(const Vector& values);

/// One-step double Q-learning target. The selector picks a* = argmax, the
/// evaluator supplies the bootstrapped value; terminal transitions return r.
double double_q_target(double reward, double gamma, const Vector& q_next_selector, const Vector& q_next_evaluator,
                       bool terminal);

inline double td_loss(double q_pred, double target) { return (target - q_pred) * (target - q_pred); }
inline double td_loss_grad(double q_pred, double target) { return -2.0 * (target - q_pred); }

inline double sqn_loss(double ce, double td) { return ce + td; }

/// Critic-weighted supervised loss; `q_detached` carries no gradient.
inline double sac_actor_loss(double ce, double q_detached) { return ce * q_detached; }

}  // namespace seqrl
