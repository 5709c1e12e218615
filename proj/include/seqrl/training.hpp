#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "seqrl/data.hpp"
#include "seqrl/evaluation.hpp"
#include "seqrl/model.hpp"
#include "seqrl/optim.hpp"

namespace seqrl {

enum class Variant { Sqn, Sac, QOnly, SupervisedOnly };

std::string_view to_string(Variant variant);
Variant parse_variant(std::string_view text);

/// How the SAC loss is assembled once the warm-up threshold has passed.
enum class SacLossForm {
  /// critic-weighted cross-entropy plus the TD loss of the Q head
  ActorPlusCritic,
  /// critic-weighted cross-entropy plus plain cross-entropy, no TD term
  ActorPlusSupervised,
};

std::string_view to_string(SacLossForm form);
SacLossForm parse_sac_loss_form(std::string_view text);

inline constexpr std::int64_t kNeverSwitch = std::numeric_limits<std::int64_t>::max();

struct TrainConfig {
  int batch_size = 256;
  double learning_rate = 0.01;
  RewardSchema schema{1.0, 5.0, 0.5};
  std::int64_t eval_every = 2000;
  std::int64_t sac_threshold = 5000;
  std::int64_t max_updates = 100000;
  int patience = 10;
  std::uint64_t seed = 0;
  int n_negatives = 1;
  SacLossForm sac_loss = SacLossForm::ActorPlusCritic;
  bool sac_clip_q = false;
  QActivation q_activation = QActivation::Identity;
  std::optional<std::size_t> val_event_cap;
  std::vector<int> ks{5, 10, 20};

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Replay tuples gathered column-wise for one update.
struct Batch {
  SequenceBatch states;
  SequenceBatch next_states;
  std::vector<ItemId> actions;
  std::vector<double> rewards;
  std::vector<std::uint8_t> terminal;
  std::vector<std::uint32_t> sessions;

  std::size_t size() const { return actions.size(); }
};

Batch make_batch(const ReplayBuffer& buffer, std::span<const std::size_t> indices);
Batch make_batch(std::span<const ReplayTuple> tuples, int max_len);

/// Which loss terms contribute to one gradient evaluation.
struct LossTerms {
  double ce_weight = 1.0;
  double td_weight = 1.0;
  /// Adds ce * w per example, w being the detached Q(s_t, a_t) of the online copy.
  bool critic_weighted = false;
  bool clip_q = false;
  /// Replaces the detached Q weight (unit weights reduce SAC to SQN).
  std::optional<double> fixed_weight;
  /// Unseen items per tuple trained towards a terminal zero-reward target.
  int n_negatives = 0;
};

struct LossComponents {
  double ce = 0.0;     // mean cross-entropy
  double td = 0.0;     // mean per-example TD loss (negatives included)
  double actor = 0.0;  // mean ce * w when critic weighted
  double total = 0.0;
  int online = 0;
  bool critic_weighted = false;
};

/// Double Q-learning targets: the online copy selects a* on s_{t+1}, the
/// partner copy evaluates it. Targets are plain numbers, so nothing
/// downstream can differentiate through them.
Vector td_targets(const Network& online, const Network& partner, const Batch& batch, double gamma,
                  QActivation activation);

/// Loss of `online` on the batch with fixed targets; accumulates gradients
/// into `grads`. `dropout` and `negatives` may be null (no dropout / no
/// negatives allowed).
LossComponents loss_and_gradients(const Network& online, const Batch& batch, const Vector& targets,
                                  const LossTerms& terms, QActivation activation, Rng* dropout, Rng* negatives,
                                  std::span<const std::vector<ItemId>> session_items, Network& grads);

/// Everything a training step mutates.
struct TrainState {
  DualHeadModel model;
  std::array<AdamState, 2> adam;
  std::int64_t step = 0;
  Rng coinflip;
  Rng dropout;
  Rng negatives;
};

TrainState init_train_state(const EncoderConfig& encoder, const TrainConfig& config);

/// Test hooks; production steps leave everything unset.
struct StepOverrides {
  std::optional<int> online_copy;
  std::optional<double> td_weight;
  std::optional<double> sac_weight;
};

LossComponents sqn_step(TrainState& state, const Batch& batch, const TrainConfig& config,
                        const StepOverrides& overrides = {});
LossComponents sac_step(TrainState& state, const Batch& batch, const TrainConfig& config,
                        const StepOverrides& overrides = {});
LossComponents q_only_step(TrainState& state, const Batch& batch, const TrainConfig& config,
                           std::span<const std::vector<ItemId>> session_items, const StepOverrides& overrides = {});
LossComponents supervised_step(TrainState& state, const Batch& batch, const TrainConfig& config,
                               const StepOverrides& overrides = {});
LossComponents train_step(TrainState& state, Variant variant, const Batch& batch, const TrainConfig& config,
                          std::span<const std::vector<ItemId>> session_items, const StepOverrides& overrides = {});

struct MetricRecord {
  std::int64_t step = 0;
  std::string split;
  std::string metric;
  double value = 0.0;

  bool operator==(const MetricRecord&) const = default;
};

nlohmann::json to_json(const MetricRecord& record);
MetricRecord metric_record_from_json(const nlohmann::json& j);
std::string to_jsonl(const std::vector<MetricRecord>& records);

RankingHead ranking_head(Variant variant);

/// Shuffled-epoch training with periodic validation, best-checkpoint
/// selection (purchase NDCG@10, ties by click NDCG@10), early stopping and
/// exact resume.
class Trainer {
 public:
  Trainer(const EncoderConfig& encoder, const TrainConfig& config, Variant variant, const ReplayBuffer& train,
          const SessionSet& validation);

  /// Runs until finished, or until the update counter reaches `stop_at`.
  void run(std::optional<std::int64_t> stop_at = std::nullopt);

  bool finished() const { return finished_; }
  bool early_stopped() const { return early_stopped_; }
  std::int64_t updates() const { return state_.step; }

  const TrainState& state() const { return state_; }
  const std::vector<MetricRecord>& history() const { return history_; }
  /// Model with the best validation score so far (current model if never evaluated).
  const DualHeadModel& best_model() const { return has_best_ ? best_model_ : state_.model; }
  const std::optional<MetricsReport>& best_validation() const { return best_report_; }

  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

  std::function<void(const MetricRecord&)> on_record;

 private:
  void evaluate();
  void record(std::int64_t step, const std::string& split, const std::string& metric, double value);
  std::span<const std::size_t> next_indices();

  EncoderConfig encoder_;
  TrainConfig config_;
  Variant variant_;
  const ReplayBuffer& train_;
  const SessionSet& validation_;

  TrainState state_;
  Rng shuffle_;
  std::vector<std::size_t> permutation_;
  std::size_t cursor_ = 0;
  std::int64_t epoch_ = 0;

  DualHeadModel best_model_;
  bool has_best_ = false;
  std::optional<MetricsReport> best_report_;
  std::array<double, 2> best_score_{-1.0, -1.0};
  int evals_without_improvement_ = 0;
  std::int64_t last_eval_step_ = -1;
  bool finished_ = false;
  bool early_stopped_ = false;

  std::array<double, 4> loss_sums_{};  // ce, td, actor, total
  std::int64_t loss_count_ = 0;
  std::vector<MetricRecord> history_;
};

}  // namespace seqrl
