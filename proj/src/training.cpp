#include "seqrl/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace seqrl {

std::string_view to_string(Variant variant) {
  switch (variant) {
    case Variant::Sqn: return "sqn";
    case Variant::Sac: return "sac";
    case Variant::QOnly: return "q_only";
    case Variant::SupervisedOnly: return "supervised";
  }
  return "unknown";
}

Variant parse_variant(std::string_view text) {
  if (text == "sqn") return Variant::Sqn;
  if (text == "sac") return Variant::Sac;
  if (text == "q_only" || text == "q-only" || text == "qonly") return Variant::QOnly;
  if (text == "supervised" || text == "supervised_only") return Variant::SupervisedOnly;
  fail(ErrorCategory::Config, "unknown variant '" + std::string(text) + "'");
}

std::string_view to_string(SacLossForm form) {
  return form == SacLossForm::ActorPlusCritic ? "actor_critic" : "actor_supervised";
}

SacLossForm parse_sac_loss_form(std::string_view text) {
  if (text == "actor_critic") return SacLossForm::ActorPlusCritic;
  if (text == "actor_supervised") return SacLossForm::ActorPlusSupervised;
  fail(ErrorCategory::Config, "unknown sac loss form '" + std::string(text) + "'");
}

void TrainConfig::validate() const {
  schema.validate();
  require(batch_size > 0, ErrorCategory::Config, "batch_size must be > 0");
  require(learning_rate > 0 && std::isfinite(learning_rate), ErrorCategory::Config, "learning_rate must be > 0");
  require(eval_every > 0, ErrorCategory::Config, "eval_every must be > 0");
  require(sac_threshold >= 0, ErrorCategory::Config, "sac_threshold must be >= 0");
  require(max_updates > 0, ErrorCategory::Config, "max_updates must be > 0");
  require(patience > 0, ErrorCategory::Config, "patience must be > 0");
  require(n_negatives >= 1, ErrorCategory::Config, "n_negatives must be >= 1");
  require(!ks.empty(), ErrorCategory::Config, "ks must not be empty");
  for (int k : ks) require(k > 0, ErrorCategory::Config, "ks must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"batch_size", c.batch_size},
                      {"learning_rate", c.learning_rate},
                      {"schema", to_json(c.schema)},
                      {"eval_every", c.eval_every},
                      {"sac_threshold", c.sac_threshold},
                      {"max_updates", c.max_updates},
                      {"patience", c.patience},
                      {"seed", c.seed},
                      {"n_negatives", c.n_negatives},
                      {"sac_loss", to_string(c.sac_loss)},
                      {"sac_clip_q", c.sac_clip_q},
                      {"q_activation", to_string(c.q_activation)},
                      {"ks", c.ks}};
  j["val_event_cap"] = c.val_event_cap ? nlohmann::json(*c.val_event_cap) : nlohmann::json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.schema = reward_schema_from_json(j.at("schema"));
  c.eval_every = j.at("eval_every").get<std::int64_t>();
  c.sac_threshold = j.at("sac_threshold").get<std::int64_t>();
  c.max_updates = j.at("max_updates").get<std::int64_t>();
  c.patience = j.at("patience").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.n_negatives = j.at("n_negatives").get<int>();
  c.sac_loss = parse_sac_loss_form(j.at("sac_loss").get<std::string>());
  c.sac_clip_q = j.at("sac_clip_q").get<bool>();
  c.q_activation = parse_q_activation(j.at("q_activation").get<std::string>());
  c.ks = j.at("ks").get<std::vector<int>>();
  if (!j.at("val_event_cap").is_null()) c.val_event_cap = j.at("val_event_cap").get<std::size_t>();
  c.validate();
  return c;
}

Batch make_batch(std::span<const ReplayTuple> tuples, int max_len) {
  Batch batch{SequenceBatch(max_len), SequenceBatch(max_len), {}, {}, {}, {}};
  for (const auto& t : tuples) {
    batch.states.add(t.state, t.state_len);
    batch.next_states.add(t.next_state, t.next_state_len);
    batch.actions.push_back(t.action);
    batch.rewards.push_back(t.reward);
    batch.terminal.push_back(t.terminal ? 1 : 0);
    batch.sessions.push_back(t.session_index);
  }
  return batch;
}

Batch make_batch(const ReplayBuffer& buffer, std::span<const std::size_t> indices) {
  Batch batch{SequenceBatch(buffer.max_len), SequenceBatch(buffer.max_len), {}, {}, {}, {}};
  for (auto i : indices) {
    const auto& t = buffer.tuples.at(i);
    batch.states.add(t.state, t.state_len);
    batch.next_states.add(t.next_state, t.next_state_len);
    batch.actions.push_back(t.action);
    batch.rewards.push_back(t.reward);
    batch.terminal.push_back(t.terminal ? 1 : 0);
    batch.sessions.push_back(t.session_index);
  }
  return batch;
}

Vector td_targets(const Network& online, const Network& partner, const Batch& batch, double gamma,
                  QActivation activation) {
  const auto n = batch.size();
  Vector targets(static_cast<Eigen::Index>(n));
  for (std::size_t b = 0; b < n; ++b) targets(static_cast<Eigen::Index>(b)) = batch.rewards[b];
  if (gamma == 0.0) return targets;

  std::vector<std::size_t> rows;
  SequenceBatch next(batch.next_states.max_len);
  for (std::size_t b = 0; b < n; ++b) {
    if (batch.terminal[b]) continue;
    rows.push_back(b);
    next.add(batch.next_states.row(b), batch.next_states.lengths[b]);
  }
  if (rows.empty()) return targets;

  const Matrix selector = q_values(online.q, encode_batch(online.encoder, next), activation);
  const Matrix partner_states = encode_batch(partner.encoder, next);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Vector sel = selector.row(r).transpose();
    const Eigen::Index best = argmax_lowest(sel);
    const double evaluated =
        apply_activation(activation, partner_states.row(r).dot(partner.q.weight.col(best)) + partner.q.bias(0, best));
    targets(static_cast<Eigen::Index>(rows[i])) += gamma * evaluated;
  }
  return targets;
}

namespace {

ItemId sample_unseen(Rng& rng, int n_items, const std::vector<ItemId>& seen) {
  if (seen.size() >= static_cast<std::size_t>(n_items)) {
    fail(ErrorCategory::Sampling, "session covers every item; no negative can be sampled");
  }
  while (true) {
    const auto j = static_cast<ItemId>(uniform_index(rng, static_cast<std::uint64_t>(n_items)));
    if (!std::binary_search(seen.begin(), seen.end(), j)) return j;
  }
}

}  // namespace

LossComponents loss_and_gradients(const Network& online, const Batch& batch, const Vector& targets,
                                  const LossTerms& terms, QActivation activation, Rng* dropout, Rng* negatives,
                                  std::span<const std::vector<ItemId>> session_items, Network& grads) {
  const auto n = batch.size();
  require(n > 0, ErrorCategory::Shape, "empty batch");
  require(targets.size() == static_cast<Eigen::Index>(n), ErrorCategory::Shape, "one target per example required");
  const double inv_n = 1.0 / static_cast<double>(n);
  const auto B = static_cast<Eigen::Index>(n);

  EncoderTape tape;
  const Matrix states = encode_batch(online.encoder, batch.states, tape, dropout);
  Matrix d_states = Matrix::Zero(B, states.cols());
  LossComponents out;
  out.critic_weighted = terms.critic_weighted;

  const bool need_ce = terms.ce_weight != 0.0 || terms.critic_weighted;
  const bool need_q = terms.td_weight != 0.0 || (terms.critic_weighted && !terms.fixed_weight);
  Vector q_sa, q_pre;
  if (need_q) q_sa = q_taken(online.q, states, batch.actions, activation, &q_pre);

  if (need_ce) {
    Matrix d_logits;
    const Matrix logits = supervised_logits(online.supervised, states);
    const Vector ce = cross_entropy_batch(logits, batch.actions, &d_logits);
    Vector coef = Vector::Constant(B, terms.ce_weight);
    if (terms.critic_weighted) {
      // Stop-gradient: the weight enters only as a constant multiplier.
      Vector weight = terms.fixed_weight ? Vector::Constant(B, *terms.fixed_weight) : Vector(q_sa);
      if (terms.clip_q) weight = weight.cwiseMax(0.0);
      out.actor = ce.cwiseProduct(weight).mean();
      coef += weight;
    }
    out.ce = ce.mean();
    out.total += ce.cwiseProduct(coef).mean();
    d_logits = (coef * inv_n).asDiagonal() * d_logits;
    grads.supervised.weight.noalias() += states.transpose() * d_logits;
    grads.supervised.bias += d_logits.colwise().sum();
    d_states.noalias() += d_logits * online.supervised.weight.transpose();
  }

  if (terms.td_weight != 0.0) {
    auto& dw = grads.q.weight;
    auto& db = grads.q.bias;
    auto push = [&](Eigen::Index b, ItemId item, double g) {
      dw.col(item) += g * states.row(b).transpose();
      db(0, item) += g;
      d_states.row(b) += g * online.q.weight.col(item).transpose();
    };
    double td_sum = 0.0;
    for (Eigen::Index b = 0; b < B; ++b) {
      const double err = targets(b) - q_sa(b);
      td_sum += err * err;
      push(b, batch.actions[static_cast<std::size_t>(b)],
           terms.td_weight * -2.0 * err * inv_n * activation_slope(activation, q_pre(b)));
      for (int k = 0; k < terms.n_negatives; ++k) {
        require(negatives != nullptr, ErrorCategory::Config, "negative sampling needs a random stream");
        const auto session = batch.sessions[static_cast<std::size_t>(b)];
        require(session < session_items.size(), ErrorCategory::Shape, "tuple refers to an unknown session");
        const ItemId j = sample_unseen(*negatives, online.q.n_items(), session_items[session]);
        const double pre = states.row(b).dot(online.q.weight.col(j)) + online.q.bias(0, j);
        const double q = apply_activation(activation, pre);
        td_sum += q * q;  // target 0, no bootstrap
        push(b, j, terms.td_weight * 2.0 * q * inv_n * activation_slope(activation, pre));
      }
    }
    out.td = td_sum * inv_n;
    out.total += terms.td_weight * out.td;
  }

  encoder_backward(online.encoder, tape, d_states, grads.encoder);
  return out;
}

TrainState init_train_state(const EncoderConfig& encoder, const TrainConfig& config) {
  config.validate();
  TrainState state;
  state.model = init_model(encoder, config.seed, config.q_activation);
  state.adam = {init_adam(state.model.copy_a), init_adam(state.model.copy_b)};
  state.coinflip = make_stream(config.seed, "coinflip");
  state.dropout = make_stream(config.seed, "dropout");
  state.negatives = make_stream(config.seed, "negatives");
  return state;
}

namespace {

int draw_online(TrainState& state, const StepOverrides& overrides) {
  if (overrides.online_copy) return *overrides.online_copy;
  const double z = uniform01(state.coinflip);
  return z <= 0.5 ? 0 : 1;
}

LossComponents apply_update(TrainState& state, int online, const Batch& batch, const TrainConfig& config,
                            const LossTerms& terms, std::span<const std::vector<ItemId>> session_items) {
  require(batch.size() > 0, ErrorCategory::Shape, "empty batch");
  const Network& net = state.model.copy(online);
  const Network& partner = state.model.copy(1 - online);
  const Vector targets = terms.td_weight != 0.0
                             ? td_targets(net, partner, batch, config.schema.gamma, state.model.q_activation)
                             : Vector::Zero(static_cast<Eigen::Index>(batch.size()));
  Network grads = zeros_like(net);
  auto out = loss_and_gradients(net, batch, targets, terms, state.model.q_activation, &state.dropout,
                                &state.negatives, session_items, grads);
  adam_step(state.model.copy(online), grads, state.adam[static_cast<std::size_t>(online)],
            AdamConfig{config.learning_rate});
  out.online = online;
  ++state.step;
  return out;
}

LossTerms sqn_terms(const StepOverrides& overrides) {
  LossTerms terms;
  terms.td_weight = overrides.td_weight.value_or(1.0);
  return terms;
}

}  // namespace

LossComponents sqn_step(TrainState& state, const Batch& batch, const TrainConfig& config,
                        const StepOverrides& overrides) {
  const int online = draw_online(state, overrides);
  return apply_update(state, online, batch, config, sqn_terms(overrides), {});
}

LossComponents sac_step(TrainState& state, const Batch& batch, const TrainConfig& config,
                        const StepOverrides& overrides) {
  const int online = draw_online(state, overrides);
  // Updates 1..T use the SQN loss; update T+1 is the first actor-critic one.
  if (state.step < config.sac_threshold) return apply_update(state, online, batch, config, sqn_terms(overrides), {});
  LossTerms terms;
  terms.critic_weighted = true;
  terms.clip_q = config.sac_clip_q;
  terms.fixed_weight = overrides.sac_weight;
  if (config.sac_loss == SacLossForm::ActorPlusCritic) {
    terms.ce_weight = 0.0;
    terms.td_weight = overrides.td_weight.value_or(1.0);
  } else {
    terms.ce_weight = 1.0;
    terms.td_weight = 0.0;
  }
  return apply_update(state, online, batch, config, terms, {});
}

LossComponents q_only_step(TrainState& state, const Batch& batch, const TrainConfig& config,
                           std::span<const std::vector<ItemId>> session_items, const StepOverrides& overrides) {
  require(config.n_negatives >= 1, ErrorCategory::Config, "n_negatives must be >= 1");
  const int online = draw_online(state, overrides);
  LossTerms terms;
  terms.ce_weight = 0.0;
  terms.td_weight = overrides.td_weight.value_or(1.0);
  terms.n_negatives = config.n_negatives;
  return apply_update(state, online, batch, config, terms, session_items);
}

LossComponents supervised_step(TrainState& state, const Batch& batch, const TrainConfig& config,
                               const StepOverrides& overrides) {
  const int online = draw_online(state, overrides);
  LossTerms terms;
  terms.td_weight = 0.0;
  return apply_update(state, online, batch, config, terms, {});
}

LossComponents train_step(TrainState& state, Variant variant, const Batch& batch, const TrainConfig& config,
                          std::span<const std::vector<ItemId>> session_items, const StepOverrides& overrides) {
  switch (variant) {
    case Variant::Sqn: return sqn_step(state, batch, config, overrides);
    case Variant::Sac: return sac_step(state, batch, config, overrides);
    case Variant::QOnly: return q_only_step(state, batch, config, session_items, overrides);
    case Variant::SupervisedOnly: return supervised_step(state, batch, config, overrides);
  }
  fail(ErrorCategory::Config, "unknown variant");
}

nlohmann::json to_json(const MetricRecord& r) {
  return {{"step", r.step}, {"split", r.split}, {"metric", r.metric}, {"value", r.value}};
}

MetricRecord metric_record_from_json(const nlohmann::json& j) {
  return {j.at("step").get<std::int64_t>(), j.at("split").get<std::string>(), j.at("metric").get<std::string>(),
          j.at("value").get<double>()};
}

std::string to_jsonl(const std::vector<MetricRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

RankingHead ranking_head(Variant variant) {
  return variant == Variant::QOnly ? RankingHead::Q : RankingHead::Supervised;
}

// ------------------------------------------------------------------ Trainer

Trainer::Trainer(const EncoderConfig& encoder, const TrainConfig& config, Variant variant, const ReplayBuffer& train,
                 const SessionSet& validation)
    : encoder_(encoder), config_(config), variant_(variant), train_(train), validation_(validation) {
  config_.validate();
  encoder_.validate();
  require(train_.size() > 0, ErrorCategory::EmptyDataset, "no training tuples");
  require(train_.n_items == encoder_.n_items, ErrorCategory::Shape, "training data and encoder disagree on n_items");
  require(train_.max_len == encoder_.max_len, ErrorCategory::Shape, "training data and encoder disagree on max_len");
  state_ = init_train_state(encoder_, config_);
  shuffle_ = make_stream(config_.seed, "data");
}

void Trainer::record(std::int64_t step, const std::string& split, const std::string& metric, double value) {
  history_.push_back({step, split, metric, value});
  if (on_record) on_record(history_.back());
}

std::span<const std::size_t> Trainer::next_indices() {
  if (cursor_ >= permutation_.size()) {
    permutation_.resize(train_.size());
    std::iota(permutation_.begin(), permutation_.end(), std::size_t{0});
    shuffle_in_place(permutation_, shuffle_);
    cursor_ = 0;
    ++epoch_;
  }
  const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(config_.batch_size), permutation_.size() - cursor_);
  std::span<const std::size_t> out(permutation_.data() + cursor_, count);
  cursor_ += count;
  return out;
}

void Trainer::evaluate() {
  const auto step = state_.step;
  last_eval_step_ = step;
  if (loss_count_ > 0) {
    const double n = static_cast<double>(loss_count_);
    record(step, "train", "loss/ce", loss_sums_[0] / n);
    record(step, "train", "loss/td", loss_sums_[1] / n);
    record(step, "train", "loss/actor", loss_sums_[2] / n);
    record(step, "train", "loss/total", loss_sums_[3] / n);
  }
  loss_sums_ = {};
  loss_count_ = 0;

  EvalOptions options;
  options.ks = config_.ks;
  options.event_cap = config_.val_event_cap;
  const auto report =
      rolling_evaluate(state_.model.copy_a, ranking_head(variant_), state_.model.q_activation, validation_, options);
  for (const auto& [key, stats] : report.cells) record(step, "validation", key.name(), stats.mean);

  const int k = std::find(config_.ks.begin(), config_.ks.end(), 10) != config_.ks.end() ? 10 : config_.ks.back();
  const std::array<double, 2> score{report.value(Behavior::Purchase, Metric::Ndcg, k),
                                    report.value(Behavior::Click, Metric::Ndcg, k)};
  if (!has_best_ || score > best_score_) {
    best_score_ = score;
    best_model_ = state_.model;
    best_report_ = report;
    has_best_ = true;
    evals_without_improvement_ = 0;
  } else if (++evals_without_improvement_ >= config_.patience) {
    finished_ = true;
    early_stopped_ = true;
  }
}

void Trainer::run(std::optional<std::int64_t> stop_at) {
  while (!finished_) {
    if (stop_at && state_.step >= *stop_at) return;
    const auto indices = next_indices();
    const auto batch = make_batch(train_, indices);
    const auto loss = train_step(state_, variant_, batch, config_, train_.session_items);
    loss_sums_[0] += loss.ce;
    loss_sums_[1] += loss.td;
    loss_sums_[2] += loss.actor;
    loss_sums_[3] += loss.total;
    ++loss_count_;
    if (state_.step % config_.eval_every == 0) evaluate();
    if (!finished_ && state_.step >= config_.max_updates) {
      if (last_eval_step_ != state_.step) evaluate();
      finished_ = true;
    }
  }
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  nlohmann::json meta;
  meta["kind"] = "train_state";
  meta["encoder"] = to_json(encoder_);
  meta["train"] = to_json(config_);
  meta["variant"] = to_string(variant_);
  meta["step"] = state_.step;
  meta["adam_steps"] = {state_.adam[0].step, state_.adam[1].step};
  meta["rng"] = {{"coinflip", serialize_rng(state_.coinflip)},
                 {"dropout", serialize_rng(state_.dropout)},
                 {"negatives", serialize_rng(state_.negatives)},
                 {"data", serialize_rng(shuffle_)}};
  meta["permutation"] = permutation_;
  meta["cursor"] = cursor_;
  meta["epoch"] = epoch_;
  meta["has_best"] = has_best_;
  meta["best_score"] = best_score_;
  meta["best_report"] = best_report_ ? to_json(*best_report_) : nlohmann::json(nullptr);
  meta["evals_without_improvement"] = evals_without_improvement_;
  meta["last_eval_step"] = last_eval_step_;
  meta["finished"] = finished_;
  meta["early_stopped"] = early_stopped_;
  meta["loss_sums"] = loss_sums_;
  meta["loss_count"] = loss_count_;
  meta["history"] = nlohmann::json::array();
  for (const auto& r : history_) meta["history"].push_back(to_json(r));

  std::vector<NamedArray> arrays;
  append_network(arrays, "model.a.", state_.model.copy_a);
  append_network(arrays, "model.b.", state_.model.copy_b);
  for (int c = 0; c < 2; ++c) {
    const std::string tag = c == 0 ? "a." : "b.";
    append_network(arrays, "adam_m." + tag, state_.adam[static_cast<std::size_t>(c)].first);
    append_network(arrays, "adam_v." + tag, state_.adam[static_cast<std::size_t>(c)].second);
  }
  if (has_best_) {
    append_network(arrays, "best.a.", best_model_.copy_a);
    append_network(arrays, "best.b.", best_model_.copy_b);
  }
  write_container(path, meta, arrays);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json meta;
  const auto arrays = read_container(path, meta);
  require(meta.at("kind") == "train_state", ErrorCategory::Parse, path.string() + " is not a training checkpoint");
  const auto encoder = encoder_config_from_json(meta.at("encoder"));
  const auto config = train_config_from_json(meta.at("train"));
  require(to_json(encoder) == to_json(encoder_), ErrorCategory::Config, "checkpoint encoder config differs");
  require(to_json(config) == to_json(config_), ErrorCategory::Config, "checkpoint train config differs");
  require(parse_variant(meta.at("variant").get<std::string>()) == variant_, ErrorCategory::Config,
          "checkpoint variant differs");

  state_ = init_train_state(encoder_, config_);
  restore_network(arrays, "model.a.", state_.model.copy_a);
  restore_network(arrays, "model.b.", state_.model.copy_b);
  for (int c = 0; c < 2; ++c) {
    const std::string tag = c == 0 ? "a." : "b.";
    auto& adam = state_.adam[static_cast<std::size_t>(c)];
    restore_network(arrays, "adam_m." + tag, adam.first);
    restore_network(arrays, "adam_v." + tag, adam.second);
    adam.step = meta.at("adam_steps").at(static_cast<std::size_t>(c)).get<std::int64_t>();
  }
  state_.step = meta.at("step").get<std::int64_t>();
  state_.coinflip = deserialize_rng(meta.at("rng").at("coinflip").get<std::string>());
  state_.dropout = deserialize_rng(meta.at("rng").at("dropout").get<std::string>());
  state_.negatives = deserialize_rng(meta.at("rng").at("negatives").get<std::string>());
  shuffle_ = deserialize_rng(meta.at("rng").at("data").get<std::string>());
  permutation_ = meta.at("permutation").get<std::vector<std::size_t>>();
  cursor_ = meta.at("cursor").get<std::size_t>();
  epoch_ = meta.at("epoch").get<std::int64_t>();
  has_best_ = meta.at("has_best").get<bool>();
  best_score_ = meta.at("best_score").get<std::array<double, 2>>();
  best_report_.reset();
  if (!meta.at("best_report").is_null()) best_report_ = metrics_report_from_json(meta.at("best_report"));
  best_model_ = state_.model;
  if (has_best_) {
    restore_network(arrays, "best.a.", best_model_.copy_a);
    restore_network(arrays, "best.b.", best_model_.copy_b);
  }
  evals_without_improvement_ = meta.at("evals_without_improvement").get<int>();
  last_eval_step_ = meta.at("last_eval_step").get<std::int64_t>();
  finished_ = meta.at("finished").get<bool>();
  early_stopped_ = meta.at("early_stopped").get<bool>();
  loss_sums_ = meta.at("loss_sums").get<std::array<double, 4>>();
  loss_count_ = meta.at("loss_count").get<std::int64_t>();
  history_.clear();
  for (const auto& r : meta.at("history")) history_.push_back(metric_record_from_json(r));
}

}  // namespace seqrl
