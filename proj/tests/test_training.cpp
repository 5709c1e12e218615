#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "seqrl/synthetic.hpp"
#include "seqrl/training.hpp"
#include "test_util.hpp"

using namespace seqrl;

namespace {

EncoderConfig tiny_encoder(int n_items, EncoderKind kind = EncoderKind::Recurrent) {
  EncoderConfig c;
  c.n_items = n_items;
  c.embed_dim = 4;
  c.hidden_dim = 4;
  c.max_len = 4;
  c.kind = kind;
  c.dropout = 0.1;
  return c;
}

TrainConfig tiny_train(std::uint64_t seed = 5) {
  TrainConfig t;
  t.batch_size = 8;
  t.learning_rate = 0.01;
  t.eval_every = 5;
  t.max_updates = 20;
  t.sac_threshold = 0;
  t.seed = seed;
  t.ks = {5, 10};
  return t;
}

struct World {
  SyntheticSpec spec;
  SessionSet sessions;
  ReplayBuffer buffer;
};

World tiny_world(int n_items = 12, std::size_t n_sessions = 30) {
  World w;
  w.spec = default_synthetic_spec(KernelOptions{.n_items = n_items, .n_sessions = n_sessions, .successors = 4,
                                                .purchasable_fraction = 0.25},
                                  3);
  w.sessions = generate(w.spec);
  w.buffer = build_replay_buffer(w.sessions, 4, RewardSchema{});
  return w;
}

Batch first_batch(const ReplayBuffer& buffer, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return make_batch(buffer, idx);
}

bool networks_equal(const Network& a, const Network& b) { return bit_identical(a, b); }

std::vector<Matrix*> params_of(Network& net) { return param_list(net); }

std::vector<const Matrix*> grads_of(const Network& net) { return param_list(net); }

}  // namespace

TEST(Variant, Parsing) {
  EXPECT_EQ(parse_variant("sqn"), Variant::Sqn);
  EXPECT_EQ(parse_variant("q-only"), Variant::QOnly);
  EXPECT_EQ(parse_variant(to_string(Variant::SupervisedOnly)), Variant::SupervisedOnly);
  EXPECT_THROW(parse_variant("ppo"), Error);
  EXPECT_EQ(parse_sac_loss_form(to_string(SacLossForm::ActorPlusSupervised)), SacLossForm::ActorPlusSupervised);
  EXPECT_EQ(ranking_head(Variant::QOnly), RankingHead::Q);
  EXPECT_EQ(ranking_head(Variant::Sac), RankingHead::Supervised);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  auto c = tiny_train();
  c.sac_loss = SacLossForm::ActorPlusSupervised;
  c.val_event_cap = 77;
  c.schema = RewardSchema::from_ratio(10.0, 0.9);
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_DOUBLE_EQ(back.schema.r_purchase, 10.0);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_train();
  c.schema.gamma = 1.5;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Batch, GathersTupleFields) {
  const auto w = tiny_world();
  const std::vector<std::size_t> idx{3, 0, 5};
  const auto batch = make_batch(w.buffer, idx);
  ASSERT_EQ(batch.size(), 3u);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& t = w.buffer.tuples[idx[i]];
    EXPECT_EQ(batch.actions[i], t.action);
    EXPECT_EQ(batch.rewards[i], t.reward);
    EXPECT_EQ(batch.terminal[i] != 0, t.terminal);
    EXPECT_EQ(batch.states.lengths[i], t.state_len);
    EXPECT_EQ(std::vector<ItemId>(batch.next_states.row(i).begin(), batch.next_states.row(i).end()), t.next_state);
    EXPECT_EQ(batch.sessions[i], t.session_index);
  }
}

// ------------------------------------------------------------ double Q

TEST(DoubleQLearning, TargetsUseOnlineSelectorAndPartnerEvaluator) {
  const auto w = tiny_world();
  const auto model = init_model(tiny_encoder(12), 9);
  const auto batch = first_batch(w.buffer, 10);
  const double gamma = 0.7;
  const Vector targets = td_targets(model.copy_a, model.copy_b, batch, gamma, QActivation::Identity);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    double expect = batch.rewards[b];
    if (!batch.terminal[b]) {
      const auto next = batch.next_states.row(b);
      const int len = batch.next_states.lengths[b];
      const Vector sel = q_values(model.copy_a.q, encode(model.copy_a.encoder, next, len));
      const Vector eval = q_values(model.copy_b.q, encode(model.copy_b.encoder, next, len));
      expect = double_q_target(batch.rewards[b], gamma, sel, eval, false);
    }
    EXPECT_NEAR(targets(static_cast<Eigen::Index>(b)), expect, 1e-12);
  }
}

TEST(DoubleQLearning, BranchSymmetryWithIdenticalCopies) {
  const auto w = tiny_world();
  auto model = init_model(tiny_encoder(12), 9);
  model.copy_b = model.copy_a;
  const auto batch = first_batch(w.buffer, 12);
  const Vector ta = td_targets(model.copy_a, model.copy_b, batch, 0.5, QActivation::Identity);
  const Vector tb = td_targets(model.copy_b, model.copy_a, batch, 0.5, QActivation::Identity);
  EXPECT_EQ(ta, tb);

  LossTerms terms;
  terms.ce_weight = 0.0;
  auto ga = zeros_like(model.copy_a);
  auto gb = zeros_like(model.copy_b);
  const auto la = loss_and_gradients(model.copy_a, batch, ta, terms, QActivation::Identity, nullptr, nullptr, {}, ga);
  const auto lb = loss_and_gradients(model.copy_b, batch, tb, terms, QActivation::Identity, nullptr, nullptr, {}, gb);
  EXPECT_EQ(la.td, lb.td);
  EXPECT_EQ(la.total, lb.total);
  EXPECT_TRUE(networks_equal(ga, gb));

  // Full steps down either branch produce the same updated copy.
  auto enc = tiny_encoder(12);
  enc.dropout = 0.0;
  const auto config = tiny_train();
  auto s0 = init_train_state(enc, config);
  s0.model.copy_b = s0.model.copy_a;
  auto s1 = s0;
  const auto l0 = sqn_step(s0, batch, config, {.online_copy = 0});
  const auto l1 = sqn_step(s1, batch, config, {.online_copy = 1});
  EXPECT_EQ(l0.total, l1.total);
  EXPECT_TRUE(networks_equal(s0.model.copy_a, s1.model.copy_b));
}

TEST(DoubleQLearning, PartnerIsUntouchedByAStep) {
  const auto w = tiny_world();
  const auto batch = first_batch(w.buffer, 8);
  const auto config = tiny_train();
  for (int online : {0, 1}) {
    auto state = init_train_state(tiny_encoder(12), config);
    const Network partner_before = state.model.copy(1 - online);
    const Network online_before = state.model.copy(online);
    const auto adam_partner = state.adam[static_cast<std::size_t>(1 - online)];
    const auto loss = sqn_step(state, batch, config, {.online_copy = online});
    EXPECT_EQ(loss.online, online);
    EXPECT_TRUE(networks_equal(state.model.copy(1 - online), partner_before));
    EXPECT_FALSE(networks_equal(state.model.copy(online), online_before));
    EXPECT_EQ(state.adam[static_cast<std::size_t>(1 - online)].step, adam_partner.step);
    EXPECT_TRUE(networks_equal(state.adam[static_cast<std::size_t>(1 - online)].first, adam_partner.first));
    EXPECT_EQ(state.adam[static_cast<std::size_t>(online)].step, 1);
    EXPECT_EQ(state.step, 1);
  }
}

TEST(DoubleQLearning, GradientTreatsTargetsAsConstants) {
  // Finite differences on the online copy with the targets frozen reproduce
  // the analytic gradient, so nothing flows into the bootstrapped target.
  const auto w = tiny_world();
  auto model = init_model(tiny_encoder(12), 10);
  model.copy_a.encoder.config.dropout = 0.0;
  const auto batch = first_batch(w.buffer, 6);
  const Vector targets = td_targets(model.copy_a, model.copy_b, batch, 0.5, QActivation::Identity);
  const Vector frozen = targets;
  LossTerms terms;
  auto grads = zeros_like(model.copy_a);
  loss_and_gradients(model.copy_a, batch, targets, terms, QActivation::Identity, nullptr, nullptr, {}, grads);
  auto loss = [&] {
    auto scratch = zeros_like(model.copy_a);
    return loss_and_gradients(model.copy_a, batch, frozen, terms, QActivation::Identity, nullptr, nullptr, {},
                              scratch)
        .total;
  };
  EXPECT_LT(fixtures::worst_relative_error(loss, params_of(model.copy_a), grads_of(grads)), 1e-4);
  EXPECT_EQ(targets, frozen);
}

TEST(DoubleQLearning, CoinFlipIsFair) {
  const auto w = tiny_world();
  const auto batch = first_batch(w.buffer, 2);
  auto enc = tiny_encoder(12);
  enc.dropout = 0.0;
  const auto config = tiny_train(17);
  auto state = init_train_state(enc, config);
  const int n = 4000;
  int first = 0;
  for (int i = 0; i < n; ++i) first += supervised_step(state, batch, config).online == 0 ? 1 : 0;
  // Binomial(4000, 0.5): 3 sigma is about 95.
  EXPECT_NEAR(first, n / 2, 95);
  EXPECT_EQ(state.adam[0].step + state.adam[1].step, n);
}

// ------------------------------------------------------------ SAC

TEST(Sac, ActorTermGivesNoGradientToQHead) {
  const auto w = tiny_world();
  const auto model = init_model(tiny_encoder(12), 11);
  const auto batch = first_batch(w.buffer, 8);
  LossTerms terms;
  terms.ce_weight = 0.0;
  terms.td_weight = 0.0;
  terms.critic_weighted = true;
  auto grads = zeros_like(model.copy_a);
  const auto out = loss_and_gradients(model.copy_a, batch, Vector::Zero(8), terms, QActivation::Identity, nullptr,
                                      nullptr, {}, grads);
  EXPECT_NE(out.actor, 0.0);
  EXPECT_TRUE(grads.q.weight.isZero(0.0));
  EXPECT_TRUE(grads.q.bias.isZero(0.0));
  EXPECT_FALSE(grads.supervised.weight.isZero(0.0));
}

TEST(Sac, ActorGradientIsCrossEntropyScaledByDetachedQ) {
  const auto w = tiny_world();
  auto model = init_model(tiny_encoder(12), 12);
  model.copy_a.encoder.config.dropout = 0.0;
  for (Eigen::Index j = 0; j < model.copy_a.q.bias.cols(); ++j) model.copy_a.q.bias(0, j) = 1.0 + 0.1 * j;
  const auto batch = first_batch(w.buffer, 6);
  LossTerms terms;
  terms.ce_weight = 0.0;
  terms.td_weight = 0.0;
  terms.critic_weighted = true;
  auto grads = zeros_like(model.copy_a);
  loss_and_gradients(model.copy_a, batch, Vector::Zero(6), terms, QActivation::Identity, nullptr, nullptr, {},
                     grads);

  // The weights are read once and then held fixed while the supervised head moves.
  const Network frozen = model.copy_a;
  const Matrix states = encode_batch(frozen.encoder, batch.states);
  const Vector weight = q_taken(frozen.q, states, batch.actions, QActivation::Identity);
  auto loss = [&] {
    const Matrix logits = supervised_logits(model.copy_a.supervised, states);
    return cross_entropy_batch(logits, batch.actions, nullptr).cwiseProduct(weight).mean();
  };
  EXPECT_LT(fixtures::worst_relative_error(loss, {&model.copy_a.supervised.weight, &model.copy_a.supervised.bias},
                                           {&grads.supervised.weight, &grads.supervised.bias}),
            1e-4);
}

TEST(Sac, ThresholdGatesTheLossAtStepTPlusOne) {
  const auto w = tiny_world();
  const auto batch = first_batch(w.buffer, 8);
  for (std::int64_t T : {0, 3, 5000}) {
    auto config = tiny_train();
    config.sac_threshold = T;
    auto state = init_train_state(tiny_encoder(12), config);
    for (std::int64_t update = 1; update <= T + 3; ++update) {
      const auto loss = sac_step(state, batch, config);
      if (update < T - 2) continue;
      EXPECT_EQ(loss.critic_weighted, update > T) << "T=" << T << " update=" << update;
      EXPECT_EQ(state.step, update);
    }
  }
}

TEST(Sac, NeverSwitchingEqualsSqn) {
  const auto w = tiny_world();
  const auto batch = first_batch(w.buffer, 8);
  auto config = tiny_train();
  config.sac_threshold = kNeverSwitch;
  auto a = init_train_state(tiny_encoder(12), config);
  auto b = a;
  for (int i = 0; i < 5; ++i) EXPECT_EQ(sac_step(a, batch, config).total, sqn_step(b, batch, config).total);
  EXPECT_TRUE(bit_identical(a.model.copy_a, b.model.copy_a));
  EXPECT_TRUE(bit_identical(a.model.copy_b, b.model.copy_b));
}

TEST(Sac, UnitWeightsReproduceSqnTrajectory) {
  const auto w = tiny_world(12, 40);
  auto config = tiny_train(21);
  config.sac_threshold = 0;
  auto sac = init_train_state(tiny_encoder(12), config);
  auto sqn = init_train_state(tiny_encoder(12), config);
  for (std::size_t i = 0; i < 12; ++i) {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < 8; ++j) idx.push_back((i * 8 + j) % w.buffer.size());
    const auto batch = make_batch(w.buffer, idx);
    const auto ls = sac_step(sac, batch, config, {.sac_weight = 1.0});
    const auto lq = sqn_step(sqn, batch, config);
    ASSERT_TRUE(ls.critic_weighted);
    EXPECT_EQ(ls.total, lq.total) << "update " << i + 1;
    EXPECT_EQ(ls.ce, lq.ce);
    EXPECT_EQ(ls.td, lq.td);
    EXPECT_EQ(ls.online, lq.online);
  }
  EXPECT_TRUE(bit_identical(sac.model.copy_a, sqn.model.copy_a));
  EXPECT_TRUE(bit_identical(sac.model.copy_b, sqn.model.copy_b));
}

TEST(Sac, LiteralFormHasNoTdTerm) {
  const auto w = tiny_world();
  const auto batch = first_batch(w.buffer, 8);
  auto config = tiny_train();
  config.sac_loss = SacLossForm::ActorPlusSupervised;
  auto state = init_train_state(tiny_encoder(12), config);
  const Network q_before = state.model.copy_a;
  const auto loss = sac_step(state, batch, config, {.online_copy = 0});
  EXPECT_EQ(loss.td, 0.0);
  EXPECT_NEAR(loss.total, loss.ce + loss.actor, 1e-12);
  // Without the TD term nothing trains the Q head.
  EXPECT_EQ(state.model.copy_a.q.weight, q_before.q.weight);
}

TEST(Sac, ClippedWeightsAreNonNegative) {
  const auto w = tiny_world();
  auto model = init_model(tiny_encoder(12), 13);
  model.copy_a.q.bias.setConstant(-50.0);
  const auto batch = first_batch(w.buffer, 8);
  LossTerms terms;
  terms.ce_weight = 0.0;
  terms.td_weight = 0.0;
  terms.critic_weighted = true;
  terms.clip_q = true;
  auto grads = zeros_like(model.copy_a);
  const auto out = loss_and_gradients(model.copy_a, batch, Vector::Zero(8), terms, QActivation::Identity, nullptr,
                                      nullptr, {}, grads);
  EXPECT_EQ(out.actor, 0.0);
  EXPECT_TRUE(grads.supervised.weight.isZero(0.0));
}

// ------------------------------------------------------------ Q-only

TEST(QOnly, NegativesComeFromUnseenItems) {
  const auto w = tiny_world();
  const auto model = init_model(tiny_encoder(12), 14);
  const auto batch = first_batch(w.buffer, 8);
  // Every session has seen all items but 7, so 7 is the only legal negative.
  std::vector<std::vector<ItemId>> seen(w.buffer.session_items.size());
  for (auto& s : seen)
    for (ItemId i = 0; i < 12; ++i)
      if (i != 7) s.push_back(i);
  LossTerms terms;
  terms.ce_weight = 0.0;
  terms.n_negatives = 3;
  Rng rng(1);
  Vector targets = Vector::Zero(8);
  for (std::size_t b = 0; b < 8; ++b) targets(static_cast<Eigen::Index>(b)) = batch.rewards[b];
  auto grads = zeros_like(model.copy_a);
  loss_and_gradients(model.copy_a, batch, targets, terms, QActivation::Identity, nullptr, &rng, seen, grads);
  const std::set<ItemId> actions(batch.actions.begin(), batch.actions.end());
  for (ItemId j = 0; j < 12; ++j) {
    const bool touched = grads.q.bias(0, j) != 0.0;
    EXPECT_EQ(touched, actions.count(j) > 0 || j == 7) << "item " << j;
  }
  EXPECT_TRUE(grads.supervised.weight.isZero(0.0));
}

TEST(QOnly, SampledNegativesAvoidTheSession) {
  const auto w = tiny_world(30, 40);
  const auto model = init_model(tiny_encoder(30), 15);
  const auto batch = first_batch(w.buffer, 1);
  LossTerms terms;
  terms.ce_weight = 0.0;
  terms.td_weight = 1.0;
  terms.n_negatives = 200;
  Rng rng(2);
  auto grads = zeros_like(model.copy_a);
  loss_and_gradients(model.copy_a, batch, Vector::Constant(1, batch.rewards[0]), terms, QActivation::Identity,
                     nullptr, &rng, w.buffer.session_items, grads);
  const auto& seen = w.buffer.session_items[batch.sessions[0]];
  for (ItemId j = 0; j < 30; ++j) {
    if (j == batch.actions[0]) continue;
    if (std::binary_search(seen.begin(), seen.end(), j)) EXPECT_EQ(grads.q.bias(0, j), 0.0) << "seen item " << j;
  }
}

TEST(QOnly, SessionCoveringCatalogueIsASamplingError) {
  const auto w = tiny_world();
  const auto model = init_model(tiny_encoder(12), 16);
  const auto batch = first_batch(w.buffer, 4);
  std::vector<std::vector<ItemId>> seen(w.buffer.session_items.size());
  for (auto& s : seen)
    for (ItemId i = 0; i < 12; ++i) s.push_back(i);
  LossTerms terms;
  terms.ce_weight = 0.0;
  terms.n_negatives = 1;
  Rng rng(3);
  auto grads = zeros_like(model.copy_a);
  try {
    loss_and_gradients(model.copy_a, batch, Vector::Zero(4), terms, QActivation::Identity, nullptr, &rng, seen,
                       grads);
    FAIL() << "expected a sampling error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::Sampling);
  }
}

TEST(QOnly, StepTrainsOnlyTheQHead) {
  const auto w = tiny_world();
  const auto batch = first_batch(w.buffer, 8);
  const auto config = tiny_train();
  auto state = init_train_state(tiny_encoder(12), config);
  const Network before = state.model.copy_a;
  q_only_step(state, batch, config, w.buffer.session_items, {.online_copy = 0});
  EXPECT_EQ(state.model.copy_a.supervised.weight, before.supervised.weight);
  EXPECT_NE(state.model.copy_a.q.weight, before.q.weight);
}

// ------------------------------------------------------------ optimiser

TEST(Adam, MatchesScalarReference) {
  Matrix p(1, 2), g(1, 2), m = Matrix::Zero(1, 2), v = Matrix::Zero(1, 2);
  p << 0.5, -1.0;
  const double grads[3][2] = {{0.1, -2.0}, {0.3, 1.0}, {-0.2, 0.0}};
  double sp[2] = {0.5, -1.0}, sm[2] = {0, 0}, sv[2] = {0, 0};
  const AdamConfig config{0.01};
  for (int t = 1; t <= 3; ++t) {
    g << grads[t - 1][0], grads[t - 1][1];
    adam_update(p, g, m, v, t, config);
    for (int i = 0; i < 2; ++i) {
      sm[i] = 0.9 * sm[i] + 0.1 * grads[t - 1][i];
      sv[i] = 0.999 * sv[i] + 0.001 * grads[t - 1][i] * grads[t - 1][i];
      const double mh = sm[i] / (1 - std::pow(0.9, t));
      const double vh = sv[i] / (1 - std::pow(0.999, t));
      sp[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p(0, i), sp[i], 1e-15);
    }
  }
  // First step moves each weight by about the learning rate.
  Matrix q = Matrix::Zero(1, 1), gq = Matrix::Constant(1, 1, 123.0), mq = q, vq = q;
  adam_update(q, gq, mq, vq, 1, config);
  EXPECT_NEAR(q(0, 0), -0.01, 1e-9);
}

TEST(Adam, NonFiniteGradientAbortsWithoutChange) {
  Rng rng(1);
  const auto net = init_network(tiny_encoder(6), rng);
  auto params = net;
  auto grads = zeros_like(net);
  grads.q.bias(0, 2) = std::nan("");
  auto state = init_adam(params);
  try {
    adam_step(params, grads, state, {});
    FAIL() << "expected a numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::Numeric);
  }
  EXPECT_TRUE(bit_identical(params, net));
  EXPECT_EQ(state.step, 0);
}

// ------------------------------------------------------------ trainer

namespace {

struct TrainerFixture {
  World world = tiny_world(12, 60);
  DatasetSplit split = split_sessions(world.sessions, {0.7, 0.15, 0.15}, 1);
  ReplayBuffer train = build_replay_buffer(split.train, 4, RewardSchema{});
};

}  // namespace

TEST(Trainer, SameSeedSameHistory) {
  TrainerFixture f;
  auto config = tiny_train(3);
  for (Variant v : {Variant::Sqn, Variant::Sac, Variant::QOnly, Variant::SupervisedOnly}) {
    Trainer a(tiny_encoder(12), config, v, f.train, f.split.validation);
    Trainer b(tiny_encoder(12), config, v, f.train, f.split.validation);
    a.run();
    b.run();
    EXPECT_EQ(to_jsonl(a.history()), to_jsonl(b.history())) << to_string(v);
    EXPECT_TRUE(bit_identical(a.best_model().copy_a, b.best_model().copy_a));
    EXPECT_EQ(a.updates(), 20);
  }
  Trainer c(tiny_encoder(12), tiny_train(4), Variant::Sqn, f.train, f.split.validation);
  Trainer d(tiny_encoder(12), config, Variant::Sqn, f.train, f.split.validation);
  c.run();
  d.run();
  EXPECT_NE(to_jsonl(c.history()), to_jsonl(d.history()));
}

TEST(Trainer, HistoryHasLossesAndValidationCells) {
  TrainerFixture f;
  auto config = tiny_train();
  config.max_updates = 12;  // not a multiple of eval_every: a final evaluation is added
  Trainer t(tiny_encoder(12), config, Variant::Sac, f.train, f.split.validation);
  std::vector<MetricRecord> streamed;
  t.on_record = [&](const MetricRecord& r) { streamed.push_back(r); };
  t.run();
  EXPECT_EQ(streamed, t.history());
  std::set<std::int64_t> eval_steps;
  std::set<std::string> names;
  for (const auto& r : t.history()) {
    if (r.split == "validation") eval_steps.insert(r.step);
    names.insert(r.split + ":" + r.metric);
    EXPECT_TRUE(std::isfinite(r.value));
  }
  EXPECT_EQ(eval_steps, (std::set<std::int64_t>{5, 10, 12}));
  for (const char* name : {"train:loss/ce", "train:loss/td", "train:loss/actor", "train:loss/total",
                           "validation:purchase/ndcg@10", "validation:click/hr@5"})
    EXPECT_TRUE(names.count(name)) << name;
  const auto line = to_jsonl({t.history().front()});
  EXPECT_EQ(metric_record_from_json(nlohmann::json::parse(line)), t.history().front());
}

TEST(Trainer, ResumeIsExact) {
  TrainerFixture f;
  fixtures::TempDir dir("seqrl-resume");
  const auto config = tiny_train(8);
  for (Variant v : {Variant::Sac, Variant::QOnly}) {
    Trainer full(tiny_encoder(12), config, v, f.train, f.split.validation);
    full.run();

    Trainer first(tiny_encoder(12), config, v, f.train, f.split.validation);
    first.run(7);  // mid-epoch and between evaluations
    EXPECT_EQ(first.updates(), 7);
    first.save_checkpoint(dir.path / "ck.bin");
    Trainer second(tiny_encoder(12), config, v, f.train, f.split.validation);
    second.load_checkpoint(dir.path / "ck.bin");
    second.run();

    EXPECT_EQ(to_jsonl(second.history()), to_jsonl(full.history())) << to_string(v);
    EXPECT_TRUE(bit_identical(second.state().model.copy_a, full.state().model.copy_a));
    EXPECT_TRUE(bit_identical(second.state().model.copy_b, full.state().model.copy_b));
    EXPECT_TRUE(bit_identical(second.best_model().copy_a, full.best_model().copy_a));
    EXPECT_EQ(second.updates(), full.updates());
  }
}

TEST(Trainer, CheckpointRejectsOtherConfig) {
  TrainerFixture f;
  fixtures::TempDir dir("seqrl-ckcfg");
  Trainer a(tiny_encoder(12), tiny_train(1), Variant::Sqn, f.train, f.split.validation);
  a.run(3);
  a.save_checkpoint(dir.path / "ck.bin");
  Trainer b(tiny_encoder(12), tiny_train(2), Variant::Sqn, f.train, f.split.validation);
  EXPECT_THROW(b.load_checkpoint(dir.path / "ck.bin"), Error);
}

TEST(Trainer, EarlyStopsWhenValidationStalls) {
  TrainerFixture f;
  auto config = tiny_train();
  config.learning_rate = 1e-15;  // parameters effectively frozen
  config.patience = 2;
  config.max_updates = 1000;
  Trainer t(tiny_encoder(12), config, Variant::SupervisedOnly, f.train, f.split.validation);
  t.run();
  EXPECT_TRUE(t.early_stopped());
  // First evaluation sets the best, the next two fail to improve on it.
  EXPECT_EQ(t.updates(), 15);
}

TEST(Trainer, RejectsMismatchedData) {
  TrainerFixture f;
  EXPECT_THROW(Trainer(tiny_encoder(13), tiny_train(), Variant::Sqn, f.train, f.split.validation), Error);
  ReplayBuffer empty;
  empty.n_items = 12;
  empty.max_len = 4;
  try {
    Trainer(tiny_encoder(12), tiny_train(), Variant::Sqn, empty, f.split.validation);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::EmptyDataset);
  }
}

TEST(Model, SaveLoadRoundTrip) {
  fixtures::TempDir dir("seqrl-model");
  for (auto kind : {EncoderKind::Recurrent, EncoderKind::SelfAttention}) {
    const auto model = init_model(tiny_encoder(9, kind), 4, QActivation::Relu);
    save_model(model, dir.path / "m.bin");
    const auto back = load_model(dir.path / "m.bin");
    EXPECT_TRUE(bit_identical(back.copy_a, model.copy_a));
    EXPECT_TRUE(bit_identical(back.copy_b, model.copy_b));
    EXPECT_EQ(back.q_activation, QActivation::Relu);
    EXPECT_EQ(back.config().kind, kind);
  }
  std::ofstream(dir.path / "junk.bin") << "not a container";
  EXPECT_THROW(load_model(dir.path / "junk.bin"), Error);
}

TEST(Model, CopiesAreIndependentlyInitialised) {
  const auto model = init_model(tiny_encoder(9), 4);
  EXPECT_FALSE(bit_identical(model.copy_a, model.copy_b));
  EXPECT_TRUE(bit_identical(init_model(tiny_encoder(9), 4).copy_b, model.copy_b));
}
