#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "seqrl/encoder.hpp"
#include "test_util.hpp"

using namespace seqrl;

namespace {

EncoderConfig small_config(EncoderKind kind, int heads = 1) {
  EncoderConfig c;
  c.n_items = 5;
  c.embed_dim = 4;
  c.hidden_dim = 4;
  c.max_len = 4;
  c.kind = kind;
  c.attention_heads = heads;
  c.dropout = 0.0;
  return c;
}

// Left-pads a real prefix to max_len.
std::vector<ItemId> padded(const std::vector<ItemId>& real, int max_len, ItemId pad) {
  std::vector<ItemId> row(static_cast<std::size_t>(max_len) - real.size(), pad);
  row.insert(row.end(), real.begin(), real.end());
  return row;
}

SequenceBatch batch_of(const std::vector<std::vector<ItemId>>& seqs, int max_len, ItemId pad) {
  SequenceBatch batch(max_len);
  for (const auto& s : seqs) batch.add(padded(s, max_len, pad), static_cast<int>(s.size()));
  return batch;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scalar GRU, one sequence at a time, straight from the gate equations.
std::vector<double> naive_gru(const EncoderParams& p, const std::vector<ItemId>& seq) {
  const auto& g = p.gru;
  const int E = p.config.embed_dim;
  const int H = p.config.hidden_dim;
  std::vector<double> h(static_cast<std::size_t>(H), 0.0);
  for (ItemId item : seq) {
    std::vector<double> z(H), r(H), next(H);
    for (int j = 0; j < H; ++j) {
      double az = g.bias_z(0, j), ar = g.bias_r(0, j);
      for (int i = 0; i < E; ++i) {
        az += p.embedding(item, i) * g.input_z(i, j);
        ar += p.embedding(item, i) * g.input_r(i, j);
      }
      for (int i = 0; i < H; ++i) {
        az += h[i] * g.recur_z(i, j);
        ar += h[i] * g.recur_r(i, j);
      }
      z[j] = sigmoid(az);
      r[j] = sigmoid(ar);
    }
    for (int j = 0; j < H; ++j) {
      double an = g.bias_n(0, j);
      for (int i = 0; i < E; ++i) an += p.embedding(item, i) * g.input_n(i, j);
      for (int i = 0; i < H; ++i) an += r[i] * h[i] * g.recur_n(i, j);
      next[j] = (1.0 - z[j]) * std::tanh(an) + z[j] * h[j];
    }
    h = next;
  }
  return h;
}

double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

void randomize_biases(EncoderParams& p, Rng& rng) {
  for_each_encoder_param(p, [&](const std::string& name, Matrix& m) {
    if (name.find("bias") != std::string::npos || name.find("gain") != std::string::npos) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += uniform01(rng) - 0.5;
    }
  });
}

double gradient_check(EncoderKind kind, int heads) {
  auto params = init_encoder(small_config(kind, heads), 21);
  Rng rng(22);
  randomize_biases(params, rng);
  const ItemId pad = params.config.pad_item();
  const auto batch = batch_of({{0, 3, 1, 4}, {2}, {4, 4, 0}, {1, 2}}, params.config.max_len, pad);
  Matrix coef(4, params.config.hidden_dim);
  for (Eigen::Index i = 0; i < coef.size(); ++i) coef.data()[i] = 2.0 * uniform01(rng) - 1.0;

  EncoderTape tape;
  encode_batch(params, batch, tape, nullptr);
  auto grads = zeros_like(params);
  encoder_backward(params, tape, coef, grads);

  std::vector<Matrix*> ps;
  std::vector<const Matrix*> gs;
  for_each_encoder_param(params, [&](const std::string&, Matrix& m) { ps.push_back(&m); });
  for_each_encoder_param(grads, [&](const std::string&, Matrix& m) { gs.push_back(&m); });
  auto loss = [&] { return encode_batch(params, batch).cwiseProduct(coef).sum(); };
  return fixtures::worst_relative_error(loss, ps, gs, 1e-5);
}

}  // namespace

TEST(EncoderInit, DeterministicAndPadRowZero) {
  const auto c = small_config(EncoderKind::Recurrent);
  const auto a = init_encoder(c, 7);
  const auto b = init_encoder(c, 7);
  const auto other = init_encoder(c, 8);
  EXPECT_EQ(a.embedding, b.embedding);
  EXPECT_EQ(a.gru.recur_n, b.gru.recur_n);
  EXPECT_NE(a.embedding, other.embedding);
  EXPECT_TRUE(a.embedding.row(c.pad_item()).isZero(0.0));
  EXPECT_EQ(a.embedding.rows(), c.n_items + 1);
}

TEST(EncoderInit, FullScaleEmbeddingShape) {
  EncoderConfig c;
  c.n_items = 26702;
  const auto p = init_encoder(c, 1);
  EXPECT_EQ(p.embedding.rows(), 26703);
  EXPECT_EQ(p.embedding.cols(), 64);
}

TEST(EncoderConfig, Validation) {
  auto c = small_config(EncoderKind::SelfAttention, 3);
  EXPECT_THROW(c.validate(), Error);
  c = small_config(EncoderKind::Recurrent);
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), Error);
  c = small_config(EncoderKind::Recurrent);
  c.embed_dim = 0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(parse_encoder_kind(to_string(EncoderKind::SelfAttention)), EncoderKind::SelfAttention);
  EXPECT_THROW(parse_encoder_kind("caser"), Error);
}

TEST(Gru, MatchesPerSequenceOracleWithMixedLengths) {
  auto c = small_config(EncoderKind::Recurrent);
  c.n_items = 9;
  c.embed_dim = 3;
  c.hidden_dim = 5;
  c.max_len = 6;
  auto params = init_encoder(c, 31);
  Rng rng(32);
  randomize_biases(params, rng);
  // No sequence fills the window, and lengths are interleaved.
  const std::vector<std::vector<ItemId>> seqs{{1, 2}, {3, 4, 5, 6, 7}, {8}, {0, 0, 1}, {5, 4, 3, 2}};
  const auto out = encode_batch(params, batch_of(seqs, c.max_len, c.pad_item()));
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto expect = naive_gru(params, seqs[b]);
    for (int j = 0; j < c.hidden_dim; ++j) EXPECT_NEAR(out(static_cast<Eigen::Index>(b), j), expect[j], 1e-12);
  }
}

TEST(Gru, LengthOneIsOneStepFromZero) {
  const auto params = init_encoder(small_config(EncoderKind::Recurrent), 3);
  const auto state = padded({2}, 4, 5);
  const Vector s = encode(params, state, 1);
  const auto expect = naive_gru(params, {2});
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(s(j), expect[j], 1e-14);
}

class BothEncoders : public ::testing::TestWithParam<EncoderKind> {};

TEST_P(BothEncoders, PaddingContentIsIgnored) {
  auto params = init_encoder(small_config(GetParam()), 41);
  const std::vector<ItemId> clean{5, 5, 1, 3};
  const std::vector<ItemId> noisy{0, 4, 1, 3};
  EXPECT_EQ(encode(params, clean, 2), encode(params, noisy, 2));
  // Even a pad embedding that is no longer zero has no effect.
  params.embedding.row(5).setConstant(3.0);
  EXPECT_EQ(encode(params, clean, 2), encode(params, noisy, 2));
}

TEST_P(BothEncoders, BatchRowsAreIndependent) {
  auto c = small_config(GetParam());
  c.max_len = 5;
  const auto params = init_encoder(c, 42);
  const std::vector<std::vector<ItemId>> seqs{{1}, {0, 1, 2, 3, 4}, {3, 2}, {4, 4, 4}, {2, 0, 1, 3}};
  const auto all = encode_batch(params, batch_of(seqs, c.max_len, c.pad_item()));
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const Vector single = encode(params, padded(seqs[b], c.max_len, c.pad_item()), static_cast<int>(seqs[b].size()));
    EXPECT_LT(max_abs_diff(all.row(static_cast<Eigen::Index>(b)), single.transpose()), 1e-13);
  }
  std::vector<std::vector<ItemId>> rev(seqs.rbegin(), seqs.rend());
  const auto permuted = encode_batch(params, batch_of(rev, c.max_len, c.pad_item()));
  for (std::size_t b = 0; b < seqs.size(); ++b)
    EXPECT_LT(max_abs_diff(permuted.row(static_cast<Eigen::Index>(seqs.size() - 1 - b)),
                           all.row(static_cast<Eigen::Index>(b))),
              1e-13);
}

TEST_P(BothEncoders, InferenceIsDeterministicAndFinite) {
  auto c = small_config(GetParam());
  c.dropout = 0.5;
  const auto params = init_encoder(c, 43);
  const auto batch = batch_of({{0, 1, 2}, {4}}, c.max_len, c.pad_item());
  const Matrix a = encode_batch(params, batch);
  EXPECT_EQ(a, encode_batch(params, batch));
  EXPECT_TRUE(a.allFinite());
}

TEST_P(BothEncoders, DropoutOnlyWithRng) {
  auto c = small_config(GetParam());
  c.dropout = 0.5;
  const auto params = init_encoder(c, 44);
  const auto batch = batch_of({{0, 1, 2, 3}, {4, 2}}, c.max_len, c.pad_item());
  EncoderTape tape;
  EXPECT_EQ(encode_batch(params, batch, tape, nullptr), encode_batch(params, batch));
  Rng rng(1);
  EXPECT_NE(encode_batch(params, batch, tape, &rng), encode_batch(params, batch));
}

TEST_P(BothEncoders, RejectsBadIdsAndLengths) {
  const auto params = init_encoder(small_config(GetParam()), 45);
  const std::vector<ItemId> bad{5, 5, 1, 6};
  EXPECT_THROW(encode(params, bad, 2), Error);
  const std::vector<ItemId> ok{5, 5, 1, 3};
  EXPECT_THROW(encode(params, ok, 0), Error);
  EXPECT_THROW(encode(params, ok, 5), Error);
  SequenceBatch wrong(3);
  EXPECT_THROW(wrong.add(ok, 2), Error);
}

TEST_P(BothEncoders, AbsentItemsGetNoEmbeddingGradient) {
  auto c = small_config(GetParam());
  c.n_items = 8;
  c.dropout = 0.2;
  const auto params = init_encoder(c, 46);
  const auto batch = batch_of({{0, 3}, {3, 6, 0, 6}}, c.max_len, c.pad_item());
  EncoderTape tape;
  Rng rng(2);
  const Matrix out = encode_batch(params, batch, tape, &rng);
  auto grads = zeros_like(params);
  // not all ones: a final layer norm maps a constant upstream gradient to zero
  Rng up(3);
  Matrix upstream(out.rows(), out.cols());
  for (Eigen::Index i = 0; i < upstream.size(); ++i) upstream.data()[i] = uniform01(up) - 0.5;
  encoder_backward(params, tape, upstream, grads);
  const std::set<ItemId> present{0, 3, 6};
  for (ItemId i = 0; i <= c.n_items; ++i) {
    if (present.count(i))
      EXPECT_GT(grads.embedding.row(i).cwiseAbs().sum(), 0.0);
    else
      EXPECT_TRUE(grads.embedding.row(i).isZero(0.0)) << "row " << i;
  }
}

TEST_P(BothEncoders, GradientMatchesFiniteDifferences) {
  EXPECT_LT(gradient_check(GetParam(), 1), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Kinds, BothEncoders, ::testing::Values(EncoderKind::Recurrent, EncoderKind::SelfAttention),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Attention, TwoHeadGradientMatchesFiniteDifferences) {
  EXPECT_LT(gradient_check(EncoderKind::SelfAttention, 2), 1e-4);
}

TEST(Attention, CausalTruncation) {
  auto c = small_config(EncoderKind::SelfAttention);
  c.n_items = 7;
  c.max_len = 6;
  const auto params = init_encoder(c, 51);
  const std::vector<ItemId> seq{6, 1, 1, 0, 3, 2};
  const Matrix positions = attention_position_outputs(params, seq);
  ASSERT_EQ(positions.rows(), 6);
  for (int k = 1; k <= 6; ++k) {
    const std::vector<ItemId> prefix(seq.begin(), seq.begin() + k);
    const Vector s = encode(params, padded(prefix, c.max_len, c.pad_item()), k);
    EXPECT_LT(max_abs_diff(s.transpose(), positions.row(k - 1)), 1e-13) << "k=" << k;
  }
}

TEST(Attention, PositionOutputsRequireAttention) {
  const auto params = init_encoder(small_config(EncoderKind::Recurrent), 1);
  const std::vector<ItemId> seq{1, 2};
  EXPECT_THROW(attention_position_outputs(params, seq), Error);
}

TEST(Encoder, FullSizeBatchForwardIsFast) {
  EncoderConfig c;
  c.n_items = 1000;
  const auto params = init_encoder(c, 3);
  Rng rng(4);
  SequenceBatch batch(c.max_len);
  for (int b = 0; b < 256; ++b) {
    std::vector<ItemId> row(10);
    for (auto& id : row) id = static_cast<ItemId>(uniform_index(rng, 1000));
    batch.add(row, 1 + b % 10);
  }
  const auto start = std::chrono::steady_clock::now();
  const Matrix out = encode_batch(params, batch);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_TRUE(out.allFinite());
  EXPECT_LT(seconds, 1.0);
}
