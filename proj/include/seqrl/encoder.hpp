#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "seqrl/common.hpp"
#include "seqrl/random.hpp"

namespace seqrl {

enum class EncoderKind { Recurrent, SelfAttention };

std::string_view to_string(EncoderKind kind);
EncoderKind parse_encoder_kind(std::string_view text);

struct EncoderConfig {
  int n_items = 0;
  int embed_dim = 64;
  int hidden_dim = 64;
  int max_len = 10;
  EncoderKind kind = EncoderKind::Recurrent;
  int attention_heads = 1;
  double dropout = 0.1;

  ItemId pad_item() const { return n_items; }
  void validate() const;
};

nlohmann::json to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

struct LayerNormParams {
  Matrix gain;  // 1 x d
  Matrix bias;  // 1 x d
};

/// Gated recurrent unit:
///   z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br)
///   n = tanh(x Wn + (r * h) Un + bn), h' = (1 - z) * n + z * h
struct GruParams {
  Matrix input_z, input_r, input_n;  // embed x hidden
  Matrix recur_z, recur_r, recur_n;  // hidden x hidden
  Matrix bias_z, bias_r, bias_n;     // 1 x hidden
};

/// One pre-norm Transformer block with learned positions and a final norm.
/// Positions are counted from the first real item of the sequence.
struct AttentionParams {
  Matrix positions;  // max_len x d
  LayerNormParams norm_attention;
  Matrix query, key, value, output;  // d x d
  Matrix output_bias;                // 1 x d
  LayerNormParams norm_ffn;
  Matrix ffn_in, ffn_out;            // d x d
  Matrix ffn_in_bias, ffn_out_bias;  // 1 x d
  LayerNormParams norm_final;
};

struct EncoderParams {
  EncoderConfig config;
  Matrix embedding;  // (n_items + 1) x embed_dim, last row is the pad item
  GruParams gru;
  AttentionParams attention;
};

/// Visits every trainable array of the active encoder kind as (name, matrix).
template <class Params, class Fn>
void for_each_encoder_param(Params& p, Fn&& fn) {
  fn("embedding", p.embedding);
  if (p.config.kind == EncoderKind::Recurrent) {
    auto& g = p.gru;
    fn("gru.input_z", g.input_z);
    fn("gru.input_r", g.input_r);
    fn("gru.input_n", g.input_n);
    fn("gru.recur_z", g.recur_z);
    fn("gru.recur_r", g.recur_r);
    fn("gru.recur_n", g.recur_n);
    fn("gru.bias_z", g.bias_z);
    fn("gru.bias_r", g.bias_r);
    fn("gru.bias_n", g.bias_n);
  } else {
    auto& a = p.attention;
    fn("attn.positions", a.positions);
    fn("attn.norm_attention.gain", a.norm_attention.gain);
    fn("attn.norm_attention.bias", a.norm_attention.bias);
    fn("attn.query", a.query);
    fn("attn.key", a.key);
    fn("attn.value", a.value);
    fn("attn.output", a.output);
    fn("attn.output_bias", a.output_bias);
    fn("attn.norm_ffn.gain", a.norm_ffn.gain);
    fn("attn.norm_ffn.bias", a.norm_ffn.bias);
    fn("attn.ffn_in", a.ffn_in);
    fn("attn.ffn_in_bias", a.ffn_in_bias);
    fn("attn.ffn_out", a.ffn_out);
    fn("attn.ffn_out_bias", a.ffn_out_bias);
    fn("attn.norm_final.gain", a.norm_final.gain);
    fn("attn.norm_final.bias", a.norm_final.bias);
  }
}

EncoderParams init_encoder(const EncoderConfig& config, Rng& rng);
EncoderParams init_encoder(const EncoderConfig& config, std::uint64_t seed);

/// Same shapes, all zeros (gradient accumulator).
EncoderParams zeros_like(const EncoderParams& params);

/// Fixed-width, left-padded item sequences.
struct SequenceBatch {
  int max_len = 0;
  std::vector<ItemId> items;  // size() * max_len, row-major
  std::vector<int> lengths;

  explicit SequenceBatch(int max_len_ = 0) : max_len(max_len_) {}

  std::size_t size() const { return lengths.size(); }
  std::span<const ItemId> row(std::size_t b) const {
    return {items.data() + b * static_cast<std::size_t>(max_len), static_cast<std::size_t>(max_len)};
  }
  void add(std::span<const ItemId> ids, int length);
};

struct EncoderTape {
  struct GruStep {
    int active = 0;
    std::vector<ItemId> items;
    Matrix x, h_prev, z, r, n, drop;
  };
  struct AttentionExample {
    int m = 0;
    std::vector<ItemId> items;
    Matrix drop_embed, drop_attn, drop_ffn;
    Matrix x0, a_hat, a_inv, a, q, k, v, c, x1, b_hat, b_inv, b, f_pre, f, x2, y_hat, y_inv;
    std::vector<Matrix> probs;
  };

  EncoderKind kind = EncoderKind::Recurrent;
  std::vector<std::size_t> order;  // batch row for each sorted position (recurrent)
  std::vector<GruStep> gru;
  std::vector<AttentionExample> attention;
};

/// Inference-mode batch encoding; rows of the result are final states.
Matrix encode_batch(const EncoderParams& params, const SequenceBatch& batch);

/// Training-mode encoding that records a tape for `encoder_backward`.
/// Dropout is applied only when `dropout_rng` is non-null and dropout > 0.
Matrix encode_batch(const EncoderParams& params, const SequenceBatch& batch, EncoderTape& tape,
                    Rng* dropout_rng);

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(states).
void encoder_backward(const EncoderParams& params, const EncoderTape& tape, const Matrix& d_states,
                      EncoderParams& grads);

Vector encode(const EncoderParams& params, std::span<const ItemId> state, int state_len);

/// Self-attention only: the output row at every real position of `items`.
Matrix attention_position_outputs(const EncoderParams& params, std::span<const ItemId> items);

}  // namespace seqrl
