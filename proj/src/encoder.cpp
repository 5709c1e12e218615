#include "seqrl/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

namespace seqrl {

std::string_view to_string(EncoderKind kind) {
  return kind == EncoderKind::Recurrent ? "gru" : "self_attention";
}

EncoderKind parse_encoder_kind(std::string_view text) {
  if (text == "gru" || text == "recurrent") return EncoderKind::Recurrent;
  if (text == "self_attention" || text == "sasrec" || text == "attention") return EncoderKind::SelfAttention;
  fail(ErrorCategory::Config, "unknown encoder kind '" + std::string(text) + "'");
}

void EncoderConfig::validate() const {
  require(n_items > 0, ErrorCategory::Config, "n_items must be > 0");
  require(embed_dim > 0 && hidden_dim > 0 && max_len > 0, ErrorCategory::Config, "encoder dims must be > 0");
  require(dropout >= 0.0 && dropout < 1.0, ErrorCategory::Config, "dropout must lie in [0, 1)");
  require(attention_heads > 0 && hidden_dim % attention_heads == 0, ErrorCategory::Config,
          "attention_heads must divide hidden_dim");
  if (kind == EncoderKind::SelfAttention) {
    require(embed_dim == hidden_dim, ErrorCategory::Config, "self-attention needs embed_dim == hidden_dim");
  }
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"n_items", c.n_items},       {"embed_dim", c.embed_dim},
          {"hidden_dim", c.hidden_dim}, {"max_len", c.max_len},
          {"kind", to_string(c.kind)},  {"attention_heads", c.attention_heads},
          {"dropout", c.dropout}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.n_items = j.at("n_items").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.kind = parse_encoder_kind(j.at("kind").get<std::string>());
  c.attention_heads = j.at("attention_heads").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.validate();
  return c;
}

void SequenceBatch::add(std::span<const ItemId> ids, int length) {
  require(static_cast<int>(ids.size()) == max_len, ErrorCategory::Shape, "sequence width != max_len");
  items.insert(items.end(), ids.begin(), ids.end());
  lengths.push_back(length);
}

namespace {

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = (2.0 * uniform01(rng) - 1.0) * bound;
  return m;
}

Matrix glorot(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  return uniform_matrix(rows, cols, std::sqrt(6.0 / static_cast<double>(rows + cols)), rng);
}

LayerNormParams layer_norm_init(int d) { return {Matrix::Ones(1, d), Matrix::Zero(1, d)}; }

Matrix sigmoid(const Matrix& m) {
  return m.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Matrix mask(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) mask(i, j) = uniform01(rng) < p ? 0.0 : keep;
  return mask;
}

void validate_batch(const EncoderParams& params, const SequenceBatch& batch) {
  const auto& c = params.config;
  require(batch.max_len == c.max_len, ErrorCategory::Shape, "batch max_len differs from encoder max_len");
  require(batch.items.size() == batch.size() * static_cast<std::size_t>(batch.max_len), ErrorCategory::Shape,
          "batch item buffer has wrong size");
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const int len = batch.lengths[b];
    require(len >= 1 && len <= c.max_len, ErrorCategory::Shape,
            "state_len " + std::to_string(len) + " outside [1, max_len]");
    for (ItemId id : batch.row(b)) {
      require(id >= 0 && id <= c.n_items, ErrorCategory::Shape, "item id " + std::to_string(id) + " out of range");
    }
  }
}

constexpr double kNormEps = 1e-8;

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, Matrix& x_hat, Matrix& inv_std) {
  const auto d = static_cast<double>(x.cols());
  const Vector mean = x.rowwise().sum() / d;
  x_hat = x.colwise() - mean;
  inv_std = ((x_hat.array().square().rowwise().sum() / d) + kNormEps).rsqrt().matrix();
  x_hat = inv_std.col(0).asDiagonal() * x_hat;
  Matrix y = x_hat.array().rowwise() * p.gain.row(0).array();
  y.rowwise() += p.bias.row(0);
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& x_hat, const Matrix& inv_std, const LayerNormParams& p,
                           LayerNormParams& grad) {
  grad.gain += (dy.array() * x_hat.array()).colwise().sum().matrix();
  grad.bias += dy.colwise().sum();
  const Matrix dx_hat = dy.array().rowwise() * p.gain.row(0).array();
  const auto d = static_cast<double>(dy.cols());
  const Vector mean_dx = dx_hat.rowwise().sum() / d;
  const Vector mean_dx_x = (dx_hat.array() * x_hat.array()).rowwise().sum().matrix() / d;
  Matrix dx = dx_hat.colwise() - mean_dx;
  dx -= (x_hat.array().colwise() * mean_dx_x.array()).matrix();
  return inv_std.col(0).asDiagonal() * dx;
}

// ---------------------------------------------------------------- recurrent

Matrix gru_forward(const EncoderParams& params, const SequenceBatch& batch, EncoderTape* tape, Rng* rng) {
  const auto& g = params.gru;
  const auto& c = params.config;
  const auto n = batch.size();
  const int L = c.max_len;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return batch.lengths[a] > batch.lengths[b]; });

  const bool use_dropout = rng != nullptr && c.dropout > 0.0;
  if (tape) {
    tape->kind = EncoderKind::Recurrent;
    tape->order = order;
    tape->gru.assign(static_cast<std::size_t>(L), {});
  }

  Matrix h = Matrix::Zero(static_cast<Eigen::Index>(n), c.hidden_dim);
  std::size_t active = 0;
  for (int t = 0; t < L; ++t) {
    // Sorted by length, so the rows whose sequence has started form a prefix.
    while (active < n && batch.lengths[order[active]] >= L - t) ++active;
    if (active == 0) continue;
    const auto k = static_cast<Eigen::Index>(active);

    std::vector<ItemId> items(active);
    Matrix x(k, c.embed_dim);
    for (std::size_t i = 0; i < active; ++i) {
      items[i] = batch.row(order[i])[static_cast<std::size_t>(t)];
      x.row(static_cast<Eigen::Index>(i)) = params.embedding.row(items[i]);
    }
    Matrix drop;
    if (use_dropout) {
      drop = dropout_mask(k, c.embed_dim, c.dropout, *rng);
      x = x.cwiseProduct(drop);
    }
    const Matrix h_prev = h.topRows(k);
    Matrix az = x * g.input_z + h_prev * g.recur_z;
    az.rowwise() += g.bias_z.row(0);
    Matrix ar = x * g.input_r + h_prev * g.recur_r;
    ar.rowwise() += g.bias_r.row(0);
    const Matrix z = sigmoid(az);
    const Matrix r = sigmoid(ar);
    Matrix an = x * g.input_n + r.cwiseProduct(h_prev) * g.recur_n;
    an.rowwise() += g.bias_n.row(0);
    const Matrix cand = an.array().tanh().matrix();
    h.topRows(k) = (1.0 - z.array()) * cand.array() + z.array() * h_prev.array();

    if (tape) {
      auto& step = tape->gru[static_cast<std::size_t>(t)];
      step.active = static_cast<int>(active);
      step.items = std::move(items);
      step.x = std::move(x);
      step.h_prev = h_prev;
      step.z = z;
      step.r = r;
      step.n = cand;
      step.drop = std::move(drop);
    }
  }

  Matrix out(static_cast<Eigen::Index>(n), c.hidden_dim);
  for (std::size_t i = 0; i < n; ++i) out.row(static_cast<Eigen::Index>(order[i])) = h.row(static_cast<Eigen::Index>(i));
  return out;
}

void gru_backward(const EncoderParams& params, const EncoderTape& tape, const Matrix& d_states, EncoderParams& grads) {
  const auto& g = params.gru;
  auto& dg = grads.gru;
  const auto n = tape.order.size();
  Matrix dh(static_cast<Eigen::Index>(n), params.config.hidden_dim);
  for (std::size_t i = 0; i < n; ++i) dh.row(static_cast<Eigen::Index>(i)) = d_states.row(static_cast<Eigen::Index>(tape.order[i]));

  for (auto t = static_cast<int>(tape.gru.size()) - 1; t >= 0; --t) {
    const auto& s = tape.gru[static_cast<std::size_t>(t)];
    if (s.active == 0) continue;
    const auto k = static_cast<Eigen::Index>(s.active);
    const Matrix grad_h = dh.topRows(k);

    const Matrix dn = grad_h.cwiseProduct((1.0 - s.z.array()).matrix());
    const Matrix dz = grad_h.cwiseProduct(s.h_prev - s.n);
    Matrix dh_prev = grad_h.cwiseProduct(s.z);

    const Matrix dan = dn.array() * (1.0 - s.n.array().square());
    const Matrix rh = s.r.cwiseProduct(s.h_prev);
    dg.input_n.noalias() += s.x.transpose() * dan;
    dg.recur_n.noalias() += rh.transpose() * dan;
    dg.bias_n += dan.colwise().sum();
    const Matrix drh = dan * g.recur_n.transpose();
    const Matrix dr = drh.cwiseProduct(s.h_prev);
    dh_prev += drh.cwiseProduct(s.r);

    const Matrix dar = dr.array() * s.r.array() * (1.0 - s.r.array());
    const Matrix daz = dz.array() * s.z.array() * (1.0 - s.z.array());
    dg.input_r.noalias() += s.x.transpose() * dar;
    dg.recur_r.noalias() += s.h_prev.transpose() * dar;
    dg.bias_r += dar.colwise().sum();
    dg.input_z.noalias() += s.x.transpose() * daz;
    dg.recur_z.noalias() += s.h_prev.transpose() * daz;
    dg.bias_z += daz.colwise().sum();
    dh_prev.noalias() += dar * g.recur_r.transpose() + daz * g.recur_z.transpose();

    Matrix dx = dan * g.input_n.transpose() + dar * g.input_r.transpose() + daz * g.input_z.transpose();
    if (s.drop.size() > 0) dx = dx.cwiseProduct(s.drop);
    for (Eigen::Index i = 0; i < k; ++i) grads.embedding.row(s.items[static_cast<std::size_t>(i)]) += dx.row(i);

    dh.topRows(k) = dh_prev;
  }
}

// ----------------------------------------------------------- self-attention

Matrix attention_forward_one(const EncoderParams& params, std::span<const ItemId> items,
                             EncoderTape::AttentionExample* ex, Rng* rng) {
  const auto& a = params.attention;
  const auto& c = params.config;
  const auto m = static_cast<Eigen::Index>(items.size());
  const int d = c.hidden_dim;
  const int heads = c.attention_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool use_dropout = rng != nullptr && c.dropout > 0.0;

  Matrix x0(m, d);
  for (Eigen::Index i = 0; i < m; ++i) x0.row(i) = params.embedding.row(items[static_cast<std::size_t>(i)]) + a.positions.row(i);
  Matrix drop_embed;
  if (use_dropout) {
    drop_embed = dropout_mask(m, d, c.dropout, *rng);
    x0 = x0.cwiseProduct(drop_embed);
  }

  Matrix a_hat, a_inv;
  const Matrix an = layer_norm(x0, a.norm_attention, a_hat, a_inv);
  const Matrix q = an * a.query;
  const Matrix k = an * a.key;
  const Matrix v = an * a.value;

  Matrix ctx(m, d);
  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Matrix s = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
    Matrix p = Matrix::Zero(m, m);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double mx = s.row(i).head(i + 1).maxCoeff();
      double total = 0.0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        p(i, j) = std::exp(s(i, j) - mx);
        total += p(i, j);
      }
      p.row(i).head(i + 1) /= total;
    }
    ctx.middleCols(h * dh, dh) = p * v.middleCols(h * dh, dh);
    probs[static_cast<std::size_t>(h)] = std::move(p);
  }
  Matrix o = ctx * a.output;
  o.rowwise() += a.output_bias.row(0);
  Matrix drop_attn;
  if (use_dropout) {
    drop_attn = dropout_mask(m, d, c.dropout, *rng);
    o = o.cwiseProduct(drop_attn);
  }
  const Matrix x1 = x0 + o;

  Matrix b_hat, b_inv;
  const Matrix bn = layer_norm(x1, a.norm_ffn, b_hat, b_inv);
  Matrix f_pre = bn * a.ffn_in;
  f_pre.rowwise() += a.ffn_in_bias.row(0);
  const Matrix f = f_pre.cwiseMax(0.0);
  Matrix gout = f * a.ffn_out;
  gout.rowwise() += a.ffn_out_bias.row(0);
  Matrix drop_ffn;
  if (use_dropout) {
    drop_ffn = dropout_mask(m, d, c.dropout, *rng);
    gout = gout.cwiseProduct(drop_ffn);
  }
  const Matrix x2 = x1 + gout;

  Matrix y_hat, y_inv;
  Matrix y = layer_norm(x2, a.norm_final, y_hat, y_inv);

  if (ex) {
    ex->m = static_cast<int>(m);
    ex->items.assign(items.begin(), items.end());
    ex->drop_embed = std::move(drop_embed);
    ex->drop_attn = std::move(drop_attn);
    ex->drop_ffn = std::move(drop_ffn);
    ex->x0 = x0;
    ex->a_hat = std::move(a_hat);
    ex->a_inv = std::move(a_inv);
    ex->a = an;
    ex->q = q;
    ex->k = k;
    ex->v = v;
    ex->c = std::move(ctx);
    ex->x1 = x1;
    ex->b_hat = std::move(b_hat);
    ex->b_inv = std::move(b_inv);
    ex->b = bn;
    ex->f_pre = std::move(f_pre);
    ex->f = f;
    ex->x2 = x2;
    ex->y_hat = std::move(y_hat);
    ex->y_inv = std::move(y_inv);
    ex->probs = std::move(probs);
  }
  return y;
}

void attention_backward_one(const EncoderParams& params, const EncoderTape::AttentionExample& ex, const Matrix& dy,
                            EncoderParams& grads) {
  const auto& a = params.attention;
  auto& ga = grads.attention;
  const int d = params.config.hidden_dim;
  const int heads = params.config.attention_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const Matrix dx2 = layer_norm_backward(dy, ex.y_hat, ex.y_inv, a.norm_final, ga.norm_final);
  Matrix dx1 = dx2;
  Matrix dg = dx2;
  if (ex.drop_ffn.size() > 0) dg = dg.cwiseProduct(ex.drop_ffn);
  ga.ffn_out.noalias() += ex.f.transpose() * dg;
  ga.ffn_out_bias += dg.colwise().sum();
  Matrix df = dg * a.ffn_out.transpose();
  df = df.array() * (ex.f_pre.array() > 0.0).cast<double>();
  ga.ffn_in.noalias() += ex.b.transpose() * df;
  ga.ffn_in_bias += df.colwise().sum();
  const Matrix db = df * a.ffn_in.transpose();
  dx1 += layer_norm_backward(db, ex.b_hat, ex.b_inv, a.norm_ffn, ga.norm_ffn);

  Matrix dx0 = dx1;
  Matrix d_o = dx1;
  if (ex.drop_attn.size() > 0) d_o = d_o.cwiseProduct(ex.drop_attn);
  ga.output.noalias() += ex.c.transpose() * d_o;
  ga.output_bias += d_o.colwise().sum();
  const Matrix dc = d_o * a.output.transpose();

  const auto m = static_cast<Eigen::Index>(ex.m);
  Matrix dq(m, d), dk(m, d), dv(m, d);
  for (int h = 0; h < heads; ++h) {
    const Matrix& p = ex.probs[static_cast<std::size_t>(h)];
    const auto dch = dc.middleCols(h * dh, dh);
    const Matrix dp = dch * ex.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh) = p.transpose() * dch;
    const Vector row_dot = (dp.array() * p.array()).rowwise().sum();
    const Matrix ds = p.array() * (dp.colwise() - row_dot).array();
    dq.middleCols(h * dh, dh) = ds * ex.k.middleCols(h * dh, dh) * scale;
    dk.middleCols(h * dh, dh) = ds.transpose() * ex.q.middleCols(h * dh, dh) * scale;
  }
  ga.query.noalias() += ex.a.transpose() * dq;
  ga.key.noalias() += ex.a.transpose() * dk;
  ga.value.noalias() += ex.a.transpose() * dv;
  const Matrix da = dq * a.query.transpose() + dk * a.key.transpose() + dv * a.value.transpose();
  dx0 += layer_norm_backward(da, ex.a_hat, ex.a_inv, a.norm_attention, ga.norm_attention);

  if (ex.drop_embed.size() > 0) dx0 = dx0.cwiseProduct(ex.drop_embed);
  for (Eigen::Index i = 0; i < m; ++i) {
    grads.embedding.row(ex.items[static_cast<std::size_t>(i)]) += dx0.row(i);
    ga.positions.row(i) += dx0.row(i);
  }
}

std::span<const ItemId> real_items(const SequenceBatch& batch, std::size_t b) {
  const auto row = batch.row(b);
  const auto len = static_cast<std::size_t>(batch.lengths[b]);
  return row.subspan(row.size() - len, len);
}

Matrix attention_forward(const EncoderParams& params, const SequenceBatch& batch, EncoderTape* tape, Rng* rng) {
  const auto n = batch.size();
  Matrix out(static_cast<Eigen::Index>(n), params.config.hidden_dim);
  if (tape) {
    tape->kind = EncoderKind::SelfAttention;
    tape->attention.assign(n, {});
  }
  for (std::size_t b = 0; b < n; ++b) {
    const Matrix y = attention_forward_one(params, real_items(batch, b), tape ? &tape->attention[b] : nullptr, rng);
    out.row(static_cast<Eigen::Index>(b)) = y.row(y.rows() - 1);
  }
  return out;
}

}  // namespace

EncoderParams init_encoder(const EncoderConfig& config, Rng& rng) {
  config.validate();
  EncoderParams p;
  p.config = config;
  const int E = config.embed_dim;
  const int H = config.hidden_dim;
  p.embedding = glorot(config.n_items + 1, E, rng);
  p.embedding.row(config.pad_item()).setZero();
  if (config.kind == EncoderKind::Recurrent) {
    auto& g = p.gru;
    g.input_z = glorot(E, H, rng);
    g.input_r = glorot(E, H, rng);
    g.input_n = glorot(E, H, rng);
    g.recur_z = glorot(H, H, rng);
    g.recur_r = glorot(H, H, rng);
    g.recur_n = glorot(H, H, rng);
    g.bias_z = Matrix::Zero(1, H);
    g.bias_r = Matrix::Zero(1, H);
    g.bias_n = Matrix::Zero(1, H);
  } else {
    auto& a = p.attention;
    a.positions = glorot(config.max_len, H, rng);
    a.norm_attention = layer_norm_init(H);
    a.query = glorot(H, H, rng);
    a.key = glorot(H, H, rng);
    a.value = glorot(H, H, rng);
    a.output = glorot(H, H, rng);
    a.output_bias = Matrix::Zero(1, H);
    a.norm_ffn = layer_norm_init(H);
    a.ffn_in = glorot(H, H, rng);
    a.ffn_in_bias = Matrix::Zero(1, H);
    a.ffn_out = glorot(H, H, rng);
    a.ffn_out_bias = Matrix::Zero(1, H);
    a.norm_final = layer_norm_init(H);
  }
  return p;
}

EncoderParams init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  return init_encoder(config, rng);
}

EncoderParams zeros_like(const EncoderParams& params) {
  EncoderParams z = params;
  for_each_encoder_param(z, [](const std::string&, Matrix& m) { m.setZero(); });
  return z;
}

Matrix encode_batch(const EncoderParams& params, const SequenceBatch& batch) {
  validate_batch(params, batch);
  if (params.config.kind == EncoderKind::Recurrent) return gru_forward(params, batch, nullptr, nullptr);
  return attention_forward(params, batch, nullptr, nullptr);
}

Matrix encode_batch(const EncoderParams& params, const SequenceBatch& batch, EncoderTape& tape, Rng* dropout_rng) {
  validate_batch(params, batch);
  if (params.config.kind == EncoderKind::Recurrent) return gru_forward(params, batch, &tape, dropout_rng);
  return attention_forward(params, batch, &tape, dropout_rng);
}

void encoder_backward(const EncoderParams& params, const EncoderTape& tape, const Matrix& d_states,
                      EncoderParams& grads) {
  if (tape.kind == EncoderKind::Recurrent) {
    require(d_states.rows() == static_cast<Eigen::Index>(tape.order.size()), ErrorCategory::Shape,
            "state gradient rows != batch size");
    gru_backward(params, tape, d_states, grads);
    return;
  }
  require(d_states.rows() == static_cast<Eigen::Index>(tape.attention.size()), ErrorCategory::Shape,
          "state gradient rows != batch size");
  for (std::size_t b = 0; b < tape.attention.size(); ++b) {
    const auto& ex = tape.attention[b];
    Matrix dy = Matrix::Zero(ex.m, params.config.hidden_dim);
    dy.row(ex.m - 1) = d_states.row(static_cast<Eigen::Index>(b));
    attention_backward_one(params, ex, dy, grads);
  }
}

Vector encode(const EncoderParams& params, std::span<const ItemId> state, int state_len) {
  SequenceBatch batch(params.config.max_len);
  batch.add(state, state_len);
  return encode_batch(params, batch).row(0).transpose();
}

Matrix attention_position_outputs(const EncoderParams& params, std::span<const ItemId> items) {
  require(params.config.kind == EncoderKind::SelfAttention, ErrorCategory::Config,
          "position outputs exist only for the self-attention encoder");
  require(!items.empty() && static_cast<int>(items.size()) <= params.config.max_len, ErrorCategory::Shape,
          "sequence length outside [1, max_len]");
  for (ItemId id : items)
    require(id >= 0 && id <= params.config.n_items, ErrorCategory::Shape, "item id out of range");
  return attention_forward_one(params, items, nullptr, nullptr);
}

}  // namespace seqrl
