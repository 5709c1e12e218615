#include "seqrl/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "seqrl/random.hpp"

namespace seqrl {

void SyntheticSpec::validate() const {
  require(n_items >= 1, ErrorCategory::Config, "synthetic n_items must be >= 1");
  require(n_sessions >= 1, ErrorCategory::Config, "synthetic n_sessions must be >= 1");
  require(min_length >= 1 && max_length >= min_length, ErrorCategory::Config, "need 1 <= min_length <= max_length");
  require(std::isfinite(mean_length) && mean_length >= min_length, ErrorCategory::Config,
          "mean_length must be >= min_length");
  const auto n = static_cast<Eigen::Index>(n_items);
  require(kernel.rows() == n && kernel.cols() == n, ErrorCategory::Shape, "kernel must be n_items x n_items");
  require(initial.size() == n && propensity.size() == n, ErrorCategory::Shape,
          "initial and propensity need one entry per item");
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = kernel.row(i);
    const bool ok = row.allFinite() && row.minCoeff() >= 0.0 && std::abs(row.sum() - 1.0) <= 1e-9;
    require(ok, ErrorCategory::Config, "kernel row " + std::to_string(i) + " is not a probability distribution");
  }
  require(initial.allFinite() && initial.minCoeff() >= 0.0 && std::abs(initial.sum() - 1.0) <= 1e-9,
          ErrorCategory::Config, "initial distribution must sum to 1");
  require(propensity.allFinite() && propensity.minCoeff() >= 0.0 && propensity.maxCoeff() <= 1.0,
          ErrorCategory::Config, "propensities must lie in [0, 1]");
}

nlohmann::json to_json(const KernelOptions& o) {
  return {{"n_items", o.n_items},
          {"n_sessions", o.n_sessions},
          {"mean_length", o.mean_length},
          {"min_length", o.min_length},
          {"max_length", o.max_length},
          {"successors", o.successors},
          {"concentration", o.concentration},
          {"purchasable_fraction", o.purchasable_fraction},
          {"propensity_low", o.propensity_low},
          {"propensity_high", o.propensity_high},
          {"base_propensity", o.base_propensity}};
}

KernelOptions kernel_options_from_json(const nlohmann::json& j) {
  KernelOptions o;
  o.n_items = j.value("n_items", o.n_items);
  o.n_sessions = j.value("n_sessions", o.n_sessions);
  o.mean_length = j.value("mean_length", o.mean_length);
  o.min_length = j.value("min_length", o.min_length);
  o.max_length = j.value("max_length", o.max_length);
  o.successors = j.value("successors", o.successors);
  o.concentration = j.value("concentration", o.concentration);
  o.purchasable_fraction = j.value("purchasable_fraction", o.purchasable_fraction);
  o.propensity_low = j.value("propensity_low", o.propensity_low);
  o.propensity_high = j.value("propensity_high", o.propensity_high);
  o.base_propensity = j.value("base_propensity", o.base_propensity);
  return o;
}

namespace {

SyntheticSpec shell(int n_items, std::size_t n_sessions, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_items = n_items;
  spec.n_sessions = n_sessions;
  spec.seed = seed;
  const auto n = static_cast<Eigen::Index>(n_items);
  spec.kernel = Matrix::Zero(n, n);
  spec.initial = Vector::Constant(n, 1.0 / static_cast<double>(n));
  spec.propensity = Vector::Zero(n);
  return spec;
}

// Inverse CDF over a probability row; falls back to the last positive entry
// when rounding leaves u above the accumulated mass.
template <class Row>
ItemId sample_categorical(const Row& probs, double u) {
  double acc = 0.0;
  Eigen::Index last = -1;
  for (Eigen::Index j = 0; j < probs.size(); ++j) {
    if (probs(j) <= 0.0) continue;
    acc += probs(j);
    last = j;
    if (u < acc) return static_cast<ItemId>(j);
  }
  return static_cast<ItemId>(last);
}

int sample_length(const SyntheticSpec& spec, Rng& rng) {
  const double extra_mean = spec.mean_length - spec.min_length;
  int extra = 0;
  if (extra_mean > 0.0) {
    const double stop = 1.0 / (1.0 + extra_mean);
    const double u = 1.0 - uniform01(rng);  // (0, 1]
    extra = static_cast<int>(std::floor(std::log(u) / std::log1p(-stop)));
  }
  return std::min(spec.min_length + std::max(extra, 0), spec.max_length);
}

}  // namespace

SyntheticSpec default_synthetic_spec(const KernelOptions& o, std::uint64_t seed) {
  require(o.n_items >= 2, ErrorCategory::Config, "synthetic catalogue needs at least 2 items");
  require(o.successors >= 1 && o.successors < o.n_items, ErrorCategory::Config,
          "successors must lie in [1, n_items)");
  require(o.concentration > 0.0, ErrorCategory::Config, "concentration must be > 0");
  require(o.purchasable_fraction >= 0.0 && o.purchasable_fraction <= 1.0, ErrorCategory::Config,
          "purchasable_fraction must lie in [0, 1]");
  require(0.0 <= o.propensity_low && o.propensity_low <= o.propensity_high && o.propensity_high <= 1.0,
          ErrorCategory::Config, "need 0 <= propensity_low <= propensity_high <= 1");
  require(o.base_propensity >= 0.0 && o.base_propensity <= 1.0, ErrorCategory::Config,
          "base_propensity must lie in [0, 1]");

  auto spec = shell(o.n_items, o.n_sessions, seed);
  spec.mean_length = o.mean_length;
  spec.min_length = o.min_length;
  spec.max_length = o.max_length;

  Rng rng = make_stream(seed, "kernel");
  std::gamma_distribution<double> gamma(o.concentration, 1.0);
  std::vector<ItemId> others(static_cast<std::size_t>(o.n_items - 1));
  for (ItemId i = 0; i < o.n_items; ++i) {
    // successors drawn without replacement from every item but i
    std::iota(others.begin(), others.end(), 0);
    for (auto& v : others) v += (v >= i);
    double total = 0.0;
    for (int k = 0; k < o.successors; ++k) {
      const auto pick = k + static_cast<std::size_t>(uniform_index(rng, others.size() - static_cast<std::size_t>(k)));
      std::swap(others[static_cast<std::size_t>(k)], others[pick]);
      const double w = std::max(gamma(rng), 1e-12);
      spec.kernel(i, others[static_cast<std::size_t>(k)]) = w;
      total += w;
    }
    spec.kernel.row(i) /= total;
  }

  Rng prop = make_stream(seed, "propensity");
  std::vector<ItemId> items(static_cast<std::size_t>(o.n_items));
  std::iota(items.begin(), items.end(), 0);
  shuffle_in_place(items, prop);
  const auto n_purchasable =
      static_cast<std::size_t>(std::llround(o.purchasable_fraction * static_cast<double>(o.n_items)));
  spec.propensity.setConstant(o.base_propensity);
  for (std::size_t k = 0; k < n_purchasable; ++k) {
    spec.propensity(items[k]) = o.propensity_low + (o.propensity_high - o.propensity_low) * uniform01(prop);
  }
  spec.validate();
  return spec;
}

SyntheticSpec cyclic_synthetic_spec(int n_items, std::size_t n_sessions, std::uint64_t seed) {
  require(n_items >= 1, ErrorCategory::Config, "synthetic n_items must be >= 1");
  auto spec = shell(n_items, n_sessions, seed);
  for (int i = 0; i < n_items; ++i) spec.kernel(i, (i + 1) % n_items) = 1.0;
  return spec;
}

SyntheticSpec uniform_synthetic_spec(int n_items, std::size_t n_sessions, std::uint64_t seed) {
  require(n_items >= 1, ErrorCategory::Config, "synthetic n_items must be >= 1");
  auto spec = shell(n_items, n_sessions, seed);
  spec.kernel.setConstant(1.0 / static_cast<double>(n_items));
  return spec;
}

SessionSet generate(const SyntheticSpec& spec) {
  spec.validate();
  SessionSet out;
  out.item_keys.reserve(static_cast<std::size_t>(spec.n_items));
  for (int i = 0; i < spec.n_items; ++i) out.item_keys.push_back(std::to_string(i));
  out.sessions.resize(spec.n_sessions);
  for (std::size_t s = 0; s < spec.n_sessions; ++s) {
    Rng rng(derive_seed(spec.seed, "session/" + std::to_string(s)));
    auto& session = out.sessions[s];
    session.id = "s" + std::to_string(s);
    const int length = sample_length(spec, rng);
    session.events.reserve(static_cast<std::size_t>(length));
    ItemId item = sample_categorical(spec.initial, uniform01(rng));
    for (int t = 0; t < length; ++t) {
      if (t > 0) item = sample_categorical(spec.kernel.row(item), uniform01(rng));
      require(item >= 0, ErrorCategory::Config, "degenerate kernel row");
      const bool bought = uniform01(rng) < spec.propensity(item);
      session.events.push_back({item, bought ? Behavior::Purchase : Behavior::Click, static_cast<double>(t)});
    }
  }
  return out;
}

namespace {

ItemId last_item(const SyntheticSpec& spec, std::span<const ItemId> state) {
  // states may be left padded with the pad id n_items
  for (auto it = state.rbegin(); it != state.rend(); ++it) {
    if (*it == spec.n_items) continue;
    require(*it >= 0 && *it < spec.n_items, ErrorCategory::Shape, "state item out of range");
    return *it;
  }
  fail(ErrorCategory::Shape, "state has no real item");
}

}  // namespace

Vector oracle_next_distribution(const SyntheticSpec& spec, std::span<const ItemId> state) {
  return spec.kernel.row(last_item(spec, state)).transpose();
}

Vector expected_rewards(const SyntheticSpec& spec, const RewardSchema& schema) {
  return (Vector::Constant(spec.n_items, schema.r_click).array() +
          (schema.r_purchase - schema.r_click) * spec.propensity.array())
      .matrix();
}

Vector oracle_q_table(const SyntheticSpec& spec, const RewardSchema& schema, int horizon) {
  require(horizon >= 1, ErrorCategory::Config, "horizon must be >= 1");
  spec.validate();
  const Vector reward = expected_rewards(spec, schema);
  Vector q = reward;
  for (int h = 2; h <= horizon; ++h) {
    Vector next(q.size());
    for (Eigen::Index a = 0; a < q.size(); ++a) {
      double best = -std::numeric_limits<double>::infinity();
      for (Eigen::Index b = 0; b < q.size(); ++b) {
        if (spec.kernel(a, b) > 0.0) best = std::max(best, q(b));
      }
      next(a) = reward(a) + schema.gamma * best;
    }
    q = std::move(next);
  }
  return q;
}

double oracle_q(const SyntheticSpec& spec, const RewardSchema& schema, std::span<const ItemId> state, ItemId action,
                int horizon) {
  last_item(spec, state);
  require(action >= 0 && action < spec.n_items, ErrorCategory::Shape, "action out of range");
  return oracle_q_table(spec, schema, horizon)(action);
}

OracleScores oracle_scores(const SyntheticSpec& spec, const RewardSchema& schema, std::span<const ItemId> state,
                           int horizon) {
  return {oracle_next_distribution(spec, state), oracle_q_table(spec, schema, horizon)};
}

nlohmann::json to_json(const SyntheticSpec& spec) {
  nlohmann::json kernel = nlohmann::json::array();
  for (Eigen::Index i = 0; i < spec.kernel.rows(); ++i) {
    // sparse rows: [[column, probability], ...]
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < spec.kernel.cols(); ++j) {
      if (spec.kernel(i, j) != 0.0) row.push_back({j, spec.kernel(i, j)});
    }
    kernel.push_back(std::move(row));
  }
  return {{"n_items", spec.n_items},
          {"n_sessions", spec.n_sessions},
          {"mean_length", spec.mean_length},
          {"min_length", spec.min_length},
          {"max_length", spec.max_length},
          {"seed", spec.seed},
          {"initial", std::vector<double>(spec.initial.data(), spec.initial.data() + spec.initial.size())},
          {"propensity",
           std::vector<double>(spec.propensity.data(), spec.propensity.data() + spec.propensity.size())},
          {"kernel", std::move(kernel)}};
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec spec;
  spec.n_items = j.at("n_items").get<int>();
  spec.n_sessions = j.at("n_sessions").get<std::size_t>();
  spec.mean_length = j.at("mean_length").get<double>();
  spec.min_length = j.at("min_length").get<int>();
  spec.max_length = j.at("max_length").get<int>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  const auto n = static_cast<Eigen::Index>(spec.n_items);
  const auto initial = j.at("initial").get<std::vector<double>>();
  const auto propensity = j.at("propensity").get<std::vector<double>>();
  require(static_cast<Eigen::Index>(initial.size()) == n && static_cast<Eigen::Index>(propensity.size()) == n,
          ErrorCategory::Schema, "synthetic spec vectors must have n_items entries");
  spec.initial = Eigen::Map<const Vector>(initial.data(), n);
  spec.propensity = Eigen::Map<const Vector>(propensity.data(), n);
  const auto& rows = j.at("kernel");
  require(rows.is_array() && static_cast<Eigen::Index>(rows.size()) == n, ErrorCategory::Schema,
          "synthetic kernel must have n_items rows");
  spec.kernel = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (const auto& cell : rows[static_cast<std::size_t>(i)]) {
      const auto col = cell.at(0).get<Eigen::Index>();
      require(col >= 0 && col < n, ErrorCategory::Schema, "kernel column out of range");
      spec.kernel(i, col) = cell.at(1).get<double>();
    }
  }
  spec.validate();
  return spec;
}

void save_synthetic_spec(const SyntheticSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCategory::Io, "cannot write " + path.string());
  out << to_json(spec).dump(1) << '\n';
}

SyntheticSpec load_synthetic_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCategory::Io, "cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::Parse, path.string() + ": " + e.what());
  }
  return synthetic_spec_from_json(j);
}

}  // namespace seqrl
