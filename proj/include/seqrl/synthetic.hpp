#pragma once

#include <cstdint>
#include <filesystem>
#include <span>

#include <nlohmann/json_fwd.hpp>

#include "seqrl/data.hpp"

namespace seqrl {

/// A session generator with known dynamics: a first-order Markov kernel over
/// items, a start distribution, and a per-item probability that an
/// interaction with the item is a purchase.
struct SyntheticSpec {
  int n_items = 200;
  std::size_t n_sessions = 2000;
  /// Lengths are min_length + Geometric, capped at max_length.
  double mean_length = 6.0;
  int min_length = 3;
  int max_length = 50;
  Matrix kernel;       // n_items x n_items, row i = P(next | last = i)
  Vector initial;      // P(first item)
  Vector propensity;   // P(purchase | item)
  std::uint64_t seed = 0;

  void validate() const;
};

/// Knobs for the random kernel used by default_synthetic_spec.
struct KernelOptions {
  int n_items = 200;
  std::size_t n_sessions = 2000;
  double mean_length = 6.0;
  int min_length = 3;
  int max_length = 50;
  /// Distinct successors per item; the rest of the row is zero.
  int successors = 8;
  /// Dirichlet concentration of each row's successor weights.
  double concentration = 0.5;
  double purchasable_fraction = 0.1;
  double propensity_low = 0.3;
  double propensity_high = 0.6;
  /// Purchase probability of the items that are not purchasable.
  double base_propensity = 0.0;
};

nlohmann::json to_json(const KernelOptions& options);
KernelOptions kernel_options_from_json(const nlohmann::json& j);

SyntheticSpec default_synthetic_spec(const KernelOptions& options, std::uint64_t seed);

/// Item i always moves to (i + 1) mod n.
SyntheticSpec cyclic_synthetic_spec(int n_items, std::size_t n_sessions, std::uint64_t seed);
SyntheticSpec uniform_synthetic_spec(int n_items, std::size_t n_sessions, std::uint64_t seed);

/// Session s is drawn from its own stream derived from (seed, s), so the
/// output does not depend on generation order. Item ids equal kernel indices.
SessionSet generate(const SyntheticSpec& spec);

/// Next-item distribution given a state; only the last real item matters.
Vector oracle_next_distribution(const SyntheticSpec& spec, std::span<const ItemId> state);

/// Expected immediate reward of each item.
Vector expected_rewards(const SyntheticSpec& spec, const RewardSchema& schema);

/// Finite-horizon optimal Q of every action. Q_1(a) = E[r | a] and
/// Q_h(a) = E[r | a] + gamma * max over successors a' of a of Q_{h-1}(a').
/// The state enters only through its last item, which does not constrain
/// the action under a first-order chain, so the table is state-free.
Vector oracle_q_table(const SyntheticSpec& spec, const RewardSchema& schema, int horizon);

double oracle_q(const SyntheticSpec& spec, const RewardSchema& schema, std::span<const ItemId> state, ItemId action,
                int horizon);

struct OracleScores {
  Vector next_distribution;
  Vector q;
};

OracleScores oracle_scores(const SyntheticSpec& spec, const RewardSchema& schema, std::span<const ItemId> state,
                           int horizon);

nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

void save_synthetic_spec(const SyntheticSpec& spec, const std::filesystem::path& path);
SyntheticSpec load_synthetic_spec(const std::filesystem::path& path);

}  // namespace seqrl
