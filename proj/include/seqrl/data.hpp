#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "seqrl/common.hpp"

namespace seqrl {

enum class Behavior : std::uint8_t { Click = 0, Purchase = 1 };

inline constexpr std::array<Behavior, 2> kBehaviors{Behavior::Click, Behavior::Purchase};

std::string_view to_string(Behavior behavior);
/// Accepts click/view/purchase/buy/transaction (case-insensitive).
std::optional<Behavior> parse_behavior(std::string_view token);

struct Interaction {
  ItemId item = 0;
  Behavior behavior = Behavior::Click;
  double timestamp = 0.0;
};

struct Session {
  std::string id;
  std::vector<Interaction> events;

  std::size_t size() const { return events.size(); }
};

/// Sessions over a dense item catalogue {0, ..., n_items-1}. The padding item
/// is the extra index n_items and never appears inside a session.
struct SessionSet {
  std::vector<Session> sessions;
  /// Raw identifier of every dense item index.
  std::vector<std::string> item_keys;

  int n_items() const { return static_cast<int>(item_keys.size()); }
  ItemId pad_item() const { return static_cast<ItemId>(item_keys.size()); }
  std::size_t size() const { return sessions.size(); }
  bool empty() const { return sessions.empty(); }
};

struct DatasetStats {
  std::size_t sequences = 0;
  int items = 0;
  std::size_t clicks = 0;
  std::size_t purchases = 0;
};

DatasetStats compute_stats(const SessionSet& sessions);

struct RewardSchema {
  double r_click = 1.0;
  double r_purchase = 5.0;
  double gamma = 0.5;

  void validate() const;
  double reward(Behavior behavior) const {
    return behavior == Behavior::Purchase ? r_purchase : r_click;
  }
  /// r_click fixed, r_purchase = ratio * r_click.
  static RewardSchema from_ratio(double ratio, double gamma, double r_click = 1.0);
};

struct ReplayTuple {
  std::vector<ItemId> state;
  int state_len = 0;
  ItemId action = 0;
  Behavior behavior = Behavior::Click;
  double reward = 0.0;
  std::vector<ItemId> next_state;
  int next_state_len = 0;
  bool terminal = false;
  std::uint32_t session_index = 0;
};

/// Replay tuples of a session set plus, per session, the sorted set of items
/// the session touched (used when sampling unseen negatives).
struct ReplayBuffer {
  std::vector<ReplayTuple> tuples;
  std::vector<std::vector<ItemId>> session_items;
  int n_items = 0;
  int max_len = 0;
  std::size_t skipped_sessions = 0;

  std::size_t size() const { return tuples.size(); }
};

struct DatasetSplit {
  SessionSet train;
  SessionSet validation;
  SessionSet test;
};

enum class InputFormat { Csv, Tsv };

struct LoadOptions {
  InputFormat format = InputFormat::Csv;
  /// Overrides the delimiter implied by `format` when set.
  std::optional<char> delimiter;
};

/// Reads delimited text with a header naming session_id, timestamp, item_id
/// and behavior (any column order). Sessions keep their first-appearance
/// order, events are stably sorted by timestamp and items are re-indexed
/// densely in first-appearance order.
SessionSet load_sessions(const std::filesystem::path& path, const LoadOptions& options = {});
SessionSet parse_sessions(std::string_view text, const LoadOptions& options = {});

void write_sessions(const SessionSet& sessions, const std::filesystem::path& path, char delimiter = ',');

struct PreprocessOptions {
  int min_session_len = 3;
  std::optional<int> min_item_count;
  std::optional<std::size_t> sample_n;
  std::uint64_t seed = 0;
};

/// Item-frequency filter, then session-length filter, then optional seeded
/// subsample; surviving items are re-indexed densely.
SessionSet preprocess(const SessionSet& sessions, const PreprocessOptions& options);

/// Re-indexes items to {0..n-1} in first-appearance order, dropping unused keys.
SessionSet reindex_items(const SessionSet& sessions);

using SplitRatios = std::array<double, 3>;

/// Largest-remainder apportionment of n sessions; every part gets at least one.
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios);

DatasetSplit split_sessions(const SessionSet& sessions, const SplitRatios& ratios, std::uint64_t seed);

std::vector<ReplayTuple> build_replay_tuples(const Session& session, int max_len, ItemId pad_item,
                                             const RewardSchema& schema, std::uint32_t session_index = 0);

ReplayBuffer build_replay_buffer(const SessionSet& sessions, int max_len, const RewardSchema& schema);

/// Text shard: one tuple per line, tab-separated fields with space-separated ids.
void write_tuple_shard(const ReplayBuffer& buffer, const std::filesystem::path& path);
ReplayBuffer read_tuple_shard(const std::filesystem::path& path);

nlohmann::json to_json(const RewardSchema& schema);
RewardSchema reward_schema_from_json(const nlohmann::json& j);

}  // namespace seqrl
