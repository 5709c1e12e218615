#pragma once

#include <array>
#include <compare>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "seqrl/data.hpp"
#include "seqrl/model.hpp"

namespace seqrl {

enum class Metric { HitRatio, Ndcg };

std::string_view to_string(Metric metric);

struct CellKey {
  Behavior behavior = Behavior::Click;
  Metric metric = Metric::HitRatio;
  int k = 10;

  auto operator<=>(const CellKey&) const = default;
  /// e.g. "purchase/ndcg@10"
  std::string name() const;
};

struct CellStats {
  double mean = 0.0;
  std::vector<double> repeats;
};

/// HR@k and NDCG@k per behavior class. A single evaluation is a report with
/// one repeat; combine_repeats stacks runs cell by cell.
struct MetricsReport {
  std::vector<int> ks;
  std::array<std::size_t, 2> events{};  // indexed by Behavior
  std::map<CellKey, CellStats> cells;

  double value(Behavior behavior, Metric metric, int k) const;
  std::size_t event_count(Behavior behavior) const { return events[static_cast<std::size_t>(behavior)]; }
};

/// Item ids by descending score; equal scores keep the lower id first.
struct RankedList {
  std::vector<ItemId> order;
};

RankedList rank(std::span<const double> scores);
RankedList rank(const Vector& scores);

/// 1-based position of `truth` under the same ordering as `rank`, in O(n).
int rank_of(std::span<const double> scores, ItemId truth);

inline int hit_from_rank(int rank, int k) { return rank <= k ? 1 : 0; }
/// Single relevant item, so the ideal DCG is 1.
double ndcg_from_rank(int rank, int k);

int hr_at_k(const RankedList& ranked, ItemId truth, int k);
double ndcg_at_k(const RankedList& ranked, ItemId truth, int k);

/// Scores every real item for each row of a batch of states.
using BatchScorer = std::function<Matrix(const SequenceBatch&)>;

struct EvalOptions {
  std::vector<int> ks{5, 10, 20};
  int max_len = 10;
  ItemId pad_item = 0;
  /// Score at most this many events (in session order) when set.
  std::optional<std::size_t> event_cap;
  std::size_t chunk = 512;
};

/// Replays each session one event at a time: the last max_len items of
/// x_1..x_t are encoded and the rank of x_{t+1} is scored under its behavior.
MetricsReport rolling_evaluate(const BatchScorer& scorer, const SessionSet& sessions, const EvalOptions& options);

enum class RankingHead { Supervised, Q };

BatchScorer network_scorer(const Network& net, RankingHead head, QActivation activation);

MetricsReport rolling_evaluate(const Network& net, RankingHead head, QActivation activation,
                               const SessionSet& sessions, const EvalOptions& options);

/// Stacks single-run reports; every cell gets the mean and per-repeat values.
MetricsReport combine_repeats(const std::vector<MetricsReport>& reports);

struct PairedTest {
  double mean_diff = 0.0;
  double t_stat = 0.0;
  double p_value = 1.0;
  /// Zero variance of the differences: p is 1 when they are all zero, else 0.
  bool degenerate = false;
};

/// Two-sided paired t-test of variant against baseline, n-1 degrees of freedom.
PairedTest paired_t_test(std::span<const double> variant, std::span<const double> baseline);

struct ComparisonRow {
  CellKey cell;
  double baseline_mean = 0.0;
  double variant_mean = 0.0;
  PairedTest test;
  bool significant = false;
};

/// Means per cell and a paired test of variant vs baseline repeats.
std::vector<ComparisonRow> aggregate_repeats(const std::vector<MetricsReport>& variant,
                                             const std::vector<MetricsReport>& baseline, double alpha = 0.01);
std::vector<ComparisonRow> aggregate_repeats(const MetricsReport& variant, const MetricsReport& baseline,
                                             double alpha = 0.01);

nlohmann::json to_json(const MetricsReport& report);
MetricsReport metrics_report_from_json(const nlohmann::json& j);

/// Columns: behavior,metric,k,events,mean,repeats (repeats ';'-joined).
void write_report_csv(const MetricsReport& report, const std::filesystem::path& path);

inline constexpr std::string_view kComparisonCsvHeader =
    "behavior,metric,k,baseline_mean,variant_mean,mean_diff,t_stat,p_value,significant,degenerate";
void write_comparison_csv(const std::vector<ComparisonRow>& rows, const std::filesystem::path& path);

}  // namespace seqrl
