#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "seqrl/data.hpp"
#include "seqrl/encoder.hpp"
#include "seqrl/evaluation.hpp"
#include "seqrl/synthetic.hpp"
#include "seqrl/training.hpp"

namespace seqrl {

struct FileDataset {
  std::filesystem::path path;
  LoadOptions load;
  PreprocessOptions preprocess;
};

struct DatasetSource {
  std::optional<KernelOptions> synthetic;
  std::optional<FileDataset> file;

  /// Exactly one source must be set.
  void validate() const;
};

enum class SweepAxis { RewardRatio, Gamma };

std::string_view to_string(SweepAxis axis);
SweepAxis parse_sweep_axis(std::string_view text);

struct SweepSpec {
  SweepAxis axis = SweepAxis::RewardRatio;
  std::vector<double> values;
};

struct ExperimentConfig {
  DatasetSource dataset;
  SplitRatios split{0.8, 0.1, 0.1};
  EncoderConfig encoder;  // n_items is filled in from the data
  TrainConfig train;
  Variant variant = Variant::Sqn;
  std::optional<SweepSpec> sweep;
  int repeats = 5;
  std::uint64_t seed = 0;
  std::optional<std::size_t> test_event_cap;
  std::filesystem::path output_dir;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

/// Seed of repeat r: every random choice of that repeat (synthetic world,
/// split, initialisation, batching) derives from it.
inline std::uint64_t repeat_seed(std::uint64_t master, int repeat) {
  return master + static_cast<std::uint64_t>(repeat);
}

struct PreparedData {
  SessionSet sessions;
  DatasetSplit split;
  std::optional<SyntheticSpec> synthetic;
};

PreparedData prepare_data(const DatasetSource& source, const SplitRatios& ratios, std::uint64_t seed);

struct RunResult {
  std::uint64_t seed = 0;
  MetricsReport test;
  std::optional<MetricsReport> validation;
  std::vector<MetricRecord> history;
  std::int64_t updates = 0;
  bool early_stopped = false;
  double seconds = 0.0;
  DualHeadModel model;  // best validation model
};

struct RunOptions {
  /// Written after every evaluation and at the end when set.
  std::optional<std::filesystem::path> checkpoint;
  bool resume = false;
  std::function<void(const MetricRecord&)> on_record;
};

/// Trains one model on prepared data and scores the best checkpoint on the test split.
RunResult run_on_data(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed,
                      const RunOptions& options = {});

RunResult run_once(const ExperimentConfig& config, std::uint64_t seed, const RunOptions& options = {});

/// Applies one sweep value to a config (reward ratio keeps r_click).
ExperimentConfig with_sweep_value(const ExperimentConfig& config, SweepAxis axis, double value);

struct SweepRow {
  double value = 0.0;
  int repeat = 0;
  CellKey cell;
  double score = 0.0;
};

inline constexpr std::string_view kSweepCsvHeader = "value,repeat,behavior,metric,k,score";

std::vector<SweepRow> sweep_rows(double value, int repeat, const MetricsReport& report);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

/// Short identifier of the build, written into every run directory.
std::string version_stamp();

}  // namespace seqrl
