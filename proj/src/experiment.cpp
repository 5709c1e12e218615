#include "seqrl/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

#include <nlohmann/json.hpp>

namespace seqrl {

void DatasetSource::validate() const {
  require(synthetic.has_value() != file.has_value(), ErrorCategory::Config,
          "exactly one dataset source (synthetic or file) must be configured");
}

std::string_view to_string(SweepAxis axis) { return axis == SweepAxis::Gamma ? "gamma" : "reward_ratio"; }

SweepAxis parse_sweep_axis(std::string_view text) {
  if (text == "gamma") return SweepAxis::Gamma;
  if (text == "reward_ratio" || text == "ratio") return SweepAxis::RewardRatio;
  fail(ErrorCategory::Config, "unknown sweep axis '" + std::string(text) + "'");
}

void ExperimentConfig::validate() const {
  dataset.validate();
  train.validate();
  require(repeats >= 1, ErrorCategory::Config, "repeats must be >= 1");
  double total = 0.0;
  for (double r : split) {
    require(r > 0.0, ErrorCategory::Config, "split ratios must be positive");
    total += r;
  }
  require(std::abs(total - 1.0) < 1e-9, ErrorCategory::Config, "split ratios must sum to 1");
  if (sweep) {
    require(!sweep->values.empty(), ErrorCategory::Config, "sweep needs at least one value");
    for (double v : sweep->values) {
      with_sweep_value(*this, sweep->axis, v).train.schema.validate();
    }
  }
}

namespace {

nlohmann::json to_json(const LoadOptions& o) {
  nlohmann::json j = {{"format", o.format == InputFormat::Tsv ? "tsv" : "csv"}};
  j["delimiter"] = o.delimiter ? nlohmann::json(std::string(1, *o.delimiter)) : nlohmann::json(nullptr);
  return j;
}

LoadOptions load_options_from_json(const nlohmann::json& j) {
  LoadOptions o;
  const auto format = j.value("format", std::string("csv"));
  require(format == "csv" || format == "tsv", ErrorCategory::Config, "format must be csv or tsv");
  o.format = format == "tsv" ? InputFormat::Tsv : InputFormat::Csv;
  if (j.contains("delimiter") && !j["delimiter"].is_null()) {
    const auto d = j["delimiter"].get<std::string>();
    require(d.size() == 1, ErrorCategory::Config, "delimiter must be a single character");
    o.delimiter = d[0];
  }
  return o;
}

nlohmann::json to_json(const PreprocessOptions& o) {
  nlohmann::json j = {{"min_session_len", o.min_session_len}, {"seed", o.seed}};
  j["min_item_count"] = o.min_item_count ? nlohmann::json(*o.min_item_count) : nlohmann::json(nullptr);
  j["sample_n"] = o.sample_n ? nlohmann::json(*o.sample_n) : nlohmann::json(nullptr);
  return j;
}

PreprocessOptions preprocess_options_from_json(const nlohmann::json& j) {
  PreprocessOptions o;
  o.min_session_len = j.value("min_session_len", o.min_session_len);
  o.seed = j.value("seed", o.seed);
  if (j.contains("min_item_count") && !j["min_item_count"].is_null()) o.min_item_count = j["min_item_count"].get<int>();
  if (j.contains("sample_n") && !j["sample_n"].is_null()) o.sample_n = j["sample_n"].get<std::size_t>();
  return o;
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json dataset;
  if (c.dataset.synthetic) dataset["synthetic"] = to_json(*c.dataset.synthetic);
  if (c.dataset.file) {
    dataset["file"] = {{"path", c.dataset.file->path.string()},
                       {"load", to_json(c.dataset.file->load)},
                       {"preprocess", to_json(c.dataset.file->preprocess)}};
  }
  nlohmann::json j = {{"dataset", dataset},
                      {"split", c.split},
                      {"model", to_json(c.encoder)},
                      {"train", to_json(c.train)},
                      {"variant", to_string(c.variant)},
                      {"repeats", c.repeats},
                      {"seed", c.seed},
                      {"output_dir", c.output_dir.string()}};
  j["sweep"] = c.sweep ? nlohmann::json{{"axis", to_string(c.sweep->axis)}, {"values", c.sweep->values}}
                       : nlohmann::json(nullptr);
  j["test_event_cap"] = c.test_event_cap ? nlohmann::json(*c.test_event_cap) : nlohmann::json(nullptr);
  return j;
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  const auto& dataset = j.at("dataset");
  if (dataset.contains("synthetic")) c.dataset.synthetic = kernel_options_from_json(dataset["synthetic"]);
  if (dataset.contains("file")) {
    const auto& f = dataset["file"];
    c.dataset.file = FileDataset{f.at("path").get<std::string>(), load_options_from_json(f.at("load")),
                                 preprocess_options_from_json(f.at("preprocess"))};
  }
  c.split = j.at("split").get<SplitRatios>();
  c.encoder = encoder_config_from_json(j.at("model"));
  c.train = train_config_from_json(j.at("train"));
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.repeats = j.at("repeats").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.output_dir = j.at("output_dir").get<std::string>();
  if (!j.at("sweep").is_null()) {
    c.sweep = SweepSpec{parse_sweep_axis(j["sweep"].at("axis").get<std::string>()),
                        j["sweep"].at("values").get<std::vector<double>>()};
  }
  if (!j.at("test_event_cap").is_null()) c.test_event_cap = j["test_event_cap"].get<std::size_t>();
  c.validate();
  return c;
}

PreparedData prepare_data(const DatasetSource& source, const SplitRatios& ratios, std::uint64_t seed) {
  source.validate();
  PreparedData data;
  if (source.synthetic) {
    data.synthetic = default_synthetic_spec(*source.synthetic, derive_seed(seed, "synthetic"));
    // generated ids already equal kernel indices, so no re-indexing here
    data.sessions = generate(*data.synthetic);
  } else {
    auto options = source.file->preprocess;
    options.seed = seed;
    data.sessions = preprocess(load_sessions(source.file->path, source.file->load), options);
  }
  data.split = split_sessions(data.sessions, ratios, seed);
  return data;
}

RunResult run_on_data(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed,
                      const RunOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  EncoderConfig encoder = config.encoder;
  encoder.n_items = data.sessions.n_items();
  TrainConfig train = config.train;
  train.seed = seed;

  const auto buffer = build_replay_buffer(data.split.train, encoder.max_len, train.schema);
  Trainer trainer(encoder, train, config.variant, buffer, data.split.validation);
  if (options.on_record) trainer.on_record = options.on_record;
  if (options.checkpoint && options.resume && std::filesystem::exists(*options.checkpoint)) {
    trainer.load_checkpoint(*options.checkpoint);
  }
  if (options.checkpoint) {
    while (!trainer.finished()) {
      const auto next = (trainer.updates() / train.eval_every + 1) * train.eval_every;
      trainer.run(next);
      trainer.save_checkpoint(*options.checkpoint);
    }
  } else {
    trainer.run();
  }

  RunResult result;
  result.seed = seed;
  result.model = trainer.best_model();
  result.validation = trainer.best_validation();
  result.history = trainer.history();
  result.updates = trainer.updates();
  result.early_stopped = trainer.early_stopped();

  EvalOptions eval;
  eval.ks = train.ks;
  eval.event_cap = config.test_event_cap;
  result.test = rolling_evaluate(result.model.copy_a, ranking_head(config.variant), result.model.q_activation,
                                 data.split.test, eval);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

RunResult run_once(const ExperimentConfig& config, std::uint64_t seed, const RunOptions& options) {
  config.validate();
  const auto data = prepare_data(config.dataset, config.split, seed);
  return run_on_data(config, data, seed, options);
}

ExperimentConfig with_sweep_value(const ExperimentConfig& config, SweepAxis axis, double value) {
  ExperimentConfig out = config;
  auto& schema = out.train.schema;
  if (axis == SweepAxis::Gamma) {
    schema.gamma = value;
  } else {
    schema = RewardSchema::from_ratio(value, schema.gamma, schema.r_click);
  }
  return out;
}

std::vector<SweepRow> sweep_rows(double value, int repeat, const MetricsReport& report) {
  std::vector<SweepRow> rows;
  for (const auto& [key, stats] : report.cells) rows.push_back({value, repeat, key, stats.mean});
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  auto sorted = rows;
  std::stable_sort(sorted.begin(), sorted.end(), [](const SweepRow& a, const SweepRow& b) {
    if (a.value != b.value) return a.value < b.value;
    return a.repeat < b.repeat;
  });
  std::ofstream out(path);
  if (!out) fail(ErrorCategory::Io, "cannot write " + path.string());
  out << kSweepCsvHeader << '\n';
  out.precision(17);
  for (const auto& r : sorted) {
    out << r.value << ',' << r.repeat << ',' << to_string(r.cell.behavior) << ',' << to_string(r.cell.metric) << ','
        << r.cell.k << ',' << r.score << '\n';
  }
}

std::string version_stamp() {
#ifdef SEQRL_VERSION
  return SEQRL_VERSION;
#else
  return "seqrl-dev";
#endif
}

}  // namespace seqrl
