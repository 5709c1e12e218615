#include "seqrl/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "seqrl/config.hpp"
#include "seqrl/experiment.hpp"

namespace seqrl {

int exit_code(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::Parse: return 2;
    case ErrorCategory::Schema: return 3;
    case ErrorCategory::EmptyDataset: return 4;
    case ErrorCategory::Config: return 5;
    case ErrorCategory::Shape: return 6;
    case ErrorCategory::Numeric: return 7;
    case ErrorCategory::Io: return 8;
    case ErrorCategory::Sampling: return 9;
  }
  return kInternalExitCode;
}

std::filesystem::path resolve_output(const std::filesystem::path& path) {
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') {
    return std::filesystem::path(root) / path;
  }
  return path;
}

namespace {

namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCategory::Io, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorCategory::Io, "failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::Io, "cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::Parse, path.string() + ": " + e.what());
  }
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCategory::Io, "cannot create " + dir.string() + ": " + ec.message());
}

std::string fixed(double x, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << x;
  return s.str();
}

void print_stats(std::ostream& out, const DatasetStats& stats) {
  out << "sequences  " << stats.sequences << "\n"
      << "items      " << stats.items << "\n"
      << "clicks     " << stats.clicks << "\n"
      << "purchases  " << stats.purchases << "\n";
}

nlohmann::json stats_json(const DatasetStats& s) {
  return {{"sequences", s.sequences}, {"items", s.items}, {"clicks", s.clicks}, {"purchases", s.purchases}};
}

void print_report(std::ostream& out, const MetricsReport& report) {
  out << "behavior  events";
  for (int k : report.ks) out << "  hr@" << k << "    ndcg@" << k << "  ";
  out << "\n";
  for (auto b : kBehaviors) {
    out << std::left << std::setw(10) << to_string(b) << std::setw(6) << report.event_count(b) << std::right;
    for (int k : report.ks) {
      out << "  " << fixed(report.value(b, Metric::HitRatio, k)) << "  " << fixed(report.value(b, Metric::Ndcg, k));
    }
    out << "\n";
  }
}

void write_report(const MetricsReport& report, const fs::path& dir, const std::string& stem) {
  write_text(dir / (stem + ".json"), to_json(report).dump(1) + "\n");
  write_report_csv(report, dir / (stem + ".csv"));
}

// ------------------------------------------------------- experiment options

struct ExperimentFlags {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::string> variant, encoder, output;
  std::optional<std::uint64_t> seed;
  std::optional<double> gamma, reward_ratio;
  std::optional<int> repeats;
  std::optional<std::int64_t> max_updates, eval_every;

  void attach(CLI::App* app) {
    app->add_option("--config,-c", config_file, "TOML-style experiment file")->check(CLI::ExistingFile);
    app->add_option("--set", overrides, "override a config key, e.g. --set train.batch_size=128");
    app->add_option("--variant", variant, "sqn | sac | q_only | supervised");
    app->add_option("--encoder", encoder, "gru | self_attention");
    app->add_option("--seed", seed, "master seed (default 0)");
    app->add_option("--gamma", gamma, "discount factor (default 0.5)");
    app->add_option("--reward-ratio", reward_ratio, "r_purchase / r_click (default 5)");
    app->add_option("--repeats", repeats, "independent repeats (default 5)");
    app->add_option("--max-updates", max_updates, "update budget (default 100000)");
    app->add_option("--eval-every", eval_every, "updates between validations (default 2000)");
    app->add_option("--output,-o", output, "run directory (relative paths go under $SEQRL_OUTPUT_ROOT)");
  }

  ConfigMap resolve() const {
    ConfigMap map;
    if (!config_file.empty()) map = read_config_file(config_file);
    for (const auto& o : overrides) apply_override(map, o);
    auto put = [&](const std::string& key, const std::string& value) { set_value(map, key, {value}); };
    auto num = [](double v) {
      std::ostringstream s;
      s << std::setprecision(17) << v;
      return s.str();
    };
    if (variant) put("experiment.variant", *variant);
    if (encoder) put("model.encoder", *encoder);
    if (seed) put("experiment.seed", std::to_string(*seed));
    if (gamma) put("reward.gamma", num(*gamma));
    if (reward_ratio) put("reward.ratio", num(*reward_ratio));
    if (repeats) put("experiment.repeats", std::to_string(*repeats));
    if (max_updates) put("train.max_updates", std::to_string(*max_updates));
    if (eval_every) put("train.eval_every", std::to_string(*eval_every));
    if (output) put("experiment.output_dir", *output);
    return map;
  }
};

fs::path run_directory(const ExperimentConfig& config, const std::string& command) {
  if (!config.output_dir.empty()) return resolve_output(config.output_dir);
  const std::string name = command + "-" + std::string(to_string(config.variant)) + "-seed" + std::to_string(config.seed);
  return resolve_output(fs::path("runs") / name);
}

nlohmann::json run_metadata(const ExperimentConfig& config, const std::string& command) {
  nlohmann::json seeds = nlohmann::json::array();
  for (int r = 0; r < config.repeats; ++r) seeds.push_back(repeat_seed(config.seed, r));
  return {{"command", command},
          {"version", version_stamp()},
          {"seed", config.seed},
          {"repeat_seeds", seeds},
          {"config", to_json(config)}};
}

void write_run_header(const ExperimentConfig& config, const fs::path& dir, const std::string& command) {
  make_dirs(dir);
  write_text(dir / "config.toml", to_config_text(config));
  write_text(dir / "run.json", run_metadata(config, command).dump(1) + "\n");
}

// --------------------------------------------------------------- commands

int cmd_preprocess(const std::string& input, const std::string& output, const std::string& format,
                   const std::optional<std::string>& delimiter, const PreprocessOptions& options, int max_len,
                   const RewardSchema& schema, std::ostream& out) {
  LoadOptions load;
  require(format == "csv" || format == "tsv", ErrorCategory::Config, "--format must be csv or tsv");
  load.format = format == "tsv" ? InputFormat::Tsv : InputFormat::Csv;
  if (delimiter) {
    require(delimiter->size() == 1, ErrorCategory::Config, "--delimiter must be one character");
    load.delimiter = (*delimiter)[0];
  }
  schema.validate();
  const auto raw = load_sessions(input, load);
  const auto sessions = preprocess(raw, options);
  const auto split = split_sessions(sessions, {0.8, 0.1, 0.1}, options.seed);
  const auto buffer = build_replay_buffer(split.train, max_len, schema);

  const fs::path dir = resolve_output(output);
  make_dirs(dir);
  write_sessions(sessions, dir / "sessions.csv");
  write_sessions(split.train, dir / "train.csv");
  write_sessions(split.validation, dir / "validation.csv");
  write_sessions(split.test, dir / "test.csv");
  write_tuple_shard(buffer, dir / "train_tuples.txt");

  const auto stats = compute_stats(sessions);
  nlohmann::json options_json = {{"min_session_len", options.min_session_len}, {"seed", options.seed},
                                 {"max_len", max_len},                         {"schema", to_json(schema)}};
  options_json["min_item_count"] = options.min_item_count ? nlohmann::json(*options.min_item_count) : nlohmann::json(nullptr);
  options_json["sample_n"] = options.sample_n ? nlohmann::json(*options.sample_n) : nlohmann::json(nullptr);
  const nlohmann::json manifest = {
      {"version", version_stamp()},
      {"input", fs::path(input).filename().string()},
      {"options", options_json},
      {"raw", stats_json(compute_stats(raw))},
      {"stats", stats_json(stats)},
      {"splits", {{"train", split.train.size()}, {"validation", split.validation.size()}, {"test", split.test.size()}}},
      {"train_tuples", buffer.size()},
      {"files", {"sessions.csv", "train.csv", "validation.csv", "test.csv", "train_tuples.txt"}}};
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");
  print_stats(out, stats);
  out << "written to " << dir.string() << "\n";
  return 0;
}

int cmd_synth(const ExperimentFlags& flags, std::ostream& out) {
  auto config = build_experiment_config(flags.resolve());
  require(config.dataset.synthetic.has_value(), ErrorCategory::Config, "synth needs a synthetic dataset block");
  const auto spec = default_synthetic_spec(*config.dataset.synthetic, derive_seed(config.seed, "synthetic"));
  const auto sessions = generate(spec);
  const fs::path dir = flags.output ? resolve_output(*flags.output)
                                    : resolve_output(fs::path("runs") / ("synth-seed" + std::to_string(config.seed)));
  make_dirs(dir);
  write_sessions(sessions, dir / "sessions.csv");
  save_synthetic_spec(spec, dir / "spec.json");
  const auto stats = compute_stats(sessions);
  const nlohmann::json manifest = {{"version", version_stamp()},
                                   {"seed", config.seed},
                                   {"options", to_json(*config.dataset.synthetic)},
                                   {"stats", stats_json(stats)},
                                   {"files", {"sessions.csv", "spec.json"}}};
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");
  print_stats(out, stats);
  out << "written to " << dir.string() << "\n";
  return 0;
}

int cmd_train(const ExperimentFlags& flags, bool resume, std::optional<std::int64_t> stop_after, std::ostream& out) {
  auto map = flags.resolve();
  ExperimentConfig config;
  if (resume && flags.config_file.empty() && flags.output && fs::exists(resolve_output(*flags.output) / "config.toml")) {
    // resuming an existing run: its snapshot is the base, flags still win
    auto base = read_config_file(resolve_output(*flags.output) / "config.toml");
    for (auto& [k, v] : map) set_value(base, k, v);
    map = std::move(base);
  }
  config = build_experiment_config(map);
  const fs::path dir = run_directory(config, "train");
  write_run_header(config, dir, "train");

  std::vector<MetricsReport> reports;
  for (int r = 0; r < config.repeats; ++r) {
    const auto seed = repeat_seed(config.seed, r);
    const fs::path rdir = dir / ("repeat-" + std::to_string(r));
    make_dirs(rdir);
    if (resume && fs::exists(rdir / "report.json")) {
      reports.push_back(metrics_report_from_json(read_json(rdir / "report.json")));
      out << "repeat " << r << " already complete\n";
      continue;
    }
    const auto data = prepare_data(config.dataset, config.split, seed);
    EncoderConfig encoder = config.encoder;
    encoder.n_items = data.sessions.n_items();
    TrainConfig train = config.train;
    train.seed = seed;
    const auto buffer = build_replay_buffer(data.split.train, encoder.max_len, train.schema);
    Trainer trainer(encoder, train, config.variant, buffer, data.split.validation);
    const auto checkpoint = rdir / "checkpoint.bin";
    if (resume && fs::exists(checkpoint)) {
      trainer.load_checkpoint(checkpoint);
      out << "repeat " << r << " resumed at update " << trainer.updates() << "\n";
    }
    bool interrupted = false;
    while (!trainer.finished()) {
      auto next = (trainer.updates() / train.eval_every + 1) * train.eval_every;
      if (stop_after && next > *stop_after) next = *stop_after;
      trainer.run(next);
      trainer.save_checkpoint(checkpoint);
      write_text(rdir / "metrics.jsonl", to_jsonl(trainer.history()));
      if (stop_after && trainer.updates() >= *stop_after && !trainer.finished()) {
        interrupted = true;
        break;
      }
    }
    if (interrupted) {
      out << "stopped at update " << trainer.updates() << "; resume with --resume\n";
      return 0;
    }
    save_model(trainer.best_model(), rdir / "model.bin");
    EvalOptions eval;
    eval.ks = train.ks;
    eval.event_cap = config.test_event_cap;
    const auto& best = trainer.best_model();
    const auto report = rolling_evaluate(best.copy_a, ranking_head(config.variant), best.q_activation,
                                         data.split.test, eval);
    write_report(report, rdir, "report");
    reports.push_back(report);
    out << "repeat " << r << " seed " << seed << " updates " << trainer.updates()
        << (trainer.early_stopped() ? " (early stop)" : "") << " purchase ndcg@10 "
        << fixed(report.value(Behavior::Purchase, Metric::Ndcg, 10)) << "\n";
  }
  const auto combined = combine_repeats(reports);
  write_report(combined, dir, "report");
  print_report(out, combined);
  out << "written to " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& run, const std::string& split_name, std::ostream& out) {
  const fs::path dir = resolve_output(run);
  const auto config = build_experiment_config(read_config_file(dir / "config.toml"));
  require(split_name == "test" || split_name == "validation", ErrorCategory::Config,
          "--split must be test or validation");
  std::vector<MetricsReport> reports;
  for (int r = 0; r < config.repeats; ++r) {
    const fs::path rdir = dir / ("repeat-" + std::to_string(r));
    if (!fs::exists(rdir / "model.bin")) continue;
    const auto data = prepare_data(config.dataset, config.split, repeat_seed(config.seed, r));
    const auto model = load_model(rdir / "model.bin");
    require(model.config().n_items == data.sessions.n_items(), ErrorCategory::Shape,
            "model catalogue does not match the data");
    EvalOptions eval;
    eval.ks = config.train.ks;
    eval.event_cap = config.test_event_cap;
    const auto& sessions = split_name == "test" ? data.split.test : data.split.validation;
    reports.push_back(rolling_evaluate(model.copy_a, ranking_head(config.variant), model.q_activation, sessions, eval));
    write_report(reports.back(), rdir, "eval-" + split_name);
  }
  require(!reports.empty(), ErrorCategory::Io, "no trained repeats found under " + dir.string());
  const auto combined = combine_repeats(reports);
  write_report(combined, dir, "eval-" + split_name);
  print_report(out, combined);
  return 0;
}

int cmd_sweep(const ExperimentFlags& flags, const std::optional<std::string>& axis,
              const std::vector<double>& values, std::ostream& out) {
  auto map = flags.resolve();
  if (axis) set_value(map, "sweep.axis", {*axis});
  if (!values.empty()) {
    std::vector<std::string> text;
    for (double v : values) {
      std::ostringstream s;
      s << std::setprecision(17) << v;
      text.push_back(s.str());
    }
    set_value(map, "sweep.values", text);
  }
  const auto config = build_experiment_config(map);
  require(config.sweep.has_value(), ErrorCategory::Config, "sweep needs sweep.axis and sweep.values");
  auto sorted = config.sweep->values;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

  const fs::path dir = run_directory(config, "sweep");
  write_run_header(config, dir, "sweep");
  std::vector<SweepRow> rows;
  std::vector<std::vector<MetricsReport>> per_value(sorted.size());
  for (int r = 0; r < config.repeats; ++r) {
    const auto seed = repeat_seed(config.seed, r);
    const auto data = prepare_data(config.dataset, config.split, seed);
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      const auto run = run_on_data(with_sweep_value(config, config.sweep->axis, sorted[i]), data, seed);
      auto part = sweep_rows(sorted[i], r, run.test);
      rows.insert(rows.end(), part.begin(), part.end());
      per_value[i].push_back(run.test);
      out << to_string(config.sweep->axis) << "=" << sorted[i] << " repeat " << r << " purchase hr@10 "
          << fixed(run.test.value(Behavior::Purchase, Metric::HitRatio, 10)) << "\n";
    }
  }
  write_sweep_csv(rows, dir / "sweep.csv");
  out << to_string(config.sweep->axis) << "  purchase hr@10  purchase ndcg@10  click hr@10  click ndcg@10\n";
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto combined = combine_repeats(per_value[i]);
    std::ostringstream name;
    name << "report-" << sorted[i];
    write_report(combined, dir, name.str());
    out << sorted[i] << "  " << fixed(combined.value(Behavior::Purchase, Metric::HitRatio, 10)) << "  "
        << fixed(combined.value(Behavior::Purchase, Metric::Ndcg, 10)) << "  "
        << fixed(combined.value(Behavior::Click, Metric::HitRatio, 10)) << "  "
        << fixed(combined.value(Behavior::Click, Metric::Ndcg, 10)) << "\n";
  }
  out << "written to " << dir.string() << "\n";
  return 0;
}

MetricsReport load_run_report(const fs::path& path) {
  const fs::path resolved = resolve_output(path);
  const fs::path file = fs::is_directory(resolved) ? resolved / "report.json" : resolved;
  return metrics_report_from_json(read_json(file));
}

int cmd_compare(const std::string& baseline, const std::string& variant, double alpha,
                const std::optional<std::string>& output, std::ostream& out) {
  const auto base = load_run_report(baseline);
  const auto var = load_run_report(variant);
  const auto rows = aggregate_repeats(var, base, alpha);
  fs::path csv;
  if (output) {
    csv = resolve_output(*output);
  } else {
    const fs::path vdir = resolve_output(variant);
    csv = (fs::is_directory(vdir) ? vdir : vdir.parent_path()) / "comparison.csv";
  }
  if (csv.has_parent_path()) make_dirs(csv.parent_path());
  write_comparison_csv(rows, csv);
  out << "cell               baseline  variant   diff      p\n";
  for (const auto& row : rows) {
    out << std::left << std::setw(19) << row.cell.name() << std::right << fixed(row.baseline_mean) << "    "
        << fixed(row.variant_mean) << (row.significant ? "*" : " ") << "  " << fixed(row.test.mean_diff) << "  "
        << fixed(row.test.p_value) << (row.test.degenerate ? " (zero variance)" : "") << "\n";
  }
  out << "* p < " << alpha << "\nwritten to " << csv.string() << "\n";
  return 0;
}

void report_error(std::ostream& err, std::string_view category, const std::string& message) {
  err << nlohmann::json{{"error", {{"category", category}, {"message", message}}}}.dump() << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-supervised RL training for sequential recommendation"};
  app.require_subcommand(1);

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "filter, split and convert a raw interaction log");
  std::string pre_input, pre_output, pre_format = "csv";
  std::optional<std::string> pre_delimiter;
  PreprocessOptions pre_options;
  std::optional<int> pre_min_item;
  std::optional<std::size_t> pre_sample;
  int pre_max_len = 10;
  RewardSchema pre_schema;
  pre->add_option("--input,-i", pre_input, "delimited log with session_id,timestamp,item_id,behavior")->required();
  pre->add_option("--output,-o", pre_output, "output directory")->required();
  pre->add_option("--format", pre_format, "csv | tsv")->capture_default_str();
  pre->add_option("--delimiter", pre_delimiter, "single-character delimiter override");
  pre->add_option("--min-session-len", pre_options.min_session_len, "drop shorter sessions")->capture_default_str();
  pre->add_option("--min-item-count", pre_min_item, "drop items with fewer interactions");
  pre->add_option("--sample", pre_sample, "keep a seeded sample of this many sessions");
  pre->add_option("--seed", pre_options.seed, "sampling and split seed")->capture_default_str();
  pre->add_option("--max-len", pre_max_len, "state window of the tuple shard")->capture_default_str();
  pre->add_option("--r-click", pre_schema.r_click)->capture_default_str();
  pre->add_option("--r-purchase", pre_schema.r_purchase)->capture_default_str();
  pre->add_option("--gamma", pre_schema.gamma)->capture_default_str();

  // synth
  auto* syn = app.add_subcommand("synth", "generate a synthetic session log with known dynamics");
  ExperimentFlags syn_flags;
  syn_flags.attach(syn);

  // train
  auto* tr = app.add_subcommand("train", "train one variant (all repeats) and score it on the test split");
  ExperimentFlags tr_flags;
  tr_flags.attach(tr);
  bool tr_resume = false;
  std::optional<std::int64_t> tr_stop;
  tr->add_flag("--resume", tr_resume, "continue from checkpoints in the run directory");
  tr->add_option("--stop-after", tr_stop, "stop (with a checkpoint) once this many updates are done");

  // eval
  auto* ev = app.add_subcommand("eval", "re-score the saved models of a run");
  std::string ev_run, ev_split = "test";
  ev->add_option("--run,-r", ev_run, "run directory")->required();
  ev->add_option("--split", ev_split, "test | validation")->capture_default_str();

  // sweep
  auto* sw = app.add_subcommand("sweep", "train across reward ratios or discount factors");
  ExperimentFlags sw_flags;
  sw_flags.attach(sw);
  std::optional<std::string> sw_axis;
  std::vector<double> sw_values;
  sw->add_option("--axis", sw_axis, "reward_ratio | gamma");
  sw->add_option("--values", sw_values, "values to sweep")->delimiter(',');

  // compare
  auto* cmp = app.add_subcommand("compare", "paired significance test between two runs");
  std::string cmp_base, cmp_variant;
  double cmp_alpha = 0.01;
  std::optional<std::string> cmp_output;
  cmp->add_option("--baseline,-b", cmp_base, "baseline run directory or report.json")->required();
  cmp->add_option("--variant,-v", cmp_variant, "variant run directory or report.json")->required();
  cmp->add_option("--alpha", cmp_alpha, "significance level")->capture_default_str();
  cmp->add_option("--output,-o", cmp_output, "comparison CSV path");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::ostringstream msg;
    app.exit(e, msg, msg);
    report_error(err, "usage", CLI::detail::trim_copy(msg.str()));
    return kUsageExitCode;
  }

  try {
    if (pre->parsed()) {
      pre_options.min_item_count = pre_min_item;
      pre_options.sample_n = pre_sample;
      return cmd_preprocess(pre_input, pre_output, pre_format, pre_delimiter, pre_options, pre_max_len, pre_schema,
                            out);
    }
    if (syn->parsed()) return cmd_synth(syn_flags, out);
    if (tr->parsed()) return cmd_train(tr_flags, tr_resume, tr_stop, out);
    if (ev->parsed()) return cmd_eval(ev_run, ev_split, out);
    if (sw->parsed()) return cmd_sweep(sw_flags, sw_axis, sw_values, out);
    if (cmp->parsed()) return cmd_compare(cmp_base, cmp_variant, cmp_alpha, cmp_output, out);
  } catch (const Error& e) {
    report_error(err, to_string(e.category()), e.what());
    return exit_code(e.category());
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return kInternalExitCode;
  }
  return 0;
}

}  // namespace seqrl
