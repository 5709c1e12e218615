#include "seqrl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

namespace seqrl {

std::string_view to_string(Metric metric) { return metric == Metric::HitRatio ? "hr" : "ndcg"; }

std::string CellKey::name() const {
  return std::string(to_string(behavior)) + "/" + std::string(to_string(metric)) + "@" + std::to_string(k);
}

double MetricsReport::value(Behavior behavior, Metric metric, int k) const {
  const auto it = cells.find(CellKey{behavior, metric, k});
  if (it == cells.end()) fail(ErrorCategory::Shape, "report has no cell " + CellKey{behavior, metric, k}.name());
  return it->second.mean;
}

RankedList rank(std::span<const double> scores) {
  RankedList out;
  out.order.resize(scores.size());
  std::iota(out.order.begin(), out.order.end(), ItemId{0});
  std::stable_sort(out.order.begin(), out.order.end(), [&](ItemId a, ItemId b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  return out;
}

RankedList rank(const Vector& scores) { return rank(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size()))); }

int rank_of(std::span<const double> scores, ItemId truth) {
  require(truth >= 0 && static_cast<std::size_t>(truth) < scores.size(), ErrorCategory::Shape,
          "ground-truth item outside the score vector");
  const double target = scores[static_cast<std::size_t>(truth)];
  int ahead = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    const double s = scores[j];
    if (s > target || (s == target && j < static_cast<std::size_t>(truth))) ++ahead;
  }
  return ahead + 1;
}

double ndcg_from_rank(int rank, int k) { return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0; }

namespace {

int position_of(const RankedList& ranked, ItemId truth) {
  const auto it = std::find(ranked.order.begin(), ranked.order.end(), truth);
  require(it != ranked.order.end(), ErrorCategory::Shape, "ground-truth item missing from the ranking");
  return static_cast<int>(it - ranked.order.begin()) + 1;
}

}  // namespace

int hr_at_k(const RankedList& ranked, ItemId truth, int k) { return hit_from_rank(position_of(ranked, truth), k); }

double ndcg_at_k(const RankedList& ranked, ItemId truth, int k) { return ndcg_from_rank(position_of(ranked, truth), k); }

MetricsReport rolling_evaluate(const BatchScorer& scorer, const SessionSet& sessions, const EvalOptions& options) {
  require(!options.ks.empty(), ErrorCategory::Config, "at least one cutoff k is required");
  const std::size_t nk = options.ks.size();
  std::array<std::vector<double>, 2> hits{std::vector<double>(nk, 0.0), std::vector<double>(nk, 0.0)};
  std::array<std::vector<double>, 2> gains{std::vector<double>(nk, 0.0), std::vector<double>(nk, 0.0)};
  MetricsReport report;
  report.ks = options.ks;

  SequenceBatch batch(options.max_len);
  std::vector<ItemId> truths;
  std::vector<Behavior> behaviors;
  std::vector<ItemId> window(static_cast<std::size_t>(options.max_len));
  std::vector<double> row;

  auto flush = [&] {
    if (batch.size() == 0) return;
    const Matrix scores = scorer(batch);
    require(scores.rows() == static_cast<Eigen::Index>(batch.size()), ErrorCategory::Shape,
            "scorer returned the wrong number of rows");
    row.resize(static_cast<std::size_t>(scores.cols()));
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (Eigen::Index j = 0; j < scores.cols(); ++j) row[static_cast<std::size_t>(j)] = scores(static_cast<Eigen::Index>(b), j);
      const int r = rank_of(row, truths[b]);
      const auto cls = static_cast<std::size_t>(behaviors[b]);
      for (std::size_t i = 0; i < nk; ++i) {
        hits[cls][i] += hit_from_rank(r, options.ks[i]);
        gains[cls][i] += ndcg_from_rank(r, options.ks[i]);
      }
      ++report.events[cls];
    }
    batch = SequenceBatch(options.max_len);
    truths.clear();
    behaviors.clear();
  };

  std::size_t scored = 0;
  for (const auto& session : sessions.sessions) {
    const auto m = static_cast<int>(session.size());
    for (int t = 1; t < m; ++t) {
      if (options.event_cap && scored >= *options.event_cap) break;
      const int real = std::min(t, options.max_len);
      std::fill(window.begin(), window.end(), options.pad_item);
      for (int i = 0; i < real; ++i)
        window[static_cast<std::size_t>(options.max_len - real + i)] = session.events[static_cast<std::size_t>(t - real + i)].item;
      batch.add(window, real);
      truths.push_back(session.events[static_cast<std::size_t>(t)].item);
      behaviors.push_back(session.events[static_cast<std::size_t>(t)].behavior);
      ++scored;
      if (batch.size() >= options.chunk) flush();
    }
  }
  flush();

  for (Behavior behavior : kBehaviors) {
    const auto cls = static_cast<std::size_t>(behavior);
    const double count = static_cast<double>(report.events[cls]);
    for (std::size_t i = 0; i < nk; ++i) {
      const double hr = count > 0 ? hits[cls][i] / count : 0.0;
      const double ndcg = count > 0 ? gains[cls][i] / count : 0.0;
      report.cells[CellKey{behavior, Metric::HitRatio, options.ks[i]}] = CellStats{hr, {hr}};
      report.cells[CellKey{behavior, Metric::Ndcg, options.ks[i]}] = CellStats{ndcg, {ndcg}};
    }
  }
  return report;
}

BatchScorer network_scorer(const Network& net, RankingHead head, QActivation activation) {
  return [&net, head, activation](const SequenceBatch& batch) -> Matrix {
    const Matrix states = encode_batch(net.encoder, batch);
    if (head == RankingHead::Q) return q_values(net.q, states, activation);
    return supervised_logits(net.supervised, states);
  };
}

MetricsReport rolling_evaluate(const Network& net, RankingHead head, QActivation activation,
                               const SessionSet& sessions, const EvalOptions& options) {
  EvalOptions opts = options;
  opts.max_len = net.encoder.config.max_len;
  opts.pad_item = net.encoder.config.pad_item();
  return rolling_evaluate(network_scorer(net, head, activation), sessions, opts);
}

MetricsReport combine_repeats(const std::vector<MetricsReport>& reports) {
  require(!reports.empty(), ErrorCategory::Shape, "no reports to combine");
  MetricsReport out;
  out.ks = reports.front().ks;
  out.events = reports.front().events;
  for (const auto& [key, stats] : reports.front().cells) {
    CellStats combined;
    for (const auto& r : reports) {
      const auto it = r.cells.find(key);
      require(it != r.cells.end() && r.cells.size() == reports.front().cells.size(), ErrorCategory::Shape,
              "reports differ in shape");
      combined.repeats.insert(combined.repeats.end(), it->second.repeats.begin(), it->second.repeats.end());
    }
    combined.mean = std::accumulate(combined.repeats.begin(), combined.repeats.end(), 0.0) /
                    static_cast<double>(combined.repeats.size());
    out.cells[key] = std::move(combined);
  }
  return out;
}

PairedTest paired_t_test(std::span<const double> variant, std::span<const double> baseline) {
  require(variant.size() == baseline.size(), ErrorCategory::Shape, "paired test needs equal-length samples");
  require(variant.size() >= 2, ErrorCategory::Shape, "paired test needs at least two pairs");
  const auto n = static_cast<double>(variant.size());
  std::vector<double> diff(variant.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = variant[i] - baseline[i];
  PairedTest out;
  out.mean_diff = std::accumulate(diff.begin(), diff.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : diff) ss += (d - out.mean_diff) * (d - out.mean_diff);
  const double sd = std::sqrt(ss / (n - 1.0));
  // rounding noise of the subtraction counts as zero: a constant lift of 0.1
  // leaves sd around 1e-17 rather than exactly 0
  double scale = 0.0;
  for (std::size_t i = 0; i < diff.size(); ++i) scale = std::max({scale, std::fabs(variant[i]), std::fabs(baseline[i])});
  const double noise = 1e-12 * scale;
  if (sd <= noise) {
    const bool zero = std::fabs(out.mean_diff) <= noise;
    out.degenerate = true;
    out.t_stat = zero ? 0.0 : std::copysign(INFINITY, out.mean_diff);
    out.p_value = zero ? 1.0 : 0.0;
    return out;
  }
  out.t_stat = out.mean_diff / (sd / std::sqrt(n));
  const boost::math::students_t dist(n - 1.0);
  out.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(out.t_stat)));
  return out;
}

std::vector<ComparisonRow> aggregate_repeats(const MetricsReport& variant, const MetricsReport& baseline,
                                             double alpha) {
  std::vector<ComparisonRow> rows;
  for (const auto& [key, v] : variant.cells) {
    const auto it = baseline.cells.find(key);
    require(it != baseline.cells.end(), ErrorCategory::Shape, "baseline lacks cell " + key.name());
    const auto& b = it->second;
    ComparisonRow row;
    row.cell = key;
    row.variant_mean = v.mean;
    row.baseline_mean = b.mean;
    row.test = paired_t_test(v.repeats, b.repeats);
    row.significant = row.test.p_value < alpha;
    rows.push_back(row);
  }
  return rows;
}

std::vector<ComparisonRow> aggregate_repeats(const std::vector<MetricsReport>& variant,
                                             const std::vector<MetricsReport>& baseline, double alpha) {
  return aggregate_repeats(combine_repeats(variant), combine_repeats(baseline), alpha);
}

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& [key, stats] : report.cells) {
    cells.push_back({{"behavior", to_string(key.behavior)},
                     {"metric", to_string(key.metric)},
                     {"k", key.k},
                     {"mean", stats.mean},
                     {"repeats", stats.repeats}});
  }
  return {{"ks", report.ks},
          {"events", {{"click", report.events[0]}, {"purchase", report.events[1]}}},
          {"cells", cells}};
}

MetricsReport metrics_report_from_json(const nlohmann::json& j) {
  MetricsReport report;
  report.ks = j.at("ks").get<std::vector<int>>();
  report.events[0] = j.at("events").at("click").get<std::size_t>();
  report.events[1] = j.at("events").at("purchase").get<std::size_t>();
  for (const auto& c : j.at("cells")) {
    const auto behavior = parse_behavior(c.at("behavior").get<std::string>());
    if (!behavior) fail(ErrorCategory::Schema, "unknown behavior in report");
    const auto metric_name = c.at("metric").get<std::string>();
    const Metric metric = metric_name == "hr" ? Metric::HitRatio : Metric::Ndcg;
    report.cells[CellKey{*behavior, metric, c.at("k").get<int>()}] =
        CellStats{c.at("mean").get<double>(), c.at("repeats").get<std::vector<double>>()};
  }
  return report;
}

namespace {

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

void write_report_csv(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCategory::Io, "cannot write " + path.string());
  out << "behavior,metric,k,events,mean,repeats\n";
  for (const auto& [key, stats] : report.cells) {
    out << to_string(key.behavior) << ',' << to_string(key.metric) << ',' << key.k << ','
        << report.event_count(key.behavior) << ',' << format_double(stats.mean) << ',';
    for (std::size_t i = 0; i < stats.repeats.size(); ++i) out << (i ? ";" : "") << format_double(stats.repeats[i]);
    out << '\n';
  }
}

void write_comparison_csv(const std::vector<ComparisonRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCategory::Io, "cannot write " + path.string());
  out << kComparisonCsvHeader << '\n';
  for (const auto& r : rows) {
    out << to_string(r.cell.behavior) << ',' << to_string(r.cell.metric) << ',' << r.cell.k << ','
        << format_double(r.baseline_mean) << ',' << format_double(r.variant_mean) << ','
        << format_double(r.test.mean_diff) << ',' << format_double(r.test.t_stat) << ','
        << format_double(r.test.p_value) << ',' << (r.significant ? 1 : 0) << ',' << (r.test.degenerate ? 1 : 0)
        << '\n';
  }
}

}  // namespace seqrl
