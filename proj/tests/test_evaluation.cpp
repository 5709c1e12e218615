#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "seqrl/evaluation.hpp"
#include "test_util.hpp"

using namespace seqrl;

namespace {

constexpr int kItems = 15;

// Deterministic scores with plenty of ties, computed from the real window only.
double fixture_score(const std::vector<ItemId>& window, ItemId j) {
  const ItemId last = window.back();
  const int len = static_cast<int>(window.size());
  const int first = window.front();
  return std::floor(((last * 7 + j * 3 + len * 5 + first) % 13) / 3.0);
}

Matrix fixture_scorer(const SequenceBatch& batch) {
  Matrix out(static_cast<Eigen::Index>(batch.size()), kItems);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto row = batch.row(b);
    const std::vector<ItemId> window(row.end() - batch.lengths[b], row.end());
    for (ItemId j = 0; j < kItems; ++j) out(static_cast<Eigen::Index>(b), j) = fixture_score(window, j);
  }
  return out;
}

SessionSet fixture_sessions(std::uint64_t seed, std::size_t count) {
  Rng rng(seed);
  SessionSet set = fixtures::catalogue(kItems);
  for (std::size_t s = 0; s < count; ++s) {
    const int len = 1 + static_cast<int>(uniform_index(rng, 9));
    std::vector<std::pair<ItemId, Behavior>> events;
    for (int t = 0; t < len; ++t)
      events.push_back({static_cast<ItemId>(uniform_index(rng, kItems)),
                        uniform01(rng) < 0.3 ? Behavior::Purchase : Behavior::Click});
    set.sessions.push_back(fixtures::make_session("s" + std::to_string(s), events));
  }
  return set;
}

// Independent replay: full argsort per event, position lookup by search.
MetricsReport brute_force(const SessionSet& sessions, const std::vector<int>& ks, int max_len) {
  std::array<std::vector<double>, 2> hr{std::vector<double>(ks.size()), std::vector<double>(ks.size())};
  std::array<std::vector<double>, 2> ndcg = hr;
  std::array<std::size_t, 2> count{};
  for (const auto& session : sessions.sessions) {
    for (std::size_t t = 1; t < session.size(); ++t) {
      std::vector<ItemId> window;
      for (std::size_t i = t > static_cast<std::size_t>(max_len) ? t - max_len : 0; i < t; ++i)
        window.push_back(session.events[i].item);
      std::vector<std::pair<double, ItemId>> keyed;
      for (ItemId j = 0; j < kItems; ++j) keyed.push_back({-fixture_score(window, j), j});
      std::sort(keyed.begin(), keyed.end());
      const ItemId truth = session.events[t].item;
      int position = 0;
      while (keyed[static_cast<std::size_t>(position)].second != truth) ++position;
      const int r = position + 1;
      const auto cls = static_cast<std::size_t>(session.events[t].behavior);
      ++count[cls];
      for (std::size_t i = 0; i < ks.size(); ++i) {
        if (r <= ks[i]) {
          hr[cls][i] += 1.0;
          ndcg[cls][i] += std::log(2.0) / std::log(r + 1.0);
        }
      }
    }
  }
  MetricsReport out;
  out.ks = ks;
  out.events = count;
  for (Behavior b : kBehaviors) {
    const auto cls = static_cast<std::size_t>(b);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const double n = count[cls] ? static_cast<double>(count[cls]) : 1.0;
      out.cells[{b, Metric::HitRatio, ks[i]}] = {hr[cls][i] / n, {}};
      out.cells[{b, Metric::Ndcg, ks[i]}] = {ndcg[cls][i] / n, {}};
    }
  }
  return out;
}

EvalOptions fixture_options(int max_len = 4) {
  EvalOptions o;
  o.ks = {1, 5, 10, 20};
  o.max_len = max_len;
  o.pad_item = kItems;
  return o;
}

void expect_monotone(const MetricsReport& report) {
  for (Behavior b : kBehaviors) {
    double prev_hr = 0.0, prev_ndcg = 0.0;
    for (int k : report.ks) {
      const double hr = report.value(b, Metric::HitRatio, k);
      const double ndcg = report.value(b, Metric::Ndcg, k);
      EXPECT_GE(hr, prev_hr);
      EXPECT_GE(ndcg, prev_ndcg);
      EXPECT_LE(ndcg, hr + 1e-15);
      EXPECT_GE(ndcg, 0.0);
      EXPECT_LE(hr, 1.0);
      prev_hr = hr;
      prev_ndcg = ndcg;
    }
  }
}

}  // namespace

TEST(Ranking, MatchesArgsortOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(uniform_index(rng, 40));
    std::vector<double> scores(static_cast<std::size_t>(n));
    for (auto& s : scores) s = std::round(uniform01(rng) * 6.0);  // many ties
    std::vector<ItemId> expect(scores.size());
    std::iota(expect.begin(), expect.end(), 0);
    std::sort(expect.begin(), expect.end(), [&](ItemId a, ItemId b) {
      return std::make_pair(-scores[a], a) < std::make_pair(-scores[b], b);
    });
    const auto ranked = rank(scores);
    ASSERT_EQ(ranked.order, expect);
    for (ItemId j = 0; j < n; ++j) {
      const auto pos = std::find(expect.begin(), expect.end(), j) - expect.begin();
      ASSERT_EQ(rank_of(scores, j), pos + 1);
    }
  }
}

TEST(Ranking, TiesGoToLowerId) {
  const std::vector<double> scores{0.5, 0.9, 0.9, 0.1};
  EXPECT_EQ(rank(scores).order, (std::vector<ItemId>{1, 2, 0, 3}));
  EXPECT_EQ(rank_of(scores, 2), 2);
  EXPECT_THROW(rank_of(scores, 4), Error);
}

TEST(Metrics, HitAndNdcgFixtures) {
  const std::vector<double> scores{0.1, 0.7, 0.3, 0.9, 0.5};
  const auto ranked = rank(scores);  // 3, 1, 4, 2, 0
  EXPECT_EQ(hr_at_k(ranked, 3, 1), 1);
  EXPECT_EQ(ndcg_at_k(ranked, 3, 1), 1.0);
  EXPECT_EQ(hr_at_k(ranked, 4, 2), 0);
  EXPECT_EQ(hr_at_k(ranked, 4, 3), 1);
  EXPECT_DOUBLE_EQ(ndcg_at_k(ranked, 1, 5), 0.6309297535714575);
  EXPECT_DOUBLE_EQ(ndcg_at_k(ranked, 4, 5), 0.5);
  EXPECT_EQ(ndcg_at_k(ranked, 0, 4), 0.0);
  EXPECT_DOUBLE_EQ(ndcg_from_rank(10, 10), 0.2890648263178879);
  EXPECT_EQ(ndcg_from_rank(11, 10), 0.0);
}

TEST(Metrics, HitRatioPerBehaviorArithmetic) {
  // Purchases land at ranks 1 and 4, clicks at ranks 2 and 3.
  SessionSet set = fixtures::catalogue(4);
  set.sessions.push_back(fixtures::make_session(
      "a", {{0, Behavior::Click}, {0, Behavior::Purchase}, {1, Behavior::Click}, {3, Behavior::Purchase}}));
  set.sessions.push_back(fixtures::make_session("b", {{0, Behavior::Click}, {2, Behavior::Click}}));
  // Constant ranking 0, 1, 2, 3.
  BatchScorer scorer = [](const SequenceBatch& batch) {
    Matrix m(static_cast<Eigen::Index>(batch.size()), 4);
    for (Eigen::Index b = 0; b < m.rows(); ++b) m.row(b) << 4.0, 3.0, 2.0, 1.0;
    return m;
  };
  EvalOptions o;
  o.ks = {1, 3};
  o.max_len = 3;
  o.pad_item = 4;
  const auto r = rolling_evaluate(scorer, set, o);
  EXPECT_EQ(r.event_count(Behavior::Purchase), 2u);
  EXPECT_EQ(r.event_count(Behavior::Click), 2u);
  EXPECT_EQ(r.value(Behavior::Purchase, Metric::HitRatio, 1), 0.5);
  EXPECT_EQ(r.value(Behavior::Purchase, Metric::HitRatio, 3), 0.5);
  EXPECT_EQ(r.value(Behavior::Click, Metric::HitRatio, 1), 0.0);
  EXPECT_EQ(r.value(Behavior::Click, Metric::HitRatio, 3), 1.0);
  EXPECT_DOUBLE_EQ(r.value(Behavior::Click, Metric::Ndcg, 3), (1.0 / std::log2(3.0) + 0.5) / 2.0);
}

TEST(RollingEvaluate, MatchesBruteForceOnTwentySessions) {
  const auto sessions = fixture_sessions(2, 20);
  for (int max_len : {1, 4, 10}) {
    const auto opts = fixture_options(max_len);
    const auto got = rolling_evaluate(fixture_scorer, sessions, opts);
    const auto expect = brute_force(sessions, opts.ks, max_len);
    EXPECT_EQ(got.events, expect.events);
    for (const auto& [key, stats] : expect.cells)
      EXPECT_NEAR(got.value(key.behavior, key.metric, key.k), stats.mean, 1e-12) << key.name();
    expect_monotone(got);
  }
}

TEST(RollingEvaluate, ChunkingDoesNotMatter) {
  const auto sessions = fixture_sessions(3, 40);
  auto a = fixture_options();
  auto b = a;
  b.chunk = 3;
  EXPECT_EQ(to_json(rolling_evaluate(fixture_scorer, sessions, a)),
            to_json(rolling_evaluate(fixture_scorer, sessions, b)));
}

TEST(RollingEvaluate, EventCapScoresAPrefix) {
  const auto sessions = fixture_sessions(4, 20);
  auto opts = fixture_options();
  opts.event_cap = 17;
  const auto r = rolling_evaluate(fixture_scorer, sessions, opts);
  EXPECT_EQ(r.event_count(Behavior::Click) + r.event_count(Behavior::Purchase), 17u);
}

TEST(RollingEvaluate, PerfectScorerScoresOne) {
  const auto sessions = fixture_sessions(5, 20);
  // Peeks at the truth through a side table keyed by batch position.
  std::vector<ItemId> truths;
  for (const auto& s : sessions.sessions)
    for (std::size_t t = 1; t < s.size(); ++t) truths.push_back(s.events[t].item);
  std::size_t next = 0;
  BatchScorer oracle = [&](const SequenceBatch& batch) {
    Matrix m = Matrix::Zero(static_cast<Eigen::Index>(batch.size()), kItems);
    for (Eigen::Index b = 0; b < m.rows(); ++b) m(b, truths[next++]) = 1.0;
    return m;
  };
  const auto r = rolling_evaluate(oracle, sessions, fixture_options());
  for (const auto& [key, stats] : r.cells) EXPECT_EQ(stats.mean, 1.0) << key.name();
}

TEST(RollingEvaluate, RandomScorersStayMonotone) {
  Rng rng(6);
  const auto sessions = fixture_sessions(7, 50);
  for (int trial = 0; trial < 20; ++trial) {
    BatchScorer scorer = [&](const SequenceBatch& batch) {
      Matrix m(static_cast<Eigen::Index>(batch.size()), kItems);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::round(uniform01(rng) * 4.0);
      return m;
    };
    expect_monotone(rolling_evaluate(scorer, sessions, fixture_options()));
  }
}

TEST(RollingEvaluate, EmptyClassReportsZero) {
  SessionSet set = fixtures::catalogue(3);
  set.sessions.push_back(fixtures::make_session("a", {{0, Behavior::Click}, {1, Behavior::Click}}));
  BatchScorer scorer = [](const SequenceBatch& batch) { return Matrix(Matrix::Zero(static_cast<Eigen::Index>(batch.size()), 3)); };
  EvalOptions o;
  o.ks = {1};
  o.max_len = 2;
  o.pad_item = 3;
  const auto r = rolling_evaluate(scorer, set, o);
  EXPECT_EQ(r.event_count(Behavior::Purchase), 0u);
  EXPECT_EQ(r.value(Behavior::Purchase, Metric::HitRatio, 1), 0.0);
  EXPECT_THROW(r.value(Behavior::Click, Metric::HitRatio, 5), Error);
}

TEST(Repeats, CombineStacksCells) {
  const auto sessions = fixture_sessions(8, 10);
  auto r1 = rolling_evaluate(fixture_scorer, sessions, fixture_options());
  auto r2 = r1;
  for (auto& [key, stats] : r2.cells) stats = {stats.mean / 2.0, {stats.mean / 2.0}};
  const auto combined = combine_repeats({r1, r2});
  for (const auto& [key, stats] : combined.cells) {
    ASSERT_EQ(stats.repeats.size(), 2u);
    EXPECT_DOUBLE_EQ(stats.mean, 0.75 * r1.cells.at(key).mean);
  }
  auto bad = r1;
  bad.cells.erase(bad.cells.begin());
  EXPECT_THROW(combine_repeats({r1, bad}), Error);
}

TEST(Repeats, JsonRoundTrip) {
  const auto r = rolling_evaluate(fixture_scorer, fixture_sessions(9, 10), fixture_options());
  const auto back = metrics_report_from_json(to_json(r));
  EXPECT_EQ(to_json(back), to_json(r));
  EXPECT_EQ(back.events, r.events);
}

TEST(PairedTTest, MatchesReferenceValues) {
  // Reference values from scipy.stats.ttest_rel.
  const std::vector<double> v{0.31, 0.35, 0.33, 0.36, 0.30}, b{0.29, 0.30, 0.32, 0.33, 0.28};
  const auto t = paired_t_test(v, b);
  EXPECT_NEAR(t.t_stat, 3.833490860027325, 1e-10);
  EXPECT_NEAR(t.p_value, 0.018562564501560474, 1e-10);
  EXPECT_FALSE(t.degenerate);
  const std::vector<double> v2{1.0, 2.0, 4.0}, b2{1.5, 1.0, 1.0};
  const auto t2 = paired_t_test(v2, b2);
  EXPECT_NEAR(t2.t_stat, 1.1507929111375013, 1e-10);
  EXPECT_NEAR(t2.p_value, 0.3688312557327973, 1e-10);
  EXPECT_NEAR(paired_t_test(b2, v2).t_stat, -t2.t_stat, 1e-12);
}

TEST(PairedTTest, DegenerateCases) {
  const std::vector<double> a{0.2, 0.4, 0.6};
  const auto same = paired_t_test(a, a);
  EXPECT_TRUE(same.degenerate);
  EXPECT_EQ(same.p_value, 1.0);
  std::vector<double> lifted = a;
  for (auto& x : lifted) x += 0.1;
  const auto shift = paired_t_test(lifted, a);
  EXPECT_TRUE(shift.degenerate);
  EXPECT_EQ(shift.p_value, 0.0);
  EXPECT_GT(shift.t_stat, 0.0);
  EXPECT_THROW(paired_t_test(std::vector<double>{1.0}, std::vector<double>{2.0}), Error);
  EXPECT_THROW(paired_t_test(a, std::vector<double>{1.0, 2.0}), Error);
}

TEST(Aggregate, MarksSignificantCellsAndWritesCsv) {
  const auto sessions = fixture_sessions(10, 15);
  std::vector<MetricsReport> base, var;
  for (int r = 0; r < 5; ++r) {
    auto rep = rolling_evaluate(fixture_scorer, sessions, fixture_options());
    for (auto& [key, stats] : rep.cells) stats = {stats.mean * (1.0 + 0.01 * r), {stats.mean * (1.0 + 0.01 * r)}};
    base.push_back(rep);
    for (auto& [key, stats] : rep.cells) stats = {stats.mean + 0.1, {stats.mean + 0.1}};
    var.push_back(rep);
  }
  const auto rows = aggregate_repeats(var, base, 0.01);
  ASSERT_EQ(rows.size(), base.front().cells.size());
  for (const auto& row : rows) {
    EXPECT_TRUE(row.significant) << row.cell.name();
    EXPECT_NEAR(row.test.mean_diff, 0.1, 1e-12);
  }
  for (const auto& row : aggregate_repeats(base, base, 0.01)) EXPECT_FALSE(row.significant);

  fixtures::TempDir dir("seqrl-eval");
  write_comparison_csv(rows, dir.path / "cmp.csv");
  std::ifstream in(dir.path / "cmp.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, kComparisonCsvHeader);
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) {
    ++lines;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 9);
  }
  EXPECT_EQ(lines, rows.size());

  write_report_csv(combine_repeats(var), dir.path / "report.csv");
  std::ifstream rin(dir.path / "report.csv");
  std::getline(rin, header);
  EXPECT_EQ(header, "behavior,metric,k,events,mean,repeats");
}
