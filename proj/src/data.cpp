#include "seqrl/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "seqrl/random.hpp"

namespace seqrl {

std::string_view to_string(Behavior behavior) {
  return behavior == Behavior::Purchase ? "purchase" : "click";
}

std::optional<Behavior> parse_behavior(std::string_view token) {
  std::string lower(token);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "click" || lower == "view") return Behavior::Click;
  if (lower == "purchase" || lower == "buy" || lower == "transaction") return Behavior::Purchase;
  return std::nullopt;
}

DatasetStats compute_stats(const SessionSet& sessions) {
  DatasetStats stats;
  stats.sequences = sessions.size();
  stats.items = sessions.n_items();
  for (const auto& s : sessions.sessions) {
    for (const auto& e : s.events) {
      (e.behavior == Behavior::Purchase ? stats.purchases : stats.clicks) += 1;
    }
  }
  return stats;
}

void RewardSchema::validate() const {
  require(std::isfinite(r_click) && r_click > 0, ErrorCategory::Config, "r_click must be > 0");
  require(std::isfinite(r_purchase) && r_purchase > 0, ErrorCategory::Config, "r_purchase must be > 0");
  require(gamma >= 0.0 && gamma <= 1.0, ErrorCategory::Config, "gamma must lie in [0, 1]");
}

RewardSchema RewardSchema::from_ratio(double ratio, double gamma, double r_click) {
  RewardSchema schema{r_click, ratio * r_click, gamma};
  schema.validate();
  return schema;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line, char delimiter) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delimiter, start);
    if (pos == std::string_view::npos) {
      fields.push_back(trim(line.substr(start)));
      break;
    }
    fields.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return fields;
}

char resolve_delimiter(const LoadOptions& options) {
  if (options.delimiter) return *options.delimiter;
  return options.format == InputFormat::Tsv ? '\t' : ',';
}

std::string parse_location(std::size_t line_no) { return "line " + std::to_string(line_no) + ": "; }

}  // namespace

SessionSet parse_sessions(std::string_view text, const LoadOptions& options) {
  const char delimiter = resolve_delimiter(options);
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;

  std::array<int, 4> column{-1, -1, -1, -1};  // session_id, timestamp, item_id, behavior
  std::size_t n_columns = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto header = split_fields(line, delimiter);
    n_columns = header.size();
    for (std::size_t i = 0; i < header.size(); ++i) {
      const auto& name = header[i];
      if (name == "session_id") column[0] = static_cast<int>(i);
      else if (name == "timestamp") column[1] = static_cast<int>(i);
      else if (name == "item_id") column[2] = static_cast<int>(i);
      else if (name == "behavior") column[3] = static_cast<int>(i);
    }
    break;
  }
  if (n_columns == 0) fail(ErrorCategory::Parse, "missing header row");
  for (int c : column) {
    if (c < 0) {
      fail(ErrorCategory::Parse,
           parse_location(line_no) + "header must name session_id, timestamp, item_id, behavior");
    }
  }

  SessionSet out;
  std::unordered_map<std::string, std::size_t> session_index;
  std::unordered_map<std::string, ItemId> item_index;
  struct Row {
    std::string item_key;
    Interaction event;
  };
  std::vector<std::vector<Row>> rows;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line, delimiter);
    if (fields.size() != n_columns) {
      fail(ErrorCategory::Parse, parse_location(line_no) + "expected " + std::to_string(n_columns) +
                                     " fields, found " + std::to_string(fields.size()));
    }
    const auto session_key = std::string(fields[static_cast<std::size_t>(column[0])]);
    const auto ts_text = fields[static_cast<std::size_t>(column[1])];
    const auto item_key = std::string(fields[static_cast<std::size_t>(column[2])]);
    const auto behavior_text = fields[static_cast<std::size_t>(column[3])];
    if (session_key.empty() || item_key.empty()) {
      fail(ErrorCategory::Parse, parse_location(line_no) + "empty session_id or item_id");
    }
    double ts = 0.0;
    const auto [ptr, ec] = std::from_chars(ts_text.data(), ts_text.data() + ts_text.size(), ts);
    if (ec != std::errc() || ptr != ts_text.data() + ts_text.size() || !std::isfinite(ts)) {
      fail(ErrorCategory::Parse, parse_location(line_no) + "bad timestamp '" + std::string(ts_text) + "'");
    }
    const auto behavior = parse_behavior(behavior_text);
    if (!behavior) {
      fail(ErrorCategory::Schema,
           parse_location(line_no) + "unknown behavior '" + std::string(behavior_text) + "'");
    }
    auto [sit, inserted] = session_index.try_emplace(session_key, rows.size());
    if (inserted) {
      rows.emplace_back();
      out.sessions.push_back(Session{session_key, {}});
    }
    rows[sit->second].push_back(Row{item_key, Interaction{0, *behavior, ts}});
  }

  // Sort within each session, then assign dense ids in first-appearance order.
  for (std::size_t s = 0; s < rows.size(); ++s) {
    auto& r = rows[s];
    std::stable_sort(r.begin(), r.end(),
                     [](const Row& a, const Row& b) { return a.event.timestamp < b.event.timestamp; });
    auto& events = out.sessions[s].events;
    events.reserve(r.size());
    for (auto& row : r) {
      auto [it, inserted] = item_index.try_emplace(row.item_key, static_cast<ItemId>(out.item_keys.size()));
      if (inserted) out.item_keys.push_back(row.item_key);
      row.event.item = it->second;
      events.push_back(row.event);
    }
  }
  return out;
}

SessionSet load_sessions(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::Io, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_sessions(buffer.str(), options);
}

void write_sessions(const SessionSet& sessions, const std::filesystem::path& path, char delimiter) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCategory::Io, "cannot write " + path.string());
  out << "session_id" << delimiter << "timestamp" << delimiter << "item_id" << delimiter << "behavior\n";
  for (const auto& s : sessions.sessions) {
    for (const auto& e : s.events) {
      char ts[64];
      const auto res = std::to_chars(ts, ts + sizeof(ts), e.timestamp);
      out << s.id << delimiter << std::string_view(ts, static_cast<std::size_t>(res.ptr - ts)) << delimiter
          << sessions.item_keys[static_cast<std::size_t>(e.item)] << delimiter << to_string(e.behavior)
          << '\n';
    }
  }
}

SessionSet reindex_items(const SessionSet& sessions) {
  SessionSet out;
  std::vector<ItemId> remap(sessions.item_keys.size(), -1);
  out.sessions.reserve(sessions.size());
  for (const auto& s : sessions.sessions) {
    Session copy{s.id, s.events};
    for (auto& e : copy.events) {
      auto& slot = remap[static_cast<std::size_t>(e.item)];
      if (slot < 0) {
        slot = static_cast<ItemId>(out.item_keys.size());
        out.item_keys.push_back(sessions.item_keys[static_cast<std::size_t>(e.item)]);
      }
      e.item = slot;
    }
    out.sessions.push_back(std::move(copy));
  }
  return out;
}

SessionSet preprocess(const SessionSet& sessions, const PreprocessOptions& options) {
  require(options.min_session_len >= 1, ErrorCategory::Config, "min_session_len must be >= 1");
  SessionSet filtered;
  filtered.item_keys = sessions.item_keys;

  std::vector<std::size_t> counts(sessions.item_keys.size(), 0);
  if (options.min_item_count) {
    for (const auto& s : sessions.sessions)
      for (const auto& e : s.events) ++counts[static_cast<std::size_t>(e.item)];
  }
  for (const auto& s : sessions.sessions) {
    Session kept{s.id, {}};
    for (const auto& e : s.events) {
      if (options.min_item_count &&
          counts[static_cast<std::size_t>(e.item)] < static_cast<std::size_t>(*options.min_item_count)) {
        continue;
      }
      kept.events.push_back(e);
    }
    if (static_cast<int>(kept.size()) >= options.min_session_len) filtered.sessions.push_back(std::move(kept));
  }

  if (options.sample_n && *options.sample_n < filtered.size()) {
    std::vector<std::size_t> order(filtered.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = make_stream(options.seed, "sample");
    shuffle_in_place(order, rng);
    order.resize(*options.sample_n);
    std::sort(order.begin(), order.end());
    SessionSet sampled;
    sampled.item_keys = filtered.item_keys;
    for (auto i : order) sampled.sessions.push_back(std::move(filtered.sessions[i]));
    filtered = std::move(sampled);
  }

  if (filtered.empty()) fail(ErrorCategory::EmptyDataset, "no sessions survive preprocessing");
  return reindex_items(filtered);
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios) {
  for (double r : ratios) require(r > 0 && std::isfinite(r), ErrorCategory::Config, "split ratios must be positive");
  require(n >= 3, ErrorCategory::EmptyDataset, "need at least 3 sessions to split");
  const double total = ratios[0] + ratios[1] + ratios[2];
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * ratios[i] / total;
    sizes[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - std::floor(exact);
    assigned += sizes[i];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i)
      if (remainder[i] > remainder[best]) best = i;
    ++sizes[best];
    remainder[best] = -1.0;
    ++assigned;
  }
  for (std::size_t i = 1; i < 3; ++i) {
    if (sizes[i] == 0) {
      --sizes[0];
      ++sizes[i];
    }
  }
  return sizes;
}

DatasetSplit split_sessions(const SessionSet& sessions, const SplitRatios& ratios, std::uint64_t seed) {
  const auto sizes = split_sizes(sessions.size(), ratios);
  std::vector<std::size_t> order(sessions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = make_stream(seed, "split");
  shuffle_in_place(order, rng);

  DatasetSplit split;
  std::array<SessionSet*, 3> parts{&split.train, &split.validation, &split.test};
  std::size_t cursor = 0;
  for (std::size_t p = 0; p < 3; ++p) {
    parts[p]->item_keys = sessions.item_keys;
    std::vector<std::size_t> chosen(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                    order.begin() + static_cast<std::ptrdiff_t>(cursor + sizes[p]));
    std::sort(chosen.begin(), chosen.end());
    for (auto i : chosen) parts[p]->sessions.push_back(sessions.sessions[i]);
    cursor += sizes[p];
  }
  return split;
}

std::vector<ReplayTuple> build_replay_tuples(const Session& session, int max_len, ItemId pad_item,
                                             const RewardSchema& schema, std::uint32_t session_index) {
  require(max_len >= 1, ErrorCategory::Config, "max_len must be >= 1");
  std::vector<ReplayTuple> tuples;
  const auto m = static_cast<int>(session.size());
  if (m < 2) return tuples;
  tuples.reserve(static_cast<std::size_t>(m - 1));

  auto window = [&](int length, std::vector<ItemId>& ids) {
    const int real = std::min(length, max_len);
    ids.assign(static_cast<std::size_t>(max_len), pad_item);
    for (int i = 0; i < real; ++i) {
      ids[static_cast<std::size_t>(max_len - real + i)] =
          session.events[static_cast<std::size_t>(length - real + i)].item;
    }
    return real;
  };

  for (int t = 1; t < m; ++t) {
    ReplayTuple tuple;
    tuple.state_len = window(t, tuple.state);
    tuple.next_state_len = window(t + 1, tuple.next_state);
    const auto& target = session.events[static_cast<std::size_t>(t)];
    tuple.action = target.item;
    tuple.behavior = target.behavior;
    tuple.reward = schema.reward(target.behavior);
    tuple.terminal = (t + 1 == m);
    tuple.session_index = session_index;
    tuples.push_back(std::move(tuple));
  }
  return tuples;
}

ReplayBuffer build_replay_buffer(const SessionSet& sessions, int max_len, const RewardSchema& schema) {
  schema.validate();
  ReplayBuffer buffer;
  buffer.n_items = sessions.n_items();
  buffer.max_len = max_len;
  buffer.session_items.reserve(sessions.size());
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    const auto& session = sessions.sessions[s];
    std::vector<ItemId> items;
    items.reserve(session.size());
    for (const auto& e : session.events) items.push_back(e.item);
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    buffer.session_items.push_back(std::move(items));

    if (session.size() < 2) {
      ++buffer.skipped_sessions;
      continue;
    }
    auto tuples = build_replay_tuples(session, max_len, sessions.pad_item(), schema, static_cast<std::uint32_t>(s));
    buffer.tuples.insert(buffer.tuples.end(), std::make_move_iterator(tuples.begin()),
                         std::make_move_iterator(tuples.end()));
  }
  return buffer;
}

namespace {

void write_ids(std::ostream& out, const std::vector<ItemId>& ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) out << (i ? " " : "") << ids[i];
}

std::vector<ItemId> read_ids(std::string_view text, std::size_t line_no) {
  std::vector<ItemId> ids;
  std::istringstream in{std::string(text)};
  ItemId id = 0;
  while (in >> id) ids.push_back(id);
  if (!in.eof()) fail(ErrorCategory::Parse, "line " + std::to_string(line_no) + ": bad id list");
  return ids;
}

}  // namespace

void write_tuple_shard(const ReplayBuffer& buffer, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCategory::Io, "cannot write " + path.string());
  out.precision(17);
  out << "#seqrl-tuples v1 n_items=" << buffer.n_items << " max_len=" << buffer.max_len << '\n';
  for (const auto& t : buffer.tuples) {
    write_ids(out, t.state);
    out << '\t' << t.state_len << '\t' << t.action << '\t' << to_string(t.behavior) << '\t' << t.reward << '\t';
    write_ids(out, t.next_state);
    out << '\t' << t.next_state_len << '\t' << (t.terminal ? 1 : 0) << '\t' << t.session_index << '\n';
  }
}

ReplayBuffer read_tuple_shard(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::Io, "cannot open " + path.string());
  ReplayBuffer buffer;
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line) ||
      std::sscanf(line.c_str(), "#seqrl-tuples v1 n_items=%d max_len=%d", &buffer.n_items, &buffer.max_len) != 2) {
    fail(ErrorCategory::Parse, "line 1: missing tuple shard header");
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_fields(line, '\t');
    if (f.size() != 9) fail(ErrorCategory::Parse, "line " + std::to_string(line_no) + ": expected 9 fields");
    ReplayTuple t;
    t.state = read_ids(f[0], line_no);
    t.state_len = std::stoi(std::string(f[1]));
    t.action = std::stoi(std::string(f[2]));
    const auto b = parse_behavior(f[3]);
    if (!b) fail(ErrorCategory::Schema, "line " + std::to_string(line_no) + ": unknown behavior");
    t.behavior = *b;
    t.reward = std::stod(std::string(f[4]));
    t.next_state = read_ids(f[5], line_no);
    t.next_state_len = std::stoi(std::string(f[6]));
    t.terminal = f[7] == "1";
    t.session_index = static_cast<std::uint32_t>(std::stoul(std::string(f[8])));
    buffer.tuples.push_back(std::move(t));
  }
  return buffer;
}

nlohmann::json to_json(const RewardSchema& schema) {
  return {{"r_click", schema.r_click}, {"r_purchase", schema.r_purchase}, {"gamma", schema.gamma}};
}

RewardSchema reward_schema_from_json(const nlohmann::json& j) {
  RewardSchema schema{j.at("r_click").get<double>(), j.at("r_purchase").get<double>(), j.at("gamma").get<double>()};
  schema.validate();
  return schema;
}

}  // namespace seqrl
