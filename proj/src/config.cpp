#include "seqrl/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

namespace seqrl {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string unquote(std::string s) {
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

// ------------------------------------------------------------ value parsing

const std::string& single(const std::string& key, const std::vector<std::string>& v) {
  require(v.size() == 1, ErrorCategory::Config, key + " expects a single value");
  return v.front();
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, value);
  require(res.ec == std::errc() && res.ptr == end, ErrorCategory::Config,
          key + ": '" + text + "' is not a valid number");
  return value;
}

int as_int(const std::string& key, const std::vector<std::string>& v) { return parse_number<int>(key, single(key, v)); }
std::int64_t as_i64(const std::string& key, const std::vector<std::string>& v) {
  return parse_number<std::int64_t>(key, single(key, v));
}
std::uint64_t as_u64(const std::string& key, const std::vector<std::string>& v) {
  return parse_number<std::uint64_t>(key, single(key, v));
}
double as_double(const std::string& key, const std::vector<std::string>& v) {
  return parse_number<double>(key, single(key, v));
}
bool as_bool(const std::string& key, const std::vector<std::string>& v) {
  const auto& s = single(key, v);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  fail(ErrorCategory::Config, key + ": '" + s + "' is not a boolean");
}
bool is_none(const std::vector<std::string>& v) { return v.size() == 1 && (v[0] == "none" || v[0].empty()); }

std::optional<std::size_t> as_optional_size(const std::string& key, const std::vector<std::string>& v) {
  if (is_none(v)) return std::nullopt;
  return parse_number<std::size_t>(key, single(key, v));
}

// ------------------------------------------------------------ formatting

std::string fmt(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  std::string s(buf, res.ptr);
  // keep floats recognisable as floats
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}
template <class T>
std::string fmt_int(T x) {
  return std::to_string(x);
}
std::string quote_str(std::string_view s) { return "\"" + std::string(s) + "\""; }
std::string fmt_bool(bool b) { return b ? "true" : "false"; }

template <class T, class F>
std::string fmt_array(const std::vector<T>& values, F f) {
  std::string out = "[";
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? ", " : "") + f(values[i]);
  return out + "]";
}

// ------------------------------------------------------------ key table

using Values = std::vector<std::string>;

struct KeySpec {
  std::string name;
  std::function<void(ExperimentConfig&, const std::string&, const Values&)> set;
  std::function<std::optional<std::string>(const ExperimentConfig&)> get;
};

KernelOptions& synth(ExperimentConfig& c) {
  if (!c.dataset.synthetic) c.dataset.synthetic = KernelOptions{};
  return *c.dataset.synthetic;
}

FileDataset& file(ExperimentConfig& c) {
  if (!c.dataset.file) c.dataset.file = FileDataset{};
  return *c.dataset.file;
}

std::vector<KeySpec> make_keys() {
  std::vector<KeySpec> keys;
  auto add = [&](std::string name, auto set, auto get) { keys.push_back({std::move(name), set, get}); };
  auto only_synth = [](const ExperimentConfig& c) { return c.dataset.synthetic.has_value(); };
  auto only_file = [](const ExperimentConfig& c) { return c.dataset.file.has_value(); };

  // [experiment]
  add("experiment.variant", [](auto& c, auto& k, auto& v) { c.variant = parse_variant(single(k, v)); },
      [](auto& c) -> std::optional<std::string> { return quote_str(to_string(c.variant)); });
  add("experiment.seed", [](auto& c, auto& k, auto& v) { c.seed = as_u64(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_int(c.seed); });
  add("experiment.repeats", [](auto& c, auto& k, auto& v) { c.repeats = as_int(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_int(c.repeats); });
  add("experiment.output_dir", [](auto& c, auto& k, auto& v) { c.output_dir = single(k, v); },
      [](auto& c) -> std::optional<std::string> {
        if (c.output_dir.empty()) return std::nullopt;
        return quote_str(c.output_dir.string());
      });
  add("experiment.test_event_cap", [](auto& c, auto& k, auto& v) { c.test_event_cap = as_optional_size(k, v); },
      [](auto& c) -> std::optional<std::string> {
        if (!c.test_event_cap) return std::nullopt;
        return fmt_int(*c.test_event_cap);
      });

  // [dataset]
  add("dataset.source",
      [](auto& c, auto& k, auto& v) {
        const auto& s = single(k, v);
        if (s == "synthetic") {
          c.dataset.file.reset();
          synth(c);
        } else if (s == "file") {
          c.dataset.synthetic.reset();
          file(c);
        } else {
          fail(ErrorCategory::Config, k + " must be 'synthetic' or 'file'");
        }
      },
      [](auto& c) -> std::optional<std::string> { return quote_str(c.dataset.synthetic ? "synthetic" : "file"); });
  add("dataset.path", [](auto& c, auto& k, auto& v) { file(c).path = single(k, v); },
      [=](auto& c) -> std::optional<std::string> {
        if (!only_file(c)) return std::nullopt;
        return quote_str(c.dataset.file->path.string());
      });
  add("dataset.format",
      [](auto& c, auto& k, auto& v) {
        const auto& s = single(k, v);
        require(s == "csv" || s == "tsv", ErrorCategory::Config, k + " must be csv or tsv");
        file(c).load.format = s == "tsv" ? InputFormat::Tsv : InputFormat::Csv;
      },
      [=](auto& c) -> std::optional<std::string> {
        if (!only_file(c)) return std::nullopt;
        return quote_str(c.dataset.file->load.format == InputFormat::Tsv ? "tsv" : "csv");
      });
  add("dataset.delimiter",
      [](auto& c, auto& k, auto& v) {
        const auto& s = single(k, v);
        require(s.size() == 1 || s == "\\t", ErrorCategory::Config, k + " must be one character");
        file(c).load.delimiter = s == "\\t" ? '\t' : s[0];
      },
      [=](auto& c) -> std::optional<std::string> {
        if (!only_file(c) || !c.dataset.file->load.delimiter) return std::nullopt;
        const char d = *c.dataset.file->load.delimiter;
        return quote_str(d == '\t' ? std::string("\\t") : std::string(1, d));
      });
  add("dataset.min_session_len", [](auto& c, auto& k, auto& v) { file(c).preprocess.min_session_len = as_int(k, v); },
      [=](auto& c) -> std::optional<std::string> {
        if (!only_file(c)) return std::nullopt;
        return fmt_int(c.dataset.file->preprocess.min_session_len);
      });
  add("dataset.min_item_count",
      [](auto& c, auto& k, auto& v) {
        if (is_none(v)) {
          file(c).preprocess.min_item_count.reset();
        } else {
          file(c).preprocess.min_item_count = as_int(k, v);
        }
      },
      [=](auto& c) -> std::optional<std::string> {
        if (!only_file(c) || !c.dataset.file->preprocess.min_item_count) return std::nullopt;
        return fmt_int(*c.dataset.file->preprocess.min_item_count);
      });
  add("dataset.sample_n", [](auto& c, auto& k, auto& v) { file(c).preprocess.sample_n = as_optional_size(k, v); },
      [=](auto& c) -> std::optional<std::string> {
        if (!only_file(c) || !c.dataset.file->preprocess.sample_n) return std::nullopt;
        return fmt_int(*c.dataset.file->preprocess.sample_n);
      });

  // [synthetic]
  auto synth_int = [&](const std::string& name, auto member) {
    add("synthetic." + name, [member](auto& c, auto& k, auto& v) { synth(c).*member = as_int(k, v); },
        [=](auto& c) -> std::optional<std::string> {
          if (!only_synth(c)) return std::nullopt;
          return fmt_int((*c.dataset.synthetic).*member);
        });
  };
  auto synth_double = [&](const std::string& name, auto member) {
    add("synthetic." + name, [member](auto& c, auto& k, auto& v) { synth(c).*member = as_double(k, v); },
        [=](auto& c) -> std::optional<std::string> {
          if (!only_synth(c)) return std::nullopt;
          return fmt((*c.dataset.synthetic).*member);
        });
  };
  synth_int("n_items", &KernelOptions::n_items);
  add("synthetic.n_sessions",
      [](auto& c, auto& k, auto& v) { synth(c).n_sessions = parse_number<std::size_t>(k, single(k, v)); },
      [=](auto& c) -> std::optional<std::string> {
        if (!only_synth(c)) return std::nullopt;
        return fmt_int(c.dataset.synthetic->n_sessions);
      });
  synth_double("mean_length", &KernelOptions::mean_length);
  synth_int("min_length", &KernelOptions::min_length);
  synth_int("max_length", &KernelOptions::max_length);
  synth_int("successors", &KernelOptions::successors);
  synth_double("concentration", &KernelOptions::concentration);
  synth_double("purchasable_fraction", &KernelOptions::purchasable_fraction);
  synth_double("propensity_low", &KernelOptions::propensity_low);
  synth_double("propensity_high", &KernelOptions::propensity_high);
  synth_double("base_propensity", &KernelOptions::base_propensity);

  // [split]
  const char* parts[] = {"train", "validation", "test"};
  for (std::size_t i = 0; i < 3; ++i) {
    add(std::string("split.") + parts[i], [i](auto& c, auto& k, auto& v) { c.split[i] = as_double(k, v); },
        [i](auto& c) -> std::optional<std::string> { return fmt(c.split[i]); });
  }

  // [model]
  add("model.encoder", [](auto& c, auto& k, auto& v) { c.encoder.kind = parse_encoder_kind(single(k, v)); },
      [](auto& c) -> std::optional<std::string> { return quote_str(to_string(c.encoder.kind)); });
  add("model.embed_dim", [](auto& c, auto& k, auto& v) { c.encoder.embed_dim = as_int(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_int(c.encoder.embed_dim); });
  add("model.hidden_dim", [](auto& c, auto& k, auto& v) { c.encoder.hidden_dim = as_int(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_int(c.encoder.hidden_dim); });
  add("model.max_len", [](auto& c, auto& k, auto& v) { c.encoder.max_len = as_int(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_int(c.encoder.max_len); });
  add("model.heads", [](auto& c, auto& k, auto& v) { c.encoder.attention_heads = as_int(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_int(c.encoder.attention_heads); });
  add("model.dropout", [](auto& c, auto& k, auto& v) { c.encoder.dropout = as_double(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt(c.encoder.dropout); });

  // [train]
  add("train.batch_size", [](auto& c, auto& k, auto& v) { c.train.batch_size = as_int(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_int(c.train.batch_size); });
  add("train.learning_rate", [](auto& c, auto& k, auto& v) { c.train.learning_rate = as_double(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt(c.train.learning_rate); });
  add("train.eval_every", [](auto& c, auto& k, auto& v) { c.train.eval_every = as_i64(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_int(c.train.eval_every); });
  add("train.max_updates", [](auto& c, auto& k, auto& v) { c.train.max_updates = as_i64(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_int(c.train.max_updates); });
  add("train.patience", [](auto& c, auto& k, auto& v) { c.train.patience = as_int(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_int(c.train.patience); });
  add("train.sac_threshold",
      [](auto& c, auto& k, auto& v) {
        c.train.sac_threshold = single(k, v) == "never" ? kNeverSwitch : as_i64(k, v);
      },
      [](auto& c) -> std::optional<std::string> {
        if (c.train.sac_threshold == kNeverSwitch) return quote_str("never");
        return fmt_int(c.train.sac_threshold);
      });
  add("train.sac_loss", [](auto& c, auto& k, auto& v) { c.train.sac_loss = parse_sac_loss_form(single(k, v)); },
      [](auto& c) -> std::optional<std::string> { return quote_str(to_string(c.train.sac_loss)); });
  add("train.sac_clip_q", [](auto& c, auto& k, auto& v) { c.train.sac_clip_q = as_bool(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_bool(c.train.sac_clip_q); });
  add("train.n_negatives", [](auto& c, auto& k, auto& v) { c.train.n_negatives = as_int(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt_int(c.train.n_negatives); });
  add("train.q_activation",
      [](auto& c, auto& k, auto& v) { c.train.q_activation = parse_q_activation(single(k, v)); },
      [](auto& c) -> std::optional<std::string> { return quote_str(to_string(c.train.q_activation)); });
  add("train.val_event_cap", [](auto& c, auto& k, auto& v) { c.train.val_event_cap = as_optional_size(k, v); },
      [](auto& c) -> std::optional<std::string> {
        if (!c.train.val_event_cap) return std::nullopt;
        return fmt_int(*c.train.val_event_cap);
      });
  add("train.ks",
      [](auto& c, auto& k, auto& v) {
        require(!v.empty(), ErrorCategory::Config, k + " must list at least one cutoff");
        c.train.ks.clear();
        for (const auto& s : v) c.train.ks.push_back(parse_number<int>(k, s));
      },
      [](auto& c) -> std::optional<std::string> {
        return fmt_array(c.train.ks, [](int x) { return std::to_string(x); });
      });

  // [reward]
  add("reward.r_click", [](auto& c, auto& k, auto& v) { c.train.schema.r_click = as_double(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt(c.train.schema.r_click); });
  add("reward.r_purchase", [](auto& c, auto& k, auto& v) { c.train.schema.r_purchase = as_double(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt(c.train.schema.r_purchase); });
  add("reward.gamma", [](auto& c, auto& k, auto& v) { c.train.schema.gamma = as_double(k, v); },
      [](auto& c) -> std::optional<std::string> { return fmt(c.train.schema.gamma); });
  // applied after r_click, see build_experiment_config
  add("reward.ratio",
      [](auto& c, auto& k, auto& v) { c.train.schema.r_purchase = as_double(k, v) * c.train.schema.r_click; },
      [](auto&) -> std::optional<std::string> { return std::nullopt; });

  // [sweep]
  add("sweep.axis",
      [](auto& c, auto& k, auto& v) {
        if (is_none(v)) {
          c.sweep.reset();
          return;
        }
        if (!c.sweep) c.sweep = SweepSpec{};
        c.sweep->axis = parse_sweep_axis(single(k, v));
      },
      [](auto& c) -> std::optional<std::string> {
        if (!c.sweep) return std::nullopt;
        return quote_str(to_string(c.sweep->axis));
      });
  add("sweep.values",
      [](auto& c, auto& k, auto& v) {
        if (!c.sweep) c.sweep = SweepSpec{};
        c.sweep->values.clear();
        for (const auto& s : v) c.sweep->values.push_back(parse_number<double>(k, s));
      },
      [](auto& c) -> std::optional<std::string> {
        if (!c.sweep) return std::nullopt;
        return fmt_array(c.sweep->values, [](double x) { return fmt(x); });
      });
  return keys;
}

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> keys = make_keys();
  return keys;
}

const KeySpec* find_key(std::string_view name) {
  for (const auto& k : key_table()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

}  // namespace

ConfigMap parse_config_text(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(in);
  } catch (const CLI::Error& e) {
    fail(ErrorCategory::Parse, std::string("config: ") + e.what());
  }
  ConfigMap map;
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    // within one file both reward keys may appear; build_experiment_config rejects that
    const auto key = item.fullname();
    require(find_key(key) != nullptr, ErrorCategory::Config, "unknown config key '" + key + "'");
    map[key] = item.inputs;
  }
  return map;
}

ConfigMap read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCategory::Io, "cannot read config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str());
}

void set_value(ConfigMap& map, const std::string& key, std::vector<std::string> values) {
  require(find_key(key) != nullptr, ErrorCategory::Config, "unknown config key '" + key + "'");
  // a later purchase reward replaces an earlier ratio and vice versa
  if (key == "reward.ratio") map.erase("reward.r_purchase");
  if (key == "reward.r_purchase") map.erase("reward.ratio");
  map[key] = std::move(values);
}

void apply_override(ConfigMap& map, std::string_view assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string_view::npos, ErrorCategory::Config,
          "override '" + std::string(assignment) + "' is not of the form key=value");
  const auto key = trim(assignment.substr(0, eq));
  auto value = trim(assignment.substr(eq + 1));
  std::vector<std::string> values;
  if (value.size() >= 2 && value.front() == '[' && value.back() == ']') {
    std::string_view inner(value);
    inner = inner.substr(1, inner.size() - 2);
    while (!inner.empty()) {
      const auto comma = inner.find(',');
      const auto part = trim(inner.substr(0, comma));
      if (!part.empty()) values.push_back(unquote(part));
      if (comma == std::string_view::npos) break;
      inner.remove_prefix(comma + 1);
    }
  } else {
    values.push_back(unquote(value));
  }
  set_value(map, key, std::move(values));
}

ExperimentConfig build_experiment_config(const ConfigMap& map) {
  ExperimentConfig config;
  config.dataset.synthetic = KernelOptions{};
  require(!(map.contains("reward.ratio") && map.contains("reward.r_purchase")), ErrorCategory::Config,
          "set either reward.r_purchase or reward.ratio, not both");
  // the source decides which dataset block the other keys land in
  if (auto it = map.find("dataset.source"); it != map.end()) find_key(it->first)->set(config, it->first, it->second);
  for (const auto& [key, values] : map) {
    if (key == "dataset.source" || key == "reward.ratio") continue;
    const auto* spec = find_key(key);
    require(spec != nullptr, ErrorCategory::Config, "unknown config key '" + key + "'");
    spec->set(config, key, values);
  }
  if (auto it = map.find("reward.ratio"); it != map.end()) find_key(it->first)->set(config, it->first, it->second);
  if (config.dataset.file) {
    require(!config.dataset.file->path.empty(), ErrorCategory::Config, "dataset.path is required for file datasets");
  }
  config.validate();
  return config;
}

std::string to_config_text(const ExperimentConfig& config) {
  std::string out;
  std::string section;
  for (const auto& key : key_table()) {
    const auto value = key.get(config);
    if (!value) continue;
    const auto dot = key.name.find('.');
    const auto sec = key.name.substr(0, dot);
    if (sec != section) {
      out += (out.empty() ? "" : "\n") + ("[" + sec + "]\n");
      section = sec;
    }
    out += key.name.substr(dot + 1) + " = " + *value + "\n";
  }
  return out;
}

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& k : key_table()) out.push_back(k.name);
    return out;
  }();
  return names;
}

}  // namespace seqrl
