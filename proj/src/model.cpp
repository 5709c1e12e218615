#include "seqrl/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

namespace seqrl {

Network init_network(const EncoderConfig& config, Rng& rng) {
  Network net;
  net.encoder = init_encoder(config, rng);
  net.supervised = init_head(config.hidden_dim, config.n_items, rng);
  net.q = init_head(config.hidden_dim, config.n_items, rng);
  return net;
}

Network zeros_like(const Network& net) {
  Network z = net;
  for_each_param(z, [](const std::string&, Matrix& m) { m.setZero(); });
  return z;
}

std::vector<Matrix*> param_list(Network& net) {
  std::vector<Matrix*> out;
  for_each_param(net, [&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

std::vector<const Matrix*> param_list(const Network& net) {
  std::vector<const Matrix*> out;
  for_each_param(net, [&](const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

bool bit_identical(const Network& a, const Network& b) {
  const auto pa = param_list(a);
  const auto pb = param_list(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->rows() != pb[i]->rows() || pa[i]->cols() != pb[i]->cols()) return false;
    if (std::memcmp(pa[i]->data(), pb[i]->data(), sizeof(double) * static_cast<std::size_t>(pa[i]->size())) != 0)
      return false;
  }
  return true;
}

DualHeadModel init_model(const EncoderConfig& config, std::uint64_t master_seed, QActivation activation) {
  DualHeadModel model;
  auto rng_a = make_stream(master_seed, "init_A");
  auto rng_b = make_stream(master_seed, "init_B");
  model.copy_a = init_network(config, rng_a);
  model.copy_b = init_network(config, rng_b);
  model.q_activation = activation;
  return model;
}

namespace {

constexpr char kMagic[8] = {'S', 'E', 'Q', 'R', 'L', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little, "container format assumes a little-endian host");

}  // namespace

void write_container(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<NamedArray>& arrays) {
  nlohmann::json header = meta;
  header["arrays"] = nlohmann::json::array();
  for (const auto& a : arrays) header["arrays"].push_back({{"name", a.name}, {"rows", a.value.rows()}, {"cols", a.value.cols()}});
  const std::string text = header.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorCategory::Io, "cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    const std::uint32_t version = kContainerVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : arrays) {
      // Column-major, matching Eigen's default storage.
      out.write(reinterpret_cast<const char*>(a.value.data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(a.value.size())));
    }
    if (!out) fail(ErrorCategory::Io, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedArray> read_container(const std::filesystem::path& path, nlohmann::json& meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::Io, "cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) fail(ErrorCategory::Parse, path.string() + ": not a seqrl container");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kContainerVersion) {
    fail(ErrorCategory::Parse, path.string() + ": unsupported container version " + std::to_string(version));
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) fail(ErrorCategory::Parse, path.string() + ": truncated header");
  meta = nlohmann::json::parse(text);

  std::vector<NamedArray> arrays;
  for (const auto& a : meta.at("arrays")) {
    NamedArray na{a.at("name").get<std::string>(), Matrix(a.at("rows").get<Eigen::Index>(), a.at("cols").get<Eigen::Index>())};
    in.read(reinterpret_cast<char*>(na.value.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(na.value.size())));
    if (!in) fail(ErrorCategory::Parse, path.string() + ": truncated array " + na.name);
    arrays.push_back(std::move(na));
  }
  meta.erase("arrays");
  return arrays;
}

void append_network(std::vector<NamedArray>& arrays, const std::string& prefix, const Network& net) {
  for_each_param(net, [&](const std::string& name, const Matrix& m) { arrays.push_back({prefix + name, m}); });
}

void restore_network(const std::vector<NamedArray>& arrays, const std::string& prefix, Network& net) {
  std::map<std::string, const Matrix*> index;
  for (const auto& a : arrays) index[a.name] = &a.value;
  for_each_param(net, [&](const std::string& name, Matrix& m) {
    const auto it = index.find(prefix + name);
    if (it == index.end()) fail(ErrorCategory::Parse, "checkpoint lacks array " + prefix + name);
    if (it->second->rows() != m.rows() || it->second->cols() != m.cols()) {
      fail(ErrorCategory::Shape, "checkpoint array " + prefix + name + " has the wrong shape");
    }
    m = *it->second;
  });
}

void save_model(const DualHeadModel& model, const std::filesystem::path& path) {
  nlohmann::json meta = {{"kind", "model"},
                         {"encoder", to_json(model.config())},
                         {"q_activation", to_string(model.q_activation)}};
  std::vector<NamedArray> arrays;
  append_network(arrays, "a.", model.copy_a);
  append_network(arrays, "b.", model.copy_b);
  write_container(path, meta, arrays);
}

DualHeadModel load_model(const std::filesystem::path& path) {
  nlohmann::json meta;
  const auto arrays = read_container(path, meta);
  const auto config = encoder_config_from_json(meta.at("encoder"));
  auto model = init_model(config, 0, parse_q_activation(meta.at("q_activation").get<std::string>()));
  restore_network(arrays, "a.", model.copy_a);
  restore_network(arrays, "b.", model.copy_b);
  return model;
}

}  // namespace seqrl
