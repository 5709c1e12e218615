#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "seqrl/encoder.hpp"
#include "seqrl/heads.hpp"

namespace seqrl {

/// Encoder G plus the supervised head and the Q head on its final state.
struct Network {
  EncoderParams encoder;
  LinearHead supervised;
  LinearHead q;
};

template <class Net, class Fn>
void for_each_param(Net& net, Fn&& fn) {
  for_each_encoder_param(net.encoder, [&](const std::string& name, auto& m) { fn("encoder." + name, m); });
  for_each_head_param(net.supervised, "supervised", fn);
  for_each_head_param(net.q, "q", fn);
}

Network init_network(const EncoderConfig& config, Rng& rng);
Network zeros_like(const Network& net);
std::vector<Matrix*> param_list(Network& net);
std::vector<const Matrix*> param_list(const Network& net);
bool bit_identical(const Network& a, const Network& b);

/// Two independently initialised copies for double Q-learning. Copy A's
/// supervised head (or Q head, in the Q-only ablation) serves rankings.
struct DualHeadModel {
  Network copy_a;
  Network copy_b;
  QActivation q_activation = QActivation::Identity;

  Network& copy(int index) { return index == 0 ? copy_a : copy_b; }
  const Network& copy(int index) const { return index == 0 ? copy_a : copy_b; }
  const EncoderConfig& config() const { return copy_a.encoder.config; }
};

/// Copy A from the "init_A" substream of the master seed, copy B from "init_B".
DualHeadModel init_model(const EncoderConfig& config, std::uint64_t master_seed,
                         QActivation activation = QActivation::Identity);

// ------------------------------------------------------------ checkpoints

/// Versioned binary container: magic, format version, JSON header describing
/// every array, then the arrays as little-endian float64 in header order.
struct NamedArray {
  std::string name;
  Matrix value;
};

inline constexpr std::uint32_t kContainerVersion = 1;

void write_container(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_container(const std::filesystem::path& path, nlohmann::json& meta);

void append_network(std::vector<NamedArray>& arrays, const std::string& prefix, const Network& net);
/// Fills every parameter of `net` (shapes must already be allocated) from `arrays`.
void restore_network(const std::vector<NamedArray>& arrays, const std::string& prefix, Network& net);

void save_model(const DualHeadModel& model, const std::filesystem::path& path);
DualHeadModel load_model(const std::filesystem::path& path);

}  // namespace seqrl
