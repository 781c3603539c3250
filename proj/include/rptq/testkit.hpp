#pragma once

// Synthetic activations with LLM-like channel ranges, and exhaustive oracles
// for the clustering and GPTQ tests.

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "rptq/cluster.hpp"
#include "rptq/qlinear.hpp"
#include "rptq/tensor.hpp"

namespace rptq {

struct ChannelProfile {
  std::size_t channels = 128;
  double outlier_fraction = 0.03;
  // Outlier channels are centered at +-4 * multiplier * base_scale (random
  // side) with std 0.4 * multiplier * base_scale.
  double multiplier = 1.0;
  // Per-channel centers. When empty, centers are drawn from
  // U(-offset_spread, offset_spread).
  std::vector<double> offsets;
  double offset_spread = 0.0;
  double base_scale = 1.0;
  // Seeds the channel layout (which channels are outliers, centers).
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const ChannelProfile& p);
ChannelProfile channel_profile_from_json(const nlohmann::json& j);

// Indices of the outlier channels of a profile, ascending.
std::vector<std::size_t> outlier_channels(const ChannelProfile& profile);

// [B, N, C] Gaussian activations; a pure function of (profile, B, N, seed).
Tensor gen_activations(const ChannelProfile& profile, std::size_t batch, std::size_t tokens, std::uint64_t seed);

struct PartitionResult {
  std::vector<std::size_t> assignments;
  double inertia = 0.0;
};

// Exact minimum within-cluster SSE over all partitions into exactly g
// non-empty clusters. Throws ValidationError unless n <= 10, 1 <= g <= min(3, n).
PartitionResult brute_force_partition(std::span<const Point> points, std::size_t g);

struct GptqOracleResult {
  WeightQuant quant;
  double loss = 0.0;
};

// Exhaustive search of every code assignment on the fixed Min-Max grid of w
// (one cluster per row). Throws ValidationError unless w has at most 3
// columns and bits <= 2.
GptqOracleResult brute_force_gptq(const Tensor& w, const Tensor& x, int bits);

}  // namespace rptq
