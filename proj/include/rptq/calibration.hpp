#pragma once

// Running per-channel extrema over a calibration set.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rptq/tensor.hpp"
#include <json.hpp>

namespace rptq {

struct ChannelStats {
  std::size_t num_channels = 0;
  std::vector<float> mins;
  std::vector<float> maxs;
  std::uint64_t samples_seen = 0;

  // Empty accumulator: mins=+inf, maxs=-inf, samples_seen=0.
  static ChannelStats empty(std::size_t channels);

  // Stats reindexed so that channel i of the result is channel perm[i] of this.
  ChannelStats permuted(std::span<const std::size_t> perm) const;

  friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

// Folds every (sample, token) row of `batch` into the accumulator. samples_seen
// grows by the leading axis length of `batch`.
ChannelStats collect_stats(ChannelStats acc, const Tensor& batch);
ChannelStats merge_stats(const ChannelStats& a, const ChannelStats& b);

// Per head, per channel: (Q max, Q min, K max, K min).
struct QKHeadStats {
  std::vector<float> q_max, q_min, k_max, k_min;

  ChannelStats q_stats() const;
  ChannelStats k_stats() const;
  // n x 4 signature points, in (Q max, Q min, K max, K min) order.
  std::vector<std::vector<double>> quaternion_points() const;

  friend bool operator==(const QKHeadStats&, const QKHeadStats&) = default;
};

struct QKJointStats {
  std::vector<QKHeadStats> heads;
  std::uint64_t samples_seen = 0;

  friend bool operator==(const QKJointStats&, const QKJointStats&) = default;
};

// q and k have shape [B, H, N, C_head].
QKJointStats collect_qk_stats(const Tensor& q, const Tensor& k);
QKJointStats merge_qk_stats(const QKJointStats& a, const QKJointStats& b);

// (min, max) signature points per channel.
std::vector<std::vector<double>> range_points(const ChannelStats& stats);

nlohmann::json to_json(const ChannelStats& s);
ChannelStats channel_stats_from_json(const nlohmann::json& j);
nlohmann::json to_json(const QKJointStats& s);
QKJointStats qk_stats_from_json(const nlohmann::json& j);

}  // namespace rptq
