#include "rptq/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "rptq/error.hpp"

namespace rptq {

namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();

void check_channels(std::size_t expected, std::size_t got) {
  if (expected != got) {
    throw ValidationError("channel count mismatch: expected " + std::to_string(expected) + ", got " +
                          std::to_string(got));
  }
}

nlohmann::json floats_to_json(const std::vector<float>& v) {
  auto arr = nlohmann::json::array();
  for (float x : v) {
    if (std::isfinite(x)) {
      arr.push_back(x);
    } else {
      arr.push_back(nullptr);
    }
  }
  return arr;
}

std::vector<float> floats_from_json(const nlohmann::json& arr, float missing) {
  std::vector<float> v;
  v.reserve(arr.size());
  for (const auto& x : arr) v.push_back(x.is_null() ? missing : x.get<float>());
  return v;
}

}  // namespace

ChannelStats ChannelStats::empty(std::size_t channels) {
  return ChannelStats{channels, std::vector<float>(channels, kInf), std::vector<float>(channels, -kInf), 0};
}

ChannelStats ChannelStats::permuted(std::span<const std::size_t> perm) const {
  check_channels(num_channels, perm.size());
  if (!is_permutation(perm)) throw ValidationError("reorder index is not a bijection");
  ChannelStats out = *this;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out.mins[i] = mins[perm[i]];
    out.maxs[i] = maxs[perm[i]];
  }
  return out;
}

ChannelStats collect_stats(ChannelStats acc, const Tensor& batch) {
  check_channels(acc.num_channels, batch.last_dim());
  const std::size_t c = acc.num_channels;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    auto row = batch.row(r);
    for (std::size_t i = 0; i < c; ++i) {
      acc.mins[i] = std::min(acc.mins[i], row[i]);
      acc.maxs[i] = std::max(acc.maxs[i], row[i]);
    }
  }
  acc.samples_seen += batch.ndim() > 1 ? batch.dim(0) : 1;
  return acc;
}

ChannelStats merge_stats(const ChannelStats& a, const ChannelStats& b) {
  check_channels(a.num_channels, b.num_channels);
  ChannelStats out = a;
  for (std::size_t i = 0; i < a.num_channels; ++i) {
    out.mins[i] = std::min(a.mins[i], b.mins[i]);
    out.maxs[i] = std::max(a.maxs[i], b.maxs[i]);
  }
  out.samples_seen = a.samples_seen + b.samples_seen;
  return out;
}

ChannelStats QKHeadStats::q_stats() const { return ChannelStats{q_min.size(), q_min, q_max, 0}; }
ChannelStats QKHeadStats::k_stats() const { return ChannelStats{k_min.size(), k_min, k_max, 0}; }

std::vector<std::vector<double>> QKHeadStats::quaternion_points() const {
  std::vector<std::vector<double>> pts(q_max.size());
  for (std::size_t i = 0; i < q_max.size(); ++i) pts[i] = {q_max[i], q_min[i], k_max[i], k_min[i]};
  return pts;
}

QKJointStats collect_qk_stats(const Tensor& q, const Tensor& k) {
  if (q.shape() != k.shape()) {
    throw ValidationError("Q/K shape mismatch: " + shape_to_string(q.shape()) + " vs " + shape_to_string(k.shape()));
  }
  if (q.ndim() != 4) throw ValidationError("Q/K tensors must have shape [B, H, N, C_head]");
  const std::size_t b = q.dim(0), h = q.dim(1), n = q.dim(2), c = q.dim(3);
  QKJointStats out;
  out.samples_seen = b;
  out.heads.resize(h);
  for (auto& hs : out.heads) {
    hs.q_max.assign(c, -kInf);
    hs.q_min.assign(c, kInf);
    hs.k_max.assign(c, -kInf);
    hs.k_min.assign(c, kInf);
  }
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t hi = 0; hi < h; ++hi) {
      auto& hs = out.heads[hi];
      for (std::size_t t = 0; t < n; ++t) {
        const std::size_t row = (bi * h + hi) * n + t;
        auto qr = q.row(row);
        auto kr = k.row(row);
        for (std::size_t i = 0; i < c; ++i) {
          hs.q_max[i] = std::max(hs.q_max[i], qr[i]);
          hs.q_min[i] = std::min(hs.q_min[i], qr[i]);
          hs.k_max[i] = std::max(hs.k_max[i], kr[i]);
          hs.k_min[i] = std::min(hs.k_min[i], kr[i]);
        }
      }
    }
  }
  return out;
}

QKJointStats merge_qk_stats(const QKJointStats& a, const QKJointStats& b) {
  if (a.heads.empty()) return b;
  if (b.heads.empty()) return a;
  if (a.heads.size() != b.heads.size()) throw ValidationError("Q/K stats head count mismatch");
  QKJointStats out = a;
  for (std::size_t h = 0; h < a.heads.size(); ++h) {
    auto& o = out.heads[h];
    const auto& y = b.heads[h];
    check_channels(o.q_max.size(), y.q_max.size());
    for (std::size_t i = 0; i < o.q_max.size(); ++i) {
      o.q_max[i] = std::max(o.q_max[i], y.q_max[i]);
      o.q_min[i] = std::min(o.q_min[i], y.q_min[i]);
      o.k_max[i] = std::max(o.k_max[i], y.k_max[i]);
      o.k_min[i] = std::min(o.k_min[i], y.k_min[i]);
    }
  }
  out.samples_seen = a.samples_seen + b.samples_seen;
  return out;
}

std::vector<std::vector<double>> range_points(const ChannelStats& stats) {
  if (stats.samples_seen == 0 && stats.num_channels > 0 && !std::isfinite(stats.mins[0])) {
    throw ValidationError("channel stats are empty");
  }
  std::vector<std::vector<double>> pts(stats.num_channels);
  for (std::size_t i = 0; i < stats.num_channels; ++i) pts[i] = {stats.mins[i], stats.maxs[i]};
  return pts;
}

nlohmann::json to_json(const ChannelStats& s) {
  return {{"channels", s.num_channels},
          {"mins", floats_to_json(s.mins)},
          {"maxs", floats_to_json(s.maxs)},
          {"samples_seen", s.samples_seen}};
}

ChannelStats channel_stats_from_json(const nlohmann::json& j) {
  try {
    ChannelStats s;
    s.num_channels = j.at("channels").get<std::size_t>();
    s.mins = floats_from_json(j.at("mins"), kInf);
    s.maxs = floats_from_json(j.at("maxs"), -kInf);
    s.samples_seen = j.at("samples_seen").get<std::uint64_t>();
    if (s.mins.size() != s.num_channels || s.maxs.size() != s.num_channels) {
      throw ValidationError("stats arrays do not match channel count");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed channel stats: ") + e.what());
  }
}

nlohmann::json to_json(const QKJointStats& s) {
  auto heads = nlohmann::json::array();
  for (const auto& h : s.heads) {
    heads.push_back({{"q_max", floats_to_json(h.q_max)},
                     {"q_min", floats_to_json(h.q_min)},
                     {"k_max", floats_to_json(h.k_max)},
                     {"k_min", floats_to_json(h.k_min)}});
  }
  return {{"heads", heads}, {"samples_seen", s.samples_seen}};
}

QKJointStats qk_stats_from_json(const nlohmann::json& j) {
  try {
    QKJointStats s;
    s.samples_seen = j.value("samples_seen", std::uint64_t{0});
    for (const auto& h : j.at("heads")) {
      QKHeadStats hs;
      hs.q_max = floats_from_json(h.at("q_max"), -kInf);
      hs.q_min = floats_from_json(h.at("q_min"), kInf);
      hs.k_max = floats_from_json(h.at("k_max"), -kInf);
      hs.k_min = floats_from_json(h.at("k_min"), kInf);
      s.heads.push_back(std::move(hs));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed Q/K stats: ") + e.what());
  }
}

}  // namespace rptq
