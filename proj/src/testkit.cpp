#include "rptq/testkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "rptq/error.hpp"

namespace rptq {

void ChannelProfile::validate() const {
  if (channels == 0) throw ValidationError("profile needs at least one channel");
  if (!(outlier_fraction >= 0.0 && outlier_fraction <= 1.0)) {
    throw ValidationError("outlier fraction must lie in [0, 1]");
  }
  if (!(multiplier >= 1.0)) throw ValidationError("outlier multiplier must be >= 1");
  if (!offsets.empty() && offsets.size() != channels) {
    throw ValidationError("profile offsets must list one center per channel");
  }
  if (!(base_scale > 0.0) || offset_spread < 0.0) throw ValidationError("profile scales must be positive");
}

nlohmann::json to_json(const ChannelProfile& p) {
  return {{"channels", p.channels},     {"outlier_fraction", p.outlier_fraction},
          {"multiplier", p.multiplier}, {"offsets", p.offsets},
          {"offset_spread", p.offset_spread}, {"base_scale", p.base_scale},
          {"seed", p.seed}};
}

ChannelProfile channel_profile_from_json(const nlohmann::json& j) {
  try {
    ChannelProfile p;
    p.channels = j.value("channels", p.channels);
    p.outlier_fraction = j.value("outlier_fraction", p.outlier_fraction);
    p.multiplier = j.value("multiplier", p.multiplier);
    p.offsets = j.value("offsets", p.offsets);
    p.offset_spread = j.value("offset_spread", p.offset_spread);
    p.base_scale = j.value("base_scale", p.base_scale);
    p.seed = j.value("seed", p.seed);
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed channel profile: ") + e.what());
  }
}

namespace {

struct Layout {
  std::vector<bool> outlier;
  std::vector<double> center;
  std::vector<double> sign;
};

Layout make_layout(const ChannelProfile& p) {
  p.validate();
  std::mt19937_64 rng(p.seed);
  Layout l;
  l.outlier.assign(p.channels, false);
  const auto count = static_cast<std::size_t>(std::lround(p.outlier_fraction * static_cast<double>(p.channels)));
  auto idx = identity_permutation(p.channels);
  std::shuffle(idx.begin(), idx.end(), rng);
  for (std::size_t i = 0; i < count; ++i) l.outlier[idx[i]] = true;
  if (!p.offsets.empty()) {
    l.center = p.offsets;
  } else {
    std::uniform_real_distribution<double> u(-p.offset_spread, p.offset_spread);
    l.center.resize(p.channels);
    for (auto& c : l.center) c = p.offset_spread > 0 ? u(rng) : 0.0;
  }
  std::bernoulli_distribution coin(0.5);
  l.sign.resize(p.channels);
  for (auto& s : l.sign) s = coin(rng) ? 1.0 : -1.0;
  return l;
}

}  // namespace

std::vector<std::size_t> outlier_channels(const ChannelProfile& profile) {
  const auto l = make_layout(profile);
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < l.outlier.size(); ++c) {
    if (l.outlier[c]) out.push_back(c);
  }
  return out;
}

Tensor gen_activations(const ChannelProfile& p, std::size_t batch, std::size_t tokens, std::uint64_t seed) {
  const auto l = make_layout(p);
  std::vector<double> sigma(p.channels), center(p.channels);
  for (std::size_t c = 0; c < p.channels; ++c) {
    // Outliers sit on one side of zero: [-100, -50] rather than [-100, 100].
    const double m = p.multiplier * p.base_scale;
    sigma[c] = l.outlier[c] ? 0.4 * m : p.base_scale;
    center[c] = l.center[c] + (l.outlier[c] ? 4.0 * m * l.sign[c] : 0.0);
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<float> data(batch * tokens * p.channels);
  for (std::size_t r = 0; r < batch * tokens; ++r) {
    for (std::size_t c = 0; c < p.channels; ++c) {
      data[r * p.channels + c] = static_cast<float>(center[c] + sigma[c] * n01(rng));
    }
  }
  return Tensor({batch, tokens, p.channels}, std::move(data));
}

PartitionResult brute_force_partition(std::span<const Point> points, std::size_t g) {
  const std::size_t n = points.size();
  if (n > 10 || g < 1 || g > 3 || g > n) {
    throw ValidationError("brute-force partition supports n <= 10 and 1 <= g <= min(3, n)");
  }
  PartitionResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  // Restricted growth strings enumerate each set partition once.
  std::vector<std::size_t> a(n, 0);
  while (true) {
    const std::size_t used = n == 0 ? 0 : *std::max_element(a.begin(), a.end()) + 1;
    if (used == g) {
      const double sse = within_cluster_sse(points, a, g);
      if (sse < best.inertia) {
        best.inertia = sse;
        best.assignments = a;
      }
    }
    std::size_t i = n;
    bool advanced = false;
    while (i-- > 1) {
      const std::size_t prefix_max = *std::max_element(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(i));
      if (a[i] <= prefix_max && a[i] + 1 < g) {
        ++a[i];
        std::fill(a.begin() + static_cast<std::ptrdiff_t>(i) + 1, a.end(), 0);
        advanced = true;
        break;
      }
    }
    if (!advanced) break;
  }
  return best;
}

GptqOracleResult brute_force_gptq(const Tensor& w, const Tensor& x, int bits) {
  if (w.ndim() != 2 || w.dim(1) > 3 || bits > 2 || bits < 2) {
    throw ValidationError("brute-force GPTQ supports at most 3 columns and 2 bits");
  }
  if (x.last_dim() != w.dim(1)) throw ValidationError("calibration width does not match weights");
  const std::size_t rows = w.dim(0), cols = w.dim(1), m = x.rows();
  const auto plan = ReorderPlan::identity(cols);
  auto params = weight_grid(w, plan, bits);
  const std::int64_t qmin = params.front().qmin(), qmax = params.front().qmax();
  const std::int64_t levels = qmax - qmin + 1;
  std::int64_t combos = 1;
  for (std::size_t c = 0; c < cols; ++c) combos *= levels;

  std::vector<std::int32_t> codes(rows * cols);
  double total = 0.0;
  std::vector<std::int32_t> cand(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& p = params[r];
    double best = std::numeric_limits<double>::infinity();
    for (std::int64_t id = 0; id < combos; ++id) {
      std::int64_t rest = id;
      for (std::size_t c = 0; c < cols; ++c) {
        cand[c] = static_cast<std::int32_t>(qmin + rest % levels);
        rest /= levels;
      }
      double loss = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        auto xr = x.row(i);
        double e = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          e += static_cast<double>(xr[c]) * (static_cast<double>(w[r * cols + c]) - dequantize(cand[c], p));
        }
        loss += e * e;
      }
      if (loss < best) {
        best = loss;
        std::copy(cand.begin(), cand.end(), codes.begin() + static_cast<std::ptrdiff_t>(r * cols));
      }
    }
    total += best;
  }
  GptqOracleResult out;
  out.quant.codes = IntTensor({rows, cols}, std::move(codes), bits);
  out.quant.params = std::move(params);
  out.loss = total;
  return out;
}

}  // namespace rptq
