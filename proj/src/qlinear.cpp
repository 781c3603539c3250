#include "rptq/qlinear.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "rptq/error.hpp"

namespace rptq {

namespace {

void check_plan_width(const ReorderPlan& plan, std::size_t channels) {
  if (plan.num_channels() != channels) {
    throw ValidationError("plan covers " + std::to_string(plan.num_channels()) + " channels, tensor has " +
                          std::to_string(channels));
  }
}

void check_params_count(std::span<const QuantParams> params, std::size_t expected) {
  if (params.size() != expected) {
    throw ValidationError("expected " + std::to_string(expected) + " quantization parameter sets, got " +
                          std::to_string(params.size()));
  }
}

// Dense symmetric matrix in double, row-major.
struct Matrix {
  std::size_t n = 0;
  std::vector<double> a;
  explicit Matrix(std::size_t size) : n(size), a(size * size, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }
};

// Inverse of a symmetric positive definite matrix through Cholesky.
Matrix spd_inverse(const Matrix& h) {
  const std::size_t n = h.n;
  Matrix l(n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = h(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) throw RuntimeError("Hessian is singular after damping");
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = h(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  // inv(L) by forward substitution, then inv(H) = inv(L)^T inv(L).
  Matrix li(n);
  for (std::size_t i = 0; i < n; ++i) {
    li(i, i) = 1.0 / l(i, i);
    for (std::size_t j = 0; j < i; ++j) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s += l(i, k) * li(k, j);
      li(i, j) = -s / l(i, i);
    }
  }
  Matrix inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k) s += li(k, i) * li(k, j);
      inv(i, j) = s;
      inv(j, i) = s;
    }
  }
  return inv;
}

}  // namespace

std::vector<QuantParams> activation_params(const ReorderPlan& plan, const ChannelStats& reordered_stats, int bits) {
  plan.validate();
  if (reordered_stats.num_channels != plan.num_channels()) {
    throw ValidationError("stats channels " + std::to_string(reordered_stats.num_channels) +
                          " do not match plan channels " + std::to_string(plan.num_channels()));
  }
  auto off = plan.cluster_offsets();
  std::vector<QuantParams> params;
  params.reserve(plan.g);
  for (std::size_t i = 0; i < plan.g; ++i) {
    float lo = std::numeric_limits<float>::infinity();
    float hi = -std::numeric_limits<float>::infinity();
    for (std::size_t c = off[i]; c < off[i + 1]; ++c) {
      lo = std::min(lo, reordered_stats.mins[c]);
      hi = std::max(hi, reordered_stats.maxs[c]);
    }
    if (!std::isfinite(lo) || !std::isfinite(hi)) throw ValidationError("cluster has no calibration data");
    params.push_back(minmax_params(lo, hi, bits));
  }
  return params;
}

IntTensor quantize_with_plan(const Tensor& x, const ReorderPlan& plan, std::span<const QuantParams> params) {
  check_plan_width(plan, x.last_dim());
  check_params_count(params, plan.g);
  const auto cluster = plan.cluster_of_position();
  const std::size_t c = x.last_dim();
  std::vector<std::int32_t> out(x.size());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t i = 0; i < c; ++i) out[r * c + i] = quantize(row[i], params[cluster[i]]);
  }
  int bits = 2;
  for (const auto& p : params) bits = std::max(bits, p.bits);
  return IntTensor(x.shape(), std::move(out), bits);
}

Tensor dequantize_with_plan(const IntTensor& xq, const ReorderPlan& plan, std::span<const QuantParams> params) {
  check_plan_width(plan, xq.last_dim());
  check_params_count(params, plan.g);
  const auto cluster = plan.cluster_of_position();
  const std::size_t c = xq.last_dim();
  std::vector<float> out(xq.size());
  for (std::size_t r = 0; r < xq.rows(); ++r) {
    auto row = xq.row(r);
    for (std::size_t i = 0; i < c; ++i) out[r * c + i] = dequantize(row[i], params[cluster[i]]);
  }
  return Tensor(xq.shape(), std::move(out));
}

Tensor fake_quantize_with_plan(const Tensor& x, const ReorderPlan& plan, std::span<const QuantParams> params) {
  return dequantize_with_plan(quantize_with_plan(x, plan, params), plan, params);
}

ActivationQuant quantize_activations(const Tensor& x, const ReorderPlan& plan, const ChannelStats& reordered_stats,
                                     int bits) {
  auto params = activation_params(plan, reordered_stats, bits);
  auto codes = quantize_with_plan(x, plan, params);
  return {std::move(codes), std::move(params)};
}

std::vector<QuantParams> weight_grid(const Tensor& w, const ReorderPlan& plan, int bits) {
  if (w.ndim() != 2) throw ValidationError("weight must be 2-D");
  check_plan_width(plan, w.dim(1));
  plan.validate();
  const std::size_t c2 = w.dim(0);
  auto off = plan.cluster_offsets();
  std::vector<QuantParams> params(plan.g * c2);
  for (std::size_t i = 0; i < plan.g; ++i) {
    for (std::size_t r = 0; r < c2; ++r) {
      auto row = w.row(r);
      auto [lo, hi] = std::minmax_element(row.begin() + static_cast<std::ptrdiff_t>(off[i]),
                                          row.begin() + static_cast<std::ptrdiff_t>(off[i + 1]));
      params[i * c2 + r] = minmax_params(*lo, *hi, bits);
    }
  }
  return params;
}

WeightQuant quantize_weights_rtn(const Tensor& w, const ReorderPlan& plan, int bits) {
  auto params = weight_grid(w, plan, bits);
  const std::size_t c2 = w.dim(0), c1 = w.dim(1);
  const auto cluster = plan.cluster_of_position();
  std::vector<std::int32_t> codes(c2 * c1);
  for (std::size_t r = 0; r < c2; ++r) {
    auto row = w.row(r);
    for (std::size_t c = 0; c < c1; ++c) codes[r * c1 + c] = quantize(row[c], params[cluster[c] * c2 + r]);
  }
  return {IntTensor({c2, c1}, std::move(codes), bits), std::move(params)};
}

WeightQuant quantize_weights_gptq(const Tensor& w, const Tensor& x_calib, const ReorderPlan& plan, int bits,
                                  const GptqOptions& opts) {
  auto params = weight_grid(w, plan, bits);
  const std::size_t c2 = w.dim(0), c1 = w.dim(1);
  if (x_calib.last_dim() != c1) throw ValidationError("calibration activations do not match weight columns");
  if (x_calib.rows() == 0) throw ValidationError("GPTQ needs at least one calibration row");

  Matrix h(c1);
  for (std::size_t m = 0; m < x_calib.rows(); ++m) {
    auto x = x_calib.row(m);
    for (std::size_t i = 0; i < c1; ++i) {
      if (x[i] == 0.0f) continue;
      for (std::size_t j = 0; j < c1; ++j) h(i, j) += static_cast<double>(x[i]) * x[j];
    }
  }
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < c1; ++i) mean_diag += h(i, i);
  mean_diag /= static_cast<double>(c1);
  for (std::size_t i = 0; i < c1; ++i) h(i, i) += opts.damp * mean_diag;

  std::vector<std::size_t> blocks;
  if (opts.cross_cluster) {
    blocks = {0, c1};
  } else {
    blocks = plan.cluster_offsets();
  }
  const auto cluster = plan.cluster_of_position();

  std::vector<double> work(w.data().begin(), w.data().end());
  std::vector<std::int32_t> codes(c2 * c1);
  for (std::size_t b = 0; b + 1 < blocks.size(); ++b) {
    const std::size_t lo = blocks[b], n = blocks[b + 1] - blocks[b];
    Matrix hb(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) hb(i, j) = h(lo + i, lo + j);
    }
    Matrix hinv = spd_inverse(hb);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t col = lo + j;
      const double d = hinv(j, j);
      if (!(d > 0.0)) throw RuntimeError("Hessian is singular after damping");
      for (std::size_t r = 0; r < c2; ++r) {
        const auto& p = params[cluster[col] * c2 + r];
        const auto q = quantize(static_cast<float>(work[r * c1 + col]), p);
        codes[r * c1 + col] = q;
        const double err = (work[r * c1 + col] - static_cast<double>(dequantize(q, p))) / d;
        for (std::size_t k = j + 1; k < n; ++k) work[r * c1 + lo + k] -= err * hinv(j, k);
      }
      // Eliminate column j from the remaining inverse Hessian.
      for (std::size_t a = j + 1; a < n; ++a) {
        const double f = hinv(a, j) / d;
        if (f == 0.0) continue;
        for (std::size_t k = j + 1; k < n; ++k) hinv(a, k) -= f * hinv(j, k);
      }
    }
  }
  return {IntTensor({c2, c1}, std::move(codes), bits), std::move(params)};
}

Tensor dequantize_weights(const WeightQuant& wq, const ReorderPlan& plan) {
  const std::size_t c2 = wq.codes.shape()[0], c1 = wq.codes.shape()[1];
  check_plan_width(plan, c1);
  check_params_count(wq.params, plan.g * c2);
  const auto cluster = plan.cluster_of_position();
  std::vector<float> out(c2 * c1);
  for (std::size_t r = 0; r < c2; ++r) {
    auto row = wq.codes.row(r);
    for (std::size_t c = 0; c < c1; ++c) out[r * c1 + c] = dequantize(row[c], wq.params[cluster[c] * c2 + r]);
  }
  return Tensor({c2, c1}, std::move(out));
}

double layerwise_loss(const Tensor& x, const Tensor& w, const Tensor& w_hat) {
  if (w.shape() != w_hat.shape()) throw ValidationError("weight shapes differ");
  const std::size_t c2 = w.dim(0), c1 = w.dim(1);
  if (x.last_dim() != c1) throw ValidationError("activations do not match weight columns");
  double loss = 0.0;
  for (std::size_t m = 0; m < x.rows(); ++m) {
    auto xr = x.row(m);
    for (std::size_t r = 0; r < c2; ++r) {
      auto a = w.row(r);
      auto b = w_hat.row(r);
      double acc = 0.0;
      for (std::size_t c = 0; c < c1; ++c) acc += static_cast<double>(xr[c]) * (static_cast<double>(a[c]) - b[c]);
      loss += acc * acc;
    }
  }
  return loss;
}

void ClusteredQuantLinear::validate() const {
  in_plan.validate();
  out_plan.validate();
  if (wq.shape().size() != 2) throw ValidationError("quantized weight must be 2-D");
  check_plan_width(in_plan, in_features());
  check_plan_width(out_plan, out_features());
  check_params_count(w_params, in_plan.g * out_features());
  if (!act_params.empty()) check_params_count(act_params, in_plan.g);
  if (bias.size() != out_features()) throw ValidationError("bias length does not match output features");
  for (const auto& p : w_params) p.validate();
  for (const auto& p : act_params) p.validate();
}

Tensor ClusteredQuantLinear::dequantized_weights() const { return dequantize_weights({wq, w_params}, in_plan); }

ClusteredQuantLinear make_clustered_linear(const LinearWeights& fused, const ReorderPlan& in_plan,
                                           const ReorderPlan& out_plan, WeightQuant weights,
                                           std::vector<QuantParams> act_params) {
  if (fused.in_perm != in_plan.perm || fused.out_perm != out_plan.perm) {
    throw ValidationError("linear weights are not fused with the given plans");
  }
  ClusteredQuantLinear layer{std::move(weights.codes), std::move(weights.params), std::move(act_params),
                             in_plan,                  out_plan,                  fused.bias};
  layer.validate();
  return layer;
}

Tensor forward_dequant(const IntTensor& xq, std::span<const QuantParams> act_params,
                       const ClusteredQuantLinear& layer) {
  if (xq.last_dim() != layer.in_features()) throw ValidationError("activation width does not match layer");
  check_params_count(act_params, layer.in_plan.g);
  auto x_hat = dequantize_with_plan(xq, layer.in_plan, act_params);
  return matmul_transposed(x_hat, layer.dequantized_weights(), layer.bias);
}

Tensor forward_weight_only(const Tensor& x, const ClusteredQuantLinear& layer) {
  return matmul_transposed(x, layer.dequantized_weights(), layer.bias);
}

IntegerLinearKernel::IntegerLinearKernel(const ClusteredQuantLinear& layer, std::span<const QuantParams> act_params)
    : layer_(layer), act_params_(act_params.begin(), act_params.end()), offsets_(layer.in_plan.cluster_offsets()) {
  check_params_count(act_params, layer.in_plan.g);
  const std::size_t c1 = layer.in_features(), c2 = layer.out_features();
  if (c1 > kMaxInputChannels) throw ValidationError("integer path supports at most 2^15 input channels");
  for (const auto& p : act_params_) {
    if (p.bits > kMaxBits) throw ValidationError("integer path supports activation bit widths up to 8");
  }
  for (const auto& p : layer.w_params) {
    if (p.bits > kMaxBits) throw ValidationError("integer path supports weight bit widths up to 8");
  }
  // |Y_{q,i}| <= n_i (2^(kx-1) + |z^X|) (2^(kw-1) + |z^W|); keep it below 2^62.
  const __int128 limit = static_cast<__int128>(1) << 62;
  weight_sums_.assign(layer.in_plan.g * c2, 0);
  for (std::size_t i = 0; i < layer.in_plan.g; ++i) {
    const auto& xp = act_params_[i];
    const __int128 n = static_cast<__int128>(offsets_[i + 1] - offsets_[i]);
    const __int128 xa = (static_cast<__int128>(1) << (xp.bits - 1)) + (xp.zero_point < 0 ? -xp.zero_point : xp.zero_point);
    for (std::size_t o = 0; o < c2; ++o) {
      const auto& wp = layer.w_params[i * c2 + o];
      const __int128 wa = (static_cast<__int128>(1) << (wp.bits - 1)) + (wp.zero_point < 0 ? -wp.zero_point : wp.zero_point);
      if (xa > limit || wa > limit || n * xa > limit / wa) {
        throw ValidationError("cluster accumulator may overflow: zero points outside the integer envelope");
      }
      auto row = layer.wq.row(o);
      std::int64_t s = 0;
      for (std::size_t c = offsets_[i]; c < offsets_[i + 1]; ++c) s += row[c];
      weight_sums_[i * c2 + o] = s;
    }
  }
}

std::vector<std::int64_t> IntegerLinearKernel::accumulators(std::span<const std::int32_t> xq_row) const {
  const std::size_t c2 = layer_.out_features(), g = layer_.in_plan.g;
  std::vector<std::int64_t> acc(g * c2, 0);
  for (std::size_t i = 0; i < g; ++i) {
    const std::size_t lo = offsets_[i], hi = offsets_[i + 1];
    const std::int64_t n = static_cast<std::int64_t>(hi - lo);
    std::int64_t x_sum = 0;
    for (std::size_t c = lo; c < hi; ++c) x_sum += xq_row[c];
    const std::int64_t zx = act_params_[i].zero_point;
    for (std::size_t o = 0; o < c2; ++o) {
      auto w = layer_.wq.row(o);
      std::int64_t dot = 0;
      for (std::size_t c = lo; c < hi; ++c) dot += static_cast<std::int64_t>(xq_row[c]) * w[c];
      const std::int64_t zw = layer_.w_params[i * c2 + o].zero_point;
      acc[i * c2 + o] = dot - zx * weight_sums_[i * c2 + o] - zw * x_sum + n * zx * zw;
    }
  }
  return acc;
}

Tensor IntegerLinearKernel::forward(const IntTensor& xq) const {
  const std::size_t c1 = layer_.in_features(), c2 = layer_.out_features(), g = layer_.in_plan.g;
  if (xq.last_dim() != c1) throw ValidationError("activation width does not match layer");
  Shape shape = xq.shape();
  shape.back() = c2;
  std::vector<float> out(xq.rows() * c2);
  for (std::size_t r = 0; r < xq.rows(); ++r) {
    auto acc = accumulators(xq.row(r));
    for (std::size_t o = 0; o < c2; ++o) {
      double y = layer_.bias[o];
      for (std::size_t i = 0; i < g; ++i) {
        const double scale = static_cast<double>(act_params_[i].scale) * layer_.w_params[i * c2 + o].scale;
        y += scale * static_cast<double>(acc[i * c2 + o]);
      }
      out[r * c2 + o] = static_cast<float>(y);
    }
  }
  return Tensor(std::move(shape), std::move(out));
}

Tensor forward_integer(const IntTensor& xq, std::span<const QuantParams> act_params,
                       const ClusteredQuantLinear& layer) {
  return IntegerLinearKernel(layer, act_params).forward(xq);
}

nlohmann::json to_json(const QuantParams& p) {
  return {{"scale", p.scale}, {"zero_point", p.zero_point}, {"bits", p.bits}};
}

QuantParams quant_params_from_json(const nlohmann::json& j) {
  QuantParams p;
  try {
    p.scale = j.at("scale").get<float>();
    p.zero_point = j.at("zero_point").get<std::int64_t>();
    p.bits = j.at("bits").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed quantization params: ") + e.what());
  }
  p.validate();
  return p;
}

nlohmann::json params_to_json(std::span<const QuantParams> params) {
  nlohmann::json scales = nlohmann::json::array(), zeros = nlohmann::json::array(), bits = nlohmann::json::array();
  for (const auto& p : params) {
    scales.push_back(p.scale);
    zeros.push_back(p.zero_point);
    bits.push_back(p.bits);
  }
  return {{"scale", scales}, {"zero_point", zeros}, {"bits", bits}};
}

std::vector<QuantParams> params_from_json(const nlohmann::json& j) {
  std::vector<QuantParams> out;
  try {
    const auto& s = j.at("scale");
    const auto& z = j.at("zero_point");
    const auto& b = j.at("bits");
    if (s.size() != z.size() || s.size() != b.size()) throw ValidationError("params arrays differ in length");
    for (std::size_t i = 0; i < s.size(); ++i) {
      QuantParams p{s[i].get<float>(), z[i].get<std::int64_t>(), b[i].get<int>()};
      p.validate();
      out.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed quantization params: ") + e.what());
  }
  return out;
}

}  // namespace rptq
