#pragma once

// Per-cluster quantized linear layers.
//
// Activations entering a layer are in reordered channel order; cluster i owns
// a contiguous block of that axis and one (scale, zero point) pair. Weights
// are quantized on a grid per (input cluster, output channel).

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "rptq/calibration.hpp"
#include "rptq/cluster.hpp"
#include "rptq/fusion.hpp"
#include "rptq/quant.hpp"
#include "rptq/tensor.hpp"

namespace rptq {

// Min-Max params per cluster from stats already in reordered order.
std::vector<QuantParams> activation_params(const ReorderPlan& plan, const ChannelStats& reordered_stats, int bits);

IntTensor quantize_with_plan(const Tensor& x, const ReorderPlan& plan, std::span<const QuantParams> params);
Tensor dequantize_with_plan(const IntTensor& xq, const ReorderPlan& plan, std::span<const QuantParams> params);
Tensor fake_quantize_with_plan(const Tensor& x, const ReorderPlan& plan, std::span<const QuantParams> params);

struct ActivationQuant {
  IntTensor codes;
  std::vector<QuantParams> params;
};

ActivationQuant quantize_activations(const Tensor& x, const ReorderPlan& plan, const ChannelStats& reordered_stats,
                                     int bits);

struct WeightQuant {
  IntTensor codes;  // [C2, C1]
  // params[cluster * C2 + row]
  std::vector<QuantParams> params;
};

// Min-Max grid per (cluster, output row) without quantizing.
std::vector<QuantParams> weight_grid(const Tensor& w, const ReorderPlan& plan, int bits);

WeightQuant quantize_weights_rtn(const Tensor& w, const ReorderPlan& plan, int bits);

struct GptqOptions {
  // Added to the Hessian diagonal as a fraction of its mean.
  double damp = 0.01;
  // Let error compensation flow into later clusters.
  bool cross_cluster = false;
};

// Greedy column sweep minimizing ||X W^T - X W^^T||^2 with inverse-Hessian
// error compensation. x_calib is [M, C1] in the same channel order as w.
// Throws RuntimeError if the damped Hessian is not positive definite.
WeightQuant quantize_weights_gptq(const Tensor& w, const Tensor& x_calib, const ReorderPlan& plan, int bits,
                                  const GptqOptions& opts = {});

Tensor dequantize_weights(const WeightQuant& wq, const ReorderPlan& plan);

// ||X W^T - X W_hat^T||_F^2 in double.
double layerwise_loss(const Tensor& x, const Tensor& w, const Tensor& w_hat);

struct ClusteredQuantLinear {
  IntTensor wq;  // [C2, C1], reordered
  std::vector<QuantParams> w_params;
  std::vector<QuantParams> act_params;  // empty when activations stay in float
  ReorderPlan in_plan;
  ReorderPlan out_plan;
  std::vector<float> bias;

  std::size_t out_features() const { return wq.shape()[0]; }
  std::size_t in_features() const { return wq.shape()[1]; }
  void validate() const;
  Tensor dequantized_weights() const;
};

// `fused` must already carry the in/out reorders (see fuse_linear).
ClusteredQuantLinear make_clustered_linear(const LinearWeights& fused, const ReorderPlan& in_plan,
                                           const ReorderPlan& out_plan, WeightQuant weights,
                                           std::vector<QuantParams> act_params);

// Dequantize both operands and multiply in float.
Tensor forward_dequant(const IntTensor& xq, std::span<const QuantParams> act_params, const ClusteredQuantLinear& layer);
// Per-cluster integer products with zero-point corrections, then sum_i s^X_i s^W_i Y_{q,i}.
Tensor forward_integer(const IntTensor& xq, std::span<const QuantParams> act_params, const ClusteredQuantLinear& layer);
// Float activations against dequantized weights.
Tensor forward_weight_only(const Tensor& x, const ClusteredQuantLinear& layer);

// Integer-domain kernel. Construction rejects configurations whose
// accumulators could overflow int64: bit widths above 8, more than 2^15
// input channels, or zero points large enough to overflow a cluster sum.
class IntegerLinearKernel {
 public:
  static constexpr std::size_t kMaxInputChannels = std::size_t{1} << 15;
  static constexpr int kMaxBits = 8;

  IntegerLinearKernel(const ClusteredQuantLinear& layer, std::span<const QuantParams> act_params);

  // Y_{q,i} for one activation row: result[cluster * C2 + out].
  std::vector<std::int64_t> accumulators(std::span<const std::int32_t> xq_row) const;
  Tensor forward(const IntTensor& xq) const;

 private:
  const ClusteredQuantLinear& layer_;
  std::vector<QuantParams> act_params_;
  std::vector<std::size_t> offsets_;
  std::vector<std::int64_t> weight_sums_;  // [cluster * C2 + out]
};

nlohmann::json to_json(const QuantParams& p);
QuantParams quant_params_from_json(const nlohmann::json& j);
nlohmann::json params_to_json(std::span<const QuantParams> params);
std::vector<QuantParams> params_from_json(const nlohmann::json& j);

}  // namespace rptq
