#pragma once

// A desk-scale decoder layer (pre-LN, ReLU FFN, causal multi-head attention)
// with the five reorder sites:
//   R1  LN1 output, input of the Q/K/V projections
//   R2  Q and K, per head, one plan shared by both
//   R3  V and the attention output, per head
//   R4  LN2 output, input of the first FFN linear
//   R5  FFN hidden activation, input of the second FFN linear
// The out projection and the second FFN linear write in the original order
// so both residual adds stay aligned.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rptq/calibration.hpp"
#include "rptq/cluster.hpp"
#include "rptq/fusion.hpp"
#include "rptq/qlinear.hpp"
#include "rptq/tensor.hpp"

namespace rptq {

struct ModelDims {
  std::size_t layers = 2;
  std::size_t hidden = 128;
  std::size_t heads = 4;
  std::size_t ffn = 512;

  std::size_t head_dim() const { return hidden / heads; }
  // Throws ValidationError if hidden is not divisible by heads or any dim is 0.
  void validate() const;
  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct DecoderLayerWeights {
  LayerNormOp ln1;
  LinearWeights q_proj, k_proj, v_proj, out_proj;
  LayerNormOp ln2;
  LinearWeights fc1, fc2;
};

struct ToyModel {
  ModelDims dims;
  std::uint64_t seed = 0;
  std::vector<DecoderLayerWeights> layers;
};

// Deterministic random weights. LN gains carry a few large channels so that
// activations show the uneven per-channel ranges of real LLMs.
ToyModel build_toy_model(std::uint64_t seed, const ModelDims& dims);

// Bit configuration. std::nullopt means the tensor class stays in float.
struct BitConfig {
  std::string tag = "W16A16";
  std::optional<int> weight_bits;
  std::optional<int> activation_bits;
  std::optional<int> kv_bits;
  int ln_softmax_out_bits = 8;
  bool kv_only = false;

  bool quantizes_activations() const { return activation_bits.has_value() && !kv_only; }
  bool quantizes_kv() const { return kv_bits.has_value(); }
};

// Accepts WxAy and WxAyKV tags; 16 bits means float.
BitConfig parse_mode(const std::string& tag);

struct ClusterCounts {
  std::size_t r1 = 32, r2 = 4, r3 = 4, r4 = 32, r5 = 32;
  friend bool operator==(const ClusterCounts&, const ClusterCounts&) = default;
};

ClusterCounts parse_cluster_counts(const std::string& csv);

struct DecoderLayerPlan {
  ClusterCounts counts;
  ReorderPlan r1;
  std::vector<ReorderPlan> r2;  // per head
  std::vector<ReorderPlan> r3;  // per head
  ReorderPlan r4;
  ReorderPlan r5;

  static DecoderLayerPlan identity(const ModelDims& dims);
  ReorderPlan r2_concat() const { return concat_plans(r2); }
  ReorderPlan r3_concat() const { return concat_plans(r3); }
};

nlohmann::json to_json(const DecoderLayerPlan& plan);
DecoderLayerPlan layer_plan_from_json(const nlohmann::json& j);

// Calibration statistics of every activation site of one layer, in the
// original (unfused) channel order.
struct LayerStats {
  ChannelStats ln1_out;
  QKJointStats qk;
  std::vector<ChannelStats> v;         // per head
  std::vector<ChannelStats> attn_out;  // per head
  float probs_min = 0.0f, probs_max = 1.0f;
  ChannelStats ln2_out;
  ChannelStats fc1_out;  // after ReLU
};

LayerStats merge_layer_stats(const LayerStats& a, const LayerStats& b);
nlohmann::json to_json(const LayerStats& s);
LayerStats layer_stats_from_json(const nlohmann::json& j);

// K-means plans for every site; Q/K clustered on quaternion points per head.
// Throws ValidationError if a count exceeds the channels at its site.
DecoderLayerPlan plan_layer(const LayerStats& stats, const ClusterCounts& counts, const ModelDims& dims,
                            const KMeansOptions& opts = {});

// Folds all plans into LN outputs and linear weights.
DecoderLayerWeights fuse_decoder_layer(const DecoderLayerWeights& w, const DecoderLayerPlan& plan,
                                       const ModelDims& dims);

// Every channel-order agreement the layer depends on, read from the weights.
LayerWiring wire_decoder_layer(const DecoderLayerWeights& fused, const ModelDims& dims);

enum class WeightMethod { rtn, gptq };
enum class ForwardMethod { dequant, integer };

// Activation quantization at one site: a plan and one params set per cluster.
struct SiteQuant {
  ReorderPlan plan;
  std::vector<QuantParams> params;
  bool active() const { return !params.empty(); }
};

struct QuantDecoderLayer {
  ModelDims dims;
  BitConfig bits;
  ForwardMethod method = ForwardMethod::dequant;
  DecoderLayerPlan plan;
  DecoderLayerWeights fused;  // float weights with plans folded in
  // Quantized linears; empty when weights stay in float.
  std::optional<ClusteredQuantLinear> q_proj, k_proj, v_proj, out_proj, fc1, fc2;

  SiteQuant ln1_out;                // R1
  std::vector<SiteQuant> q, k;      // R2 per head
  std::vector<SiteQuant> v;         // R3 per head
  std::vector<SiteQuant> attn_out;  // R3 per head
  std::optional<QuantParams> probs;
  SiteQuant ln2_out;  // R4
  SiteQuant fc1_out;  // R5
};

// A float layer with no quantization (fused or not, as given).
QuantDecoderLayer make_float_layer(const DecoderLayerWeights& weights, const ModelDims& dims);

// Float activations of every site, captured in the layer's channel order.
struct SiteActivations {
  Tensor ln1_out;   // [B, N, d]
  Tensor q, k, v;   // [B, H, N, hd]
  Tensor attn_out;  // [B, H, N, hd]
  std::vector<float> probs;
  Tensor ln2_out;  // [B, N, d]
  Tensor fc1_out;  // [B, N, ffn]
};

struct LayerTrace {
  bool capture = false;
  SiteActivations acts;
  // Names of tensors materialized as integer codes during the forward.
  std::vector<std::string> integer_tensors;
};

struct LayerKVCache {
  std::size_t batch = 0;
  std::size_t width = 0;
  std::size_t tokens = 0;
  bool quantized = false;
  int bits = 0;
  // [b][t * width + c], values the attention reads (dequantized when quantized).
  std::vector<std::vector<float>> k, v;
  // Integer codes, only when quantized.
  std::vector<std::vector<std::int32_t>> k_codes, v_codes;

  // Codes as [B, T, width]; throws if the cache is not quantized or empty.
  IntTensor key_codes() const;
  IntTensor value_codes() const;
};

struct KVCache {
  std::vector<LayerKVCache> layers;
  explicit KVCache(std::size_t num_layers = 0) : layers(num_layers) {}
};

// x: [B, N, d] in original channel order. Appends N tokens to `cache`.
Tensor run_layer(const Tensor& x, const QuantDecoderLayer& layer, LayerKVCache& cache, LayerTrace* trace = nullptr);

struct QuantModel {
  ModelDims dims;
  BitConfig bits;
  std::vector<QuantDecoderLayer> layers;
};

QuantModel make_float_model(const ToyModel& model);

// Output of every layer (element l is the output of layer l).
std::vector<Tensor> run_model(const QuantModel& model, const Tensor& x, KVCache& cache,
                              std::vector<LayerTrace>* traces = nullptr);

// Layer-by-layer calibration of the float model in chunks of `chunk` samples.
std::vector<LayerStats> calibrate_model(const ToyModel& model, const Tensor& inputs, std::size_t chunk = 32);

struct QuantizeOptions {
  BitConfig bits;
  WeightMethod weights = WeightMethod::gptq;
  ForwardMethod forward = ForwardMethod::dequant;
  GptqOptions gptq;
  // Samples of `inputs` used to build GPTQ Hessians.
  std::size_t gptq_samples = 32;
};

QuantDecoderLayer quantize_layer(const DecoderLayerWeights& weights, const ModelDims& dims, const LayerStats& stats,
                                 const DecoderLayerPlan& plan, const QuantizeOptions& opts,
                                 const SiteActivations* gptq_calib);

// gptq_inputs feeds the fused float model to collect GPTQ calibration rows; it
// is only read when opts.weights == gptq.
QuantModel quantize_model(const ToyModel& model, const std::vector<LayerStats>& stats,
                          const std::vector<DecoderLayerPlan>& plans, const QuantizeOptions& opts,
                          const Tensor& gptq_inputs);

// Mean squared fake-quantization error of each site on captured activations.
struct SiteErrors {
  double r1 = 0, r2 = 0, r3 = 0, r4 = 0, r5 = 0;
};
SiteErrors site_quant_errors(const QuantDecoderLayer& layer, const SiteActivations& acts);

double mean_squared_error(const Tensor& a, const Tensor& b);
// ||a - b||_inf / ||b||_inf
double max_relative_error(const Tensor& a, const Tensor& b);

}  // namespace rptq
