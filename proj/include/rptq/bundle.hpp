#pragma once

// On-disk artifacts of the pipeline. Every stage reads and writes files only.
//
//   <model>/config.json                 dims and seed
//   <model>/layer<l>/<tensor>.bin       float weights, original order
//   <work>/stats/layer<l>/<site>.json   calibration stats per site
//   <work>/plans/layer<l>.json          reorder plans
//   <work>/quant/config.json            bit config and methods
//   <work>/quant/layer<l>/...           codes, weight params, site params

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "rptq/qtransformer.hpp"
#include "rptq/testkit.hpp"

namespace rptq {

namespace fs = std::filesystem;

nlohmann::json read_json_file(const fs::path& path);
void write_json_file(const fs::path& path, const nlohmann::json& j);
void write_text_file(const fs::path& path, const std::string& text);

nlohmann::json to_json(const ModelDims& d);
ModelDims model_dims_from_json(const nlohmann::json& j);

void save_model_bundle(const fs::path& dir, const ToyModel& model);
// Throws ValidationError if the bundle is missing or incomplete.
ToyModel load_model_bundle(const fs::path& dir);

void save_stats(const fs::path& dir, const std::vector<LayerStats>& stats);
std::vector<LayerStats> load_stats(const fs::path& dir);

void save_plans(const fs::path& dir, const std::vector<DecoderLayerPlan>& plans);
std::vector<DecoderLayerPlan> load_plans(const fs::path& dir);

std::string to_string(WeightMethod m);
std::string to_string(ForwardMethod m);
WeightMethod parse_weight_method(const std::string& s);
ForwardMethod parse_forward_method(const std::string& s);

void save_quant_model(const fs::path& dir, const QuantModel& model, const QuantizeOptions& opts);
// Rebuilds fused float weights from `base` and the stored plans.
QuantModel load_quant_model(const fs::path& dir, const ToyModel& base);

// Settings shared by every command; the JSON config file mirrors it.
struct RunConfig {
  fs::path model;
  fs::path out = "rptq_out";
  std::string mode = "W4A4";
  ClusterCounts clusters;
  std::size_t calib_samples = 256;
  std::size_t eval_samples = 32;
  std::size_t seq_len = 16;
  std::uint64_t seed = 0;
  WeightMethod weights = WeightMethod::gptq;
  ForwardMethod forward = ForwardMethod::dequant;
  std::size_t gptq_samples = 32;
  ModelDims dims;
  // Profile of the residual-stream inputs fed to the first layer.
  ChannelProfile input_profile;

  fs::path model_dir() const { return model.empty() ? out / "model" : model; }
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig default_run_config();

// Residual-stream inputs for a model. The outlier channel layout belongs to
// the model (model_seed); samples come from disjoint streams of c.seed.
Tensor calibration_inputs(const RunConfig& c, const ToyModel& model);
Tensor evaluation_inputs(const RunConfig& c, const ToyModel& model);

}  // namespace rptq
