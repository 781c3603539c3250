#include "rptq/pipeline.hpp"

#include <sstream>

#include "rptq/error.hpp"

namespace rptq {

std::vector<DecoderLayerPlan> make_plans(const std::vector<LayerStats>& stats, const ClusterCounts& counts,
                                         const ModelDims& dims, std::uint64_t seed) {
  std::vector<DecoderLayerPlan> plans;
  KMeansOptions km;
  km.seed = seed;
  for (const auto& s : stats) plans.push_back(plan_layer(s, counts, dims, km));
  return plans;
}

void check_plans(const ToyModel& model, const std::vector<DecoderLayerPlan>& plans) {
  for (std::size_t l = 0; l < plans.size(); ++l) {
    auto fused = fuse_decoder_layer(model.layers[l], plans[l], model.dims);
    auto v = check_alignment(wire_decoder_layer(fused, model.dims));
    if (!v.empty()) {
      auto arr = nlohmann::json::array();
      for (const auto& x : v) arr.push_back(to_json(x));
      throw ValidationError("alignment check failed in layer " + std::to_string(l) + ": " + arr.dump());
    }
  }
}

QuantizeOptions quantize_options(const RunConfig& c) {
  QuantizeOptions o;
  o.bits = parse_mode(c.mode);
  o.weights = c.weights;
  o.forward = c.forward;
  o.gptq_samples = c.gptq_samples;
  return o;
}

std::vector<SiteActivations> fused_float_acts(const ToyModel& model, const std::vector<DecoderLayerPlan>& plans,
                                              const Tensor& x) {
  std::vector<SiteActivations> out;
  Tensor cur = x;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto layer = make_float_layer(fuse_decoder_layer(model.layers[l], plans[l], model.dims), model.dims);
    LayerKVCache cache;
    LayerTrace trace;
    trace.capture = true;
    cur = run_layer(cur, layer, cache, &trace);
    out.push_back(std::move(trace.acts));
  }
  return out;
}

double site_value(const SiteErrors& e, const std::string& site) {
  if (site == "R1") return e.r1;
  if (site == "R2") return e.r2;
  if (site == "R3") return e.r3;
  if (site == "R4") return e.r4;
  if (site == "R5") return e.r5;
  throw ValidationError("unknown reorder site '" + site + "'");
}

ClusterCounts with_site(ClusterCounts c, const std::string& site, std::size_t g) {
  if (site == "R1") c.r1 = g;
  else if (site == "R2") c.r2 = g;
  else if (site == "R3") c.r3 = g;
  else if (site == "R4") c.r4 = g;
  else if (site == "R5") c.r5 = g;
  else throw ValidationError("unknown reorder site '" + site + "'");
  return c;
}

std::vector<AblationRow> run_ablation(const RunConfig& c, const ToyModel& model, const std::vector<LayerStats>& stats,
                                      const std::vector<std::string>& sites, const std::vector<std::size_t>& sweep,
                                      bool with_output) {
  const auto x = evaluation_inputs(c, model);
  const auto opts = quantize_options(c);
  std::vector<Tensor> ref;
  if (with_output) {
    KVCache fc;
    ref = run_model(make_float_model(model), x, fc);
  }
  auto act_opts = opts;
  act_opts.bits.weight_bits.reset();
  std::vector<AblationRow> rows;
  for (const auto& site : sites) {
    for (auto g : sweep) {
      auto plans = make_plans(stats, with_site(c.clusters, site, g), model.dims, c.seed);
      auto acts = fused_float_acts(model, plans, x);
      AblationRow row{site, g, 0.0, std::nullopt};
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        auto L = quantize_layer(model.layers[l], model.dims, stats[l], plans[l], act_opts, nullptr);
        row.activation_mse += site_value(site_quant_errors(L, acts[l]), site);
      }
      row.activation_mse /= static_cast<double>(model.layers.size());
      if (with_output) {
        auto qm = quantize_model(model, stats, plans, opts, calibration_inputs(c, model));
        KVCache qc;
        auto out = run_model(qm, x, qc);
        double mse = 0.0;
        for (std::size_t l = 0; l < out.size(); ++l) mse += mean_squared_error(out[l], ref[l]);
        row.output_mse = mse / static_cast<double>(out.size());
      }
      rows.push_back(row);
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  const bool with_output = !rows.empty() && rows.front().output_mse.has_value();
  std::ostringstream csv;
  csv.precision(8);
  csv << "site,g,activation_mse" << (with_output ? ",output_mse" : "") << "\n";
  for (const auto& r : rows) {
    csv << r.site << ',' << r.g << ',' << r.activation_mse;
    if (with_output) csv << ',' << *r.output_mse;
    csv << "\n";
  }
  return csv.str();
}

}  // namespace rptq
