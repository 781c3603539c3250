#pragma once

// Stage helpers shared by the command line tool and the acceptance checks.

#include <optional>
#include <string>
#include <vector>

#include "rptq/bundle.hpp"
#include "rptq/qtransformer.hpp"

namespace rptq {

std::vector<DecoderLayerPlan> make_plans(const std::vector<LayerStats>& stats, const ClusterCounts& counts,
                                         const ModelDims& dims, std::uint64_t seed);

// Throws ValidationError listing the violations of the first misaligned layer.
void check_plans(const ToyModel& model, const std::vector<DecoderLayerPlan>& plans);

QuantizeOptions quantize_options(const RunConfig& c);

// Float activations of every fused float layer, each fed by the float output
// of the previous layer.
std::vector<SiteActivations> fused_float_acts(const ToyModel& model, const std::vector<DecoderLayerPlan>& plans,
                                              const Tensor& x);

// Sites are named R1..R5.
double site_value(const SiteErrors& e, const std::string& site);
ClusterCounts with_site(ClusterCounts c, const std::string& site, std::size_t g);

struct AblationRow {
  std::string site;
  std::size_t g = 0;
  double activation_mse = 0;
  std::optional<double> output_mse;
};

// Varies one site's cluster count at a time, the others held at c.clusters.
// activation_mse is the layer mean of that site's fake-quantization error.
std::vector<AblationRow> run_ablation(const RunConfig& c, const ToyModel& model, const std::vector<LayerStats>& stats,
                                      const std::vector<std::string>& sites, const std::vector<std::size_t>& sweep,
                                      bool with_output);
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace rptq
