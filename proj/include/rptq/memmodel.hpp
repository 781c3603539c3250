#pragma once

// Analytical inference memory: weights, KV cache and peak transient activations.
//
//   weight  = P * w_bits / 8
//   kv      = 2 * L * B * S * d * kv_bits / 8
//   dynamic = B * S * d * c_dyn * act_bits / 8
//
// c_dyn is a per-configuration constant fitted once against published numbers
// and frozen in data/memmodel_calibration.json. KV-only modes keep 16-bit
// transient activations.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "rptq/qtransformer.hpp"

namespace rptq {

enum class ByteUnit { gb, gib };

double bytes_per_unit(ByteUnit unit);
ByteUnit parse_byte_unit(const std::string& s);
std::string to_string(ByteUnit unit);

struct ModelShape {
  std::string name;
  double params = 0;
  std::size_t layers = 0;
  std::size_t hidden = 0;
  std::size_t heads = 0;
  std::size_t ffn = 0;
  std::size_t max_positions = 0;

  void validate() const;
};

std::vector<ModelShape> shapes_from_json(const nlohmann::json& j);
std::vector<ModelShape> load_shapes(const std::filesystem::path& path);
const ModelShape& find_shape(const std::vector<ModelShape>& shapes, const std::string& name);

struct MemoryCalibration {
  ByteUnit unit = ByteUnit::gib;
  std::map<std::string, double> dynamic_constant;
  double default_dynamic_constant = 10.0;

  double constant_for(const std::string& tag) const;
};

MemoryCalibration calibration_from_json(const nlohmann::json& j);
nlohmann::json to_json(const MemoryCalibration& c);
MemoryCalibration load_calibration(const std::filesystem::path& path);

struct MemoryEstimate {
  double weight_bytes = 0;
  double kv_bytes = 0;
  double dynamic_bytes = 0;
  double total_bytes = 0;

  double weight_fraction() const { return weight_bytes / total_bytes; }
  double kv_fraction() const { return kv_bytes / total_bytes; }
  double dynamic_fraction() const { return dynamic_bytes / total_bytes; }
};

struct MemoryBits {
  int weight = 16, kv = 16, dynamic = 16;
};
MemoryBits memory_bits(const BitConfig& cfg);

// Throws ValidationError on non-positive batch or seqlen.
MemoryEstimate estimate(const ModelShape& shape, const BitConfig& cfg, std::size_t batch, std::size_t seqlen,
                        double c_dyn);
MemoryEstimate estimate(const ModelShape& shape, const BitConfig& cfg, std::size_t batch, std::size_t seqlen,
                        const MemoryCalibration& calib);

struct SweepRow {
  std::string model;
  std::string mode;
  std::size_t batch = 0;
  std::size_t seqlen = 0;
  MemoryEstimate mem;
};

// Cross product in (shape, cfg, batch, seqlen) order.
std::vector<SweepRow> sweep(const std::vector<ModelShape>& shapes, const std::vector<BitConfig>& cfgs,
                            const std::vector<std::size_t>& batches, const std::vector<std::size_t>& seqlens,
                            const MemoryCalibration& calib);

std::string sweep_csv(const std::vector<SweepRow>& rows, ByteUnit unit);
nlohmann::json sweep_json(const std::vector<SweepRow>& rows, ByteUnit unit);

struct GoldenCell {
  std::string model;
  std::string mode;
  std::size_t batch = 0;
  std::size_t seqlen = 0;
  double total = 0;  // in the calibration unit
};

std::vector<GoldenCell> load_golden(const std::filesystem::path& path);

// Least-squares c_dyn per mode so that estimated totals match the golden cells.
std::map<std::string, double> fit_dynamic_constants(const std::vector<GoldenCell>& cells,
                                                    const std::vector<ModelShape>& shapes, ByteUnit unit);

struct GoldenComparison {
  GoldenCell cell;
  double predicted = 0;
  double rel_error = 0;
};

std::vector<GoldenComparison> compare_golden(const std::vector<GoldenCell>& cells,
                                             const std::vector<ModelShape>& shapes, const MemoryCalibration& calib);
std::string golden_csv(const std::vector<GoldenComparison>& rows);

}  // namespace rptq
