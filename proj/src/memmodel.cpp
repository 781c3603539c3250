#include "rptq/memmodel.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "rptq/error.hpp"

namespace rptq {

double bytes_per_unit(ByteUnit unit) { return unit == ByteUnit::gb ? 1e9 : 1073741824.0; }

ByteUnit parse_byte_unit(const std::string& s) {
  if (s == "gb") return ByteUnit::gb;
  if (s == "gib") return ByteUnit::gib;
  throw ValidationError("unknown byte unit '" + s + "' (expected gb or gib)");
}

std::string to_string(ByteUnit unit) { return unit == ByteUnit::gb ? "gb" : "gib"; }

void ModelShape::validate() const {
  if (!(params > 0) || layers == 0 || hidden == 0 || heads == 0) {
    throw ValidationError("model shape '" + name + "' needs positive params, layers, hidden and heads");
  }
  if (hidden % heads != 0) throw ValidationError("model shape '" + name + "': hidden not divisible by heads");
}

std::vector<ModelShape> shapes_from_json(const nlohmann::json& j) {
  std::vector<ModelShape> out;
  try {
    for (const auto& e : j) {
      ModelShape s;
      s.name = e.at("name").get<std::string>();
      s.params = e.at("params").get<double>();
      s.layers = e.at("layers").get<std::size_t>();
      s.hidden = e.at("hidden").get<std::size_t>();
      s.heads = e.at("heads").get<std::size_t>();
      s.ffn = e.value("ffn", 4 * s.hidden);
      s.max_positions = e.value("max_positions", std::size_t{0});
      s.validate();
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed shapes file: ") + e.what());
  }
  return out;
}

namespace {

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

}  // namespace

std::vector<ModelShape> load_shapes(const std::filesystem::path& path) { return shapes_from_json(read_json(path)); }

const ModelShape& find_shape(const std::vector<ModelShape>& shapes, const std::string& name) {
  for (const auto& s : shapes) {
    if (s.name == name) return s;
  }
  throw ValidationError("unknown model shape '" + name + "'");
}

double MemoryCalibration::constant_for(const std::string& tag) const {
  auto it = dynamic_constant.find(tag);
  return it == dynamic_constant.end() ? default_dynamic_constant : it->second;
}

MemoryCalibration calibration_from_json(const nlohmann::json& j) {
  try {
    MemoryCalibration c;
    c.unit = parse_byte_unit(j.value("unit", std::string("gib")));
    c.dynamic_constant = j.at("dynamic_constant").get<std::map<std::string, double>>();
    c.default_dynamic_constant = j.value("default_dynamic_constant", 10.0);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed memory calibration: ") + e.what());
  }
}

nlohmann::json to_json(const MemoryCalibration& c) {
  return {{"unit", to_string(c.unit)},
          {"dynamic_constant", c.dynamic_constant},
          {"default_dynamic_constant", c.default_dynamic_constant}};
}

MemoryCalibration load_calibration(const std::filesystem::path& path) {
  return calibration_from_json(read_json(path));
}

MemoryBits memory_bits(const BitConfig& cfg) {
  MemoryBits b;
  b.weight = cfg.weight_bits.value_or(16);
  b.kv = cfg.kv_bits.value_or(16);
  b.dynamic = cfg.kv_only ? 16 : cfg.activation_bits.value_or(16);
  return b;
}

MemoryEstimate estimate(const ModelShape& shape, const BitConfig& cfg, std::size_t batch, std::size_t seqlen,
                        double c_dyn) {
  shape.validate();
  if (batch == 0 || seqlen == 0) throw ValidationError("batch and sequence length must be positive");
  const auto bits = memory_bits(cfg);
  const double tokens = static_cast<double>(batch) * static_cast<double>(seqlen);
  const double d = static_cast<double>(shape.hidden);
  MemoryEstimate m;
  m.weight_bytes = shape.params * bits.weight / 8.0;
  m.kv_bytes = 2.0 * static_cast<double>(shape.layers) * tokens * d * bits.kv / 8.0;
  m.dynamic_bytes = tokens * d * c_dyn * bits.dynamic / 8.0;
  m.total_bytes = m.weight_bytes + m.kv_bytes + m.dynamic_bytes;
  return m;
}

MemoryEstimate estimate(const ModelShape& shape, const BitConfig& cfg, std::size_t batch, std::size_t seqlen,
                        const MemoryCalibration& calib) {
  return estimate(shape, cfg, batch, seqlen, calib.constant_for(cfg.tag));
}

std::vector<SweepRow> sweep(const std::vector<ModelShape>& shapes, const std::vector<BitConfig>& cfgs,
                            const std::vector<std::size_t>& batches, const std::vector<std::size_t>& seqlens,
                            const MemoryCalibration& calib) {
  if (shapes.empty() || cfgs.empty() || batches.empty() || seqlens.empty()) {
    throw ValidationError("sweep needs at least one shape, mode, batch and sequence length");
  }
  std::vector<SweepRow> rows;
  for (const auto& s : shapes) {
    for (const auto& c : cfgs) {
      for (auto b : batches) {
        for (auto n : seqlens) rows.push_back({s.name, c.tag, b, n, estimate(s, c, b, n, calib)});
      }
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows, ByteUnit unit) {
  const double u = bytes_per_unit(unit);
  std::ostringstream out;
  out.precision(6);
  out << "model,mode,batch,seqlen,weight_GB,kv_GB,dynamic_GB,total_GB,weight_frac,kv_frac,dynamic_frac\n";
  for (const auto& r : rows) {
    const auto& m = r.mem;
    out << r.model << ',' << r.mode << ',' << r.batch << ',' << r.seqlen << ',' << m.weight_bytes / u << ','
        << m.kv_bytes / u << ',' << m.dynamic_bytes / u << ',' << m.total_bytes / u << ',' << m.weight_fraction()
        << ',' << m.kv_fraction() << ',' << m.dynamic_fraction() << '\n';
  }
  return out.str();
}

nlohmann::json sweep_json(const std::vector<SweepRow>& rows, ByteUnit unit) {
  const double u = bytes_per_unit(unit);
  auto arr = nlohmann::json::array();
  for (const auto& r : rows) {
    const auto& m = r.mem;
    arr.push_back({{"model", r.model},
                   {"mode", r.mode},
                   {"batch", r.batch},
                   {"seqlen", r.seqlen},
                   {"weight", m.weight_bytes / u},
                   {"kv", m.kv_bytes / u},
                   {"dynamic", m.dynamic_bytes / u},
                   {"total", m.total_bytes / u},
                   {"fractions", {m.weight_fraction(), m.kv_fraction(), m.dynamic_fraction()}}});
  }
  return {{"unit", to_string(unit)}, {"rows", arr}};
}

std::vector<GoldenCell> load_golden(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<GoldenCell> cells;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string model, mode, b, s, t;
    if (!std::getline(ss, model, ',') || !std::getline(ss, mode, ',') || !std::getline(ss, b, ',') ||
        !std::getline(ss, s, ',') || !std::getline(ss, t, ',')) {
      throw ValidationError("malformed golden row: " + line);
    }
    cells.push_back({model, mode, std::stoul(b), std::stoul(s), std::stod(t)});
  }
  return cells;
}

std::map<std::string, double> fit_dynamic_constants(const std::vector<GoldenCell>& cells,
                                                    const std::vector<ModelShape>& shapes, ByteUnit unit) {
  const double u = bytes_per_unit(unit);
  std::map<std::string, std::pair<double, double>> acc;  // sum x*y, sum x*x
  for (const auto& c : cells) {
    const auto& shape = find_shape(shapes, c.model);
    const auto cfg = parse_mode(c.mode);
    const auto fixed = estimate(shape, cfg, c.batch, c.seqlen, 0.0);
    const double x = estimate(shape, cfg, c.batch, c.seqlen, 1.0).dynamic_bytes / u;
    const double y = c.total - fixed.total_bytes / u;
    acc[c.mode].first += x * y;
    acc[c.mode].second += x * x;
  }
  std::map<std::string, double> out;
  for (const auto& [mode, s] : acc) out[mode] = s.first / s.second;
  return out;
}

std::vector<GoldenComparison> compare_golden(const std::vector<GoldenCell>& cells,
                                             const std::vector<ModelShape>& shapes, const MemoryCalibration& calib) {
  const double u = bytes_per_unit(calib.unit);
  std::vector<GoldenComparison> out;
  for (const auto& c : cells) {
    const double pred = estimate(find_shape(shapes, c.model), parse_mode(c.mode), c.batch, c.seqlen, calib).total_bytes / u;
    out.push_back({c, pred, std::abs(pred - c.total) / c.total});
  }
  return out;
}

std::string golden_csv(const std::vector<GoldenComparison>& rows) {
  std::ostringstream out;
  out.precision(6);
  out << "model,mode,batch,seqlen,reference_GB,predicted_GB,rel_error\n";
  for (const auto& r : rows) {
    out << r.cell.model << ',' << r.cell.mode << ',' << r.cell.batch << ',' << r.cell.seqlen << ',' << r.cell.total
        << ',' << r.predicted << ',' << r.rel_error << '\n';
  }
  return out.str();
}

}  // namespace rptq
