#include "rptq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rptq/error.hpp"

namespace rptq {

void QuantParams::validate() const {
  if (!(scale > 0.0f) || !std::isfinite(scale)) throw ValidationError("quantization scale must be positive");
  if (bits < 2 || bits > 16) throw ValidationError("bit width " + std::to_string(bits) + " outside [2, 16]");
}

double round_half_even(double v) {
  double r = std::round(v);
  if (std::abs(v - std::trunc(v)) == 0.5) r = 2.0 * std::round(v / 2.0);
  return r;
}

std::int32_t quantize(float x, const QuantParams& p) {
  const double ratio = static_cast<double>(x) / static_cast<double>(p.scale);
  const double shifted = round_half_even(ratio) + static_cast<double>(p.zero_point);
  const double clamped = std::clamp(shifted, static_cast<double>(p.qmin()), static_cast<double>(p.qmax()));
  return static_cast<std::int32_t>(clamped);
}

float dequantize(std::int32_t q, const QuantParams& p) {
  return static_cast<float>(static_cast<double>(p.scale) *
                            static_cast<double>(static_cast<std::int64_t>(q) - p.zero_point));
}

float fake_quantize(float x, const QuantParams& p) { return dequantize(quantize(x, p), p); }

QuantParams minmax_params(float xmin, float xmax, int bits) {
  if (!(xmin <= xmax)) throw ValidationError("minmax_params: xmin exceeds xmax");
  QuantParams p;
  p.bits = bits;
  if (bits < 2 || bits > 16) throw ValidationError("bit width " + std::to_string(bits) + " outside [2, 16]");
  p.scale = std::max((xmax - xmin) / static_cast<float>(std::int64_t{1} << bits), kMinScale);
  const double mid = (static_cast<double>(xmax) + static_cast<double>(xmin)) / (2.0 * static_cast<double>(p.scale));
  p.zero_point = -static_cast<std::int64_t>(round_half_even(mid));
  return p;
}

}  // namespace rptq
