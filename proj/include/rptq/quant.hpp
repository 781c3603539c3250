#pragma once

// Uniform asymmetric quantization:
//   q  = clamp(round(x / s) + z, -2^(k-1), 2^(k-1) - 1)
//   x^ = s * (q - z)
// with Min-Max parameters s = (max - min) / 2^k, z = -round((max + min) / (2 s)).
// round() is round-half-to-even everywhere.

#include <cstdint>

namespace rptq {

inline constexpr float kMinScale = 1e-8f;

struct QuantParams {
  float scale = 1.0f;
  std::int64_t zero_point = 0;
  int bits = 8;

  // Throws ValidationError unless scale > 0 and bits in [2, 16].
  void validate() const;

  std::int64_t qmin() const { return -(std::int64_t{1} << (bits - 1)); }
  std::int64_t qmax() const { return (std::int64_t{1} << (bits - 1)) - 1; }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

double round_half_even(double v);

std::int32_t quantize(float x, const QuantParams& p);
float dequantize(std::int32_t q, const QuantParams& p);
// quantize followed by dequantize.
float fake_quantize(float x, const QuantParams& p);

// Throws ValidationError if xmin > xmax or bits outside [2, 16].
QuantParams minmax_params(float xmin, float xmax, int bits);

}  // namespace rptq
