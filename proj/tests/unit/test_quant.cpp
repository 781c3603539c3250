#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rptq/error.hpp"
#include "rptq/quant.hpp"

using namespace rptq;

TEST(Quantize, FourBitClampRange) {
  QuantParams p{1.0f, 0, 4};
  EXPECT_EQ(p.qmin(), -8);
  EXPECT_EQ(p.qmax(), 7);
  EXPECT_EQ(quantize(0.0f, p), 0);
}

TEST(Quantize, HandEvaluations) {
  QuantParams p{12.5f, 0, 4};
  EXPECT_EQ(quantize(100.0f, p), 7);
  EXPECT_EQ(quantize(-100.0f, p), -8);
  EXPECT_FLOAT_EQ(dequantize(7, p), 87.5f);
  EXPECT_EQ(fake_quantize(87.5f, p), 87.5f);
  EXPECT_EQ(dequantize(0, p), 0.0f);
  QuantParams z{0.5f, 3, 8};
  EXPECT_EQ(dequantize(3, z), 0.0f);
}

TEST(Quantize, RoundsHalfToEven) {
  EXPECT_EQ(round_half_even(0.5), 0.0);
  EXPECT_EQ(round_half_even(1.5), 2.0);
  EXPECT_EQ(round_half_even(2.5), 2.0);
  EXPECT_EQ(round_half_even(-0.5), 0.0);
  EXPECT_EQ(round_half_even(-1.5), -2.0);
  QuantParams p{1.0f, 0, 8};
  EXPECT_EQ(quantize(2.5f, p), 2);
  EXPECT_EQ(quantize(3.5f, p), 4);
}

TEST(MinMax, HandEvaluations) {
  auto a = minmax_params(-100, 100, 4);
  EXPECT_FLOAT_EQ(a.scale, 12.5f);
  EXPECT_EQ(a.zero_point, 0);
  auto b = minmax_params(80, 100, 4);
  EXPECT_FLOAT_EQ(b.scale, 1.25f);
  EXPECT_EQ(b.zero_point, -72);
  EXPECT_EQ(quantize(80.0f, b), -8);
  EXPECT_EQ(quantize(100.0f, b), 7);
}

TEST(MinMax, DegenerateRangeFloorsScale) {
  auto p = minmax_params(5, 5, 8);
  EXPECT_EQ(p.scale, kMinScale);
  EXPECT_EQ(p.zero_point, -static_cast<std::int64_t>(round_half_even(10.0 / (2.0 * kMinScale))));
  EXPECT_NO_THROW(p.validate());
}

TEST(MinMax, RejectsInvertedRangeAndBadBits) {
  EXPECT_THROW(minmax_params(1, 0, 4), ValidationError);
  EXPECT_THROW(minmax_params(0, 1, 1), ValidationError);
  EXPECT_THROW(minmax_params(0, 1, 17), ValidationError);
  EXPECT_THROW((QuantParams{0.0f, 0, 4}.validate()), ValidationError);
}

// The top of the range maps to code 2^(k-1) and is clamped, so the error near
// max can exceed one step. This instance shows it.
TEST(MinMax, ClampAtRangeTopExceedsOneStep) {
  auto p = minmax_params(0.4f, 16.4f, 4);
  EXPECT_FLOAT_EQ(p.scale, 1.0f);
  EXPECT_EQ(p.zero_point, -8);
  EXPECT_EQ(quantize(16.4f, p), 7);
  EXPECT_GT(std::abs(16.4f - fake_quantize(16.4f, p)), p.scale);
}

TEST(QuantProperties, RandomTriples) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-1000, 1000);
  std::uniform_int_distribution<int> kb(2, 16);
  int failures_tight = 0, failures_unclamped = 0, failures_grid = 0, failures_mono = 0;
  for (int t = 0; t < 20000; ++t) {
    float lo = static_cast<float>(u(rng)), hi = static_cast<float>(u(rng));
    if (lo > hi) std::swap(lo, hi);
    const int k = kb(rng);
    auto p = minmax_params(lo, hi, k);
    std::uniform_real_distribution<float> in(lo, hi);
    const float x = in(rng);
    const std::int32_t q = quantize(x, p);
    const double err = std::abs(static_cast<double>(x) - fake_quantize(x, p));
    const double slack = 1e-4 * std::max(1.0, std::abs(static_cast<double>(x)));
    // Clamp at the top costs at most one more step.
    if (err > 1.5 * p.scale + slack) ++failures_tight;
    const double raw = round_half_even(static_cast<double>(x) / p.scale) + static_cast<double>(p.zero_point);
    if (raw >= p.qmin() && raw <= p.qmax() && err > p.scale + slack) ++failures_unclamped;
    // Grid fixpoint, where float can resolve the grid at all.
    std::uniform_int_distribution<std::int64_t> code(p.qmin(), p.qmax());
    const auto c = static_cast<std::int32_t>(code(rng));
    const float ulp = std::nextafter(std::max(std::abs(lo), std::abs(hi)), INFINITY) - std::max(std::abs(lo), std::abs(hi));
    if (p.scale > 4 * ulp && quantize(dequantize(c, p), p) != c) ++failures_grid;
    // Monotonicity.
    const float y = in(rng);
    if (x <= y ? q > quantize(y, p) : q < quantize(y, p)) ++failures_mono;
  }
  EXPECT_EQ(failures_tight, 0);
  EXPECT_EQ(failures_unclamped, 0);
  EXPECT_EQ(failures_grid, 0);
  EXPECT_EQ(failures_mono, 0);
}
