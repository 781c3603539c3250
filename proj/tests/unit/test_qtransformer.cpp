#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "rptq/error.hpp"
#include "rptq/qtransformer.hpp"
#include "support/helpers.hpp"
#include "support/toy.hpp"

using namespace rptq;

namespace {

// Tokens [from, from + n) of a [B, N, d] tensor.
Tensor tokens(const Tensor& x, std::size_t from, std::size_t n) {
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  std::vector<float> v;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = from; j < from + n; ++j) {
      for (std::size_t c = 0; c < d; ++c) v.push_back(x[(i * t + j) * d + c]);
    }
  }
  return Tensor({b, n, d}, std::move(v));
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Dims, HeadsMustDivideHidden) {
  EXPECT_THROW((ModelDims{1, 65, 4, 64}.validate()), ValidationError);
  EXPECT_THROW(build_toy_model(0, ModelDims{1, 65, 4, 64}), ValidationError);
  EXPECT_THROW((ModelDims{0, 32, 4, 64}.validate()), ValidationError);
  EXPECT_NO_THROW((ModelDims{1, 64, 4, 64}.validate()));
}

TEST(ToyModel, SeedDeterminism) {
  auto a = build_toy_model(5, test::small_dims());
  auto b = build_toy_model(5, test::small_dims());
  auto c = build_toy_model(6, test::small_dims());
  ASSERT_EQ(a.layers.size(), 2u);
  EXPECT_EQ(values(a.layers[1].fc2.w), values(b.layers[1].fc2.w));
  EXPECT_EQ(a.layers[0].ln1.gamma, b.layers[0].ln1.gamma);
  EXPECT_NE(values(a.layers[0].q_proj.w), values(c.layers[0].q_proj.w));
}

TEST(Modes, Parse) {
  auto m = parse_mode("W4A8");
  EXPECT_EQ(m.weight_bits, 4);
  EXPECT_EQ(m.activation_bits, 8);
  EXPECT_EQ(m.kv_bits, 8);
  EXPECT_FALSE(m.kv_only);
  m = parse_mode("W4A16");
  EXPECT_EQ(m.weight_bits, 4);
  EXPECT_FALSE(m.activation_bits.has_value());
  EXPECT_FALSE(m.kv_bits.has_value());
  m = parse_mode("W3A3KV");
  EXPECT_EQ(m.weight_bits, 3);
  EXPECT_TRUE(m.kv_only);
  EXPECT_EQ(m.kv_bits, 3);
  EXPECT_FALSE(m.quantizes_activations());
  m = parse_mode("W16A16");
  EXPECT_FALSE(m.weight_bits || m.activation_bits || m.kv_bits);
  for (const char* bad : {"", "W4", "A4W4", "W1A4", "W4A17", "W4A4kv", "W4A4KVX"}) {
    EXPECT_THROW(parse_mode(bad), ValidationError) << bad;
  }
}

TEST(Counts, Parse) {
  EXPECT_EQ(parse_cluster_counts("1,2,3,4,5"), (ClusterCounts{1, 2, 3, 4, 5}));
  EXPECT_THROW(parse_cluster_counts("1,2,3,4"), ValidationError);
  EXPECT_THROW(parse_cluster_counts("1,2,0,4,5"), ValidationError);
  EXPECT_THROW(parse_cluster_counts("1,2,x,4,5"), ValidationError);
}

TEST(Fusion, FusedFloatModelMatchesOriginal) {
  auto f = test::make_fixture(1);
  auto ref = test::final_output(make_float_model(f.model), f.eval);
  QuantModel fused;
  fused.dims = f.model.dims;
  for (std::size_t l = 0; l < f.model.layers.size(); ++l) {
    fused.layers.push_back(make_float_layer(fuse_decoder_layer(f.model.layers[l], f.plans[l], f.model.dims),
                                            f.model.dims));
  }
  auto out = test::final_output(fused, f.eval);
  EXPECT_LE(max_relative_error(out, ref), 1e-5);
}

TEST(Fusion, DefaultCountsAreAligned) {
  auto f = test::make_fixture(2, ClusterCounts{});
  for (std::size_t l = 0; l < f.plans.size(); ++l) {
    auto fused = fuse_decoder_layer(f.model.layers[l], f.plans[l], f.model.dims);
    EXPECT_TRUE(check_alignment(wire_decoder_layer(fused, f.model.dims)).empty());
  }
}

TEST(Fusion, TamperedPermIsReported) {
  auto f = test::make_fixture(3);
  auto fused = fuse_decoder_layer(f.model.layers[0], f.plans[0], f.model.dims);
  std::swap(fused.fc2.in_perm[0], fused.fc2.in_perm[1]);
  auto v = check_alignment(wire_decoder_layer(fused, f.model.dims));
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].edge, "fc1->fc2");
}

TEST(Plans, AllOnesCountsGiveSingleClusters) {
  auto f = test::make_fixture(4, ClusterCounts{1, 1, 1, 1, 1});
  for (const auto& p : f.plans) {
    EXPECT_EQ(p.r1.g, 1u);
    EXPECT_EQ(p.r4.g, 1u);
    EXPECT_EQ(p.r5.g, 1u);
    for (const auto& h : p.r2) EXPECT_EQ(h.g, 1u);
    for (const auto& h : p.r3) EXPECT_EQ(h.g, 1u);
  }
  auto out = test::final_output(test::quantized(f, "W4A4"), f.eval);
  EXPECT_EQ(out.shape(), f.eval.shape());
}

TEST(Plans, CountsAboveChannelsAreRejected) {
  auto f = test::make_fixture(5);
  const auto d = f.model.dims;
  EXPECT_THROW(plan_layer(f.stats[0], ClusterCounts{33, 2, 2, 4, 4}, d), ValidationError);
  EXPECT_THROW(plan_layer(f.stats[0], ClusterCounts{4, 9, 2, 4, 4}, d), ValidationError);
  EXPECT_THROW(plan_layer(f.stats[0], ClusterCounts{4, 2, 9, 4, 4}, d), ValidationError);
  EXPECT_THROW(plan_layer(f.stats[0], ClusterCounts{4, 2, 2, 4, 65}, d), ValidationError);
  EXPECT_NO_THROW(plan_layer(f.stats[0], ClusterCounts{32, 8, 8, 32, 64}, d));
}

TEST(Plans, JsonRoundTrip) {
  auto f = test::make_fixture(6);
  const auto j = to_json(f.plans[1]);
  EXPECT_EQ(to_json(layer_plan_from_json(j)), j);
  const auto s = to_json(f.stats[0]);
  EXPECT_EQ(to_json(layer_stats_from_json(s)), s);
}

TEST(Stats, MergeIsChunkInvariant) {
  auto f = test::make_fixture(7);
  auto whole = calibrate_model(f.model, f.calib, 32);
  auto chunked = calibrate_model(f.model, f.calib, 5);
  for (std::size_t l = 0; l < whole.size(); ++l) EXPECT_EQ(to_json(whole[l]), to_json(chunked[l]));
}

TEST(Cache, IncrementalDecodeMatchesPrefill) {
  auto f = test::make_fixture(8);
  for (const char* mode : {"W16A16", "W4A4", "W4A4KV"}) {
    auto m = test::quantized(f, mode);
    auto x = tokens(f.eval, 0, 2);
    KVCache one(m.layers.size());
    auto full = run_model(m, x, one).back();
    KVCache two(m.layers.size());
    auto a = run_model(m, tokens(x, 0, 1), two).back();
    auto b = run_model(m, tokens(x, 1, 1), two).back();
    EXPECT_EQ(two.layers[0].tokens, 2u);
    EXPECT_LE(max_relative_error(a, tokens(full, 0, 1)), 1e-6) << mode;
    EXPECT_LE(max_relative_error(b, tokens(full, 1, 1)), 1e-6) << mode;
  }
}

TEST(Cache, MismatchedCacheIsRejected) {
  auto f = test::make_fixture(9);
  auto m = make_float_model(f.model);
  KVCache cache(m.layers.size());
  run_model(m, f.eval, cache);
  auto other = tokens(test::make_fixture(9, test::small_counts(), 32, 3).eval, 0, 1);
  EXPECT_THROW(run_model(m, other, cache), ValidationError);
  KVCache short_cache(1);
  EXPECT_THROW(run_model(m, f.eval, short_cache), ValidationError);
}

TEST(Quantized, FloatModeIsExact) {
  auto f = test::make_fixture(10);
  auto ref = test::final_output(make_float_model(f.model), f.eval);
  auto out = test::final_output(test::quantized(f, "W16A16"), f.eval);
  EXPECT_LE(max_relative_error(out, ref), 1e-5);
}

TEST(Quantized, SixteenBitsTrackFloat) {
  auto f = test::make_fixture(11);
  // Inputs inside the calibrated ranges, so nothing clamps.
  auto ref = test::final_output(make_float_model(f.model), f.calib);
  QuantizeOptions o;
  o.bits.tag = "W16A16-int";
  o.bits.weight_bits = 16;
  o.bits.activation_bits = 16;
  o.bits.kv_bits = 16;
  o.bits.ln_softmax_out_bits = 16;
  o.weights = WeightMethod::rtn;
  auto out = test::final_output(quantize_model(f.model, f.stats, f.plans, o, f.calib), f.calib);
  EXPECT_LE(max_relative_error(out, ref), 1e-3);
}

TEST(Quantized, IntegerPathMatchesDequant) {
  auto f = test::make_fixture(12);
  for (const char* mode : {"W4A4", "W4A8", "W4A4KV"}) {
    auto a = test::final_output(test::quantized(f, mode, WeightMethod::rtn, ForwardMethod::integer), f.eval);
    auto b = test::final_output(test::quantized(f, mode, WeightMethod::rtn, ForwardMethod::dequant), f.eval);
    EXPECT_LE(max_relative_error(a, b), 1e-4) << mode;
  }
}

TEST(Quantized, IntegerTensorsFollowMode) {
  auto f = test::make_fixture(13);
  std::vector<LayerTrace> traces;
  test::final_output(test::quantized(f, "W4A4KV", WeightMethod::rtn, ForwardMethod::integer), f.eval, &traces);
  ASSERT_EQ(traces.size(), 2u);
  auto names = traces[0].integer_tensors;
  std::sort(names.begin(), names.end());
  EXPECT_EQ(names, (std::vector<std::string>{"k_cache", "v_cache"}));
  traces.clear();
  test::final_output(test::quantized(f, "W4A4", WeightMethod::rtn, ForwardMethod::integer), f.eval, &traces);
  names = traces[1].integer_tensors;
  std::sort(names.begin(), names.end());
  EXPECT_EQ(names, (std::vector<std::string>{"attn_out", "fc1_out", "k_cache", "ln1_out", "ln2_out", "probs", "q",
                                             "v_cache"}));
  traces.clear();
  test::final_output(test::quantized(f, "W4A16"), f.eval, &traces);
  EXPECT_TRUE(traces[0].integer_tensors.empty());
}

TEST(Quantized, KvCacheHoldsCodes) {
  auto f = test::make_fixture(14);
  auto m = test::quantized(f, "W4A4KV");
  KVCache cache(m.layers.size());
  run_model(m, f.eval, cache);
  auto k = cache.layers[0].key_codes();
  EXPECT_EQ(k.shape(), (std::vector<std::size_t>{f.eval.dim(0), f.eval.dim(1), f.model.dims.hidden}));
  for (std::size_t i = 0; i < k.size(); ++i) {
    EXPECT_GE(k[i], -8);
    EXPECT_LE(k[i], 7);
  }
  auto fm = make_float_model(f.model);
  KVCache fc(fm.layers.size());
  run_model(fm, f.eval, fc);
  EXPECT_THROW(fc.layers[0].key_codes(), ValidationError);
}

TEST(Quantized, ErrorsShrinkWithBits) {
  auto f = test::make_fixture(15);
  auto ref = test::final_output(make_float_model(f.model), f.eval);
  const double e4 = mean_squared_error(test::final_output(test::quantized(f, "W4A4"), f.eval), ref);
  const double e8 = mean_squared_error(test::final_output(test::quantized(f, "W8A8"), f.eval), ref);
  EXPECT_LT(e8, e4);
  EXPECT_GT(e4, 0.0);
}

TEST(Quantized, GptqNoWorseThanRtnOnAverage) {
  double g = 0, r = 0;
  for (std::uint64_t s = 20; s < 24; ++s) {
    auto f = test::make_fixture(s);
    auto ref = test::final_output(make_float_model(f.model), f.eval);
    g += mean_squared_error(test::final_output(test::quantized(f, "W4A16", WeightMethod::gptq), f.eval), ref);
    r += mean_squared_error(test::final_output(test::quantized(f, "W4A16", WeightMethod::rtn), f.eval), ref);
  }
  EXPECT_LE(g, r);
}

TEST(SiteErrors, InactiveSitesAreZero) {
  auto f = test::make_fixture(16);
  auto m = test::quantized(f, "W4A4KV");
  std::vector<LayerTrace> traces(2);
  for (auto& t : traces) t.capture = true;
  test::final_output(make_float_model(f.model), f.eval, &traces);
  auto e = site_quant_errors(m.layers[0], traces[0].acts);
  EXPECT_EQ(e.r1, 0.0);
  EXPECT_EQ(e.r4, 0.0);
  EXPECT_EQ(e.r5, 0.0);
  EXPECT_GT(e.r2, 0.0);
  EXPECT_GT(e.r3, 0.0);
}
