#include "rptq/qtransformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <regex>
#include <sstream>

#include "rptq/error.hpp"

namespace rptq {

namespace {

// [B, N, d] -> [B, N, hd] slice of head h.
Tensor head_slice(const Tensor& x, std::size_t h, std::size_t hd) {
  const std::size_t rows = x.rows(), d = x.last_dim();
  std::vector<float> out(rows * hd);
  for (std::size_t r = 0; r < rows; ++r) {
    auto src = x.row(r);
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(h * hd),
              src.begin() + static_cast<std::ptrdiff_t>((h + 1) * hd), out.begin() + static_cast<std::ptrdiff_t>(r * hd));
  }
  Shape shape = x.shape();
  shape.back() = hd;
  (void)d;
  return Tensor(std::move(shape), std::move(out));
}

// [B, H, N, hd] -> [B, N, hd] for head h.
Tensor head_of_bhnd(const Tensor& x, std::size_t h) {
  const std::size_t b = x.dim(0), heads = x.dim(1), n = x.dim(2), hd = x.dim(3);
  std::vector<float> out(b * n * hd);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t t = 0; t < n; ++t) {
      auto src = x.row((bi * heads + h) * n + t);
      std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>((bi * n + t) * hd));
    }
  }
  return Tensor({b, n, hd}, std::move(out));
}

// [B, H, N, hd] -> [B, N, H * hd]
Tensor merge_heads(const Tensor& x) {
  const std::size_t b = x.dim(0), heads = x.dim(1), n = x.dim(2), hd = x.dim(3);
  std::vector<float> out(b * n * heads * hd);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < n; ++t) {
        auto src = x.row((bi * heads + h) * n + t);
        std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>((bi * n + t) * heads * hd + h * hd));
      }
    }
  }
  return Tensor({b, n, heads * hd}, std::move(out));
}

Tensor first_samples(const Tensor& x, std::size_t count) {
  count = std::min(count, x.dim(0));
  const std::size_t per = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = count;
  return Tensor(std::move(shape), std::vector<float>(x.data().begin(), x.data().begin() + static_cast<std::ptrdiff_t>(count * per)));
}

Tensor sample_range(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t per = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  return Tensor(std::move(shape),
                std::vector<float>(x.data().begin() + static_cast<std::ptrdiff_t>(begin * per),
                                   x.data().begin() + static_cast<std::ptrdiff_t>(end * per)));
}

Tensor as_rows(const Tensor& x) { return x.reshaped({x.rows(), x.last_dim()}); }

Tensor add(const Tensor& a, const Tensor& b) {
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return Tensor(a.shape(), std::move(out));
}

LayerNormOp random_layernorm(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<float> n01(0.0f, 1.0f);
  std::uniform_real_distribution<float> gain(8.0f, 30.0f);
  std::uniform_real_distribution<float> shift(-4.0f, 4.0f);
  LayerNormOp ln;
  ln.gamma.resize(d);
  ln.beta.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    ln.gamma[i] = 1.0f + 0.1f * n01(rng);
    ln.beta[i] = 0.1f * n01(rng);
  }
  const std::size_t outliers = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.03 * static_cast<double>(d))));
  std::vector<std::size_t> idx = identity_permutation(d);
  std::shuffle(idx.begin(), idx.end(), rng);
  for (std::size_t i = 0; i < outliers; ++i) {
    ln.gamma[idx[i]] *= gain(rng);
    ln.beta[idx[i]] += shift(rng);
  }
  return ln;
}

LinearWeights random_linear(std::size_t out, std::size_t in, std::mt19937_64& rng) {
  std::normal_distribution<float> n01(0.0f, 1.0f);
  const float scale = 1.0f / std::sqrt(static_cast<float>(in));
  std::vector<float> w(out * in);
  for (auto& v : w) v = scale * n01(rng);
  std::vector<float> b(out);
  for (auto& v : b) v = 0.02f * n01(rng);
  return LinearWeights::unfused(Tensor({out, in}, std::move(w)), std::move(b));
}

ChannelStats stats_of(const Tensor& t) { return collect_stats(ChannelStats::empty(t.last_dim()), t); }

ReorderPlan plan_site(const std::vector<Point>& points, std::size_t g, const KMeansOptions& opts, const char* site) {
  if (g > points.size()) {
    throw ValidationError(std::string("cluster count ") + std::to_string(g) + " at " + site + " exceeds its " +
                          std::to_string(points.size()) + " channels");
  }
  return plan_kmeans(points, g, opts);
}

struct LinearInput {
  Tensor x;  // float values the float path sees (dequantized when quantized)
  std::optional<IntTensor> codes;
  std::vector<QuantParams> params;
};

LinearInput prepare_input(Tensor x, const SiteQuant& site, const char* name, LayerTrace* trace) {
  LinearInput in;
  if (!site.active()) {
    in.x = std::move(x);
    return in;
  }
  in.codes = quantize_with_plan(x, site.plan, site.params);
  in.x = dequantize_with_plan(*in.codes, site.plan, site.params);
  in.params = site.params;
  if (trace) trace->integer_tensors.emplace_back(name);
  return in;
}

Tensor apply_linear(const LinearWeights& fp, const std::optional<ClusteredQuantLinear>& ql, const LinearInput& in,
                    ForwardMethod method) {
  if (!ql) return linear_forward(fp, in.x);
  if (!in.codes) return forward_weight_only(in.x, *ql);
  if (method == ForwardMethod::integer) return forward_integer(*in.codes, in.params, *ql);
  return forward_dequant(*in.codes, in.params, *ql);
}

SiteQuant concat_sites(const std::vector<SiteQuant>& sites) {
  SiteQuant out;
  std::vector<ReorderPlan> plans;
  bool active = !sites.empty();
  for (const auto& s : sites) {
    plans.push_back(s.plan);
    active = active && s.active();
    out.params.insert(out.params.end(), s.params.begin(), s.params.end());
  }
  if (!active) out.params.clear();
  out.plan = concat_plans(plans);
  return out;
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = std::max(v, 0.0f);
  return Tensor(x.shape(), std::move(out));
}

IntTensor cache_codes(const std::vector<std::vector<std::int32_t>>& codes, const LayerKVCache& c) {
  if (!c.quantized || c.tokens == 0) throw ValidationError("cache holds no integer codes");
  std::vector<std::int32_t> flat;
  flat.reserve(c.batch * c.tokens * c.width);
  for (const auto& b : codes) flat.insert(flat.end(), b.begin(), b.end());
  return IntTensor({c.batch, c.tokens, c.width}, std::move(flat), c.bits);
}

}  // namespace

void ModelDims::validate() const {
  if (layers == 0 || hidden == 0 || heads == 0 || ffn == 0) throw ValidationError("model dims must be positive");
  if (hidden % heads != 0) {
    throw ValidationError("hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) +
                          " heads");
  }
}

ToyModel build_toy_model(std::uint64_t seed, const ModelDims& dims) {
  dims.validate();
  ToyModel model;
  model.dims = dims;
  model.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < dims.layers; ++l) {
    DecoderLayerWeights w;
    w.ln1 = random_layernorm(dims.hidden, rng);
    w.q_proj = random_linear(dims.hidden, dims.hidden, rng);
    w.k_proj = random_linear(dims.hidden, dims.hidden, rng);
    w.v_proj = random_linear(dims.hidden, dims.hidden, rng);
    w.out_proj = random_linear(dims.hidden, dims.hidden, rng);
    w.ln2 = random_layernorm(dims.hidden, rng);
    w.fc1 = random_linear(dims.ffn, dims.hidden, rng);
    w.fc2 = random_linear(dims.hidden, dims.ffn, rng);
    model.layers.push_back(std::move(w));
  }
  return model;
}

BitConfig parse_mode(const std::string& tag) {
  static const std::regex re(R"(W(\d+)A(\d+)(KV)?)");
  std::smatch m;
  if (!std::regex_match(tag, m, re)) throw ValidationError("unknown bit configuration '" + tag + "'");
  const int w = std::stoi(m[1].str());
  const int a = std::stoi(m[2].str());
  const bool kv = m[3].matched;
  auto check = [&](int b) {
    if (b < 2 || b > 16) throw ValidationError("bit width " + std::to_string(b) + " in '" + tag + "' outside [2, 16]");
  };
  check(w);
  check(a);
  BitConfig cfg;
  cfg.tag = tag;
  if (w < 16) cfg.weight_bits = w;
  cfg.kv_only = kv;
  if (a < 16) {
    cfg.kv_bits = a;
    if (!kv) cfg.activation_bits = a;
  }
  return cfg;
}

ClusterCounts parse_cluster_counts(const std::string& csv) {
  std::vector<std::size_t> v;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      long long x = std::stoll(item);
      if (x < 1) throw ValidationError("cluster counts must be positive");
      v.push_back(static_cast<std::size_t>(x));
    } catch (const std::logic_error&) {
      throw ValidationError("malformed cluster count '" + item + "'");
    }
  }
  if (v.size() != 5) throw ValidationError("expected five cluster counts r1,r2,r3,r4,r5");
  return {v[0], v[1], v[2], v[3], v[4]};
}

DecoderLayerPlan DecoderLayerPlan::identity(const ModelDims& dims) {
  DecoderLayerPlan p;
  p.counts = {1, 1, 1, 1, 1};
  p.r1 = ReorderPlan::identity(dims.hidden);
  p.r2.assign(dims.heads, ReorderPlan::identity(dims.head_dim()));
  p.r3.assign(dims.heads, ReorderPlan::identity(dims.head_dim()));
  p.r4 = ReorderPlan::identity(dims.hidden);
  p.r5 = ReorderPlan::identity(dims.ffn);
  return p;
}

nlohmann::json to_json(const DecoderLayerPlan& plan) {
  auto heads = [](const std::vector<ReorderPlan>& v) {
    auto a = nlohmann::json::array();
    for (const auto& p : v) a.push_back(to_json(p));
    return a;
  };
  const auto& c = plan.counts;
  return {{"counts", {c.r1, c.r2, c.r3, c.r4, c.r5}},
          {"r1", to_json(plan.r1)},
          {"r2", heads(plan.r2)},
          {"r3", heads(plan.r3)},
          {"r4", to_json(plan.r4)},
          {"r5", to_json(plan.r5)}};
}

DecoderLayerPlan layer_plan_from_json(const nlohmann::json& j) {
  try {
    DecoderLayerPlan p;
    auto c = j.at("counts").get<std::vector<std::size_t>>();
    if (c.size() != 5) throw ValidationError("plan counts must have five entries");
    p.counts = {c[0], c[1], c[2], c[3], c[4]};
    p.r1 = reorder_plan_from_json(j.at("r1"));
    for (const auto& h : j.at("r2")) p.r2.push_back(reorder_plan_from_json(h));
    for (const auto& h : j.at("r3")) p.r3.push_back(reorder_plan_from_json(h));
    p.r4 = reorder_plan_from_json(j.at("r4"));
    p.r5 = reorder_plan_from_json(j.at("r5"));
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed layer plan: ") + e.what());
  }
}

LayerStats merge_layer_stats(const LayerStats& a, const LayerStats& b) {
  if (a.ln1_out.num_channels == 0) return b;
  if (b.ln1_out.num_channels == 0) return a;
  LayerStats out;
  out.ln1_out = merge_stats(a.ln1_out, b.ln1_out);
  out.qk = merge_qk_stats(a.qk, b.qk);
  for (std::size_t h = 0; h < a.v.size(); ++h) {
    out.v.push_back(merge_stats(a.v[h], b.v[h]));
    out.attn_out.push_back(merge_stats(a.attn_out[h], b.attn_out[h]));
  }
  out.probs_min = std::min(a.probs_min, b.probs_min);
  out.probs_max = std::max(a.probs_max, b.probs_max);
  out.ln2_out = merge_stats(a.ln2_out, b.ln2_out);
  out.fc1_out = merge_stats(a.fc1_out, b.fc1_out);
  return out;
}

nlohmann::json to_json(const LayerStats& s) {
  auto heads = [](const std::vector<ChannelStats>& v) {
    auto a = nlohmann::json::array();
    for (const auto& x : v) a.push_back(to_json(x));
    return a;
  };
  return {{"ln1_out", to_json(s.ln1_out)}, {"qk", to_json(s.qk)},          {"v", heads(s.v)},
          {"attn_out", heads(s.attn_out)}, {"probs", {s.probs_min, s.probs_max}}, {"ln2_out", to_json(s.ln2_out)},
          {"fc1_out", to_json(s.fc1_out)}};
}

LayerStats layer_stats_from_json(const nlohmann::json& j) {
  try {
    LayerStats s;
    s.ln1_out = channel_stats_from_json(j.at("ln1_out"));
    s.qk = qk_stats_from_json(j.at("qk"));
    for (const auto& h : j.at("v")) s.v.push_back(channel_stats_from_json(h));
    for (const auto& h : j.at("attn_out")) s.attn_out.push_back(channel_stats_from_json(h));
    s.probs_min = j.at("probs").at(0).get<float>();
    s.probs_max = j.at("probs").at(1).get<float>();
    s.ln2_out = channel_stats_from_json(j.at("ln2_out"));
    s.fc1_out = channel_stats_from_json(j.at("fc1_out"));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed layer stats: ") + e.what());
  }
}

DecoderLayerPlan plan_layer(const LayerStats& stats, const ClusterCounts& counts, const ModelDims& dims,
                            const KMeansOptions& opts) {
  dims.validate();
  if (stats.ln1_out.num_channels != dims.hidden || stats.qk.heads.size() != dims.heads ||
      stats.v.size() != dims.heads || stats.attn_out.size() != dims.heads ||
      stats.ln2_out.num_channels != dims.hidden || stats.fc1_out.num_channels != dims.ffn) {
    throw ValidationError("layer stats are missing sites or do not match the model dims");
  }
  DecoderLayerPlan plan;
  plan.counts = counts;
  plan.r1 = plan_site(range_points(stats.ln1_out), counts.r1, opts, "R1");
  for (std::size_t h = 0; h < dims.heads; ++h) {
    plan.r2.push_back(plan_site(stats.qk.heads[h].quaternion_points(), counts.r2, opts, "R2"));
    plan.r3.push_back(plan_site(range_points(stats.v[h]), counts.r3, opts, "R3"));
  }
  plan.r4 = plan_site(range_points(stats.ln2_out), counts.r4, opts, "R4");
  plan.r5 = plan_site(range_points(stats.fc1_out), counts.r5, opts, "R5");
  return plan;
}

DecoderLayerWeights fuse_decoder_layer(const DecoderLayerWeights& w, const DecoderLayerPlan& plan,
                                       const ModelDims& dims) {
  dims.validate();
  const auto r2 = plan.r2_concat();
  const auto r3 = plan.r3_concat();
  const auto id = identity_permutation(dims.hidden);
  DecoderLayerWeights f = w;
  f.ln1.out_plan = plan.r1;
  f.q_proj = fuse_linear(w.q_proj, plan.r1.perm, r2.perm);
  f.k_proj = fuse_linear(w.k_proj, plan.r1.perm, r2.perm);
  f.v_proj = fuse_linear(w.v_proj, plan.r1.perm, r3.perm);
  f.out_proj = fuse_linear(w.out_proj, r3.perm, id);
  f.ln2.out_plan = plan.r4;
  f.fc1 = fuse_linear(w.fc1, plan.r4.perm, plan.r5.perm);
  f.fc2 = fuse_linear(w.fc2, plan.r5.perm, id);
  return f;
}

LayerWiring wire_decoder_layer(const DecoderLayerWeights& f, const ModelDims& dims) {
  const std::size_t d = dims.hidden, hd = dims.head_dim();
  const auto residual = identity_permutation(d);
  auto ln_order = [](const LayerNormOp& ln, std::size_t c) {
    return ln.out_plan ? ln.out_plan->perm : identity_permutation(c);
  };
  LayerWiring w;
  const auto ln1 = ln_order(f.ln1, d);
  w.edges.push_back({"ln1_out->q_proj", ln1, f.q_proj.in_perm});
  w.edges.push_back({"ln1_out->k_proj", ln1, f.k_proj.in_perm});
  w.edges.push_back({"ln1_out->v_proj", ln1, f.v_proj.in_perm});
  for (std::size_t h = 0; h < dims.heads; ++h) {
    Permutation q(f.q_proj.out_perm.begin() + static_cast<std::ptrdiff_t>(h * hd),
                  f.q_proj.out_perm.begin() + static_cast<std::ptrdiff_t>((h + 1) * hd));
    Permutation k(f.k_proj.out_perm.begin() + static_cast<std::ptrdiff_t>(h * hd),
                  f.k_proj.out_perm.begin() + static_cast<std::ptrdiff_t>((h + 1) * hd));
    w.edges.push_back({"qk_matmul.head" + std::to_string(h), q, k});
  }
  w.edges.push_back({"pv_matmul->out_proj", f.v_proj.out_perm, f.out_proj.in_perm});
  w.edges.push_back({"residual_add.attn", f.out_proj.out_perm, residual});
  w.edges.push_back({"ln2_out->fc1", ln_order(f.ln2, d), f.fc1.in_perm});
  w.edges.push_back({"fc1->fc2", f.fc1.out_perm, f.fc2.in_perm});
  w.edges.push_back({"residual_add.ffn", f.fc2.out_perm, residual});
  return w;
}

QuantDecoderLayer make_float_layer(const DecoderLayerWeights& weights, const ModelDims& dims) {
  dims.validate();
  QuantDecoderLayer layer;
  layer.dims = dims;
  layer.plan = DecoderLayerPlan::identity(dims);
  layer.fused = weights;
  layer.q.resize(dims.heads);
  layer.k.resize(dims.heads);
  layer.v.resize(dims.heads);
  layer.attn_out.resize(dims.heads);
  return layer;
}

IntTensor LayerKVCache::key_codes() const { return cache_codes(k_codes, *this); }
IntTensor LayerKVCache::value_codes() const { return cache_codes(v_codes, *this); }

Tensor run_layer(const Tensor& x, const QuantDecoderLayer& L, LayerKVCache& cache, LayerTrace* trace) {
  const auto& dims = L.dims;
  const std::size_t d = dims.hidden, heads = dims.heads, hd = dims.head_dim();
  if (x.ndim() != 3 || x.last_dim() != d) {
    throw ValidationError("layer input must be [B, N, " + std::to_string(d) + "], got " + shape_to_string(x.shape()));
  }
  if (L.q.size() != heads || L.k.size() != heads || L.v.size() != heads || L.attn_out.size() != heads) {
    throw ValidationError("per-head quantization sites do not match head count");
  }
  const std::size_t B = x.dim(0), N = x.dim(1);
  const bool kv_quant = heads > 0 && L.k[0].active();
  if (cache.batch == 0 && cache.tokens == 0) {
    cache.batch = B;
    cache.width = d;
    cache.quantized = kv_quant;
    cache.bits = kv_quant ? L.k[0].params.front().bits : 0;
    cache.k.assign(B, {});
    cache.v.assign(B, {});
    cache.k_codes.assign(B, {});
    cache.v_codes.assign(B, {});
  }
  if (cache.batch != B || cache.width != d || cache.quantized != kv_quant) {
    throw ValidationError("KV cache does not match the layer (batch " + std::to_string(cache.batch) + " vs " +
                          std::to_string(B) + ", width " + std::to_string(cache.width) + " vs " + std::to_string(d) +
                          ")");
  }
  const bool capture = trace && trace->capture;

  // Attention block.
  Tensor h1 = layernorm_forward(L.fused.ln1, x);
  if (capture) trace->acts.ln1_out = h1;
  auto in1 = prepare_input(std::move(h1), L.ln1_out, "ln1_out", trace);
  Tensor q = apply_linear(L.fused.q_proj, L.q_proj, in1, L.method);
  Tensor k = apply_linear(L.fused.k_proj, L.k_proj, in1, L.method);
  Tensor v = apply_linear(L.fused.v_proj, L.v_proj, in1, L.method);

  std::vector<float> q_bhnd(B * heads * N * hd), k_bhnd(q_bhnd.size()), v_bhnd(q_bhnd.size());
  bool q_int = false;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = head_slice(q, h, hd), kh = head_slice(k, h, hd), vh = head_slice(v, h, hd);
    auto scatter = [&](std::vector<float>& dst, const Tensor& src) {
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < N; ++t) {
          auto row = src.row(b * N + t);
          std::copy(row.begin(), row.end(), dst.begin() + static_cast<std::ptrdiff_t>(((b * heads + h) * N + t) * hd));
        }
      }
    };
    if (capture) {
      scatter(q_bhnd, qh);
      scatter(k_bhnd, kh);
      scatter(v_bhnd, vh);
    }
    if (L.q[h].active()) {
      qh = fake_quantize_with_plan(qh, L.q[h].plan, L.q[h].params);
      q_int = true;
    }
    // Write the new tokens of this head into the cache.
    std::optional<IntTensor> kc, vc;
    if (kv_quant) {
      kc = quantize_with_plan(kh, L.k[h].plan, L.k[h].params);
      vc = quantize_with_plan(vh, L.v[h].plan, L.v[h].params);
      kh = dequantize_with_plan(*kc, L.k[h].plan, L.k[h].params);
      vh = dequantize_with_plan(*vc, L.v[h].plan, L.v[h].params);
    }
    for (std::size_t b = 0; b < B; ++b) {
      auto& kb = cache.k[b];
      auto& vb = cache.v[b];
      kb.resize((cache.tokens + N) * d);
      vb.resize((cache.tokens + N) * d);
      if (kv_quant) {
        cache.k_codes[b].resize((cache.tokens + N) * d);
        cache.v_codes[b].resize((cache.tokens + N) * d);
      }
      for (std::size_t t = 0; t < N; ++t) {
        const std::size_t dst = (cache.tokens + t) * d + h * hd;
        auto kr = kh.row(b * N + t);
        auto vr = vh.row(b * N + t);
        std::copy(kr.begin(), kr.end(), kb.begin() + static_cast<std::ptrdiff_t>(dst));
        std::copy(vr.begin(), vr.end(), vb.begin() + static_cast<std::ptrdiff_t>(dst));
        if (kv_quant) {
          auto kq = kc->row(b * N + t);
          auto vq = vc->row(b * N + t);
          std::copy(kq.begin(), kq.end(), cache.k_codes[b].begin() + static_cast<std::ptrdiff_t>(dst));
          std::copy(vq.begin(), vq.end(), cache.v_codes[b].begin() + static_cast<std::ptrdiff_t>(dst));
        }
      }
    }
    // Stash the (possibly quantized) query head back for the score loop.
    for (std::size_t r = 0; r < B * N; ++r) {
      auto src = qh.row(r);
      std::copy(src.begin(), src.end(), q.mutable_row(r).begin() + static_cast<std::ptrdiff_t>(h * hd));
    }
  }
  if (trace && q_int) trace->integer_tensors.emplace_back("q");
  if (trace && kv_quant) {
    trace->integer_tensors.emplace_back("k_cache");
    trace->integer_tensors.emplace_back("v_cache");
  }
  const std::size_t past = cache.tokens;
  const std::size_t total = past + N;
  cache.tokens = total;
  if (capture) {
    trace->acts.q = Tensor({B, heads, N, hd}, std::move(q_bhnd));
    trace->acts.k = Tensor({B, heads, N, hd}, std::move(k_bhnd));
    trace->acts.v = Tensor({B, heads, N, hd}, std::move(v_bhnd));
    trace->acts.probs.clear();
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<float> attn(B * heads * N * hd, 0.0f);
  std::vector<double> scores(total);
  std::vector<float> probs(total);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& kb = cache.k[b];
    const auto& vb = cache.v[b];
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < N; ++i) {
        auto qr = q.row(b * N + i).subspan(h * hd, hd);
        const std::size_t visible = past + i + 1;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < visible; ++t) {
          const float* kr = kb.data() + t * d + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += static_cast<double>(qr[c]) * kr[c];
          scores[t] = s * inv_sqrt;
          mx = std::max(mx, scores[t]);
        }
        double z = 0.0;
        for (std::size_t t = 0; t < visible; ++t) {
          scores[t] = std::exp(scores[t] - mx);
          z += scores[t];
        }
        for (std::size_t t = 0; t < visible; ++t) {
          probs[t] = static_cast<float>(scores[t] / z);
          if (capture) trace->acts.probs.push_back(probs[t]);
          if (L.probs) probs[t] = fake_quantize(probs[t], *L.probs);
        }
        float* out = attn.data() + ((b * heads + h) * N + i) * hd;
        for (std::size_t c = 0; c < hd; ++c) {
          double acc = 0.0;
          for (std::size_t t = 0; t < visible; ++t) acc += static_cast<double>(probs[t]) * vb[t * d + h * hd + c];
          out[c] = static_cast<float>(acc);
        }
      }
    }
  }
  if (trace && L.probs) trace->integer_tensors.emplace_back("probs");
  Tensor attn_bhnd({B, heads, N, hd}, std::move(attn));
  Tensor attn_merged = merge_heads(attn_bhnd);
  if (capture) trace->acts.attn_out = std::move(attn_bhnd);
  auto in_o = prepare_input(std::move(attn_merged), concat_sites(L.attn_out), "attn_out", trace);
  Tensor o = apply_linear(L.fused.out_proj, L.out_proj, in_o, L.method);
  Tensor hidden = add(x, o);

  // FFN block.
  Tensor h2 = layernorm_forward(L.fused.ln2, hidden);
  if (capture) trace->acts.ln2_out = h2;
  auto in2 = prepare_input(std::move(h2), L.ln2_out, "ln2_out", trace);
  Tensor f1 = relu(apply_linear(L.fused.fc1, L.fc1, in2, L.method));
  if (capture) trace->acts.fc1_out = f1;
  auto in3 = prepare_input(std::move(f1), L.fc1_out, "fc1_out", trace);
  Tensor f2 = apply_linear(L.fused.fc2, L.fc2, in3, L.method);
  return add(hidden, f2);
}

QuantModel make_float_model(const ToyModel& model) {
  QuantModel qm;
  qm.dims = model.dims;
  for (const auto& w : model.layers) qm.layers.push_back(make_float_layer(w, model.dims));
  return qm;
}

std::vector<Tensor> run_model(const QuantModel& model, const Tensor& x, KVCache& cache,
                              std::vector<LayerTrace>* traces) {
  if (cache.layers.size() != model.layers.size()) {
    if (!cache.layers.empty()) throw ValidationError("KV cache layer count does not match the model");
    cache.layers.resize(model.layers.size());
  }
  if (traces) traces->resize(model.layers.size());
  std::vector<Tensor> outs;
  Tensor cur = x;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    cur = run_layer(cur, model.layers[l], cache.layers[l], traces ? &(*traces)[l] : nullptr);
    outs.push_back(cur);
  }
  return outs;
}

namespace {

LayerStats stats_from_acts(const SiteActivations& a, const ModelDims& dims) {
  LayerStats s;
  s.ln1_out = stats_of(a.ln1_out);
  s.qk = collect_qk_stats(a.q, a.k);
  for (std::size_t h = 0; h < dims.heads; ++h) {
    s.v.push_back(stats_of(head_of_bhnd(a.v, h)));
    s.attn_out.push_back(stats_of(head_of_bhnd(a.attn_out, h)));
  }
  auto [pmin, pmax] = std::minmax_element(a.probs.begin(), a.probs.end());
  s.probs_min = *pmin;
  s.probs_max = *pmax;
  s.ln2_out = stats_of(a.ln2_out);
  s.fc1_out = stats_of(a.fc1_out);
  return s;
}

}  // namespace

std::vector<LayerStats> calibrate_model(const ToyModel& model, const Tensor& inputs, std::size_t chunk) {
  if (inputs.ndim() != 3 || inputs.dim(0) == 0) throw ValidationError("calibration inputs must be [B, N, d] with B >= 1");
  chunk = std::max<std::size_t>(chunk, 1);
  std::vector<LayerStats> out(model.layers.size());
  Tensor cur = inputs;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto layer = make_float_layer(model.layers[l], model.dims);
    std::vector<float> next;
    next.reserve(cur.size());
    for (std::size_t b = 0; b < cur.dim(0); b += chunk) {
      Tensor part = sample_range(cur, b, std::min(cur.dim(0), b + chunk));
      LayerKVCache cache;
      LayerTrace trace;
      trace.capture = true;
      Tensor y = run_layer(part, layer, cache, &trace);
      out[l] = merge_layer_stats(out[l], stats_from_acts(trace.acts, model.dims));
      next.insert(next.end(), y.data().begin(), y.data().end());
    }
    cur = Tensor(cur.shape(), std::move(next));
  }
  return out;
}

QuantDecoderLayer quantize_layer(const DecoderLayerWeights& weights, const ModelDims& dims, const LayerStats& stats,
                                 const DecoderLayerPlan& plan, const QuantizeOptions& opts,
                                 const SiteActivations* gptq_calib) {
  QuantDecoderLayer L = make_float_layer(fuse_decoder_layer(weights, plan, dims), dims);
  L.bits = opts.bits;
  L.method = opts.forward;
  L.plan = plan;
  const auto& bits = opts.bits;
  const auto r2c = plan.r2_concat();
  const auto r3c = plan.r3_concat();

  auto site = [](const ReorderPlan& p, const ChannelStats& s, int b) {
    return SiteQuant{p, activation_params(p, s.permuted(p.perm), b)};
  };
  if (bits.quantizes_activations()) {
    const int a = *bits.activation_bits;
    const int ln = bits.ln_softmax_out_bits;
    L.ln1_out = site(plan.r1, stats.ln1_out, ln);
    for (std::size_t h = 0; h < dims.heads; ++h) {
      L.q[h] = site(plan.r2[h], stats.qk.heads[h].q_stats(), a);
      L.attn_out[h] = site(plan.r3[h], stats.attn_out[h], a);
    }
    L.probs = minmax_params(stats.probs_min, stats.probs_max, ln);
    L.ln2_out = site(plan.r4, stats.ln2_out, ln);
    L.fc1_out = site(plan.r5, stats.fc1_out, a);
  }
  if (bits.quantizes_kv()) {
    const int kv = *bits.kv_bits;
    for (std::size_t h = 0; h < dims.heads; ++h) {
      L.k[h] = site(plan.r2[h], stats.qk.heads[h].k_stats(), kv);
      L.v[h] = site(plan.r3[h], stats.v[h], kv);
    }
  }

  if (bits.weight_bits) {
    const int wb = *bits.weight_bits;
    if (opts.weights == WeightMethod::gptq && gptq_calib == nullptr) {
      throw ValidationError("GPTQ weight quantization needs calibration activations");
    }
    const auto id = ReorderPlan::identity(dims.hidden);
    const auto attn_site = concat_sites(L.attn_out);
    auto quant = [&](const LinearWeights& lin, const ReorderPlan& in, const ReorderPlan& out,
                     const std::vector<QuantParams>& act, const Tensor* calib) {
      WeightQuant wq = opts.weights == WeightMethod::gptq
                           ? quantize_weights_gptq(lin.w, as_rows(*calib), in, wb, opts.gptq)
                           : quantize_weights_rtn(lin.w, in, wb);
      return make_clustered_linear(lin, in, out, std::move(wq), act);
    };
    const bool g = opts.weights == WeightMethod::gptq;
    std::optional<Tensor> attn_rows;
    if (g) attn_rows = merge_heads(gptq_calib->attn_out);
    L.q_proj = quant(L.fused.q_proj, plan.r1, r2c, L.ln1_out.params, g ? &gptq_calib->ln1_out : nullptr);
    L.k_proj = quant(L.fused.k_proj, plan.r1, r2c, L.ln1_out.params, g ? &gptq_calib->ln1_out : nullptr);
    L.v_proj = quant(L.fused.v_proj, plan.r1, r3c, L.ln1_out.params, g ? &gptq_calib->ln1_out : nullptr);
    L.out_proj = quant(L.fused.out_proj, r3c, id, attn_site.params, g ? &*attn_rows : nullptr);
    L.fc1 = quant(L.fused.fc1, plan.r4, plan.r5, L.ln2_out.params, g ? &gptq_calib->ln2_out : nullptr);
    L.fc2 = quant(L.fused.fc2, plan.r5, id, L.fc1_out.params, g ? &gptq_calib->fc1_out : nullptr);
  }
  return L;
}

QuantModel quantize_model(const ToyModel& model, const std::vector<LayerStats>& stats,
                          const std::vector<DecoderLayerPlan>& plans, const QuantizeOptions& opts,
                          const Tensor& gptq_inputs) {
  if (stats.size() != model.layers.size() || plans.size() != model.layers.size()) {
    throw ValidationError("need stats and plans for every layer");
  }
  QuantModel qm;
  qm.dims = model.dims;
  qm.bits = opts.bits;
  const bool gptq = opts.weights == WeightMethod::gptq && opts.bits.weight_bits.has_value();
  Tensor cur = gptq ? first_samples(gptq_inputs, opts.gptq_samples) : Tensor{};
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    std::optional<LayerTrace> trace;
    if (gptq) {
      auto fused = make_float_layer(fuse_decoder_layer(model.layers[l], plans[l], model.dims), model.dims);
      trace.emplace();
      trace->capture = true;
      LayerKVCache cache;
      cur = run_layer(cur, fused, cache, &*trace);
    }
    qm.layers.push_back(
        quantize_layer(model.layers[l], model.dims, stats[l], plans[l], opts, trace ? &trace->acts : nullptr));
  }
  return qm;
}

SiteErrors site_quant_errors(const QuantDecoderLayer& L, const SiteActivations& acts) {
  auto mse_at = [](const Tensor& x, const SiteQuant& s) {
    if (!s.active()) return 0.0;
    return mean_squared_error(fake_quantize_with_plan(x, s.plan, s.params), x);
  };
  auto per_head = [&](const Tensor& bhnd, const std::vector<SiteQuant>& sites) {
    double sum = 0.0;
    for (std::size_t h = 0; h < sites.size(); ++h) sum += mse_at(head_of_bhnd(bhnd, h), sites[h]);
    return sites.empty() ? 0.0 : sum / static_cast<double>(sites.size());
  };
  SiteErrors e;
  e.r1 = mse_at(acts.ln1_out, L.ln1_out);
  e.r2 = 0.5 * (per_head(acts.q, L.q) + per_head(acts.k, L.k));
  e.r3 = 0.5 * (per_head(acts.v, L.v) + per_head(acts.attn_out, L.attn_out));
  e.r4 = mse_at(acts.ln2_out, L.ln2_out);
  e.r5 = mse_at(acts.fc1_out, L.fc1_out);
  return e;
}

double mean_squared_error(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ValidationError("MSE operands differ in size");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = static_cast<double>(a[i]) - b[i];
    s += t * t;
  }
  return a.size() == 0 ? 0.0 : s / static_cast<double>(a.size());
}

double max_relative_error(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ValidationError("operands differ in size");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(static_cast<double>(a[i]) - b[i]));
    den = std::max(den, std::abs(static_cast<double>(b[i])));
  }
  return den == 0.0 ? num : num / den;
}

}  // namespace rptq
