#include "rptq/bundle.hpp"

#include <fstream>

#include "rptq/error.hpp"

namespace rptq {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing file " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << text;
}

void write_json_file(const fs::path& path, const nlohmann::json& j) { write_text_file(path, j.dump(2) + "\n"); }

nlohmann::json to_json(const ModelDims& d) {
  return {{"layers", d.layers}, {"hidden", d.hidden}, {"heads", d.heads}, {"ffn", d.ffn}};
}

ModelDims model_dims_from_json(const nlohmann::json& j) {
  try {
    ModelDims d;
    d.layers = j.value("layers", d.layers);
    d.hidden = j.value("hidden", d.hidden);
    d.heads = j.value("heads", d.heads);
    d.ffn = j.value("ffn", d.ffn);
    d.validate();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed dims: ") + e.what());
  }
}

namespace {

fs::path layer_dir(const fs::path& dir, std::size_t l) { return dir / ("layer" + std::to_string(l)); }

Tensor vector_tensor(const std::vector<float>& v) { return Tensor({v.size()}, v); }

std::vector<float> load_vector(const fs::path& p) {
  auto t = load_tensor(p);
  return {t.data().begin(), t.data().end()};
}

void save_ln(const fs::path& dir, const std::string& name, const LayerNormOp& ln) {
  save_tensor(dir / (name + "_gamma.bin"), vector_tensor(ln.gamma));
  save_tensor(dir / (name + "_beta.bin"), vector_tensor(ln.beta));
}

LayerNormOp load_ln(const fs::path& dir, const std::string& name) {
  LayerNormOp ln;
  ln.gamma = load_vector(dir / (name + "_gamma.bin"));
  ln.beta = load_vector(dir / (name + "_beta.bin"));
  return ln;
}

void save_linear(const fs::path& dir, const std::string& name, const LinearWeights& lin) {
  save_tensor(dir / (name + "_w.bin"), lin.w);
  save_tensor(dir / (name + "_b.bin"), vector_tensor(lin.bias));
}

LinearWeights load_linear(const fs::path& dir, const std::string& name) {
  return LinearWeights::unfused(load_tensor(dir / (name + "_w.bin")), load_vector(dir / (name + "_b.bin")));
}

std::size_t count_layers(const fs::path& dir) {
  std::size_t n = 0;
  while (fs::exists(layer_dir(dir, n)) || fs::exists(dir / ("layer" + std::to_string(n) + ".json"))) ++n;
  return n;
}

template <class T, class F>
nlohmann::json json_array(const std::vector<T>& v, F f) {
  auto a = nlohmann::json::array();
  for (const auto& x : v) a.push_back(f(x));
  return a;
}

}  // namespace

void save_model_bundle(const fs::path& dir, const ToyModel& model) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_json_file(dir / "config.json", {{"dims", to_json(model.dims)}, {"seed", model.seed}});
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto d = layer_dir(dir, l);
    fs::create_directories(d);
    const auto& w = model.layers[l];
    save_ln(d, "ln1", w.ln1);
    save_linear(d, "q_proj", w.q_proj);
    save_linear(d, "k_proj", w.k_proj);
    save_linear(d, "v_proj", w.v_proj);
    save_linear(d, "out_proj", w.out_proj);
    save_ln(d, "ln2", w.ln2);
    save_linear(d, "fc1", w.fc1);
    save_linear(d, "fc2", w.fc2);
  }
}

ToyModel load_model_bundle(const fs::path& dir) {
  if (!fs::exists(dir / "config.json")) throw ValidationError("missing model bundle at " + dir.string());
  const auto cfg = read_json_file(dir / "config.json");
  ToyModel m;
  m.dims = model_dims_from_json(cfg.at("dims"));
  m.seed = cfg.value("seed", std::uint64_t{0});
  for (std::size_t l = 0; l < m.dims.layers; ++l) {
    const auto d = layer_dir(dir, l);
    DecoderLayerWeights w;
    w.ln1 = load_ln(d, "ln1");
    w.q_proj = load_linear(d, "q_proj");
    w.k_proj = load_linear(d, "k_proj");
    w.v_proj = load_linear(d, "v_proj");
    w.out_proj = load_linear(d, "out_proj");
    w.ln2 = load_ln(d, "ln2");
    w.fc1 = load_linear(d, "fc1");
    w.fc2 = load_linear(d, "fc2");
    if (w.ln1.gamma.size() != m.dims.hidden || w.q_proj.w.shape() != Shape{m.dims.hidden, m.dims.hidden} ||
        w.fc1.w.shape() != Shape{m.dims.ffn, m.dims.hidden} || w.fc2.w.shape() != Shape{m.dims.hidden, m.dims.ffn}) {
      throw ValidationError("layer " + std::to_string(l) + " weights do not match the bundle dims");
    }
    m.layers.push_back(std::move(w));
  }
  return m;
}

void save_stats(const fs::path& dir, const std::vector<LayerStats>& stats) {
  fs::remove_all(dir);
  for (std::size_t l = 0; l < stats.size(); ++l) {
    const auto d = layer_dir(dir, l);
    const auto& s = stats[l];
    write_json_file(d / "ln1_out.json", to_json(s.ln1_out));
    write_json_file(d / "qk.json", to_json(s.qk));
    for (std::size_t h = 0; h < s.v.size(); ++h) {
      write_json_file(d / ("v_head" + std::to_string(h) + ".json"), to_json(s.v[h]));
      write_json_file(d / ("attn_out_head" + std::to_string(h) + ".json"), to_json(s.attn_out[h]));
    }
    write_json_file(d / "softmax.json", {{"min", s.probs_min}, {"max", s.probs_max}});
    write_json_file(d / "ln2_out.json", to_json(s.ln2_out));
    write_json_file(d / "fc1_out.json", to_json(s.fc1_out));
  }
}

std::vector<LayerStats> load_stats(const fs::path& dir) {
  const std::size_t n = count_layers(dir);
  if (n == 0) throw ValidationError("no calibration stats in " + dir.string() + "; run calibrate first");
  std::vector<LayerStats> out;
  for (std::size_t l = 0; l < n; ++l) {
    const auto d = layer_dir(dir, l);
    LayerStats s;
    s.ln1_out = channel_stats_from_json(read_json_file(d / "ln1_out.json"));
    s.qk = qk_stats_from_json(read_json_file(d / "qk.json"));
    for (std::size_t h = 0; h < s.qk.heads.size(); ++h) {
      s.v.push_back(channel_stats_from_json(read_json_file(d / ("v_head" + std::to_string(h) + ".json"))));
      s.attn_out.push_back(
          channel_stats_from_json(read_json_file(d / ("attn_out_head" + std::to_string(h) + ".json"))));
    }
    const auto sm = read_json_file(d / "softmax.json");
    s.probs_min = sm.at("min").get<float>();
    s.probs_max = sm.at("max").get<float>();
    s.ln2_out = channel_stats_from_json(read_json_file(d / "ln2_out.json"));
    s.fc1_out = channel_stats_from_json(read_json_file(d / "fc1_out.json"));
    out.push_back(std::move(s));
  }
  return out;
}

void save_plans(const fs::path& dir, const std::vector<DecoderLayerPlan>& plans) {
  fs::remove_all(dir);
  for (std::size_t l = 0; l < plans.size(); ++l) {
    write_json_file(dir / ("layer" + std::to_string(l) + ".json"), to_json(plans[l]));
  }
}

std::vector<DecoderLayerPlan> load_plans(const fs::path& dir) {
  const std::size_t n = count_layers(dir);
  if (n == 0) throw ValidationError("no reorder plans in " + dir.string() + "; run plan first");
  std::vector<DecoderLayerPlan> out;
  for (std::size_t l = 0; l < n; ++l) {
    out.push_back(layer_plan_from_json(read_json_file(dir / ("layer" + std::to_string(l) + ".json"))));
  }
  return out;
}

std::string to_string(WeightMethod m) { return m == WeightMethod::gptq ? "gptq" : "rtn"; }
std::string to_string(ForwardMethod m) { return m == ForwardMethod::integer ? "integer" : "dequant"; }

WeightMethod parse_weight_method(const std::string& s) {
  if (s == "gptq") return WeightMethod::gptq;
  if (s == "rtn") return WeightMethod::rtn;
  throw ValidationError("unknown weight method '" + s + "' (expected rtn or gptq)");
}

ForwardMethod parse_forward_method(const std::string& s) {
  if (s == "dequant") return ForwardMethod::dequant;
  if (s == "integer") return ForwardMethod::integer;
  throw ValidationError("unknown forward method '" + s + "' (expected dequant or integer)");
}

namespace {

const char* const kLinearNames[] = {"q_proj", "k_proj", "v_proj", "out_proj", "fc1", "fc2"};

std::optional<ClusteredQuantLinear>& linear_slot(QuantDecoderLayer& L, std::size_t i) {
  std::optional<ClusteredQuantLinear>* slots[] = {&L.q_proj, &L.k_proj, &L.v_proj, &L.out_proj, &L.fc1, &L.fc2};
  return *slots[i];
}

const std::optional<ClusteredQuantLinear>& linear_slot(const QuantDecoderLayer& L, std::size_t i) {
  return linear_slot(const_cast<QuantDecoderLayer&>(L), i);
}

const LinearWeights& fused_linear(const QuantDecoderLayer& L, std::size_t i) {
  const LinearWeights* w[] = {&L.fused.q_proj,  &L.fused.k_proj, &L.fused.v_proj,
                              &L.fused.out_proj, &L.fused.fc1,    &L.fused.fc2};
  return *w[i];
}

nlohmann::json site_params(const std::vector<SiteQuant>& v) {
  return json_array(v, [](const SiteQuant& s) { return params_to_json(s.params); });
}

}  // namespace

void save_quant_model(const fs::path& dir, const QuantModel& model, const QuantizeOptions& opts) {
  fs::remove_all(dir);
  write_json_file(dir / "config.json", {{"mode", opts.bits.tag},
                                        {"weights", to_string(opts.weights)},
                                        {"forward", to_string(opts.forward)},
                                        {"dims", to_json(model.dims)},
                                        {"gptq_damp", opts.gptq.damp},
                                        {"gptq_cross_cluster", opts.gptq.cross_cluster}});
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& L = model.layers[l];
    const auto d = layer_dir(dir, l);
    write_json_file(d / "plan.json", to_json(L.plan));
    nlohmann::json sites = {{"ln1_out", params_to_json(L.ln1_out.params)},
                            {"q", site_params(L.q)},
                            {"k", site_params(L.k)},
                            {"v", site_params(L.v)},
                            {"attn_out", site_params(L.attn_out)},
                            {"softmax", L.probs ? to_json(*L.probs) : nlohmann::json(nullptr)},
                            {"ln2_out", params_to_json(L.ln2_out.params)},
                            {"fc1_out", params_to_json(L.fc1_out.params)}};
    write_json_file(d / "sites.json", sites);
    for (std::size_t i = 0; i < 6; ++i) {
      const auto& slot = linear_slot(L, i);
      if (!slot) continue;
      save_tensor(d / (std::string(kLinearNames[i]) + ".codes.bin"), slot->wq);
      write_json_file(d / (std::string(kLinearNames[i]) + ".params.json"), params_to_json(slot->w_params));
    }
  }
}

QuantModel load_quant_model(const fs::path& dir, const ToyModel& base) {
  if (!fs::exists(dir / "config.json")) throw ValidationError("no quantized model in " + dir.string() + "; run quantize first");
  const auto cfg = read_json_file(dir / "config.json");
  QuantizeOptions opts;
  opts.bits = parse_mode(cfg.at("mode").get<std::string>());
  opts.weights = parse_weight_method(cfg.at("weights").get<std::string>());
  opts.forward = parse_forward_method(cfg.at("forward").get<std::string>());
  if (!(model_dims_from_json(cfg.at("dims")) == base.dims)) {
    throw ValidationError("quantized model dims do not match the model bundle");
  }
  QuantModel qm;
  qm.dims = base.dims;
  qm.bits = opts.bits;
  const std::size_t H = base.dims.heads;
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    const auto d = layer_dir(dir, l);
    const auto plan = layer_plan_from_json(read_json_file(d / "plan.json"));
    auto L = make_float_layer(fuse_decoder_layer(base.layers[l], plan, base.dims), base.dims);
    L.bits = opts.bits;
    L.method = opts.forward;
    L.plan = plan;
    const auto sites = read_json_file(d / "sites.json");
    L.ln1_out = {plan.r1, params_from_json(sites.at("ln1_out"))};
    for (std::size_t h = 0; h < H; ++h) {
      L.q[h] = {plan.r2.at(h), params_from_json(sites.at("q").at(h))};
      L.k[h] = {plan.r2.at(h), params_from_json(sites.at("k").at(h))};
      L.v[h] = {plan.r3.at(h), params_from_json(sites.at("v").at(h))};
      L.attn_out[h] = {plan.r3.at(h), params_from_json(sites.at("attn_out").at(h))};
    }
    if (!sites.at("softmax").is_null()) L.probs = quant_params_from_json(sites.at("softmax"));
    L.ln2_out = {plan.r4, params_from_json(sites.at("ln2_out"))};
    L.fc1_out = {plan.r5, params_from_json(sites.at("fc1_out"))};

    std::vector<QuantParams> attn_params;
    for (const auto& s : L.attn_out) attn_params.insert(attn_params.end(), s.params.begin(), s.params.end());
    const auto id = ReorderPlan::identity(base.dims.hidden);
    const ReorderPlan r2c = plan.r2_concat(), r3c = plan.r3_concat();
    const ReorderPlan* in_plans[] = {&plan.r1, &plan.r1, &plan.r1, &r3c, &plan.r4, &plan.r5};
    const ReorderPlan* out_plans[] = {&r2c, &r2c, &r3c, &id, &plan.r5, &id};
    const std::vector<QuantParams>* acts[] = {&L.ln1_out.params, &L.ln1_out.params, &L.ln1_out.params,
                                              &attn_params,      &L.ln2_out.params, &L.fc1_out.params};
    for (std::size_t i = 0; i < 6; ++i) {
      const auto codes = d / (std::string(kLinearNames[i]) + ".codes.bin");
      if (!fs::exists(codes)) continue;
      WeightQuant wq;
      wq.params = params_from_json(read_json_file(d / (std::string(kLinearNames[i]) + ".params.json")));
      if (wq.params.empty()) throw ValidationError("weight params missing for " + codes.string());
      wq.codes = load_int_tensor(codes, wq.params.front().bits);
      linear_slot(L, i) = make_clustered_linear(fused_linear(L, i), *in_plans[i], *out_plans[i], std::move(wq),
                                                *acts[i]);
    }
    qm.layers.push_back(std::move(L));
  }
  return qm;
}

nlohmann::json to_json(const RunConfig& c) {
  const auto& k = c.clusters;
  return {{"model", c.model.string()},
          {"out", c.out.string()},
          {"mode", c.mode},
          {"clusters", {k.r1, k.r2, k.r3, k.r4, k.r5}},
          {"calib_samples", c.calib_samples},
          {"eval_samples", c.eval_samples},
          {"seq_len", c.seq_len},
          {"seed", c.seed},
          {"weights", to_string(c.weights)},
          {"forward", to_string(c.forward)},
          {"gptq_samples", c.gptq_samples},
          {"dims", to_json(c.dims)},
          {"input_profile", to_json(c.input_profile)}};
}

RunConfig default_run_config() {
  RunConfig c;
  c.input_profile.channels = c.dims.hidden;
  c.input_profile.outlier_fraction = 0.03;
  c.input_profile.multiplier = 10.0;
  c.input_profile.offset_spread = 0.5;
  return c;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c = default_run_config();
  try {
    if (j.contains("model")) c.model = j.at("model").get<std::string>();
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    c.mode = j.value("mode", c.mode);
    if (j.contains("clusters")) {
      const auto& v = j.at("clusters");
      std::string csv;
      for (std::size_t i = 0; i < v.size(); ++i) csv += (i ? "," : "") + std::to_string(v.at(i).get<long long>());
      c.clusters = parse_cluster_counts(csv);
    }
    c.calib_samples = j.value("calib_samples", c.calib_samples);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.seed = j.value("seed", c.seed);
    if (j.contains("weights")) c.weights = parse_weight_method(j.at("weights").get<std::string>());
    if (j.contains("forward")) c.forward = parse_forward_method(j.at("forward").get<std::string>());
    c.gptq_samples = j.value("gptq_samples", c.gptq_samples);
    if (j.contains("dims")) c.dims = model_dims_from_json(j.at("dims"));
    c.input_profile.channels = c.dims.hidden;
    if (j.contains("input_profile")) c.input_profile = channel_profile_from_json(j.at("input_profile"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed run config: ") + e.what());
  }
  parse_mode(c.mode);
  if (c.calib_samples == 0) throw ValidationError("calibration needs at least one sample");
  if (c.seq_len == 0 || c.eval_samples == 0) throw ValidationError("sequence length and eval samples must be positive");
  return c;
}

namespace {

Tensor inputs_for(const RunConfig& c, const ToyModel& model, std::size_t samples, std::uint64_t stream) {
  auto profile = c.input_profile;
  profile.channels = model.dims.hidden;
  profile.seed = model.seed;
  return gen_activations(profile, samples, c.seq_len, c.seed * 2 + stream);
}

}  // namespace

Tensor calibration_inputs(const RunConfig& c, const ToyModel& model) {
  return inputs_for(c, model, c.calib_samples, 0);
}
Tensor evaluation_inputs(const RunConfig& c, const ToyModel& model) {
  return inputs_for(c, model, c.eval_samples, 1);
}

}  // namespace rptq
