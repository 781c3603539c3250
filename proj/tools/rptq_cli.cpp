#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <optional>
#include <sstream>

#include "rptq/bundle.hpp"
#include "rptq/error.hpp"
#include "rptq/memmodel.hpp"
#include "rptq/pipeline.hpp"
#include "rptq/qtransformer.hpp"
#include "rptq/testkit.hpp"

using namespace rptq;

namespace {

struct Flags {
  std::string config, out, mode, clusters, weights, forward, model;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON run config");
  cmd->add_option("--seed", f.seed, "Seed");
  cmd->add_option("--out", f.out, "Work directory");
  cmd->add_option("--model", f.model, "Model bundle directory (default <out>/model)");
  cmd->add_option("--mode", f.mode, "W4A4|W4A8|W4A16|W4A4KV|W4A3KV|W3A3KV");
  cmd->add_option("--clusters", f.clusters, "r1,r2,r3,r4,r5");
  cmd->add_option("--weights", f.weights, "rtn|gptq");
  cmd->add_option("--forward", f.forward, "dequant|integer");
}

RunConfig resolve(const Flags& f) {
  RunConfig c = f.config.empty() ? default_run_config() : run_config_from_json(read_json_file(f.config));
  if (!f.out.empty()) c.out = f.out;
  if (!f.model.empty()) c.model = f.model;
  if (!f.mode.empty()) {
    parse_mode(f.mode);
    c.mode = f.mode;
  }
  if (!f.clusters.empty()) c.clusters = parse_cluster_counts(f.clusters);
  if (!f.weights.empty()) c.weights = parse_weight_method(f.weights);
  if (!f.forward.empty()) c.forward = parse_forward_method(f.forward);
  if (f.seed) c.seed = *f.seed;
  return c;
}

std::vector<std::size_t> parse_size_list(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      long long v = std::stoll(item);
      if (v < 1) throw ValidationError("list values must be positive");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ValidationError("malformed list value '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("empty list");
  return out;
}

std::vector<std::string> parse_string_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw ValidationError("empty list");
  return out;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

nlohmann::json site_errors_json(const SiteErrors& e) {
  return {{"R1", e.r1}, {"R2", e.r2}, {"R3", e.r3}, {"R4", e.r4}, {"R5", e.r5}};
}

int cmd_gen_model(const RunConfig& c) {
  auto model = build_toy_model(c.seed, c.dims);
  save_model_bundle(c.model_dir(), model);
  print_json({{"model", c.model_dir().string()}, {"dims", to_json(c.dims)}, {"seed", c.seed}});
  return 0;
}

int cmd_calibrate(const RunConfig& c) {
  auto model = load_model_bundle(c.model_dir());
  auto stats = calibrate_model(model, calibration_inputs(c, model));
  save_stats(c.out / "stats", stats);
  print_json({{"stats", (c.out / "stats").string()},
              {"layers", stats.size()},
              {"samples_seen", stats.front().ln1_out.samples_seen}});
  return 0;
}

int cmd_plan(const RunConfig& c) {
  auto model = load_model_bundle(c.model_dir());
  auto stats = load_stats(c.out / "stats");
  auto plans = make_plans(stats, c.clusters, model.dims, c.seed);
  check_plans(model, plans);
  save_plans(c.out / "plans", plans);
  const auto& k = c.clusters;
  print_json({{"plans", (c.out / "plans").string()}, {"clusters", {k.r1, k.r2, k.r3, k.r4, k.r5}}, {"alignment", "ok"}});
  return 0;
}

int cmd_quantize(const RunConfig& c) {
  auto model = load_model_bundle(c.model_dir());
  auto stats = load_stats(c.out / "stats");
  auto plans = load_plans(c.out / "plans");
  if (plans.size() != model.layers.size()) throw ValidationError("plans do not cover every layer");
  check_plans(model, plans);
  auto opts = quantize_options(c);
  auto qm = quantize_model(model, stats, plans, opts, calibration_inputs(c, model));
  save_quant_model(c.out / "quant", qm, opts);
  print_json({{"quant", (c.out / "quant").string()},
              {"mode", c.mode},
              {"weights", to_string(c.weights)},
              {"forward", to_string(c.forward)}});
  return 0;
}

nlohmann::json run_report(const ToyModel& model, const QuantModel& qm, const Tensor& x) {
  KVCache fc, qc;
  auto ref = run_model(make_float_model(model), x, fc);
  std::vector<LayerTrace> traces;
  auto out = run_model(qm, x, qc, &traces);
  std::vector<DecoderLayerPlan> plans;
  for (const auto& L : qm.layers) plans.push_back(L.plan);
  auto acts = fused_float_acts(model, plans, x);
  auto layers = nlohmann::json::array();
  for (std::size_t l = 0; l < out.size(); ++l) {
    layers.push_back({{"layer", l},
                      {"output_mse", mean_squared_error(out[l], ref[l])},
                      {"activation_mse", site_errors_json(site_quant_errors(qm.layers[l], acts[l]))},
                      {"integer_tensors", traces[l].integer_tensors}});
  }
  return {{"mode", qm.bits.tag}, {"layers", layers}};
}

int cmd_run(const RunConfig& c) {
  auto model = load_model_bundle(c.model_dir());
  auto qm = load_quant_model(c.out / "quant", model);
  auto report = run_report(model, qm, evaluation_inputs(c, model));
  write_json_file(c.out / "report.json", report);
  print_json(report);
  return 0;
}

int cmd_ablate(const RunConfig& c, const std::string& sites_csv, const std::string& sweep_csv, bool with_output) {
  auto model = load_model_bundle(c.model_dir());
  auto stats = load_stats(c.out / "stats");
  auto rows = run_ablation(c, model, stats, parse_string_list(sites_csv), parse_size_list(sweep_csv), with_output);
  const auto csv = ablation_csv(rows);
  write_text_file(c.out / "ablation.csv", csv);
  std::cout << csv;
  return 0;
}

struct MemestFlags {
  std::string shapes = std::string(RPTQ_DATA_DIR) + "/opt_shapes.json";
  std::string calibration = std::string(RPTQ_DATA_DIR) + "/memmodel_calibration.json";
  std::string golden_file = std::string(RPTQ_DATA_DIR) + "/table3_golden.csv";
  std::string models = "opt-30b,opt-66b,opt-175b";
  std::string modes = "W16A16,W4A16,W4A8,W4A4,W4A4KV,W4A3KV,W3A3KV";
  std::string batches = "1,8,64";
  std::string seqlens = "2048,4096,8192";
  std::string unit;
  std::string format = "csv";
  bool golden = false;
  std::string out;
};

int cmd_memest(const MemestFlags& f) {
  auto shapes = load_shapes(f.shapes);
  auto calib = load_calibration(f.calibration);
  if (!f.unit.empty()) calib.unit = parse_byte_unit(f.unit);
  std::string text;
  if (f.golden) {
    auto rows = compare_golden(load_golden(f.golden_file), shapes, calib);
    const auto within = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.rel_error <= 0.10; });
    text = golden_csv(rows);
    std::cerr << nlohmann::json{{"cells", rows.size()}, {"within_10pct", within}}.dump() << "\n";
  } else {
    std::vector<ModelShape> selected;
    for (const auto& m : parse_string_list(f.models)) selected.push_back(find_shape(shapes, m));
    std::vector<BitConfig> cfgs;
    for (const auto& m : parse_string_list(f.modes)) cfgs.push_back(parse_mode(m));
    auto rows = sweep(selected, cfgs, parse_size_list(f.batches), parse_size_list(f.seqlens), calib);
    if (f.format == "json") {
      text = sweep_json(rows, calib.unit).dump(2) + "\n";
    } else if (f.format == "csv") {
      text = sweep_csv(rows, calib.unit);
    } else {
      throw ValidationError("unknown format '" + f.format + "'");
    }
  }
  if (!f.out.empty()) write_text_file(f.out, text);
  std::cout << text;
  return 0;
}

int cmd_stats_dump(const RunConfig& c, const std::string& profile_path, std::size_t layer, const std::string& site,
                   std::size_t samples) {
  std::vector<float> mins, maxs;
  if (!profile_path.empty() || !std::filesystem::exists(c.out / "stats")) {
    ChannelProfile p;
    if (!profile_path.empty()) {
      p = channel_profile_from_json(read_json_file(profile_path));
    } else {
      p.multiplier = 200.0;
      p.outlier_fraction = 0.03;
    }
    auto x = gen_activations(p, samples, c.seq_len, c.seed);
    auto s = collect_stats(ChannelStats::empty(p.channels), x);
    mins = s.mins;
    maxs = s.maxs;
  } else {
    auto stats = load_stats(c.out / "stats");
    if (layer >= stats.size()) throw ValidationError("layer " + std::to_string(layer) + " out of range");
    const auto& L = stats[layer];
    ChannelStats s;
    if (site == "ln1_out") s = L.ln1_out;
    else if (site == "ln2_out") s = L.ln2_out;
    else if (site == "fc1_out") s = L.fc1_out;
    else throw ValidationError("stats-dump supports ln1_out, ln2_out and fc1_out");
    mins = s.mins;
    maxs = s.maxs;
  }
  std::cout.precision(8);
  std::cout << "channel,min,max\n";
  for (std::size_t i = 0; i < mins.size(); ++i) std::cout << i << ',' << mins[i] << ',' << maxs[i] << "\n";
  return 0;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reorder-based post-training quantization toolkit"};
  app.require_subcommand(1);

  Flags flags;
  auto* gen = app.add_subcommand("gen-model", "Write a seeded toy model bundle");
  auto* calibrate = app.add_subcommand("calibrate", "Collect per-site activation ranges");
  auto* plan = app.add_subcommand("plan", "Cluster channels and build reorder plans");
  auto* quantize = app.add_subcommand("quantize", "Quantize weights and activation sites");
  auto* run = app.add_subcommand("run", "Evaluate the quantized model against the float model");
  auto* ablate = app.add_subcommand("ablate", "Sweep cluster counts per reorder site");
  auto* memest = app.add_subcommand("memest", "Estimate inference memory");
  auto* dump = app.add_subcommand("stats-dump", "Per-channel min/max as CSV");
  for (auto* cmd : {gen, calibrate, plan, quantize, run, ablate, dump}) add_common(cmd, flags);

  std::string sites = "R1,R2,R3,R4,R5", sweep = "1,2,4,8,32";
  bool ablate_output = false;
  ablate->add_option("--sites", sites, "Reorder sites to sweep");
  ablate->add_option("--sweep", sweep, "Cluster counts");
  ablate->add_flag("--output-mse", ablate_output, "Also quantize weights and report layer-output MSE");

  MemestFlags mf;
  memest->add_option("--shapes", mf.shapes, "Model shapes JSON");
  memest->add_option("--calibration", mf.calibration, "Frozen dynamic-memory calibration");
  memest->add_option("--models", mf.models);
  memest->add_option("--modes", mf.modes);
  memest->add_option("--batches", mf.batches);
  memest->add_option("--seqlens", mf.seqlens);
  memest->add_option("--unit", mf.unit, "gb|gib");
  memest->add_option("--format", mf.format, "csv|json");
  memest->add_flag("--golden", mf.golden, "Compare against the reference table");
  memest->add_option("--golden-file", mf.golden_file);
  memest->add_option("--out", mf.out, "Also write the report to this file");

  std::string profile;
  std::size_t dump_layer = 0, dump_samples = 256;
  std::string dump_site = "ln1_out";
  dump->add_option("--profile", profile, "Channel profile JSON (synthetic source)");
  dump->add_option("--layer", dump_layer);
  dump->add_option("--site", dump_site, "ln1_out|ln2_out|fc1_out");
  dump->add_option("--samples", dump_samples);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("validation", e.what(), 1);
  }

  try {
    if (*memest) return cmd_memest(mf);
    const RunConfig c = resolve(flags);
    if (*gen) return cmd_gen_model(c);
    if (*calibrate) return cmd_calibrate(c);
    if (*plan) return cmd_plan(c);
    if (*quantize) return cmd_quantize(c);
    if (*run) return cmd_run(c);
    if (*ablate) return cmd_ablate(c, sites, sweep, ablate_output);
    if (*dump) return cmd_stats_dump(c, profile, dump_layer, dump_site, dump_samples);
  } catch (const ValidationError& e) {
    return fail("validation", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 2);
  }
  return 0;
}
