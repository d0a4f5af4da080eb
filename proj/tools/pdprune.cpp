// Command-line front end: analysis, search, distillation, KV selection, the
// two-node simulation, and bandwidth reports over a small self-contained
// transformer instance.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "pdprune/distill.hpp"
#include "pdprune/io_json.hpp"
#include "pdprune/kv_pruning.hpp"
#include "pdprune/manifest.hpp"
#include "pdprune/presets.hpp"
#include "pdprune/removal.hpp"
#include "pdprune/runtime.hpp"
#include "pdprune/search.hpp"
#include "pdprune/train.hpp"

namespace fs = std::filesystem;
using namespace pdprune;

namespace {

struct CliOptions {
  std::string out_dir = "out";
  std::string config_path;
  std::optional<std::uint64_t> seed_flag;
  bool json_output = false;
};

// Seed precedence: CLI flag > PDPRUNE_SEED > config file > preset defaults.
std::optional<std::uint64_t> explicit_seed(const CliOptions& opt, const Json* config) {
  if (opt.seed_flag) return *opt.seed_flag;
  if (const char* env = std::getenv("PDPRUNE_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError("PDPRUNE_SEED is not an unsigned integer");
    }
  }
  if (config && config->contains("seed")) return config->at("seed").get<std::uint64_t>();
  return std::nullopt;
}

ToyPreset resolve_preset(const CliOptions& opt) {
  ToyPreset p = toy_preset();
  std::optional<Json> config;
  if (!opt.config_path.empty()) config = read_json_file(opt.config_path);
  const Json* cfg = config ? &*config : nullptr;
  if (cfg) {
    if (cfg->contains("k")) p.k = cfg->at("k").get<int>();
    if (cfg->contains("d_threshold")) p.d_threshold = cfg->at("d_threshold").get<double>();
    if (cfg->contains("stage_threshold"))
      p.stage_threshold = cfg->at("stage_threshold").get<double>();
    if (cfg->contains("kv_p")) p.kv_p = cfg->at("kv_p").get<double>();
    if (cfg->contains("kv_gamma")) p.kv_gamma = cfg->at("kv_gamma").get<double>();
    if (cfg->contains("kv_n")) p.kv_n = cfg->at("kv_n").get<int>();
    if (cfg->contains("decode_steps")) p.decode_steps = cfg->at("decode_steps").get<int>();
    if (cfg->contains("schedule")) {
      const Json& s = cfg->at("schedule");
      p.schedule.t0 = s.at("t0").get<double>();
      p.schedule.alpha = s.at("alpha").get<double>();
      p.schedule.t_min = s.at("t_min").get<double>();
    }
  }
  // the preset carries separate model and search seeds; an explicit seed
  // overrides both
  if (auto s = explicit_seed(opt, cfg)) {
    p.seed = *s;
    p.schedule.seed = *s;
  }
  return p;
}

std::string model_path(const CliOptions& opt) {
  return (fs::path(opt.out_dir) / "model.ckpt").string();
}

TransformerModel load_model_or_fail(const CliOptions& opt,
                                    std::vector<MergedBlockRecord>* merged = nullptr) {
  std::string path = model_path(opt);
  if (!fs::exists(path))
    throw IoError("model checkpoint not found: " + path + " (run `analyze` first)");
  return load_checkpoint(path, merged);
}

std::vector<double> load_redundancy(const CliOptions& opt, SetPartition* part_out = nullptr) {
  RedundancyProfile profile;
  SetPartition part;
  analysis_from_json(read_json_file((fs::path(opt.out_dir) / "analysis.json").string()),
                     profile, part);
  if (part_out) *part_out = part;
  return profile.r;
}

int cmd_analyze(const CliOptions& opt) {
  ToyPreset p = resolve_preset(opt);
  fs::create_directories(opt.out_dir);
  TransformerModel model = toy_model(p);
  std::vector<TokenSeq> calib = toy_calibration(p);
  std::vector<HiddenTrace> traces = collect_traces(full_view(model), calib);
  RedundancyProfile profile = compute_profile(traces);
  SetPartition part = build_partition(profile, p.k, p.d_threshold);
  save_checkpoint(model_path(opt), model);
  Json j = analysis_to_json(profile, part);
  write_json_file((fs::path(opt.out_dir) / "analysis.json").string(), j);
  if (opt.json_output)
    std::cout << j.dump(2) << "\n";
  else
    std::cout << "analysis written: " << profile.r.size() << " blocks, "
              << part.distillation.size() << " distillation pairs, |P_initial|="
              << part.p_initial.size() << "\n";
  return 0;
}

int cmd_search(const CliOptions& opt, bool oracle) {
  ToyPreset p = resolve_preset(opt);
  TransformerModel model = load_model_or_fail(opt);
  std::vector<TokenSeq> calib = toy_calibration(p);
  SetPartition part;
  std::vector<double> r = load_redundancy(opt, &part);

  Objective objective = [&](const ElementSet& elems) {
    return objective_accuracy(model, calib, elems, r, ObjectiveMode::Unified);
  };
  SearchResult res = run_annealing(part, r, p.k, p.schedule, objective);

  StageObjective stage_objective = [&](const ElementSet& prefill, const ElementSet& decode) {
    ModelView pv = make_view(model, prefill, r);
    ModelView dv = make_view(model, decode, r);
    return split_accuracy(pv, dv, calib);
  };
  StagePlan plan = assign_stages(res.best, stage_objective, p.stage_threshold);

  Json j = plan_to_json(plan, res);
  j["k"] = p.k;
  j["seed"] = p.seed;
  j["schedule"] = {{"t0", p.schedule.t0}, {"alpha", p.schedule.alpha}, {"t_min", p.schedule.t_min}};
  if (oracle) {
    SearchResult brute = brute_force_optimum(part, r, p.k, objective);
    j["oracle_objective"] = brute.best_f;
    j["oracle_match"] = (res.best_f == brute.best_f);
  }
  write_json_file((fs::path(opt.out_dir) / "plan.json").string(), j);
  if (opt.json_output)
    std::cout << j.dump(2) << "\n";
  else {
    std::cout << "plan written: f=" << res.best_f << " after " << res.iterations
              << " iterations";
    if (oracle) std::cout << ", oracle_match=" << (j["oracle_match"].get<bool>() ? "true" : "false");
    std::cout << "\n";
  }
  if (oracle && !j["oracle_match"].get<bool>()) return 1;
  return 0;
}

int cmd_distill(const CliOptions& opt, int steps, double lr) {
  ToyPreset p = resolve_preset(opt);
  TransformerModel model = load_model_or_fail(opt);
  std::vector<TokenSeq> calib = toy_calibration(p);
  std::vector<double> r = load_redundancy(opt);
  StagePlan plan = plan_from_json(read_json_file((fs::path(opt.out_dir) / "plan.json").string()));

  std::vector<HiddenTrace> traces = collect_traces(full_view(model), calib);
  std::vector<MergedBlockRecord> records;
  for (const auto& e : plan.decode_removals) {
    if (e.kind != ElementKind::Distill) continue;
    DistillJob job;
    job.pair_low = e.block;
    job.samples = capture_pair_activations(traces, e.block);
    job.steps = steps;
    job.lr = lr;
    job.seed = p.seed;
    DistillResult res = distill_pair(model, job, r);
    MergedBlockRecord rec;
    rec.pair_low = e.block;
    rec.steps = static_cast<std::uint32_t>(res.steps);
    rec.initial_mse = res.initial_mse;
    rec.final_mse = res.final_mse;
    rec.params = std::move(res.merged);
    std::cout << "distilled pair (" << e.block << "," << e.block + 1
              << "): mse " << rec.initial_mse << " -> " << rec.final_mse << "\n";
    records.push_back(std::move(rec));
  }
  save_checkpoint(model_path(opt), model, records);
  std::cout << records.size() << " merged block(s) written to the checkpoint\n";
  return 0;
}

int cmd_kv_select(const CliOptions& opt) {
  ToyPreset p = resolve_preset(opt);
  std::vector<MergedBlockRecord> records;
  TransformerModel model = load_model_or_fail(opt, &records);
  std::vector<TokenSeq> calib = toy_calibration(p);
  std::vector<double> r = load_redundancy(opt);
  StagePlan plan = plan_from_json(read_json_file((fs::path(opt.out_dir) / "plan.json").string()));

  ModelView prefill_view = make_view(model, plan.prefill_removals, r);
  AttentionStats stats = collect_attention_stats(prefill_view, calib);
  KVSelectionPlan kv_plan = select_layers(stats, p.kv_p, p.kv_gamma, p.kv_n);
  Json j = kv_plan_to_json(kv_plan);
  write_json_file((fs::path(opt.out_dir) / "kvplan.json").string(), j);
  if (opt.json_output)
    std::cout << j.dump(2) << "\n";
  else
    std::cout << "kv plan written: " << kv_plan.selected_layers.size()
              << " layer(s) selected" << (kv_plan.truncated ? " (truncated)" : "") << "\n";
  return 0;
}

int cmd_simulate(const CliOptions& opt, bool check_oracle, int steps_override) {
  ToyPreset p = resolve_preset(opt);
  std::vector<MergedBlockRecord> records;
  TransformerModel model = load_model_or_fail(opt, &records);
  std::vector<double> r = load_redundancy(opt);
  StagePlan plan = plan_from_json(read_json_file((fs::path(opt.out_dir) / "plan.json").string()));
  KVSelectionPlan kv_plan =
      kv_plan_from_json(read_json_file((fs::path(opt.out_dir) / "kvplan.json").string()));
  std::map<int, BlockParams> merged;
  for (auto& rec : records) merged[rec.pair_low] = std::move(rec.params);

  const int steps = steps_override > 0 ? steps_override : p.decode_steps;
  TokenSeq prompt = toy_calibration(p).front();
  ModelViews views = apply_distillation(model, plan, merged);

  // Real two-node run over a loopback socket: the prefill side ships the
  // manifest bytes, the decode side receives and generates.
  PrefillNodeResult pre = run_prefill_node(views.prefill, prompt, kv_plan, plan);
  LoopbackListener listener;
  std::vector<std::uint8_t> received;
  std::thread decode_side([&] { received = listener.accept_and_receive(); });
  loopback_send(listener.port(), pre.manifest);
  decode_side.join();
  TokenSeq transcript = run_decode_node(views.decode, received, pre.first_token, steps);

  LinkModel link{1e9, 1e-3};
  TransferMetrics metrics = transfer_metrics(pre.manifest, link);

  Json j;
  j["format_version"] = kArtifactFormatVersion;
  j["prompt"] = prompt;
  j["transcript"] = transcript;
  j["manifest_bytes"] = metrics.volume_bytes;
  j["simulated_seconds"] = metrics.seconds;
  j["wire_round_trip_identical"] = (received == pre.manifest);
  if (check_oracle) {
    TokenSeq reference = reference_unified_run(model, plan, kv_plan, prompt, steps, merged);
    j["reference_transcript"] = reference;
    j["transcripts_equal"] = (transcript == reference);
  }
  write_json_file((fs::path(opt.out_dir) / "metrics.json").string(), j);
  if (opt.json_output)
    std::cout << j.dump(2) << "\n";
  else {
    std::cout << "transcript:";
    for (int t : transcript) std::cout << ' ' << t;
    std::cout << "\nmanifest " << metrics.volume_bytes << " bytes, "
              << metrics.seconds << " s simulated\n";
    if (check_oracle)
      std::cout << "transcripts_equal: "
                << (j["transcripts_equal"].get<bool>() ? "true" : "false") << "\n";
  }
  if (check_oracle && !j["transcripts_equal"].get<bool>()) return 1;
  return 0;
}

int cmd_bandwidth(const CliOptions& opt, const std::string& scenario_path) {
  TransferScenario s;
  if (!scenario_path.empty()) {
    s = scenario_from_json(read_json_file(scenario_path));
  } else {
    ToyPreset p = resolve_preset(opt);
    std::vector<double> r = load_redundancy(opt);
    StagePlan plan =
        plan_from_json(read_json_file((fs::path(opt.out_dir) / "plan.json").string()));
    KVSelectionPlan kv_plan =
        kv_plan_from_json(read_json_file((fs::path(opt.out_dir) / "kvplan.json").string()));
    s = scenario_from_plans(p.config, kv_plan.n_tokens, plan, kv_plan);
    s.name = "toy";
  }
  TransferVolume v = transfer_volume(s);
  Json j;
  j["format_version"] = kArtifactFormatVersion;
  j["scenario"] = s.name;
  j["bytes_full"] = v.bytes_full;
  j["bytes_pruned"] = v.bytes_pruned;
  j["ratio"] = v.ratio;
  if (opt.json_output) {
    std::cout << j.dump(2) << "\n";
  } else {
    const double gib = 1024.0 * 1024.0 * 1024.0;
    std::cout << s.name << ": full=" << static_cast<double>(v.bytes_full) / gib
              << " GB pruned=" << static_cast<double>(v.bytes_pruned) / gib
              << " GB ratio=" << v.ratio << "\n";
  }
  return 0;
}

int cmd_verify(const CliOptions& opt) {
  // Full pipeline on a fresh output directory; every stage's own invariants
  // plus the oracle cross-checks must hold.
  int rc = cmd_analyze(opt);
  if (rc == 0) rc = cmd_search(opt, /*oracle=*/true);
  if (rc == 0) rc = cmd_distill(opt, /*steps=*/200, /*lr=*/1e-3);
  if (rc == 0) rc = cmd_kv_select(opt);
  if (rc == 0) rc = cmd_simulate(opt, /*check_oracle=*/true, /*steps_override=*/0);
  if (rc == 0) rc = cmd_bandwidth(opt, "");
  std::cout << (rc == 0 ? "verify: all checks passed\n" : "verify: FAILED\n");
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PD-disaggregated pruning toolkit"};
  app.require_subcommand(1);

  CliOptions opt;
  app.add_option("-o,--out", opt.out_dir, "artifact output directory");
  app.add_option("-c,--config", opt.config_path, "JSON run configuration");
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "RNG seed (overrides env and config)");
  app.add_flag("--json", opt.json_output, "machine-readable output");

  auto* analyze = app.add_subcommand("analyze", "build/train the model and write analysis.json");
  auto* search = app.add_subcommand("search", "run the annealed search and write plan.json");
  bool oracle = false;
  search->add_flag("--oracle", oracle, "also run the exhaustive search and record agreement");
  double t0 = 0, alpha = 0, t_min = 0;
  bool have_schedule = false;
  search->add_option_function<std::string>(
      "--schedule",
      [&](const std::string& s) {
        if (std::sscanf(s.c_str(), "%lf,%lf,%lf", &t0, &alpha, &t_min) != 3)
          throw CLI::ValidationError("--schedule expects T0,alpha,Tmin");
        have_schedule = true;
      },
      "annealing schedule as T0,alpha,Tmin");
  auto* distill = app.add_subcommand("distill", "train merged blocks for the plan's pairs");
  int distill_steps = 200;
  double distill_lr = 1e-3;
  distill->add_option("--steps", distill_steps, "optimizer steps per pair");
  distill->add_option("--lr", distill_lr, "learning rate");
  auto* kv_select = app.add_subcommand("kv-select", "select KV-pruned layers, write kvplan.json");
  auto* simulate = app.add_subcommand("simulate", "two-node run over a loopback socket");
  bool check_oracle = false;
  int sim_steps = 0;
  simulate->add_flag("--check-oracle", check_oracle, "compare against the unified reference");
  simulate->add_option("--steps", sim_steps, "decode steps");
  auto* bandwidth = app.add_subcommand("bandwidth", "transfer-volume report");
  std::string scenario_path;
  bandwidth->add_option("--scenario", scenario_path, "scenario JSON (default: derive from plans)");
  auto* verify = app.add_subcommand("verify", "run the full invariant suite");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) opt.seed_flag = seed_value;

  try {
    if (*analyze) return cmd_analyze(opt);
    if (*search) {
      if (have_schedule) {
        // applied via a temp config overlay: flags win over the file
        Json overlay;
        if (!opt.config_path.empty()) overlay = read_json_file(opt.config_path);
        overlay["schedule"] = {{"t0", t0}, {"alpha", alpha}, {"t_min", t_min}};
        std::string tmp = (fs::path(opt.out_dir) / ".schedule-overlay.json").string();
        fs::create_directories(opt.out_dir);
        write_json_file(tmp, overlay);
        opt.config_path = tmp;
      }
      return cmd_search(opt, oracle);
    }
    if (*distill) return cmd_distill(opt, distill_steps, distill_lr);
    if (*kv_select) return cmd_kv_select(opt);
    if (*simulate) return cmd_simulate(opt, check_oracle, sim_steps);
    if (*bandwidth) return cmd_bandwidth(opt, scenario_path);
    if (*verify) return cmd_verify(opt);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
