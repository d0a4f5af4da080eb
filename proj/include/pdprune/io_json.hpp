#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "pdprune/analysis.hpp"
#include "pdprune/errors.hpp"
#include "pdprune/kv_pruning.hpp"
#include "pdprune/removal.hpp"
#include "pdprune/search.hpp"

namespace pdprune {

using Json = nlohmann::ordered_json;

inline constexpr int kArtifactFormatVersion = 1;

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << j.dump(2) << '\n';
  if (!f) throw IoError("write failed: " + path);
}

inline Json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path);
  Json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("invalid JSON in " + path + ": " + e.what());
  }
  return j;
}

inline void check_format_version(const Json& j, const std::string& what) {
  if (!j.contains("format_version") || j["format_version"].get<int>() != kArtifactFormatVersion)
    throw IoError(what + ": missing or unsupported format_version");
}

// --- removal elements / plans ---

inline Json element_to_json(const RemovalElement& e) {
  Json j;
  j["kind"] = e.kind == ElementKind::Prune ? "prune" : "distill";
  j["block"] = e.block;
  return j;
}

inline RemovalElement element_from_json(const Json& j) {
  RemovalElement e;
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "prune")
    e.kind = ElementKind::Prune;
  else if (kind == "distill")
    e.kind = ElementKind::Distill;
  else
    throw IoError("unknown removal element kind: " + kind);
  e.block = j.at("block").get<int>();
  return e;
}

inline Json elements_to_json(const ElementSet& s) {
  Json arr = Json::array();
  for (const auto& e : s) arr.push_back(element_to_json(e));
  return arr;
}

inline ElementSet elements_from_json(const Json& arr) {
  ElementSet s;
  for (const auto& j : arr) s.push_back(element_from_json(j));
  return s;
}

// --- analysis.json ---

inline Json analysis_to_json(const RedundancyProfile& profile, const SetPartition& part) {
  Json j;
  j["format_version"] = kArtifactFormatVersion;
  j["redundancy"] = profile.r;
  j["pair_metric"] = profile.d;
  j["p_initial"] = std::vector<int>(part.p_initial.begin(), part.p_initial.end());
  Json pairs = Json::array();
  Json metrics = Json::array();
  for (const auto& p : part.distillation) {
    pairs.push_back({p.low, p.low + 1});
    metrics.push_back(p.metric);
  }
  j["distillation_pairs"] = pairs;
  j["distillation_metrics"] = metrics;
  j["p_final"] = std::vector<int>(part.p_final.begin(), part.p_final.end());
  j["d_threshold"] = part.d_threshold;
  return j;
}

inline void analysis_from_json(const Json& j, RedundancyProfile& profile, SetPartition& part) {
  check_format_version(j, "analysis");
  profile.r = j.at("redundancy").get<std::vector<double>>();
  profile.d = j.at("pair_metric").get<std::vector<double>>();
  for (int b : j.at("p_initial").get<std::vector<int>>()) part.p_initial.insert(b);
  const Json& pairs = j.at("distillation_pairs");
  const Json& metrics = j.at("distillation_metrics");
  for (std::size_t i = 0; i < pairs.size(); ++i)
    part.distillation.push_back({pairs[i][0].get<int>(), metrics[i].get<double>()});
  for (int b : j.at("p_final").get<std::vector<int>>()) part.p_final.insert(b);
  part.d_threshold = j.at("d_threshold").get<double>();
}

// --- plan.json ---

inline Json plan_to_json(const StagePlan& plan, const SearchResult& search,
                         bool include_audit = true) {
  Json j;
  j["format_version"] = kArtifactFormatVersion;
  j["prefill_removals"] = elements_to_json(plan.prefill_removals);
  j["decode_removals"] = elements_to_json(plan.decode_removals);
  j["threshold"] = plan.threshold;
  j["best_objective"] = search.best_f;
  j["initial_objective"] = search.initial_f;
  j["iterations"] = search.iterations;
  if (include_audit) {
    Json audit = Json::array();
    for (const auto& a : search.audit) {
      Json e;
      e["iteration"] = a.iteration;
      e["temperature"] = a.temperature;
      e["skipped"] = a.skipped;
      if (!a.skipped) {
        e["candidate"] = elements_to_json(a.candidate);
        e["objective"] = a.f;
        e["accepted"] = a.accepted;
      }
      audit.push_back(std::move(e));
    }
    j["audit"] = std::move(audit);
  }
  return j;
}

inline StagePlan plan_from_json(const Json& j) {
  check_format_version(j, "plan");
  StagePlan plan;
  plan.prefill_removals = elements_from_json(j.at("prefill_removals"));
  plan.decode_removals = elements_from_json(j.at("decode_removals"));
  plan.threshold = j.at("threshold").get<double>();
  plan.validate();
  return plan;
}

// --- kvplan.json ---

inline Json kv_plan_to_json(const KVSelectionPlan& plan) {
  Json j;
  j["format_version"] = kArtifactFormatVersion;
  j["p"] = plan.p;
  j["gamma"] = plan.gamma;
  j["n_requested"] = plan.n_requested;
  j["selected_layers"] = plan.selected_layers;
  j["n_tokens"] = plan.n_tokens;
  j["retained_indices"] = plan.retained.indices;
  j["retention_degenerate"] = plan.retained.degenerate;
  j["truncated"] = plan.truncated;
  return j;
}

inline KVSelectionPlan kv_plan_from_json(const Json& j) {
  check_format_version(j, "kv plan");
  KVSelectionPlan plan;
  plan.p = j.at("p").get<double>();
  plan.gamma = j.at("gamma").get<double>();
  plan.n_requested = j.at("n_requested").get<int>();
  plan.selected_layers = j.at("selected_layers").get<std::vector<int>>();
  plan.n_tokens = j.at("n_tokens").get<int>();
  plan.retained.indices = j.at("retained_indices").get<std::vector<int>>();
  plan.retained.degenerate = j.at("retention_degenerate").get<bool>();
  plan.truncated = j.at("truncated").get<bool>();
  return plan;
}

// --- scenario.json ---

inline Json scenario_to_json(const TransferScenario& s) {
  Json j;
  j["format_version"] = kArtifactFormatVersion;
  j["name"] = s.name;
  j["total_layers"] = s.total_layers;
  j["prefill_retained_layers"] = s.prefill_retained_layers;
  j["decode_removed_layers"] = s.decode_removed_layers;
  j["selected_layers"] = s.selected_layers;
  j["kv_bytes_per_token_per_layer"] = s.kv_bytes_per_token_per_layer;
  j["n_tokens"] = s.n_tokens;
  j["p"] = s.p;
  if (s.calibrated) {
    j["calibrated"] = true;
    j["target_ratio"] = s.target_ratio;
  }
  return j;
}

inline TransferScenario scenario_from_json(const Json& j) {
  check_format_version(j, "scenario");
  TransferScenario s;
  s.name = j.at("name").get<std::string>();
  s.total_layers = j.at("total_layers").get<int>();
  s.prefill_retained_layers = j.at("prefill_retained_layers").get<int>();
  s.decode_removed_layers = j.at("decode_removed_layers").get<int>();
  s.selected_layers = j.at("selected_layers").get<int>();
  s.kv_bytes_per_token_per_layer = j.at("kv_bytes_per_token_per_layer").get<std::uint64_t>();
  s.n_tokens = j.at("n_tokens").get<std::uint64_t>();
  s.p = j.at("p").get<double>();
  s.calibrated = j.value("calibrated", false);
  s.target_ratio = j.value("target_ratio", 0.0);
  s.validate();
  return s;
}

}  // namespace pdprune
