#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <vector>

#include "pdprune/errors.hpp"
#include "pdprune/removal.hpp"
#include "pdprune/transformer.hpp"

namespace pdprune {

// First/last retained token indices: {0..m-1} ∪ {N-m..N-1} with m = ⌊pN⌋.
// Empty (m = 0) is allowed but flagged.
struct RetentionIndices {
  std::vector<int> indices;
  bool degenerate = false;
};

inline RetentionIndices retention_indices(int n_tokens, double p) {
  if (!(p > 0.0 && p < 0.5)) throw ArgumentError("retention ratio p must be in (0, 0.5)");
  if (n_tokens < 2) throw ArgumentError("retention_indices: N must be >= 2");
  const int m = static_cast<int>(std::floor(p * n_tokens));
  RetentionIndices out;
  out.degenerate = (m == 0);
  for (int i = 0; i < m; ++i) out.indices.push_back(i);
  for (int i = n_tokens - m; i < n_tokens; ++i) out.indices.push_back(i);
  return out;
}

// S = Σ first ⌊pN⌋ + Σ last ⌊pN⌋ of an attention distribution.
inline double head_score(const double* dist, int n_tokens, double p) {
  if (!(p > 0.0 && p < 0.5)) throw ArgumentError("head_score: p must be in (0, 0.5)");
  const int m = static_cast<int>(std::floor(p * n_tokens));
  double s = 0.0;
  for (int i = 0; i < m; ++i) s += dist[i];
  for (int i = n_tokens - m; i < n_tokens; ++i) s += dist[i];
  return s;
}

inline std::vector<double> head_scores_for_layer(const Mat& head_dist, double p) {
  std::vector<double> s(static_cast<std::size_t>(head_dist.rows));
  for (int h = 0; h < head_dist.rows; ++h)
    s[static_cast<std::size_t>(h)] = head_score(head_dist.row(h), head_dist.cols, p);
  return s;
}

// A layer is admissible only when every head clears the γ filter.
inline bool layer_admissible(const std::vector<double>& head_scores, double gamma) {
  for (double s : head_scores)
    if (s < gamma) return false;
  return true;
}

// ρ = μ·(1 - σ/(μ+ε)) with the population standard deviation.
inline double layer_score(const std::vector<double>& head_scores, double epsilon = 1e-12) {
  if (head_scores.empty()) throw ArgumentError("layer_score: no heads");
  const double n = static_cast<double>(head_scores.size());
  double mu = std::accumulate(head_scores.begin(), head_scores.end(), 0.0) / n;
  double var = 0.0;
  for (double s : head_scores) var += (s - mu) * (s - mu);
  double sigma = std::sqrt(var / n);
  return mu * (1.0 - sigma / (mu + epsilon));
}

struct KVSelectionPlan {
  double p = 0.3;
  double gamma = 0.75;
  int n_requested = 0;
  std::vector<int> selected_layers;  // slot ids, ascending
  RetentionIndices retained;         // shared by all selected layers
  int n_tokens = 0;
  bool truncated = false;  // fewer admissible layers than requested

  bool is_selected(int slot) const {
    return std::binary_search(selected_layers.begin(), selected_layers.end(), slot);
  }
};

// Top-n admissible layers by ρ (ties toward the lower slot id).
inline KVSelectionPlan select_layers(const AttentionStats& stats, double p, double gamma,
                                     int n) {
  if (n < 0) throw ArgumentError("select_layers: n must be >= 0");
  KVSelectionPlan plan;
  plan.p = p;
  plan.gamma = gamma;
  plan.n_requested = n;
  plan.n_tokens = stats.n_tokens;
  plan.retained = retention_indices(stats.n_tokens, p);

  struct Scored {
    int slot;
    double rho;
  };
  std::vector<Scored> admissible;
  for (std::size_t i = 0; i < stats.slots.size(); ++i) {
    std::vector<double> hs = head_scores_for_layer(stats.head_dist[i], p);
    if (!layer_admissible(hs, gamma)) continue;
    admissible.push_back({stats.slots[i], layer_score(hs)});
  }
  std::stable_sort(admissible.begin(), admissible.end(), [](const auto& a, const auto& b) {
    if (a.rho != b.rho) return a.rho > b.rho;
    return a.slot < b.slot;
  });
  plan.truncated = static_cast<int>(admissible.size()) < n;
  const int take = std::min<int>(n, static_cast<int>(admissible.size()));
  for (int i = 0; i < take; ++i) plan.selected_layers.push_back(admissible[static_cast<std::size_t>(i)].slot);
  std::sort(plan.selected_layers.begin(), plan.selected_layers.end());
  return plan;
}

// In-memory cache pruning, identical semantics to the wire path: layers the
// decode plan removes are dropped; selected layers keep first/last prefill
// entries only. Decode-generated entries are never touched (this runs on a
// pure prefill cache).
inline KVCache prune_cache(const KVCache& kv, const KVSelectionPlan& plan,
                           const std::set<int>& decode_removed_slots) {
  KVCache out;
  out.next_pos = kv.next_pos;
  for (const KVLayer& layer : kv.layers) {
    if (decode_removed_slots.count(layer.slot)) continue;
    if (!plan.is_selected(layer.slot)) {
      out.layers.push_back(layer);
      continue;
    }
    // idempotent: a layer already holding exactly the retained rows passes
    // through, so pruning (and re-serializing) an already-pruned cache is safe
    if (layer.count() == static_cast<int>(plan.retained.indices.size()) &&
        std::equal(layer.positions.begin(), layer.positions.end(),
                   plan.retained.indices.begin())) {
      out.layers.push_back(layer);
      continue;
    }
    KVLayer pruned;
    pruned.slot = layer.slot;
    pruned.n_heads = layer.n_heads;
    pruned.head_dim = layer.head_dim;
    const int w = layer.width();
    for (int ix : plan.retained.indices) {
      if (ix < 0 || ix >= layer.count())
        throw ConsistencyError("retained index out of range for cache layer");
      pruned.positions.push_back(layer.positions[static_cast<std::size_t>(ix)]);
      const double* kp = layer.k.data() + static_cast<std::size_t>(ix) * w;
      const double* vp = layer.v.data() + static_cast<std::size_t>(ix) * w;
      pruned.k.insert(pruned.k.end(), kp, kp + w);
      pruned.v.insert(pruned.v.end(), vp, vp + w);
    }
    out.layers.push_back(std::move(pruned));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transfer-volume arithmetic.
// ---------------------------------------------------------------------------

struct TransferScenario {
  std::string name;
  int total_layers = 0;
  int prefill_retained_layers = 0;   // layers present in the prefill cache
  int decode_removed_layers = 0;     // of those, dropped by the decode plan
  int selected_layers = 0;           // of the decode-retained ones, KV-pruned
  std::uint64_t kv_bytes_per_token_per_layer = 0;  // K and V combined
  std::uint64_t n_tokens = 0;
  double p = 0.3;
  double target_ratio = 0.0;  // documentation field for calibrated scenarios
  bool calibrated = false;

  void validate() const {
    if (total_layers <= 0 || prefill_retained_layers <= 0 || n_tokens == 0 ||
        kv_bytes_per_token_per_layer == 0)
      throw ArgumentError("scenario counts must be positive");
    if (prefill_retained_layers > total_layers)
      throw ConsistencyError("prefill-retained layers exceed total layers");
    if (decode_removed_layers < 0 || decode_removed_layers > prefill_retained_layers)
      throw ConsistencyError("decode-removed layers out of range");
    if (selected_layers < 0 ||
        selected_layers > prefill_retained_layers - decode_removed_layers)
      throw ConsistencyError("selected layers exceed decode-retained layers");
    if (!(p > 0.0 && p < 0.5)) throw ArgumentError("scenario p must be in (0, 0.5)");
  }
};

struct TransferVolume {
  std::uint64_t bytes_full = 0;
  std::uint64_t bytes_pruned = 0;
  double ratio = 1.0;
};

inline TransferVolume transfer_volume(const TransferScenario& s) {
  s.validate();
  const std::uint64_t b = s.kv_bytes_per_token_per_layer;
  const std::uint64_t retained_tokens =
      2 * static_cast<std::uint64_t>(std::floor(s.p * static_cast<double>(s.n_tokens)));
  TransferVolume out;
  out.bytes_full = static_cast<std::uint64_t>(s.prefill_retained_layers) * s.n_tokens * b;
  const std::uint64_t full_layers = static_cast<std::uint64_t>(
      s.prefill_retained_layers - s.decode_removed_layers - s.selected_layers);
  out.bytes_pruned = full_layers * s.n_tokens * b +
                     static_cast<std::uint64_t>(s.selected_layers) * retained_tokens * b;
  out.ratio = out.bytes_pruned == 0
                  ? std::numeric_limits<double>::infinity()
                  : static_cast<double>(out.bytes_full) / static_cast<double>(out.bytes_pruned);
  return out;
}

// Scenario derived from actual plans on a model configuration.
inline TransferScenario scenario_from_plans(const ModelConfig& config, int n_tokens,
                                            const StagePlan& stage_plan,
                                            const KVSelectionPlan& kv_plan) {
  if (kv_plan.n_tokens != 0 && kv_plan.n_tokens != n_tokens)
    throw ConsistencyError("kv plan token count does not match scenario");
  TransferScenario s;
  s.total_layers = config.n_blocks;
  s.prefill_retained_layers =
      config.n_blocks - static_cast<int>(removed_slots(stage_plan.prefill_removals).size());
  std::set<int> decode_slots = removed_slots(stage_plan.decode_removals);
  std::set<int> prefill_slots = removed_slots(stage_plan.prefill_removals);
  int decode_only = 0;
  for (int slot : decode_slots)
    if (!prefill_slots.count(slot)) ++decode_only;
  s.decode_removed_layers = decode_only;
  int selected = 0;
  for (int slot : kv_plan.selected_layers)
    if (!decode_slots.count(slot) && !prefill_slots.count(slot)) ++selected;
  s.selected_layers = selected;
  s.kv_bytes_per_token_per_layer =
      2ull * static_cast<std::uint64_t>(config.n_heads) * config.head_dim *
      dtype_size(config.dtype);
  s.n_tokens = static_cast<std::uint64_t>(n_tokens);
  s.p = kv_plan.p;
  return s;
}

}  // namespace pdprune
