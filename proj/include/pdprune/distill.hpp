#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "pdprune/analysis.hpp"
#include "pdprune/block.hpp"
#include "pdprune/removal.hpp"
#include "pdprune/train.hpp"

namespace pdprune {

// Initialization weights for a merged pair: the block with the lower
// redundancy (tie: the first of the pair).
inline BlockParams init_merged_block(const TransformerModel& m, int pair_low,
                                     const std::vector<double>& r) {
  if (pair_low < 0 || pair_low + 1 >= m.config.n_blocks)
    throw ArgumentError("pair index out of range");
  int pick = (r[static_cast<std::size_t>(pair_low)] <= r[static_cast<std::size_t>(pair_low) + 1])
                 ? pair_low
                 : pair_low + 1;
  return m.blocks[static_cast<std::size_t>(pick)];
}

struct DistillJob {
  int pair_low = 0;
  std::vector<BlockSample> samples;  // inputs h_{i-1}, targets h_{i+1}
  double lr = 1e-3;
  int steps = 200;
  std::uint64_t seed = 0;
};

struct DistillResult {
  BlockParams merged;
  double initial_mse = 0.0;
  double final_mse = 0.0;
  int steps = 0;
};

// Captures the pair's teacher activations from full-model traces: the input
// of block `pair_low` and the output of block `pair_low + 1`.
inline std::vector<BlockSample> capture_pair_activations(const std::vector<HiddenTrace>& traces,
                                                         int pair_low) {
  std::vector<BlockSample> samples;
  for (const auto& tr : traces) {
    if (pair_low < 0 || static_cast<std::size_t>(pair_low) + 2 >= tr.h.size())
      throw ArgumentError("pair index out of range for trace");
    BlockSample s;
    s.inputs = tr.h[static_cast<std::size_t>(pair_low)];
    s.targets = tr.h[static_cast<std::size_t>(pair_low) + 2];
    s.positions.resize(static_cast<std::size_t>(s.inputs.rows));
    for (int t = 0; t < s.inputs.rows; ++t) s.positions[static_cast<std::size_t>(t)] = t;
    samples.push_back(std::move(s));
  }
  return samples;
}

// Adam on the MSE between the merged block's output and the pair's output.
// The best checkpoint is kept, so final MSE never exceeds the initial MSE.
inline DistillResult distill_pair(const DistillJob& job, const BlockParams& init,
                                  const BlockShape& shape) {
  if (job.samples.empty()) throw ArgumentError("distill_pair: no teacher activations");

  BlockParams cur = init;
  auto [init_mse, init_grads] = block_loss_and_grad(cur, shape, job.samples);

  DistillResult res;
  res.merged = cur;
  res.initial_mse = init_mse;
  res.final_mse = init_mse;
  res.steps = job.steps;
  if (job.steps <= 0) return res;

  struct Adam {
    double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<double> m, v;
    std::int64_t t = 0;
  } adam{job.lr};

  auto chunks = [](BlockParams& b) {
    std::vector<std::pair<double*, std::size_t>> out;
    b.for_each_tensor([&](Mat& t) { out.push_back({t.a.data(), t.a.size()}); });
    b.for_each_vec([&](Vec& v) { out.push_back({v.data(), v.size()}); });
    return out;
  };

  BlockGrads grads = std::move(init_grads);
  double mse = init_mse;
  for (int step = 0; step < job.steps; ++step) {
    auto pc = chunks(cur);
    auto gc = chunks(grads);
    if (adam.m.empty()) {
      std::size_t total = 0;
      for (auto& [p, n] : pc) total += n;
      adam.m.assign(total, 0.0);
      adam.v.assign(total, 0.0);
    }
    ++adam.t;
    double c1 = 1.0 - std::pow(adam.b1, static_cast<double>(adam.t));
    double c2 = 1.0 - std::pow(adam.b2, static_cast<double>(adam.t));
    std::size_t off = 0;
    for (std::size_t ci = 0; ci < pc.size(); ++ci) {
      double* p = pc[ci].first;
      double* g = gc[ci].first;
      for (std::size_t i = 0; i < pc[ci].second; ++i) {
        adam.m[off + i] = adam.b1 * adam.m[off + i] + (1.0 - adam.b1) * g[i];
        adam.v[off + i] = adam.b2 * adam.v[off + i] + (1.0 - adam.b2) * g[i] * g[i];
        p[i] -= adam.lr * (adam.m[off + i] / c1) / (std::sqrt(adam.v[off + i] / c2) + adam.eps);
      }
      off += pc[ci].second;
    }
    auto [new_mse, new_grads] = block_loss_and_grad(cur, shape, job.samples);
    mse = new_mse;
    grads = std::move(new_grads);
    if (mse < res.final_mse) {
      res.final_mse = mse;
      res.merged = cur;
    }
  }
  return res;
}

// Convenience: initialization from the lower-redundancy block of the pair.
inline DistillResult distill_pair(const TransformerModel& m, const DistillJob& job,
                                  const std::vector<double>& r) {
  return distill_pair(job, init_merged_block(m, job.pair_low, r), BlockShape::of(m.config));
}

struct ModelViews {
  ModelView prefill;
  ModelView decode;
};

// Derives the prefill and decode views from a stage plan; distill elements
// splice their trained merged block in place of the pair. The base model is
// never mutated. `merged` must outlive the views.
inline ModelViews apply_distillation(const TransformerModel& m, const StagePlan& plan,
                                     const std::map<int, BlockParams>& merged) {
  plan.validate();
  for (const auto& e : plan.decode_removals)
    if (e.kind == ElementKind::Distill && !merged.count(e.block))
      throw ConsistencyError("missing merged block for " + to_string(e));
  std::vector<double> no_redundancy;  // unused when all merged blocks exist
  ModelViews views;
  views.prefill = make_view(m, plan.prefill_removals, no_redundancy, &merged);
  views.decode = make_view(m, plan.decode_removals, no_redundancy, &merged);
  return views;
}

}  // namespace pdprune
