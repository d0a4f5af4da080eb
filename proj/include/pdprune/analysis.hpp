#pragma once

#include <algorithm>
#include <numeric>
#include <set>
#include <utility>
#include <vector>

#include "pdprune/errors.hpp"
#include "pdprune/transformer.hpp"

namespace pdprune {

struct RedundancyProfile {
  std::vector<double> r;  // per-block input/output cosine, in [-1, 1]
  std::vector<double> d;  // per consecutive pair (i, i+1), length L-1
  int block_count() const { return static_cast<int>(r.size()); }
};

struct DistillPair {
  int low = 0;  // pair (low, low + 1)
  double metric = 0.0;
  friend bool operator==(const DistillPair&, const DistillPair&) = default;
};

struct SetPartition {
  std::set<int> p_initial;
  std::vector<DistillPair> distillation;
  std::set<int> p_final;
  double d_threshold = 0.95;
};

// Mean cosine between trace levels a and b over all samples and positions.
inline double mean_level_cosine(const std::vector<HiddenTrace>& traces, int a, int b) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& tr : traces) {
    const Mat& ha = tr.h[static_cast<std::size_t>(a)];
    const Mat& hb = tr.h[static_cast<std::size_t>(b)];
    for (int t = 0; t < ha.rows; ++t) {
      sum += cosine(ha.row(t), hb.row(t), ha.cols);
      ++count;
    }
  }
  if (count == 0) throw ArgumentError("empty trace");
  return sum / static_cast<double>(count);
}

// r_i = mean cosine between block i's input and output.
inline std::vector<double> compute_redundancy(const std::vector<HiddenTrace>& traces) {
  if (traces.empty() || traces[0].h.size() < 2) throw ArgumentError("empty trace");
  const int levels = static_cast<int>(traces[0].h.size());
  std::vector<double> r(static_cast<std::size_t>(levels) - 1);
  for (int i = 0; i + 1 < levels; ++i)
    r[static_cast<std::size_t>(i)] = mean_level_cosine(traces, i, i + 1);
  return r;
}

// d_i = ½(cos(h_{i-1}, h_{i+1}) + max(cos(h_{i-1}, h_i), cos(h_i, h_{i+1}))),
// each cosine averaged over samples and positions first.
inline std::vector<double> compute_pair_metric(const std::vector<HiddenTrace>& traces) {
  if (traces.empty() || traces[0].h.size() < 3)
    throw ArgumentError("pair metric needs at least two blocks");
  const int levels = static_cast<int>(traces[0].h.size());
  std::vector<double> d(static_cast<std::size_t>(levels) - 2);
  for (int i = 0; i + 2 < levels; ++i) {
    double skip = mean_level_cosine(traces, i, i + 2);
    double first = mean_level_cosine(traces, i, i + 1);
    double second = mean_level_cosine(traces, i + 1, i + 2);
    d[static_cast<std::size_t>(i)] = 0.5 * (skip + std::max(first, second));
  }
  return d;
}

inline RedundancyProfile compute_profile(const std::vector<HiddenTrace>& traces) {
  RedundancyProfile p;
  p.r = compute_redundancy(traces);
  if (p.r.size() >= 2) p.d = compute_pair_metric(traces);
  return p;
}

// Top ⌈k/2⌉ blocks by redundancy; ties broken toward the lower index.
inline std::set<int> build_initial_pruning_set(const std::vector<double>& r, int k) {
  const int L = static_cast<int>(r.size());
  if (k < 1 || k > L - 1) throw ArgumentError("k must be in [1, L-1]");
  std::vector<int> idx(r.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return r[static_cast<std::size_t>(a)] > r[static_cast<std::size_t>(b)];
  });
  const int take = (k + 1) / 2;
  return std::set<int>(idx.begin(), idx.begin() + take);
}

// Candidate pairs meet the threshold and avoid the initial pruning set; when
// a block qualifies with both neighbors the pair with the larger metric wins
// (tie: lower index), keeping the result pairwise disjoint.
inline std::vector<DistillPair> build_distillation_set(const std::vector<double>& d,
                                                       double d_threshold,
                                                       const std::set<int>& p_initial) {
  if (!(d_threshold > 0.0 && d_threshold <= 1.0))
    throw ArgumentError("d_threshold must be in (0, 1]");
  std::vector<DistillPair> candidates;
  for (int i = 0; i < static_cast<int>(d.size()); ++i) {
    if (d[static_cast<std::size_t>(i)] < d_threshold) continue;
    if (p_initial.count(i) || p_initial.count(i + 1)) continue;
    candidates.push_back({i, d[static_cast<std::size_t>(i)]});
  }
  std::stable_sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
    if (a.metric != b.metric) return a.metric > b.metric;
    return a.low < b.low;
  });
  std::vector<DistillPair> taken;
  std::set<int> covered;
  for (const auto& c : candidates) {
    if (covered.count(c.low) || covered.count(c.low + 1)) continue;
    taken.push_back(c);
    covered.insert(c.low);
    covered.insert(c.low + 1);
  }
  std::sort(taken.begin(), taken.end(),
            [](const auto& a, const auto& b) { return a.low < b.low; });
  return taken;
}

// Every block not covered by a distillation pair lands in the pruning set.
inline std::set<int> build_final_pruning_set(const std::vector<DistillPair>& distillation,
                                             int n_blocks) {
  std::set<int> covered;
  for (const auto& p : distillation) {
    covered.insert(p.low);
    covered.insert(p.low + 1);
  }
  std::set<int> p_final;
  for (int i = 0; i < n_blocks; ++i)
    if (!covered.count(i)) p_final.insert(i);
  return p_final;
}

inline SetPartition build_partition(const RedundancyProfile& profile, int k,
                                    double d_threshold) {
  SetPartition part;
  part.d_threshold = d_threshold;
  part.p_initial = build_initial_pruning_set(profile.r, k);
  part.distillation = build_distillation_set(profile.d, d_threshold, part.p_initial);
  part.p_final = build_final_pruning_set(part.distillation, profile.block_count());
  return part;
}

// Mean hidden-state L2 norm per trace level; a depth-profile diagnostic.
inline std::vector<double> norm_profile(const std::vector<HiddenTrace>& traces) {
  if (traces.empty() || traces[0].h.empty()) throw ArgumentError("empty trace");
  const std::size_t levels = traces[0].h.size();
  std::vector<double> out(levels, 0.0);
  std::size_t count = 0;
  for (const auto& tr : traces) count += static_cast<std::size_t>(tr.h[0].rows);
  for (const auto& tr : traces)
    for (std::size_t l = 0; l < levels; ++l)
      for (int t = 0; t < tr.h[l].rows; ++t)
        out[l] += norm2(tr.h[l].row(t), tr.h[l].cols) / static_cast<double>(count);
  return out;
}

}  // namespace pdprune
