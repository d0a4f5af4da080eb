#pragma once

#include <compare>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pdprune/transformer.hpp"

namespace pdprune {

enum class ElementKind { Prune, Distill };

// One removal unit: either delete block `block`, or merge the consecutive
// pair (block, block+1) into a single block. Both remove exactly one block.
struct RemovalElement {
  ElementKind kind = ElementKind::Prune;
  int block = 0;

  int low() const { return block; }
  int high() const { return kind == ElementKind::Distill ? block + 1 : block; }
  bool overlaps(const RemovalElement& o) const {
    return low() <= o.high() && o.low() <= high();
  }
  friend auto operator<=>(const RemovalElement&, const RemovalElement&) = default;
};

using ElementSet = std::vector<RemovalElement>;  // kept sorted by (block, kind)

inline std::string to_string(const RemovalElement& e) {
  if (e.kind == ElementKind::Prune) return "prune(" + std::to_string(e.block) + ")";
  return "distill(" + std::to_string(e.block) + "," + std::to_string(e.block + 1) + ")";
}

inline bool block_disjoint(const ElementSet& s) {
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = i + 1; j < s.size(); ++j)
      if (s[i].overlaps(s[j])) return false;
  return true;
}

inline bool contains(const ElementSet& s, const RemovalElement& e) {
  for (const auto& x : s)
    if (x == e) return true;
  return false;
}

inline ElementSet sorted(ElementSet s) {
  std::sort(s.begin(), s.end());
  return s;
}

// Slots that disappear from a view under these removals. A distill pair keeps
// slot `block` (with merged or substituted parameters) and drops `block+1`.
inline std::set<int> removed_slots(const ElementSet& elems) {
  std::set<int> out;
  for (const auto& e : elems)
    out.insert(e.kind == ElementKind::Prune ? e.block : e.block + 1);
  return out;
}

// Builds a view applying the removal elements. For a distill element the
// surviving slot carries `merged[block]` when present, otherwise the weights
// of whichever block of the pair has the lower redundancy (tie: the first) --
// the search-time stand-in for a trained merged block.
inline ModelView make_view(const TransformerModel& m, const ElementSet& elems,
                           const std::vector<double>& redundancy,
                           const std::map<int, BlockParams>* merged = nullptr) {
  const int L = m.config.n_blocks;
  if (!block_disjoint(elems)) throw ArgumentError("removal elements overlap");
  std::map<int, const BlockParams*> substitute;
  std::set<int> dropped;
  for (const auto& e : elems) {
    if (e.low() < 0 || e.high() >= L) throw ArgumentError("removal element out of range");
    if (e.kind == ElementKind::Prune) {
      dropped.insert(e.block);
    } else {
      dropped.insert(e.block + 1);
      const BlockParams* sub = nullptr;
      if (merged) {
        auto it = merged->find(e.block);
        if (it != merged->end()) sub = &it->second;
      }
      if (!sub) {
        if (static_cast<int>(redundancy.size()) != L)
          throw ArgumentError("redundancy vector size must equal block count");
        int pick = (redundancy[static_cast<std::size_t>(e.block)] <=
                    redundancy[static_cast<std::size_t>(e.block) + 1])
                       ? e.block
                       : e.block + 1;
        sub = &m.blocks[static_cast<std::size_t>(pick)];
      }
      substitute[e.block] = sub;
    }
  }
  if (static_cast<int>(dropped.size()) >= L) throw EmptyModelError("all blocks removed");
  ModelView v;
  v.base = &m;
  for (int i = 0; i < L; ++i) {
    if (dropped.count(i)) continue;
    auto it = substitute.find(i);
    v.slots.push_back({i, it != substitute.end() ? it->second : &m.blocks[static_cast<std::size_t>(i)]});
  }
  return v;
}

// Stage-split removal plan; the prefill plan is always a subset of the
// decode plan so every decode-retained block has prefill KV to reuse.
struct StagePlan {
  ElementSet prefill_removals;
  ElementSet decode_removals;
  double threshold = 0.03;

  void validate() const {
    for (const auto& e : prefill_removals)
      if (!contains(decode_removals, e))
        throw ConsistencyError("prefill removals must be a subset of decode removals");
  }
};

// Mean next-token top-1 accuracy with distinct prefill/decode views. Each
// sequence is split in half: the first half runs as prefill, the rest as
// teacher-forced decode steps reusing the prefill KV cache.
inline double split_accuracy(const ModelView& prefill_view, const ModelView& decode_view,
                             const std::vector<TokenSeq>& calibration) {
  if (calibration.empty()) throw ArgumentError("empty calibration set");
  std::size_t correct = 0, total = 0;
  PrefillOptions opt;
  opt.collect_kv = true;
  for (const auto& seq : calibration) {
    const int n = static_cast<int>(seq.size());
    const int split = std::max(1, n / 2);
    TokenSeq prompt(seq.begin(), seq.begin() + split);
    PrefillResult pre = forward_prefill(prefill_view, prompt, opt);
    for (int t = 0; t + 1 < split; ++t) {
      if (argmax_row(pre.logits, t) == seq[static_cast<std::size_t>(t) + 1]) ++correct;
      ++total;
    }
    if (argmax_row(pre.logits, split - 1) == seq[static_cast<std::size_t>(split)]) ++correct;
    ++total;
    KVCache kv = std::move(pre.kv);
    for (int t = split; t + 1 < n; ++t) {
      Vec logits = decode_step(decode_view, seq[static_cast<std::size_t>(t)], kv);
      if (argmax(logits) == seq[static_cast<std::size_t>(t) + 1]) ++correct;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

// Accuracy with the same removals in both stages; a single forward pass.
inline double unified_accuracy(const ModelView& view, const std::vector<TokenSeq>& calibration) {
  if (calibration.empty()) throw ArgumentError("empty calibration set");
  std::size_t correct = 0, total = 0;
  PrefillOptions opt;
  opt.collect_kv = false;
  for (const auto& seq : calibration) {
    Mat logits = forward_prefill(view, seq, opt).logits;
    for (int t = 0; t + 1 < static_cast<int>(seq.size()); ++t) {
      if (argmax_row(logits, t) == seq[static_cast<std::size_t>(t) + 1]) ++correct;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

enum class ObjectiveMode { Prefill, Decode, Unified };

// Search objective: accuracy with the plan's removals applied for the
// given mode. Prefill mode applies the removals in the prefill stage only,
// decode mode in the decode stage only, unified in both.
inline double objective_accuracy(const TransformerModel& m,
                                 const std::vector<TokenSeq>& calibration,
                                 const ElementSet& removals,
                                 const std::vector<double>& redundancy, ObjectiveMode mode,
                                 const std::map<int, BlockParams>* merged = nullptr) {
  ModelView removed = make_view(m, removals, redundancy, merged);
  switch (mode) {
    case ObjectiveMode::Unified:
      return unified_accuracy(removed, calibration);
    case ObjectiveMode::Prefill:
      return split_accuracy(removed, full_view(m), calibration);
    case ObjectiveMode::Decode:
      return split_accuracy(full_view(m), removed, calibration);
  }
  throw ArgumentError("unknown objective mode");
}

}  // namespace pdprune
