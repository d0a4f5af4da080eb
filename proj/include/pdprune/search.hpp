#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <vector>

#include "pdprune/analysis.hpp"
#include "pdprune/removal.hpp"
#include "pdprune/rng.hpp"

namespace pdprune {

struct AnnealingSchedule {
  double t0 = 15.0;
  double alpha = 0.85;
  double t_min = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(t0 > 0.0) || !(t_min > 0.0)) throw ArgumentError("temperatures must be positive");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ArgumentError("alpha must be in (0, 1)");
  }

  // Exactly mirrors the loop: iterations run while T >= t_min, T *= alpha.
  int iteration_count() const {
    validate();
    int n = 0;
    for (double t = t0; t >= t_min; t *= alpha) ++n;
    return n;
  }
};

// Weighted element with ω from redundancy means: r_i for a prune,
// ½(r_i + r_{i+1}) for a distill pair.
struct WeightedElement {
  RemovalElement element;
  double weight = 0.0;
};

inline double element_weight(const RemovalElement& e, const std::vector<double>& r) {
  if (e.kind == ElementKind::Prune) return r[static_cast<std::size_t>(e.block)];
  return 0.5 * (r[static_cast<std::size_t>(e.block)] + r[static_cast<std::size_t>(e.block) + 1]);
}

// All removal units a partition offers, in canonical (low, kind) order.
inline std::vector<WeightedElement> element_universe(const SetPartition& part,
                                                     const std::vector<double>& r) {
  std::vector<WeightedElement> out;
  for (int b : part.p_final) out.push_back({{ElementKind::Prune, b}, 0.0});
  for (const auto& p : part.distillation)
    out.push_back({{ElementKind::Distill, p.low}, 0.0});
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.element < b.element; });
  for (auto& we : out) we.weight = element_weight(we.element, r);
  return out;
}

// p_i ∝ ω_i with a small positive floor, since redundancies can be negative.
inline std::vector<double> selection_probabilities(const std::vector<WeightedElement>& elems) {
  if (elems.empty()) throw ArgumentError("selection_probabilities: empty element set");
  constexpr double kFloor = 1e-6;
  std::vector<double> p(elems.size());
  double total = 0.0;
  for (std::size_t i = 0; i < elems.size(); ++i) {
    p[i] = std::max(elems[i].weight, kFloor);
    total += p[i];
  }
  for (double& x : p) x /= total;
  return p;
}

// Initial solution: the initial pruning set, then distill pairs by metric
// descending, then remaining prunes by redundancy descending.
inline ElementSet build_initial_solution(const SetPartition& part,
                                         const std::vector<double>& r, int k) {
  const int L = static_cast<int>(r.size());
  if (k < 1 || k >= L) throw ArgumentError("k must be in [1, L-1]");
  ElementSet sol;
  for (int b : part.p_initial) sol.push_back({ElementKind::Prune, b});
  const int need = k - static_cast<int>(sol.size());
  if (need < 0) throw InfeasibilityError("initial pruning set larger than k");

  std::vector<DistillPair> pairs = part.distillation;
  std::stable_sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (a.metric != b.metric) return a.metric > b.metric;
    return a.low < b.low;
  });
  int taken = 0;
  for (const auto& p : pairs) {
    if (taken == need) break;
    sol.push_back({ElementKind::Distill, p.low});
    ++taken;
  }
  if (taken < need) {
    std::vector<int> extra;
    for (int b : part.p_final)
      if (!part.p_initial.count(b)) extra.push_back(b);
    std::stable_sort(extra.begin(), extra.end(), [&](int a, int b) {
      if (r[static_cast<std::size_t>(a)] != r[static_cast<std::size_t>(b)])
        return r[static_cast<std::size_t>(a)] > r[static_cast<std::size_t>(b)];
      return a < b;
    });
    for (int b : extra) {
      if (taken == need) break;
      sol.push_back({ElementKind::Prune, b});
      ++taken;
    }
  }
  if (taken < need) throw InfeasibilityError("not enough removal elements for k");
  sol = sorted(std::move(sol));
  if (!block_disjoint(sol)) throw InfeasibilityError("initial solution is not block-disjoint");
  return sol;
}

// P = 1 when the candidate is at least as good, else exp(-Δf / T).
inline double acceptance_probability(double f_current, double f_candidate, double temperature) {
  if (!(temperature > 0.0)) throw ArgumentError("temperature must be positive");
  if (f_candidate >= f_current) return 1.0;
  return std::exp(-(f_current - f_candidate) / temperature);
}

using Objective = std::function<double(const ElementSet&)>;

struct AuditEntry {
  int iteration = 0;
  double temperature = 0.0;
  ElementSet candidate;
  double f = 0.0;
  bool accepted = false;
  bool skipped = false;  // no feasible swap within the retry budget
};

struct SearchResult {
  ElementSet best;
  double best_f = 0.0;
  ElementSet final_solution;
  double final_f = 0.0;
  double initial_f = 0.0;
  int iterations = 0;
  std::vector<AuditEntry> audit;
};

// Swap one element: the outgoing one uniform over the current solution, the
// incoming one by selection probability over the unremoved set; infeasible
// pairs are resampled within a bounded budget.
inline std::optional<ElementSet> propose_neighbor(const ElementSet& current,
                                                  const std::vector<WeightedElement>& universe,
                                                  Rng& rng, int max_retries = 64) {
  std::vector<WeightedElement> unremoved;
  for (const auto& we : universe)
    if (!contains(current, we.element)) unremoved.push_back(we);
  if (unremoved.empty()) return std::nullopt;
  std::vector<double> probs = selection_probabilities(unremoved);
  std::vector<double> cdf(probs.size());
  std::partial_sum(probs.begin(), probs.end(), cdf.begin());

  for (int attempt = 0; attempt < max_retries; ++attempt) {
    std::size_t out_ix = rng.next_below(current.size());
    double u = rng.next_double();
    std::size_t in_ix =
        static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    if (in_ix >= unremoved.size()) in_ix = unremoved.size() - 1;
    ElementSet cand;
    for (std::size_t i = 0; i < current.size(); ++i)
      if (i != out_ix) cand.push_back(current[i]);
    const RemovalElement& incoming = unremoved[in_ix].element;
    bool feasible = true;
    for (const auto& e : cand)
      if (e.overlaps(incoming)) {
        feasible = false;
        break;
      }
    if (!feasible) continue;
    cand.push_back(incoming);
    return sorted(std::move(cand));
  }
  return std::nullopt;
}

// Annealed iterative search: one proposal per temperature step, temperature
// decayed every iteration (rejected or skipped steps included), best-ever
// solution returned.
inline SearchResult run_annealing(const SetPartition& part, const std::vector<double>& r,
                                  int k, const AnnealingSchedule& schedule,
                                  const Objective& objective) {
  schedule.validate();
  std::vector<WeightedElement> universe = element_universe(part, r);
  ElementSet current = build_initial_solution(part, r, k);
  double f_current = objective(current);

  SearchResult res;
  res.initial_f = f_current;
  res.best = current;
  res.best_f = f_current;

  Rng rng = Rng(schedule.seed).split("annealing");
  int iter = 0;
  for (double t = schedule.t0; t >= schedule.t_min; t *= schedule.alpha, ++iter) {
    AuditEntry entry;
    entry.iteration = iter;
    entry.temperature = t;
    auto cand = propose_neighbor(current, universe, rng);
    if (!cand) {
      entry.skipped = true;
      res.audit.push_back(std::move(entry));
      continue;
    }
    double f_cand = objective(*cand);
    entry.candidate = *cand;
    entry.f = f_cand;
    double p = acceptance_probability(f_current, f_cand, t);
    bool accept = (p >= 1.0) || (rng.next_double() < p);
    entry.accepted = accept;
    if (accept) {
      current = std::move(*cand);
      f_current = f_cand;
    }
    if (f_cand > res.best_f) {
      res.best = entry.candidate;
      res.best_f = f_cand;
    }
    res.audit.push_back(std::move(entry));
  }
  res.iterations = iter;
  res.final_solution = std::move(current);
  res.final_f = f_current;
  return res;
}

namespace detail {
inline bool enumerate_subsets(const std::vector<WeightedElement>& universe, int k,
                              std::size_t cap, std::size_t& count,
                              std::vector<std::size_t>& stack,
                              const std::function<void(const std::vector<std::size_t>&)>& visit,
                              std::size_t from) {
  if (static_cast<int>(stack.size()) == k) {
    if (++count > cap) return false;
    if (visit) visit(stack);
    return true;
  }
  for (std::size_t i = from; i < universe.size(); ++i) {
    bool ok = true;
    for (std::size_t j : stack)
      if (universe[j].element.overlaps(universe[i].element)) {
        ok = false;
        break;
      }
    if (!ok) continue;
    stack.push_back(i);
    if (!enumerate_subsets(universe, k, cap, count, stack, visit, i + 1)) return false;
    stack.pop_back();
  }
  return true;
}
}  // namespace detail

// Exhaustive maximizer over block-disjoint k-subsets; ties resolve to the
// lexicographically smallest index tuple because enumeration is lexicographic
// and only strict improvements replace the incumbent.
inline SearchResult brute_force_optimum(const SetPartition& part, const std::vector<double>& r,
                                        int k, const Objective& objective,
                                        std::size_t cap = 1000000) {
  std::vector<WeightedElement> universe = element_universe(part, r);
  if (k < 1) throw ArgumentError("k must be positive");

  std::size_t count = 0;
  std::vector<std::size_t> stack;
  if (!detail::enumerate_subsets(universe, k, cap, count, stack, nullptr, 0))
    throw TooLargeError("feasible combination count exceeds the cap");
  if (count == 0) throw InfeasibilityError("no feasible k-subset exists");

  SearchResult res;
  bool have = false;
  count = 0;
  stack.clear();
  detail::enumerate_subsets(
      universe, k, cap, count, stack,
      [&](const std::vector<std::size_t>& ixs) {
        ElementSet s;
        for (std::size_t i : ixs) s.push_back(universe[i].element);
        double f = objective(s);
        if (!have || f > res.best_f) {
          have = true;
          res.best = s;
          res.best_f = f;
        }
      },
      0);
  res.final_solution = res.best;
  res.final_f = res.best_f;
  res.initial_f = res.best_f;
  return res;
}

// Objective over a (prefill, decode) stage split.
using StageObjective = std::function<double(const ElementSet& prefill, const ElementSet& decode)>;

// Per-element stage assignment: an element leaves the prefill plan only when
// applying it decode-only beats applying it in both stages by more than the
// threshold. Elements are decided in ascending block order, each decision
// conditioning on the ones already made.
inline StagePlan assign_stages(const ElementSet& best, const StageObjective& objective,
                               double threshold) {
  ElementSet decode = sorted(best);
  ElementSet prefill = decode;
  for (const auto& e : decode) {
    ElementSet without;
    for (const auto& x : prefill)
      if (!(x == e)) without.push_back(x);
    double f_decode_only = objective(without, decode);
    double f_both = objective(prefill, decode);
    if (f_decode_only - f_both > threshold) prefill = std::move(without);
  }
  StagePlan plan;
  plan.prefill_removals = std::move(prefill);
  plan.decode_removals = std::move(decode);
  plan.threshold = threshold;
  plan.validate();
  return plan;
}

}  // namespace pdprune
