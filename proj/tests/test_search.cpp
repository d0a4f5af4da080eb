#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "pdprune/removal.hpp"
#include "pdprune/rng.hpp"
#include "pdprune/search.hpp"
#include "toy_fixture.hpp"

using namespace pdprune;

namespace {

// A fixed small instance: L=8, k=3.
struct Instance {
  std::vector<double> r{0.2, 0.9, 0.85, 0.3, 0.95, 0.96, 0.4, 0.5};
  SetPartition part;
  Instance() {
    RedundancyProfile profile;
    profile.r = r;
    profile.d = {0.10, 0.20, 0.96, 0.30, 0.40, 0.50, 0.97};
    part = build_partition(profile, 3, 0.95);
  }
};

// Separable objective: f = sum of fixed per-element scores.
Objective separable(const std::vector<WeightedElement>& universe, std::uint64_t seed) {
  std::map<RemovalElement, double> score;
  Rng rng(seed);
  for (const auto& we : universe) score[we.element] = rng.next_double();
  return [score](const ElementSet& s) {
    double f = 0.0;
    for (const auto& e : s) f += score.at(e);
    return f;
  };
}

}  // namespace

TEST_CASE("iteration count matches the closed form for any schedule") {
  AnnealingSchedule def;
  REQUIRE(def.iteration_count() == 36);

  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    AnnealingSchedule s;
    s.t0 = 0.5 + 30.0 * rng.next_double();
    s.alpha = 0.5 + 0.45 * rng.next_double();
    s.t_min = 0.01 + 0.2 * rng.next_double();
    // smallest n with t0·αⁿ < t_min, counted independently
    int n = 0;
    double t = s.t0;
    while (t >= s.t_min) {
      t *= s.alpha;
      ++n;
    }
    REQUIRE(s.iteration_count() == n);
  }
  AnnealingSchedule bad;
  bad.alpha = 1.0;
  REQUIRE_THROWS_AS(bad.validate(), ArgumentError);
}

TEST_CASE("acceptance probability follows the annealing rule") {
  REQUIRE(acceptance_probability(0.62, 0.65, 1.0) == 1.0);
  REQUIRE(acceptance_probability(0.62, 0.62, 1.0) == 1.0);
  REQUIRE(acceptance_probability(0.62, 0.60, 1.0) ==
          Catch::Approx(std::exp(-0.02)).margin(1e-9));
  REQUIRE(acceptance_probability(0.62, 0.60, 1e-6) < 1e-300 + 1.0e-10);
  REQUIRE_THROWS_AS(acceptance_probability(0.5, 0.4, 0.0), ArgumentError);
  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    double p = acceptance_probability(rng.next_double(), rng.next_double(),
                                      0.01 + rng.next_double());
    REQUIRE(p > 0.0);
    REQUIRE(p <= 1.0);
  }
}

TEST_CASE("selection probabilities are normalized element weights") {
  std::vector<WeightedElement> elems{{{ElementKind::Prune, 0}, 0.9},
                                     {{ElementKind::Distill, 2}, 0.85}};
  auto p = selection_probabilities(elems);
  REQUIRE(p[0] == Catch::Approx(0.9 / 1.75).margin(1e-15));
  REQUIRE(p[1] == Catch::Approx(0.85 / 1.75).margin(1e-15));

  auto single = selection_probabilities({{{ElementKind::Prune, 3}, 0.4}});
  REQUIRE(single[0] == 1.0);

  std::vector<WeightedElement> equal(4, {{ElementKind::Prune, 0}, 0.25});
  for (double x : selection_probabilities(equal)) REQUIRE(x == Catch::Approx(0.25));

  // negative weights get a positive floor, sum stays 1
  std::vector<WeightedElement> neg{{{ElementKind::Prune, 0}, -0.5},
                                   {{ElementKind::Prune, 1}, 0.5}};
  auto pn = selection_probabilities(neg);
  REQUIRE(pn[0] > 0.0);
  REQUIRE(pn[0] + pn[1] == Catch::Approx(1.0).margin(1e-12));

  REQUIRE_THROWS_AS(selection_probabilities({}), ArgumentError);
}

TEST_CASE("element weights follow the redundancy means") {
  std::vector<double> r{0.8, 0.9, 0.4};
  REQUIRE(element_weight({ElementKind::Prune, 1}, r) == 0.9);
  REQUIRE(element_weight({ElementKind::Distill, 0}, r) == Catch::Approx(0.85));
}

TEST_CASE("initial solution follows the partition-based construction") {
  Instance inst;
  // p_initial = top-2 of r = {5, 4}; pairs available: (2,3) d=0.96, (6,7) d=0.97
  REQUIRE(inst.part.p_initial == std::set<int>{4, 5});
  ElementSet sol = build_initial_solution(inst.part, inst.r, 3);
  REQUIRE(sol.size() == 3);
  REQUIRE(contains(sol, {ElementKind::Prune, 4}));
  REQUIRE(contains(sol, {ElementKind::Prune, 5}));
  REQUIRE(contains(sol, {ElementKind::Distill, 6}));  // highest d pair
  REQUIRE(block_disjoint(sol));

  // no pairs: fill from p_final by descending r
  SetPartition bare;
  RedundancyProfile profile;
  profile.r = inst.r;
  profile.d = std::vector<double>(7, 0.1);
  bare = build_partition(profile, 3, 0.95);
  ElementSet filled = build_initial_solution(bare, inst.r, 3);
  REQUIRE(filled.size() == 3);
  REQUIRE(contains(filled, {ElementKind::Prune, 4}));
  REQUIRE(contains(filled, {ElementKind::Prune, 5}));
  REQUIRE(contains(filled, {ElementKind::Prune, 1}));  // next-highest r after p_initial
}

TEST_CASE("initial solution fill order uses descending redundancy") {
  std::vector<double> r{0.2, 0.9, 0.85, 0.3};
  RedundancyProfile profile;
  profile.r = r;
  profile.d = {0.0, 0.0, 0.0};
  SetPartition part = build_partition(profile, 3, 0.95);
  // p_initial = {1, 2}; the third prune is the next-highest r = block 3
  ElementSet sol = build_initial_solution(part, r, 3);
  REQUIRE(contains(sol, {ElementKind::Prune, 1}));
  REQUIRE(contains(sol, {ElementKind::Prune, 2}));
  REQUIRE(contains(sol, {ElementKind::Prune, 3}));

  SetPartition part1 = build_partition(profile, 1, 0.95);
  ElementSet one = build_initial_solution(part1, r, 1);
  REQUIRE(one.size() == 1);
  REQUIRE(one[0] == RemovalElement{ElementKind::Prune, 1});
}

TEST_CASE("neighbor proposals swap exactly one element and stay feasible") {
  Instance inst;
  auto universe = element_universe(inst.part, inst.r);
  ElementSet current = build_initial_solution(inst.part, inst.r, 3);
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    auto cand = propose_neighbor(current, universe, rng);
    REQUIRE(cand.has_value());
    REQUIRE(cand->size() == current.size());
    REQUIRE(block_disjoint(*cand));
    int diff = 0;
    for (const auto& e : *cand)
      if (!contains(current, e)) ++diff;
    REQUIRE(diff == 1);
  }
}

TEST_CASE("annealing finds the separable optimum and keeps its audit honest") {
  Instance inst;
  auto universe = element_universe(inst.part, inst.r);
  Objective obj = separable(universe, 31);

  AnnealingSchedule schedule;
  schedule.seed = 9;
  SearchResult res = run_annealing(inst.part, inst.r, 3, schedule, obj);
  SearchResult brute = brute_force_optimum(inst.part, inst.r, 3, obj);
  REQUIRE(res.best_f == brute.best_f);

  REQUIRE(res.iterations == 36);
  REQUIRE(res.audit.size() == 36);
  REQUIRE(res.best_f >= res.initial_f);
  double running_best = res.initial_f;
  for (const auto& a : res.audit) {
    if (!a.skipped) {
      REQUIRE(a.candidate.size() == 3);
      REQUIRE(block_disjoint(a.candidate));
      running_best = std::max(running_best, a.f);
    }
  }
  REQUIRE(res.best_f == running_best);

  // determinism
  SearchResult again = run_annealing(inst.part, inst.r, 3, schedule, obj);
  REQUIRE(again.best == res.best);
  REQUIRE(again.best_f == res.best_f);

  // zero-iteration schedule returns the evaluated initial solution
  AnnealingSchedule zero;
  zero.t0 = 0.01;
  zero.t_min = 0.05;
  SearchResult z = run_annealing(inst.part, inst.r, 3, zero, obj);
  REQUIRE(z.iterations == 0);
  REQUIRE(z.best == build_initial_solution(inst.part, inst.r, 3));
  REQUIRE(z.best_f == z.initial_f);
}

TEST_CASE("brute force enumerates feasible subsets with a lexicographic tie rule") {
  std::vector<double> r{0.5, 0.5, 0.5, 0.5, 0.5};
  RedundancyProfile profile;
  profile.r = r;
  profile.d = {0.0, 0.0, 0.0, 0.0};
  SetPartition part = build_partition(profile, 2, 0.95);  // all 5 blocks prunable

  // constant objective: ties resolve to the lexicographically smallest subset
  Objective constant = [](const ElementSet&) { return 1.0; };
  SearchResult res = brute_force_optimum(part, r, 2, constant);
  REQUIRE(res.best == ElementSet{{ElementKind::Prune, 0}, {ElementKind::Prune, 1}});

  // k = element count → the single feasible subset
  SearchResult all = brute_force_optimum(part, r, 5, constant);
  REQUIRE(all.best.size() == 5);

  REQUIRE_THROWS_AS(brute_force_optimum(part, r, 2, constant, 3), TooLargeError);

  Objective sum = separable(element_universe(part, r), 77);
  SearchResult opt = brute_force_optimum(part, r, 2, sum);
  double best_manual = -1.0;
  for (int i = 0; i < 5; ++i)
    for (int j = i + 1; j < 5; ++j)
      best_manual = std::max(
          best_manual, sum(ElementSet{{ElementKind::Prune, i}, {ElementKind::Prune, j}}));
  REQUIRE(opt.best_f == best_manual);
}

TEST_CASE("stage assignment excludes elements only past the threshold") {
  ElementSet best{{ElementKind::Prune, 1}, {ElementKind::Prune, 3}};

  // scripted: decode-only for block 1 scores 0.70, both-stages 0.60
  StageObjective scripted = [](const ElementSet& prefill, const ElementSet& decode) {
    (void)decode;
    return contains(prefill, {ElementKind::Prune, 1}) ? 0.60 : 0.70;
  };
  StagePlan plan = assign_stages(best, scripted, 0.03);
  REQUIRE_FALSE(contains(plan.prefill_removals, {ElementKind::Prune, 1}));
  REQUIRE(contains(plan.prefill_removals, {ElementKind::Prune, 3}));
  REQUIRE(plan.decode_removals == sorted(best));

  // improvement 0.01 < θ: keep in both stages
  StageObjective mild = [](const ElementSet& prefill, const ElementSet&) {
    return contains(prefill, {ElementKind::Prune, 1}) ? 0.60 : 0.61;
  };
  StagePlan kept = assign_stages(best, mild, 0.03);
  REQUIRE(kept.prefill_removals == sorted(best));

  // θ=+∞ never excludes
  StagePlan inf = assign_stages(best, scripted, std::numeric_limits<double>::infinity());
  REQUIRE(inf.prefill_removals == sorted(best));
}

TEST_CASE("stage threshold boundary is strict") {
  ElementSet best{{ElementKind::Prune, 0}};
  auto with_gain = [&](double gain) {
    StageObjective obj = [gain](const ElementSet& prefill, const ElementSet&) {
      return prefill.empty() ? gain : 0.0;
    };
    return assign_stages(best, obj, 0.03);
  };
  REQUIRE(with_gain(0.03).prefill_removals.size() == 1);           // equal → keep
  REQUIRE(with_gain(0.03 - 1e-9).prefill_removals.size() == 1);    // below → keep
  REQUIRE(with_gain(0.03 + 1e-9).prefill_removals.empty());        // above → exclude
}

TEST_CASE("stage plans always keep prefill a subset of decode") {
  Rng rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    ElementSet best;
    int b = 0;
    int n = 2 + static_cast<int>(rng.next_below(4));
    for (int i = 0; i < n; ++i) {
      bool distill = rng.next_double() < 0.4;
      best.push_back({distill ? ElementKind::Distill : ElementKind::Prune, b});
      b += distill ? 2 : 1;
      b += static_cast<int>(rng.next_below(2));
    }
    std::uint64_t tag = rng.next_u64();
    StageObjective noisy = [tag](const ElementSet& prefill, const ElementSet& decode) {
      std::uint64_t h = tag;
      for (const auto& e : prefill) h = mix64(h ^ static_cast<std::uint64_t>(e.block * 2 + 1));
      for (const auto& e : decode) h = mix64(h ^ static_cast<std::uint64_t>(e.block * 2));
      return static_cast<double>(h >> 11) * 0x1.0p-53;
    };
    StagePlan plan = assign_stages(best, noisy, 0.03);
    plan.validate();
    for (const auto& e : plan.prefill_removals)
      REQUIRE(contains(plan.decode_removals, e));
  }
}
