#pragma once

#include <cstdint>
#include <vector>

#include "pdprune/errors.hpp"
#include "pdprune/rng.hpp"

namespace pdprune {

using TokenSeq = std::vector<int>;

// Seeded order-2 Markov chains: given the previous two tokens, a "preferred"
// next token is emitted with fixed probability, otherwise a uniform one. The
// transition table itself is drawn from the seed, so different seeds give
// different languages and a trained model has signal to pick up.
inline std::vector<TokenSeq> generate_calibration(std::uint64_t seed, int n_samples,
                                                  int len, int vocab) {
  if (vocab < 2) throw ArgumentError("generate_calibration: vocab must be >= 2");
  if (n_samples < 0) throw ArgumentError("generate_calibration: negative sample count");
  if (n_samples > 0 && len < 2) throw ArgumentError("generate_calibration: len must be >= 2");

  constexpr double kPreferredProb = 0.7;
  Rng base(seed);
  Rng table_rng = base.split("markov-table");
  std::vector<int> preferred(static_cast<std::size_t>(vocab) * vocab);
  for (int& t : preferred) t = static_cast<int>(table_rng.next_below(vocab));

  Rng sample_rng = base.split("markov-sample");
  std::vector<TokenSeq> out;
  out.reserve(n_samples);
  for (int s = 0; s < n_samples; ++s) {
    TokenSeq seq(len);
    seq[0] = static_cast<int>(sample_rng.next_below(vocab));
    seq[1] = static_cast<int>(sample_rng.next_below(vocab));
    for (int t = 2; t < len; ++t) {
      int a = seq[t - 2], b = seq[t - 1];
      if (sample_rng.next_double() < kPreferredProb)
        seq[t] = preferred[static_cast<std::size_t>(a) * vocab + b];
      else
        seq[t] = static_cast<int>(sample_rng.next_below(vocab));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace pdprune
