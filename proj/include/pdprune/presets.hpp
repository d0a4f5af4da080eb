#pragma once

#include <cstdint>

#include "pdprune/calibration.hpp"
#include "pdprune/kv_pruning.hpp"
#include "pdprune/model.hpp"
#include "pdprune/search.hpp"
#include "pdprune/train.hpp"

namespace pdprune {

// The shipped toy instance: small enough that the exhaustive search oracle and
// a full two-node run finish in seconds, large enough that every set in the
// partition is non-trivial.
struct ToyPreset {
  ModelConfig config = make_config(10, 32, 4, 32, 64);
  std::uint64_t seed = 42;
  int calib_samples = 8;
  int calib_len = 16;
  int train_epochs = 12;  // undertrained on purpose: removals must cost accuracy
  double train_lr = 1e-2;
  int k = 3;
  AnnealingSchedule schedule;  // defaults: t0 15, alpha 0.85, t_min 0.05
  double d_threshold = 0.95;
  double stage_threshold = 0.03;
  double kv_p = 0.3;
  double kv_gamma = 0.55;  // the toy's attention is near-uniform; 0.75 admits nothing
  int kv_n = 2;
  int decode_steps = 12;
};

inline ToyPreset toy_preset() {
  ToyPreset p;
  p.schedule.seed = 11;
  return p;
}

inline std::vector<TokenSeq> toy_calibration(const ToyPreset& p = toy_preset()) {
  return generate_calibration(p.seed, p.calib_samples, p.calib_len, p.config.vocab);
}

inline TransformerModel toy_model(const ToyPreset& p = toy_preset()) {
  TransformerModel m = build_model(p.config, p.seed);
  return train_model(m, toy_calibration(p), p.train_epochs, p.train_lr, p.seed);
}

}  // namespace pdprune
