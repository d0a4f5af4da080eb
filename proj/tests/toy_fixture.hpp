#pragma once

#include "pdprune/analysis.hpp"
#include "pdprune/presets.hpp"
#include "pdprune/transformer.hpp"

namespace toy {

// Trained once per test binary; everything downstream is deterministic.
inline const pdprune::ToyPreset& preset() {
  static const pdprune::ToyPreset p = pdprune::toy_preset();
  return p;
}

inline const pdprune::TransformerModel& model() {
  static const pdprune::TransformerModel m = pdprune::toy_model(preset());
  return m;
}

inline const std::vector<pdprune::TokenSeq>& calibration() {
  static const std::vector<pdprune::TokenSeq> c = pdprune::toy_calibration(preset());
  return c;
}

inline const std::vector<pdprune::HiddenTrace>& traces() {
  static const std::vector<pdprune::HiddenTrace> t =
      pdprune::collect_traces(pdprune::full_view(model()), calibration());
  return t;
}

inline const pdprune::RedundancyProfile& profile() {
  static const pdprune::RedundancyProfile p = pdprune::compute_profile(traces());
  return p;
}

inline const pdprune::SetPartition& partition() {
  static const pdprune::SetPartition part =
      pdprune::build_partition(profile(), preset().k, preset().d_threshold);
  return part;
}

}  // namespace toy
