#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fen {

// Pass bar for every finite-difference probe in the suite.
inline constexpr double kGradTolerance = 1e-5;

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Finite-difference verification of every layer kind, the enhanced proposal
// head, the hyper-feature path, position-sensitive pooling, the adaptive
// fusion chain, and the end-to-end training loss on a toy scene. Deterministic
// for a given seed.
std::vector<GradCheckRow> run_gradient_suite(std::uint64_t seed);

}  // namespace fen
