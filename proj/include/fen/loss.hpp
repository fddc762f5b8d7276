#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fen/geometry.hpp"
#include "fen/tensor.hpp"

namespace fen {

// -log of the probability assigned to the true class, floored at 1e-12.
double cross_entropy(std::span<const double> probs, std::size_t truth);

// d(cross_entropy)/d(probs): -1/max(p, 1e-12) at the true class, 0 elsewhere.
std::vector<double> cross_entropy_grad(std::span<const double> probs, std::size_t truth);

// Summed over the four components: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise,
// d = predicted - target.
double smooth_l1(const DeltaVector& predicted, const DeltaVector& target);
DeltaVector smooth_l1_grad(const DeltaVector& predicted, const DeltaVector& target);

struct LossSample {
  std::vector<double> probs;  // predicted class distribution
  std::size_t truth = 0;
  bool positive = false;  // positives also contribute the localization term
  DeltaVector predicted;
  DeltaVector target;
};

struct LossReport {
  double total = 0.0;
  double cls_term = 0.0;  // already divided by the normalizer
  double loc_term = 0.0;
  std::size_t matched = 0;  // positive count
  double lambda = 1.0;
};

// total = (sum CE + lambda * sum smooth_l1 over positives) / max(1, matched).
// cls_term and loc_term carry the same normalizer, so
// total == cls_term + lambda * loc_term always holds. Empty input is an
// error.
LossReport multitask_loss(std::span<const LossSample> samples, double lambda = 1.0);

// SGD with classical momentum: v <- momentum*v - lr*grad; value <- value + v.
// step() consumes and zeroes the gradients. Non-finite gradients raise
// NumericError naming the parameter.
class SgdOptimizer {
 public:
  SgdOptimizer(double learning_rate, double momentum);
  void step(ParameterStore& params);

 private:
  double lr_;
  double momentum_;
  std::map<std::string, Eigen::ArrayXd> velocity_;
};

}  // namespace fen
