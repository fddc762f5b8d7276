#include "fen/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fen/errors.hpp"

namespace fen {

namespace {
constexpr double kProbFloor = 1e-12;

double smooth_l1_component(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

double smooth_l1_component_grad(double d) {
  if (d >= 1.0) return 1.0;
  if (d <= -1.0) return -1.0;
  return d;
}
}  // namespace

double cross_entropy(std::span<const double> probs, std::size_t truth) {
  if (truth >= probs.size()) throw std::invalid_argument("cross_entropy: truth out of range");
  return -std::log(std::max(probs[truth], kProbFloor));
}

std::vector<double> cross_entropy_grad(std::span<const double> probs, std::size_t truth) {
  if (truth >= probs.size()) throw std::invalid_argument("cross_entropy: truth out of range");
  std::vector<double> g(probs.size(), 0.0);
  g[truth] = -1.0 / std::max(probs[truth], kProbFloor);
  return g;
}

double smooth_l1(const DeltaVector& predicted, const DeltaVector& target) {
  return smooth_l1_component(predicted.dx - target.dx) +
         smooth_l1_component(predicted.dy - target.dy) +
         smooth_l1_component(predicted.dw - target.dw) +
         smooth_l1_component(predicted.dh - target.dh);
}

DeltaVector smooth_l1_grad(const DeltaVector& predicted, const DeltaVector& target) {
  DeltaVector g;
  g.dx = smooth_l1_component_grad(predicted.dx - target.dx);
  g.dy = smooth_l1_component_grad(predicted.dy - target.dy);
  g.dw = smooth_l1_component_grad(predicted.dw - target.dw);
  g.dh = smooth_l1_component_grad(predicted.dh - target.dh);
  return g;
}

LossReport multitask_loss(std::span<const LossSample> samples, double lambda) {
  if (samples.empty()) throw std::invalid_argument("multitask_loss: no samples");
  double cls = 0.0, loc = 0.0;
  std::size_t matched = 0;
  for (const LossSample& s : samples) {
    cls += cross_entropy(s.probs, s.truth);
    if (s.positive) {
      loc += smooth_l1(s.predicted, s.target);
      ++matched;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, matched));
  LossReport r;
  r.cls_term = cls / n;
  r.loc_term = loc / n;
  r.matched = matched;
  r.lambda = lambda;
  r.total = r.cls_term + lambda * r.loc_term;
  return r;
}

SgdOptimizer::SgdOptimizer(double learning_rate, double momentum)
    : lr_(learning_rate), momentum_(momentum) {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("SgdOptimizer: bad learning rate");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("SgdOptimizer: bad momentum");
}

void SgdOptimizer::step(ParameterStore& params) {
  for (auto& [name, p] : params) {
    if (!p.grad.all_finite()) throw NumericError("SgdOptimizer: non-finite gradient in " + name);
    auto [it, inserted] = velocity_.try_emplace(name, Eigen::ArrayXd::Zero(p.value.size()));
    if (!inserted && it->second.size() != p.value.size())
      throw std::invalid_argument("SgdOptimizer: parameter shape changed: " + name);
    it->second = momentum_ * it->second - lr_ * p.grad.array();
    p.value.array() += it->second;
    p.grad.set_zero();
  }
}

}  // namespace fen
