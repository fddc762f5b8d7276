#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "fen/errors.hpp"
#include "fen/loss.hpp"

using namespace fen;

TEST_CASE("cross entropy is -log of the true-class probability") {
  CHECK(cross_entropy(std::vector<double>{1.0, 0.0}, 0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cross_entropy(std::vector<double>{0.5, 0.5}, 1) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(cross_entropy(std::vector<double>{0.25, 0.75}, 1) ==
        doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  // the floor keeps a zero probability finite
  CHECK(cross_entropy(std::vector<double>{0.0, 1.0}, 0) ==
        doctest::Approx(-std::log(1e-12)).epsilon(1e-9));
}

TEST_CASE("cross entropy gradient is concentrated on the true class") {
  const std::vector<double> p{0.2, 0.8};
  const std::vector<double> g = cross_entropy_grad(p, 1);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == doctest::Approx(-1.25).epsilon(1e-12));
  const double eps = 1e-7;
  const double fd =
      (cross_entropy(std::vector<double>{0.2, 0.8 + eps}, 1) -
       cross_entropy(std::vector<double>{0.2, 0.8 - eps}, 1)) /
      (2.0 * eps);
  CHECK(g[1] == doctest::Approx(fd).epsilon(1e-5));
}

TEST_CASE("smooth l1 has the quadratic core and linear tails") {
  const DeltaVector zero{};
  CHECK(smooth_l1(zero, zero) == 0.0);
  // single active component, |d| = 2 -> 1.5
  CHECK(smooth_l1(DeltaVector{2.0, 0, 0, 0}, zero) == doctest::Approx(1.5).epsilon(1e-12));
  // |d| = 0.5 -> 0.125
  CHECK(smooth_l1(DeltaVector{0, 0.5, 0, 0}, zero) == doctest::Approx(0.125).epsilon(1e-12));
  // components sum
  CHECK(smooth_l1(DeltaVector{2.0, 0.5, 0, 0}, zero) == doctest::Approx(1.625).epsilon(1e-12));
  // continuity at the knee
  const double below = smooth_l1(DeltaVector{1.0 - 1e-9, 0, 0, 0}, zero);
  const double above = smooth_l1(DeltaVector{1.0 + 1e-9, 0, 0, 0}, zero);
  CHECK(below == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(above == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("smooth l1 gradient matches finite differences") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  for (int t = 0; t < 50; ++t) {
    const DeltaVector p{dist(rng), dist(rng), dist(rng), dist(rng)};
    const DeltaVector tgt{dist(rng), dist(rng), dist(rng), dist(rng)};
    const DeltaVector g = smooth_l1_grad(p, tgt);
    const double eps = 1e-6;
    auto fd = [&](int k) {
      DeltaVector hi = p, lo = p;
      switch (k) {
        case 0: hi.dx += eps; lo.dx -= eps; break;
        case 1: hi.dy += eps; lo.dy -= eps; break;
        case 2: hi.dw += eps; lo.dw -= eps; break;
        default: hi.dh += eps; lo.dh -= eps; break;
      }
      return (smooth_l1(hi, tgt) - smooth_l1(lo, tgt)) / (2.0 * eps);
    };
    CHECK(g.dx == doctest::Approx(fd(0)).epsilon(1e-4));
    CHECK(g.dy == doctest::Approx(fd(1)).epsilon(1e-4));
    CHECK(g.dw == doctest::Approx(fd(2)).epsilon(1e-4));
    CHECK(g.dh == doctest::Approx(fd(3)).epsilon(1e-4));
  }
}

TEST_CASE("multitask loss normalises by the positive count") {
  // one positive with perfect localization: total = CE / 1
  LossSample pos;
  pos.probs = {0.5, 0.5};
  pos.truth = 1;
  pos.positive = true;
  pos.predicted = DeltaVector{};
  pos.target = DeltaVector{};
  const LossReport r1 = multitask_loss(std::vector<LossSample>{pos});
  CHECK(r1.matched == 1);
  CHECK(r1.total == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(r1.loc_term == 0.0);

  // two negatives, no positives: normalizer stays 1
  LossSample neg = pos;
  neg.positive = false;
  neg.truth = 0;
  const LossReport r2 = multitask_loss(std::vector<LossSample>{neg, neg});
  CHECK(r2.matched == 0);
  CHECK(r2.total == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));

  // localization enters only through positives, scaled by lambda
  LossSample off = pos;
  off.predicted = DeltaVector{2.0, 0, 0, 0};
  const LossReport r3 = multitask_loss(std::vector<LossSample>{off, neg}, 2.0);
  CHECK(r3.matched == 1);
  CHECK(r3.lambda == 2.0);
  CHECK(r3.total == doctest::Approx(2.0 * std::log(2.0) + 2.0 * 1.5).epsilon(1e-12));
  CHECK(r3.total == doctest::Approx(r3.cls_term + r3.lambda * r3.loc_term).epsilon(1e-12));
}

TEST_CASE("multitask loss averages over positives") {
  LossSample a;
  a.probs = {0.2, 0.8};
  a.truth = 1;
  a.positive = true;
  a.predicted = DeltaVector{0.5, 0, 0, 0};
  a.target = DeltaVector{};
  LossSample b = a;
  b.probs = {0.4, 0.6};
  const LossReport r = multitask_loss(std::vector<LossSample>{a, b}, 1.0);
  CHECK(r.matched == 2);
  const double ce = -std::log(0.8) - std::log(0.6);
  const double loc = 2.0 * 0.125;
  CHECK(r.cls_term == doctest::Approx(ce / 2.0).epsilon(1e-12));
  CHECK(r.loc_term == doctest::Approx(loc / 2.0).epsilon(1e-12));
  CHECK(r.total == doctest::Approx((ce + loc) / 2.0).epsilon(1e-12));
}

TEST_CASE("multitask loss rejects empty input") {
  CHECK_THROWS_AS(multitask_loss(std::vector<LossSample>{}), std::invalid_argument);
}

TEST_CASE("sgd takes one plain step when momentum is zero") {
  ParameterStore params;
  Tensor& v = params.create("w", {1});
  v[0] = 1.0;
  params.grad("w")[0] = 1.0;
  SgdOptimizer opt(0.1, 0.0);
  opt.step(params);
  CHECK(params.value("w")[0] == doctest::Approx(0.9).epsilon(1e-12));
  // grads were consumed
  CHECK(params.grad("w")[0] == 0.0);
}

TEST_CASE("momentum accumulates velocity across steps") {
  ParameterStore params;
  Tensor& v = params.create("w", {1});
  v[0] = 0.0;
  SgdOptimizer opt(0.1, 0.9);
  params.grad("w")[0] = 1.0;
  opt.step(params);  // v = -0.1, w = -0.1
  CHECK(params.value("w")[0] == doctest::Approx(-0.1).epsilon(1e-12));
  params.grad("w")[0] = 1.0;
  opt.step(params);  // v = -0.09 - 0.1 = -0.19, w = -0.29
  CHECK(params.value("w")[0] == doctest::Approx(-0.29).epsilon(1e-12));
}

TEST_CASE("sgd minimises a quadratic bowl") {
  ParameterStore params;
  Tensor& v = params.create("w", {2});
  v[0] = 3.0;
  v[1] = -2.0;
  SgdOptimizer opt(0.05, 0.9);
  for (int it = 0; it < 200; ++it) {
    // loss = 0.5 * |w|^2, grad = w
    params.grad("w")[0] = params.value("w")[0];
    params.grad("w")[1] = params.value("w")[1];
    opt.step(params);
  }
  CHECK(std::abs(params.value("w")[0]) < 1e-3);
  CHECK(std::abs(params.value("w")[1]) < 1e-3);
}

TEST_CASE("non-finite gradients name the offending parameter") {
  ParameterStore params;
  Tensor& v = params.create("bad_weight", {1});
  v[0] = 1.0;
  params.grad("bad_weight")[0] = std::numeric_limits<double>::quiet_NaN();
  SgdOptimizer opt(0.1, 0.0);
  CHECK_THROWS_WITH_AS(opt.step(params), doctest::Contains("bad_weight"), NumericError);
}
