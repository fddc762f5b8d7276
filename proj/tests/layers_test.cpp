#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "fen/layers.hpp"

using namespace fen;

namespace {

Tensor random_tensor(std::vector<int> dims, std::mt19937_64& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(dims));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

// Wraps one layer as a scalar objective: inputs live in the store alongside
// the layer's own parameters, loss = sum(output * fixed_probe).
double layer_grad_error(const LayerSpec& spec, const std::vector<std::vector<int>>& input_dims,
                        std::uint64_t seed, bool nonneg_inputs = false) {
  std::mt19937_64 rng(seed);
  ParameterStore params;
  init_layer_params(spec, params, rng);
  std::vector<std::string> input_names;
  for (std::size_t i = 0; i < input_dims.size(); ++i) {
    const std::string name = "input" + std::to_string(i);
    input_names.push_back(name);
    Tensor& v = params.create(name, input_dims[i]);
    v = random_tensor(input_dims[i], rng, nonneg_inputs ? 0.1 : -1.0, 1.0);
  }

  LayerCache shape_cache;
  std::vector<Tensor> inputs;
  for (const auto& n : input_names) inputs.push_back(params.value(n));
  const Tensor probe = random_tensor(
      layer_forward(spec, params, inputs, shape_cache).dims(), rng);

  LossFn fn = [&](ParameterStore& p, bool with_grad) {
    std::vector<Tensor> ins;
    for (const auto& n : input_names) ins.push_back(p.value(n));
    LayerCache cache;
    const Tensor out = layer_forward(spec, p, ins, cache);
    const double loss = (out.array() * probe.array()).sum();
    if (with_grad) {
      Tensor grad_out = probe;
      const std::vector<Tensor> gin = layer_backward(spec, p, grad_out, cache);
      for (std::size_t i = 0; i < input_names.size(); ++i)
        p.grad(input_names[i]).array() += gin[i].array();
    }
    return loss;
  };
  return grad_check(fn, params);
}

}  // namespace

TEST_CASE("conv gradient matches finite differences") {
  CHECK(layer_grad_error(LayerSpec::conv("c", 3, 4, 3, 3), {{3, 5, 6}}, 11) < 1e-5);
}

TEST_CASE("strided conv gradient matches finite differences") {
  CHECK(layer_grad_error(LayerSpec::conv("c", 3, 4, 3, 3, 2), {{3, 6, 8}}, 12) < 1e-5);
}

TEST_CASE("wide 1x3 conv gradient matches finite differences") {
  CHECK(layer_grad_error(LayerSpec::conv("c", 3, 4, 1, 3), {{3, 5, 6}}, 13) < 1e-5);
}

TEST_CASE("maxpool gradient matches finite differences") {
  // positive inputs keep argmax winners clear of ties under the probe step
  CHECK(layer_grad_error(LayerSpec::maxpool(), {{3, 6, 8}}, 14, true) < 1e-5);
}

TEST_CASE("upsample_conv gradient matches finite differences") {
  CHECK(layer_grad_error(LayerSpec::upsample_conv("u", 3, 4), {{3, 4, 5}}, 15) < 1e-5);
}

TEST_CASE("concat gradient matches finite differences") {
  CHECK(layer_grad_error(LayerSpec::concat(), {{2, 4, 5}, {3, 4, 5}}, 16) < 1e-5);
}

TEST_CASE("relu gradient matches finite differences") {
  CHECK(layer_grad_error(LayerSpec::relu(), {{3, 5, 6}}, 17) < 1e-5);
}

TEST_CASE("bottleneck gradient matches finite differences") {
  CHECK(layer_grad_error(LayerSpec::bottleneck("b", 4, 3), {{4, 5, 6}}, 18) < 1e-5);
}

TEST_CASE("residual block is the identity at initialization") {
  std::mt19937_64 rng(21);
  const LayerSpec spec = LayerSpec::residual_block("r", 3);
  ParameterStore params;
  init_layer_params(spec, params, rng);
  const Tensor x = random_tensor({3, 6, 7}, rng);
  LayerCache cache;
  const Tensor y = layer_forward(spec, params, x, cache);
  REQUIRE(y.dims() == x.dims());
  for (Eigen::Index i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i]));
}

TEST_CASE("residual block gradient matches finite differences off the identity") {
  std::mt19937_64 rng(22);
  const LayerSpec spec = LayerSpec::residual_block("r", 3);
  ParameterStore params;
  init_layer_params(spec, params, rng);
  // move conv2 off its zero init so the identity does not mask errors
  std::uniform_real_distribution<double> w(-0.4, 0.4);
  Tensor& conv2 = params.value("r.conv2.weight");
  for (Eigen::Index i = 0; i < conv2.size(); ++i) conv2[i] = w(rng);
  Tensor& b2 = params.value("r.conv2.bias");
  for (Eigen::Index i = 0; i < b2.size(); ++i) b2[i] = w(rng) / 2.0;

  const Tensor x = random_tensor({3, 5, 6}, rng);
  params.create("input0", x.dims());
  params.value("input0") = x;
  LayerCache shape_cache;
  const Tensor probe = random_tensor(layer_forward(spec, params, x, shape_cache).dims(), rng);

  LossFn fn = [&](ParameterStore& p, bool with_grad) {
    LayerCache cache;
    const Tensor out = layer_forward(spec, p, p.value("input0"), cache);
    const double loss = (out.array() * probe.array()).sum();
    if (with_grad) {
      const std::vector<Tensor> gin = layer_backward(spec, p, probe, cache);
      p.grad("input0").array() += gin[0].array();
    }
    return loss;
  };
  CHECK(grad_check(fn, params) < 1e-5);
}

TEST_CASE("a corrupted backward pass fails the gradient check") {
  // negative control: the checker must flag a deliberately wrong adjoint
  std::mt19937_64 rng(23);
  ParameterStore params;
  Tensor& v = params.create("x", {4});
  for (Eigen::Index i = 0; i < 4; ++i) v[i] = 0.5 + 0.1 * static_cast<double>(i);

  LossFn wrong = [](ParameterStore& p, bool with_grad) {
    const Tensor& x = p.value("x");
    double loss = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) loss += x[i] * x[i];
    if (with_grad) {
      Tensor& g = p.grad("x");
      for (Eigen::Index i = 0; i < x.size(); ++i) g[i] += 3.0 * x[i];  // truth: 2x
    }
    return loss;
  };
  CHECK(grad_check(wrong, params) > 1e-2);
}

TEST_CASE("mismatched input channels raise an error naming the layer") {
  std::mt19937_64 rng(24);
  const LayerSpec spec = LayerSpec::conv("badc", 3, 4, 3, 3);
  ParameterStore params;
  init_layer_params(spec, params, rng);
  LayerCache cache;
  const Tensor wrong(std::vector<int>{2, 5, 5});
  CHECK_THROWS_WITH_AS(layer_forward(spec, params, wrong, cache),
                       doctest::Contains("badc"), std::invalid_argument);
}

TEST_CASE("concat requires matching spatial dims") {
  ParameterStore params;
  LayerCache cache;
  const std::vector<Tensor> ins{Tensor({2, 4, 4}), Tensor({2, 5, 4})};
  CHECK_THROWS_AS(layer_forward(LayerSpec::concat(), params, ins, cache),
                  std::invalid_argument);
}

TEST_CASE("replicate padding and crop are mutual adjoints") {
  std::mt19937_64 rng(25);
  const Tensor x = random_tensor({2, 3, 4}, rng);
  const Tensor padded = pad_replicate_hw(x, 5, 6);
  CHECK(padded.height() == 5);
  CHECK(padded.width() == 6);
  // replicated border repeats the last row/column
  CHECK(padded(0, 4, 5) == doctest::Approx(x(0, 2, 3)));
  const Tensor cropped = crop_hw(padded, 3, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) CHECK(cropped[i] == doctest::Approx(x[i]));
}
