#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fen/tensor.hpp"

namespace fen {

// Layer vocabulary. Every layer runs on rank-3 (C,H,W) tensors, batch of one.
enum class LayerKind {
  conv,            // 2d convolution, zero padding
  maxpool,         // 2x2, stride 2
  upsample_conv,   // x2 nearest-neighbour upsample followed by a 3x3 conv
  concat,          // channel concatenation
  relu,
  residual_block,  // conv3x3 -> relu -> conv3x3, plus identity skip
  bottleneck,      // 1x1 conv
};

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::string name;  // parameter prefix; empty for parameter-free layers
  int in_channels = 0;
  int out_channels = 0;
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;

  // pads default to kh/2, kw/2
  static LayerSpec conv(std::string name, int in, int out, int kh, int kw, int stride = 1);
  static LayerSpec conv(std::string name, int in, int out, int kh, int kw, int stride, int pad_h,
                        int pad_w);
  static LayerSpec maxpool();
  static LayerSpec upsample_conv(std::string name, int in, int out);
  static LayerSpec concat();
  static LayerSpec relu();
  static LayerSpec residual_block(std::string name, int channels);
  static LayerSpec bottleneck(std::string name, int in, int out);
};

// Forward byproducts needed by the matching backward call.
struct LayerCache {
  bool ready = false;
  std::vector<int> in_dims;
  std::vector<int> split_channels;    // concat
  Tensor patches;                     // im2col matrix of conv-like layers
  std::vector<std::int64_t> argmax;   // maxpool winners, flat input indices
  Tensor saved;                       // relu input / residual pre-activation
  std::vector<LayerCache> sub;        // composite layers
  int out_h = 0;
  int out_w = 0;
};

// Creates this layer's parameters. Weights draw from
// uniform(+-sqrt(6/(fan_in+fan_out))), biases start at zero. The residual
// block's second conv starts at zero so the block is the identity at init.
void init_layer_params(const LayerSpec& spec, ParameterStore& params, std::mt19937_64& rng);

// Runs the layer. Mismatched input shapes raise std::invalid_argument naming
// the layer.
Tensor layer_forward(const LayerSpec& spec, const ParameterStore& params,
                     std::span<const Tensor> inputs, LayerCache& cache);
Tensor layer_forward(const LayerSpec& spec, const ParameterStore& params, const Tensor& input,
                     LayerCache& cache);

// Accumulates parameter gradients into `params` and returns the gradient with
// respect to each input. Requires a cache produced by layer_forward.
std::vector<Tensor> layer_backward(const LayerSpec& spec, ParameterStore& params,
                                   const Tensor& grad_out, const LayerCache& cache);

// Replicates the last row/column out to (out_h, out_w); adjoint folds the
// replicated cells back.
Tensor pad_replicate_hw(const Tensor& x, int out_h, int out_w);
Tensor pad_replicate_hw_backward(const Tensor& grad_out, int in_h, int in_w);

// Top-left crop to (out_h, out_w); adjoint zero-pads back to (in_h, in_w).
Tensor crop_hw(const Tensor& x, int out_h, int out_w);
Tensor crop_hw_backward(const Tensor& grad_out, int in_h, int in_w);

// Scalar objective over a parameter store. The bool selects whether the call
// must also accumulate gradients (grads are pre-zeroed by the checker).
using LossFn = std::function<double(ParameterStore&, bool)>;

// Central finite differences against the analytic gradient, every element of
// every parameter. Returns the worst relative error
// |a - n| / max(1e-8, |a| + |n|). Non-finite losses raise NumericError.
double grad_check(const LossFn& fn, ParameterStore& params, double eps = 1e-5);

// Same check restricted to `samples_per_tensor` randomly chosen elements per
// parameter, for objectives too large to sweep exhaustively.
double grad_check_sampled(const LossFn& fn, ParameterStore& params, double eps,
                          int samples_per_tensor, std::uint64_t seed);

// Same check restricted to the `per_tensor` largest-magnitude analytic
// entries of each parameter. Central differences resolve an entry only while
// its gradient stays well above the objective's rounding noise, so a deep
// objective is probed where the signal is.
double grad_check_largest(const LossFn& fn, ParameterStore& params, double eps, int per_tensor);

}  // namespace fen
