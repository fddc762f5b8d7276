#include "fen/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "fen/errors.hpp"

namespace fen {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

std::string layer_label(const LayerSpec& spec) {
  const char* kind = nullptr;
  switch (spec.kind) {
    case LayerKind::conv: kind = "conv"; break;
    case LayerKind::maxpool: kind = "maxpool"; break;
    case LayerKind::upsample_conv: kind = "upsample_conv"; break;
    case LayerKind::concat: kind = "concat"; break;
    case LayerKind::relu: kind = "relu"; break;
    case LayerKind::residual_block: kind = "residual_block"; break;
    case LayerKind::bottleneck: kind = "bottleneck"; break;
  }
  std::string label = kind;
  if (!spec.name.empty()) label += " '" + spec.name + "'";
  return label;
}

[[noreturn]] void layer_error(const LayerSpec& spec, const std::string& what) {
  throw std::invalid_argument(layer_label(spec) + ": " + what);
}

void require_rank3(const LayerSpec& spec, const Tensor& t) {
  if (t.rank() != 3) layer_error(spec, "expected rank-3 input");
}

int conv_extent(int in, int pad, int kernel, int stride) {
  return (in + 2 * pad - kernel) / stride + 1;
}

Tensor im2col(const Tensor& x, int kh, int kw, int stride, int ph, int pw, int out_h, int out_w) {
  const int C = x.channels(), H = x.height(), W = x.width();
  const Eigen::Index P = static_cast<Eigen::Index>(out_h) * out_w;
  Tensor patches({C * kh * kw, out_h * out_w});
  double* base = patches.data();
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const int r = (c * kh + ky) * kw + kx;
        double* row = base + r * P;
        for (int oy = 0; oy < out_h; ++oy) {
          const int y = oy * stride + ky - ph;
          if (y < 0 || y >= H) continue;  // rows start zeroed
          for (int ox = 0; ox < out_w; ++ox) {
            const int xx = ox * stride + kx - pw;
            if (xx >= 0 && xx < W) row[oy * out_w + ox] = x(c, y, xx);
          }
        }
      }
    }
  }
  return patches;
}

void col2im_add(const Tensor& patches, int kh, int kw, int stride, int ph, int pw, int out_h,
                int out_w, Tensor& grad_in) {
  const int C = grad_in.channels(), H = grad_in.height(), W = grad_in.width();
  const Eigen::Index P = static_cast<Eigen::Index>(out_h) * out_w;
  const double* base = patches.data();
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const int r = (c * kh + ky) * kw + kx;
        const double* row = base + r * P;
        for (int oy = 0; oy < out_h; ++oy) {
          const int y = oy * stride + ky - ph;
          if (y < 0 || y >= H) continue;
          for (int ox = 0; ox < out_w; ++ox) {
            const int xx = ox * stride + kx - pw;
            if (xx >= 0 && xx < W) grad_in(c, y, xx) += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

Tensor conv_forward_impl(const LayerSpec& spec, const Tensor& x, const Tensor& w, const Tensor& b,
                         LayerCache& cache) {
  const int O = w.dim(0), I = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (x.channels() != I)
    layer_error(spec, "input has " + std::to_string(x.channels()) + " channels, expected " +
                          std::to_string(I));
  const int out_h = conv_extent(x.height(), spec.pad_h, kh, spec.stride);
  const int out_w = conv_extent(x.width(), spec.pad_w, kw, spec.stride);
  if (out_h <= 0 || out_w <= 0) layer_error(spec, "input smaller than kernel");

  cache.in_dims = x.dims();
  cache.out_h = out_h;
  cache.out_w = out_w;
  cache.patches = im2col(x, kh, kw, spec.stride, spec.pad_h, spec.pad_w, out_h, out_w);

  const Eigen::Index K = static_cast<Eigen::Index>(I) * kh * kw;
  const Eigen::Index P = static_cast<Eigen::Index>(out_h) * out_w;
  Tensor out({O, out_h, out_w});
  MapConstMat wm(w.data(), O, K);
  MapConstMat pm(cache.patches.data(), K, P);
  MapMat om(out.data(), O, P);
  om.noalias() = wm * pm;
  om.colwise() += Eigen::Map<const Eigen::VectorXd>(b.data(), O);
  return out;
}

Tensor conv_backward_impl(const LayerSpec& spec, const Tensor& grad_out, const Tensor& w,
                          Tensor& grad_w, Tensor& grad_b, const LayerCache& cache) {
  const int O = w.dim(0), I = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (grad_out.channels() != O || grad_out.height() != cache.out_h ||
      grad_out.width() != cache.out_w)
    layer_error(spec, "gradient shape does not match forward output");

  const Eigen::Index K = static_cast<Eigen::Index>(I) * kh * kw;
  const Eigen::Index P = static_cast<Eigen::Index>(cache.out_h) * cache.out_w;
  MapConstMat gom(grad_out.data(), O, P);
  MapConstMat pm(cache.patches.data(), K, P);
  MapConstMat wm(w.data(), O, K);

  Eigen::Map<Eigen::VectorXd>(grad_b.data(), O) += gom.rowwise().sum();
  MapMat(grad_w.data(), O, K).noalias() += gom * pm.transpose();

  Tensor grad_patches({static_cast<int>(K), static_cast<int>(P)});
  MapMat(grad_patches.data(), K, P).noalias() = wm.transpose() * gom;

  Tensor grad_in(cache.in_dims);
  col2im_add(grad_patches, kh, kw, spec.stride, spec.pad_h, spec.pad_w, cache.out_h, cache.out_w,
             grad_in);
  return grad_in;
}

void init_conv_weights(ParameterStore& params, const std::string& prefix, int in, int out, int kh,
                       int kw, std::mt19937_64& rng, bool zero) {
  Tensor& w = params.create(prefix + ".weight", {out, in, kh, kw});
  params.create(prefix + ".bias", {out});
  if (!zero) {
    const double fan_in = static_cast<double>(in) * kh * kw;
    const double fan_out = static_cast<double>(out) * kh * kw;
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = dist(rng);
  }
}

LayerSpec residual_conv1(const LayerSpec& spec) {
  return LayerSpec::conv(spec.name + ".conv1", spec.in_channels, spec.in_channels, 3, 3);
}

LayerSpec residual_conv2(const LayerSpec& spec) {
  return LayerSpec::conv(spec.name + ".conv2", spec.in_channels, spec.in_channels, 3, 3);
}

LayerSpec upsample_inner_conv(const LayerSpec& spec) {
  return LayerSpec::conv(spec.name, spec.in_channels, spec.out_channels, 3, 3);
}

Tensor upsample_nearest2x(const Tensor& x) {
  Tensor out({x.channels(), 2 * x.height(), 2 * x.width()});
  for (int c = 0; c < x.channels(); ++c)
    for (int y = 0; y < out.height(); ++y)
      for (int xx = 0; xx < out.width(); ++xx) out(c, y, xx) = x(c, y / 2, xx / 2);
  return out;
}

Tensor upsample_nearest2x_backward(const Tensor& grad_out) {
  Tensor grad_in({grad_out.channels(), grad_out.height() / 2, grad_out.width() / 2});
  for (int c = 0; c < grad_out.channels(); ++c)
    for (int y = 0; y < grad_out.height(); ++y)
      for (int xx = 0; xx < grad_out.width(); ++xx)
        grad_in(c, y / 2, xx / 2) += grad_out(c, y, xx);
  return grad_in;
}

}  // namespace

LayerSpec LayerSpec::conv(std::string name, int in, int out, int kh, int kw, int stride) {
  return conv(std::move(name), in, out, kh, kw, stride, kh / 2, kw / 2);
}

LayerSpec LayerSpec::conv(std::string name, int in, int out, int kh, int kw, int stride, int pad_h,
                          int pad_w) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.name = std::move(name);
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_h = kh;
  s.kernel_w = kw;
  s.stride = stride;
  s.pad_h = pad_h;
  s.pad_w = pad_w;
  return s;
}

LayerSpec LayerSpec::maxpool() {
  LayerSpec s;
  s.kind = LayerKind::maxpool;
  s.kernel_h = 2;
  s.kernel_w = 2;
  s.stride = 2;
  return s;
}

LayerSpec LayerSpec::upsample_conv(std::string name, int in, int out) {
  LayerSpec s;
  s.kind = LayerKind::upsample_conv;
  s.name = std::move(name);
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_h = 3;
  s.kernel_w = 3;
  s.pad_h = 1;
  s.pad_w = 1;
  return s;
}

LayerSpec LayerSpec::concat() {
  LayerSpec s;
  s.kind = LayerKind::concat;
  return s;
}

LayerSpec LayerSpec::relu() {
  LayerSpec s;
  s.kind = LayerKind::relu;
  return s;
}

LayerSpec LayerSpec::residual_block(std::string name, int channels) {
  LayerSpec s;
  s.kind = LayerKind::residual_block;
  s.name = std::move(name);
  s.in_channels = channels;
  s.out_channels = channels;
  return s;
}

LayerSpec LayerSpec::bottleneck(std::string name, int in, int out) {
  LayerSpec s;
  s.kind = LayerKind::bottleneck;
  s.name = std::move(name);
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_h = 1;
  s.kernel_w = 1;
  return s;
}

void init_layer_params(const LayerSpec& spec, ParameterStore& params, std::mt19937_64& rng) {
  switch (spec.kind) {
    case LayerKind::conv:
    case LayerKind::bottleneck:
    case LayerKind::upsample_conv:
      init_conv_weights(params, spec.name, spec.in_channels, spec.out_channels, spec.kernel_h,
                        spec.kernel_w, rng, false);
      break;
    case LayerKind::residual_block:
      // second conv starts at zero: block == identity at init
      init_conv_weights(params, spec.name + ".conv1", spec.in_channels, spec.in_channels, 3, 3,
                        rng, false);
      init_conv_weights(params, spec.name + ".conv2", spec.in_channels, spec.in_channels, 3, 3,
                        rng, true);
      break;
    case LayerKind::maxpool:
    case LayerKind::concat:
    case LayerKind::relu:
      break;
  }
}

Tensor layer_forward(const LayerSpec& spec, const ParameterStore& params, const Tensor& input,
                     LayerCache& cache) {
  return layer_forward(spec, params, std::span<const Tensor>(&input, 1), cache);
}

Tensor layer_forward(const LayerSpec& spec, const ParameterStore& params,
                     std::span<const Tensor> inputs, LayerCache& cache) {
  if (inputs.empty()) layer_error(spec, "no inputs");
  if (spec.kind != LayerKind::concat && inputs.size() != 1)
    layer_error(spec, "expected exactly one input");
  cache.ready = false;
  cache.sub.clear();

  Tensor out;
  switch (spec.kind) {
    case LayerKind::conv:
    case LayerKind::bottleneck: {
      require_rank3(spec, inputs[0]);
      out = conv_forward_impl(spec, inputs[0], params.value(spec.name + ".weight"),
                              params.value(spec.name + ".bias"), cache);
      break;
    }
    case LayerKind::maxpool: {
      require_rank3(spec, inputs[0]);
      const Tensor& x = inputs[0];
      if (x.height() % 2 != 0 || x.width() % 2 != 0)
        layer_error(spec, "input extent must be even");
      const int C = x.channels(), oh = x.height() / 2, ow = x.width() / 2;
      out = Tensor({C, oh, ow});
      cache.in_dims = x.dims();
      cache.argmax.assign(static_cast<std::size_t>(out.size()), 0);
      Eigen::Index o = 0;
      for (int c = 0; c < C; ++c) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox, ++o) {
            double best = -std::numeric_limits<double>::infinity();
            std::int64_t best_idx = 0;
            for (int dy = 0; dy < 2; ++dy) {
              for (int dx = 0; dx < 2; ++dx) {
                const int y = 2 * oy + dy, xx = 2 * ox + dx;
                const double v = x(c, y, xx);
                if (v > best) {
                  best = v;
                  best_idx = (static_cast<std::int64_t>(c) * x.height() + y) * x.width() + xx;
                }
              }
            }
            out[o] = best;
            cache.argmax[static_cast<std::size_t>(o)] = best_idx;
          }
        }
      }
      break;
    }
    case LayerKind::upsample_conv: {
      require_rank3(spec, inputs[0]);
      cache.in_dims = inputs[0].dims();
      Tensor up = upsample_nearest2x(inputs[0]);
      cache.sub.resize(1);
      out = conv_forward_impl(upsample_inner_conv(spec), up, params.value(spec.name + ".weight"),
                              params.value(spec.name + ".bias"), cache.sub[0]);
      break;
    }
    case LayerKind::concat: {
      const int H = inputs[0].height(), W = inputs[0].width();
      int C = 0;
      cache.split_channels.clear();
      for (const Tensor& t : inputs) {
        require_rank3(spec, t);
        if (t.height() != H || t.width() != W)
          layer_error(spec, "inputs disagree on spatial extent");
        cache.split_channels.push_back(t.channels());
        C += t.channels();
      }
      out = Tensor({C, H, W});
      Eigen::Index off = 0;
      for (const Tensor& t : inputs) {
        out.array().segment(off, t.size()) = t.array();
        off += t.size();
      }
      break;
    }
    case LayerKind::relu: {
      cache.saved = inputs[0];
      out = inputs[0];
      out.array() = out.array().max(0.0);
      break;
    }
    case LayerKind::residual_block: {
      require_rank3(spec, inputs[0]);
      if (inputs[0].channels() != spec.in_channels)
        layer_error(spec, "input has " + std::to_string(inputs[0].channels()) +
                              " channels, expected " + std::to_string(spec.in_channels));
      cache.sub.resize(2);
      const LayerSpec c1 = residual_conv1(spec), c2 = residual_conv2(spec);
      Tensor h1 = conv_forward_impl(c1, inputs[0], params.value(c1.name + ".weight"),
                                    params.value(c1.name + ".bias"), cache.sub[0]);
      cache.saved = h1;  // pre-activation, needed for the relu mask
      Tensor r1 = h1;
      r1.array() = r1.array().max(0.0);
      out = conv_forward_impl(c2, r1, params.value(c2.name + ".weight"),
                              params.value(c2.name + ".bias"), cache.sub[1]);
      out.array() += inputs[0].array();
      break;
    }
  }
  cache.ready = true;
  return out;
}

std::vector<Tensor> layer_backward(const LayerSpec& spec, ParameterStore& params,
                                   const Tensor& grad_out, const LayerCache& cache) {
  if (!cache.ready) layer_error(spec, "backward called before forward");

  switch (spec.kind) {
    case LayerKind::conv:
    case LayerKind::bottleneck: {
      Tensor grad_in = conv_backward_impl(spec, grad_out, params.value(spec.name + ".weight"),
                                          params.grad(spec.name + ".weight"),
                                          params.grad(spec.name + ".bias"), cache);
      return {std::move(grad_in)};
    }
    case LayerKind::maxpool: {
      Tensor grad_in(cache.in_dims);
      for (Eigen::Index o = 0; o < grad_out.size(); ++o)
        grad_in[cache.argmax[static_cast<std::size_t>(o)]] += grad_out[o];
      return {std::move(grad_in)};
    }
    case LayerKind::upsample_conv: {
      Tensor grad_up = conv_backward_impl(upsample_inner_conv(spec), grad_out,
                                          params.value(spec.name + ".weight"),
                                          params.grad(spec.name + ".weight"),
                                          params.grad(spec.name + ".bias"), cache.sub[0]);
      return {upsample_nearest2x_backward(grad_up)};
    }
    case LayerKind::concat: {
      std::vector<Tensor> grads;
      grads.reserve(cache.split_channels.size());
      Eigen::Index off = 0;
      const int H = grad_out.height(), W = grad_out.width();
      for (int c : cache.split_channels) {
        Tensor g({c, H, W});
        g.array() = grad_out.array().segment(off, g.size());
        off += g.size();
        grads.push_back(std::move(g));
      }
      return grads;
    }
    case LayerKind::relu: {
      Tensor grad_in = grad_out;
      grad_in.array() *= (cache.saved.array() > 0.0).cast<double>();
      return {std::move(grad_in)};
    }
    case LayerKind::residual_block: {
      const LayerSpec c1 = residual_conv1(spec), c2 = residual_conv2(spec);
      Tensor grad_r1 = conv_backward_impl(c2, grad_out, params.value(c2.name + ".weight"),
                                          params.grad(c2.name + ".weight"),
                                          params.grad(c2.name + ".bias"), cache.sub[1]);
      grad_r1.array() *= (cache.saved.array() > 0.0).cast<double>();
      Tensor grad_in = conv_backward_impl(c1, grad_r1, params.value(c1.name + ".weight"),
                                          params.grad(c1.name + ".weight"),
                                          params.grad(c1.name + ".bias"), cache.sub[0]);
      grad_in.array() += grad_out.array();  // identity skip
      return {std::move(grad_in)};
    }
  }
  layer_error(spec, "unreachable");
}

Tensor pad_replicate_hw(const Tensor& x, int out_h, int out_w) {
  if (out_h < x.height() || out_w < x.width())
    throw std::invalid_argument("pad_replicate_hw: target smaller than input");
  Tensor out({x.channels(), out_h, out_w});
  for (int c = 0; c < x.channels(); ++c)
    for (int y = 0; y < out_h; ++y)
      for (int xx = 0; xx < out_w; ++xx)
        out(c, y, xx) = x(c, std::min(y, x.height() - 1), std::min(xx, x.width() - 1));
  return out;
}

Tensor pad_replicate_hw_backward(const Tensor& grad_out, int in_h, int in_w) {
  Tensor grad_in({grad_out.channels(), in_h, in_w});
  for (int c = 0; c < grad_out.channels(); ++c)
    for (int y = 0; y < grad_out.height(); ++y)
      for (int xx = 0; xx < grad_out.width(); ++xx)
        grad_in(c, std::min(y, in_h - 1), std::min(xx, in_w - 1)) += grad_out(c, y, xx);
  return grad_in;
}

Tensor crop_hw(const Tensor& x, int out_h, int out_w) {
  if (out_h > x.height() || out_w > x.width())
    throw std::invalid_argument("crop_hw: target larger than input");
  Tensor out({x.channels(), out_h, out_w});
  for (int c = 0; c < x.channels(); ++c)
    for (int y = 0; y < out_h; ++y)
      for (int xx = 0; xx < out_w; ++xx) out(c, y, xx) = x(c, y, xx);
  return out;
}

Tensor crop_hw_backward(const Tensor& grad_out, int in_h, int in_w) {
  Tensor grad_in({grad_out.channels(), in_h, in_w});
  for (int c = 0; c < grad_out.channels(); ++c)
    for (int y = 0; y < grad_out.height(); ++y)
      for (int xx = 0; xx < grad_out.width(); ++xx) grad_in(c, y, xx) = grad_out(c, y, xx);
  return grad_in;
}

namespace {

double check_element(const LossFn& fn, ParameterStore& params, Tensor& value, Eigen::Index i,
                     double analytic, double eps) {
  const double orig = value[i];
  value[i] = orig + eps;
  const double fp = fn(params, false);
  value[i] = orig - eps;
  const double fm = fn(params, false);
  value[i] = orig;
  if (!std::isfinite(fp) || !std::isfinite(fm))
    throw NumericError("grad_check: non-finite loss during perturbation");
  const double numeric = (fp - fm) / (2.0 * eps);
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

}  // namespace

double grad_check(const LossFn& fn, ParameterStore& params, double eps) {
  params.zero_grads();
  const double base = fn(params, true);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");

  double worst = 0.0;
  for (auto& [name, p] : params) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i)
      worst = std::max(worst, check_element(fn, params, p.value, i, p.grad[i], eps));
  }
  return worst;
}

double grad_check_sampled(const LossFn& fn, ParameterStore& params, double eps,
                          int samples_per_tensor, std::uint64_t seed) {
  params.zero_grads();
  const double base = fn(params, true);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");

  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (auto& [name, p] : params) {
    const Eigen::Index n = p.value.size();
    if (n <= samples_per_tensor) {
      for (Eigen::Index i = 0; i < n; ++i)
        worst = std::max(worst, check_element(fn, params, p.value, i, p.grad[i], eps));
      continue;
    }
    std::uniform_int_distribution<Eigen::Index> dist(0, n - 1);
    for (int s = 0; s < samples_per_tensor; ++s) {
      const Eigen::Index i = dist(rng);
      worst = std::max(worst, check_element(fn, params, p.value, i, p.grad[i], eps));
    }
  }
  return worst;
}

double grad_check_largest(const LossFn& fn, ParameterStore& params, double eps, int per_tensor) {
  params.zero_grads();
  const double base = fn(params, true);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");

  double worst = 0.0;
  for (auto& [name, p] : params) {
    const Eigen::Index n = p.value.size();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    const Eigen::Index k = std::min<Eigen::Index>(per_tensor, n);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](Eigen::Index a, Eigen::Index b) {
                        return std::abs(p.grad[a]) > std::abs(p.grad[b]);
                      });
    for (Eigen::Index s = 0; s < k; ++s)
      worst = std::max(worst, check_element(fn, params, p.value, order[s], p.grad[order[s]], eps));
  }
  return worst;
}

}  // namespace fen
