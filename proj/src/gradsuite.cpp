#include "fen/gradsuite.hpp"

#include <array>
#include <cstddef>
#include <random>
#include <utility>
#include <vector>

#include "fen/geometry.hpp"
#include "fen/layers.hpp"
#include "fen/pipeline.hpp"
#include "fen/psroi.hpp"
#include "fen/synthdata.hpp"
#include "fen/tensor.hpp"

namespace fen {
namespace {

void fill_uniform(Tensor& t, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
}

// Magnitudes bounded away from zero so relu kinks stay clear of the probe
// step.
void fill_signed(Tensor& t, std::mt19937_64& rng, double lo_mag, double hi_mag) {
  std::uniform_real_distribution<double> mag(lo_mag, hi_mag);
  std::bernoulli_distribution flip(0.5);
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = flip(rng) ? mag(rng) : -mag(rng);
}

GradCheckRow finish(std::string name, double err) {
  GradCheckRow row;
  row.name = std::move(name);
  row.max_rel_err = err;
  row.pass = err < kGradTolerance;
  return row;
}

// One layer with its inputs registered as extra parameters, objective a fixed
// random weighting of the outputs. Sweeps every element.
GradCheckRow layer_row(std::string name, const LayerSpec& spec,
                       const std::vector<std::vector<int>>& in_dims, std::mt19937_64& rng,
                       bool signed_inputs) {
  ParameterStore params;
  init_layer_params(spec, params, rng);
  std::vector<std::string> input_names;
  for (std::size_t k = 0; k < in_dims.size(); ++k) {
    input_names.push_back("input" + std::to_string(k));
    Tensor& v = params.create(input_names.back(), in_dims[k]);
    if (signed_inputs)
      fill_signed(v, rng, 0.1, 1.0);
    else
      fill_uniform(v, rng, 0.0, 1.0);
  }

  Tensor probe;
  {
    LayerCache cache;
    std::vector<Tensor> ins;
    for (const auto& n : input_names) ins.push_back(params.value(n));
    Tensor out = layer_forward(spec, params, ins, cache);
    probe = Tensor(out.dims());
    fill_signed(probe, rng, 0.1, 1.0);
  }

  LossFn fn = [&](ParameterStore& ps, bool with_grad) {
    LayerCache cache;
    std::vector<Tensor> ins;
    for (const auto& n : input_names) ins.push_back(ps.value(n));
    Tensor out = layer_forward(spec, ps, ins, cache);
    const double loss = (out.array() * probe.array()).sum();
    if (with_grad) {
      std::vector<Tensor> gins = layer_backward(spec, ps, probe, cache);
      for (std::size_t k = 0; k < input_names.size(); ++k)
        ps.grad(input_names[k]).array() += gins[k].array();
    }
    return loss;
  };
  return finish(std::move(name), grad_check(fn, params));
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.stage_channels = {4, 6, 8, 8};
  cfg.branch_channels = 4;
  cfg.rpn_channels = 8;
  cfg.bottleneck_channels = 3;
  cfg.hyper_channels = 8;
  return cfg;
}

// Proposal-head outputs as the objective; sampled because the full model
// carries too many parameters for an exhaustive sweep.
GradCheckRow rpn_head_row(std::uint64_t seed, std::mt19937_64& rng) {
  FenModel model = make_model(tiny_config(), seed ^ 0x9c1f3a2du);
  Tensor image({1, 32, 32});
  fill_uniform(image, rng, 0.0, 1.0);

  NetActs shape_acts;
  RpnOut shape_out = network_rpn_forward(model, image, shape_acts);
  Tensor probe_cls(shape_out.cls.dims()), probe_reg(shape_out.reg.dims());
  fill_signed(probe_cls, rng, 0.1, 1.0);
  fill_signed(probe_reg, rng, 0.1, 1.0);

  LossFn fn = [&](ParameterStore&, bool with_grad) {
    NetActs acts;
    RpnOut out = network_rpn_forward(model, image, acts);
    ScoreMaps maps = network_maps_forward(model, acts);
    const double loss = (out.cls.array() * probe_cls.array()).sum() +
                        (out.reg.array() * probe_reg.array()).sum();
    if (with_grad) {
      ScoreMaps grad_maps;
      for (const Tensor& t : maps.cls) grad_maps.cls.emplace_back(t.dims());
      for (const Tensor& t : maps.reg) grad_maps.reg.emplace_back(t.dims());
      network_backward(model, acts, probe_cls, probe_reg, grad_maps);
    }
    return loss;
  };
  return finish("fe_rpn_head", grad_check_sampled(fn, model.params, 1e-5, 8, seed ^ 0x11u));
}

// Refinement score maps as the objective, covering the combined-tap path and
// every pooled-grid head.
GradCheckRow hyper_row(std::uint64_t seed, std::mt19937_64& rng) {
  FenModel model = make_model(tiny_config(), seed ^ 0x51e2b847u);
  Tensor image({1, 32, 32});
  fill_uniform(image, rng, 0.0, 1.0);

  NetActs shape_acts;
  RpnOut shape_out = network_rpn_forward(model, image, shape_acts);
  ScoreMaps shape_maps = network_maps_forward(model, shape_acts);
  std::vector<Tensor> probe_cls, probe_reg;
  for (const Tensor& t : shape_maps.cls) {
    probe_cls.emplace_back(t.dims());
    fill_signed(probe_cls.back(), rng, 0.1, 1.0);
  }
  for (const Tensor& t : shape_maps.reg) {
    probe_reg.emplace_back(t.dims());
    fill_signed(probe_reg.back(), rng, 0.1, 1.0);
  }
  Tensor zero_cls(shape_out.cls.dims()), zero_reg(shape_out.reg.dims());

  LossFn fn = [&](ParameterStore&, bool with_grad) {
    NetActs acts;
    network_rpn_forward(model, image, acts);
    ScoreMaps maps = network_maps_forward(model, acts);
    double loss = 0.0;
    for (std::size_t l = 0; l < maps.cls.size(); ++l)
      loss += (maps.cls[l].array() * probe_cls[l].array()).sum();
    for (std::size_t l = 0; l < maps.reg.size(); ++l)
      loss += (maps.reg[l].array() * probe_reg[l].array()).sum();
    if (with_grad) {
      ScoreMaps grad_maps;
      grad_maps.cls = probe_cls;
      grad_maps.reg = probe_reg;
      network_backward(model, acts, zero_cls, zero_reg, grad_maps);
    }
    return loss;
  };
  return finish("hyper_feature", grad_check_sampled(fn, model.params, 1e-5, 8, seed ^ 0x22u));
}

// Pooled bin means are linear in the maps, so the sweep is exhaustive.
GradCheckRow psroi_row(std::mt19937_64& rng) {
  const PoolGrid grid{3, 3};
  const int classes = 2;
  const double stride = 2.0;
  ParameterStore params;
  Tensor& maps = params.create("maps", {classes * grid.bin_count(), 6, 6});
  fill_uniform(maps, rng, 0.0, 1.0);
  const Box roi{5.7, 6.3, 7.9, 8.4};

  std::vector<double> probe(static_cast<std::size_t>(classes * grid.bin_count()));
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (double& v : probe) v = dist(rng);

  LossFn fn = [&](ParameterStore& ps, bool with_grad) {
    PooledGrid pooled = psroi_pool(ps.value("maps"), roi, grid, stride, classes);
    double loss = 0.0;
    for (std::size_t i = 0; i < pooled.values.size(); ++i) loss += probe[i] * pooled.values[i];
    if (with_grad) psroi_backward(pooled, probe, ps.grad("maps"));
    return loss;
  };
  return finish("psroi_pooling", grad_check(fn, params));
}

GradCheckRow fusion_row(std::mt19937_64& rng) {
  ParameterStore params;
  Tensor& s = params.create("scores", {4});
  Tensor& b = params.create("boxes", {4, 4});
  fill_uniform(s, rng, 0.2, 1.0);
  fill_signed(b, rng, 0.1, 1.5);

  std::array<double, 5> probe{};
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (double& v : probe) v = dist(rng);

  LossFn fn = [&](ParameterStore& ps, bool with_grad) {
    const Tensor& sv = ps.value("scores");
    const Tensor& bv = ps.value("boxes");
    std::vector<double> scores(4);
    std::vector<DeltaVector> boxes(4);
    for (int i = 0; i < 4; ++i) {
      scores[static_cast<std::size_t>(i)] = sv[i];
      boxes[static_cast<std::size_t>(i)] = {bv[i * 4 + 0], bv[i * 4 + 1], bv[i * 4 + 2],
                                            bv[i * 4 + 3]};
    }
    const FusedScore fused = fuse_scores(scores);
    const DeltaVector box = fuse_boxes(boxes, fused.weights);
    const double loss = probe[0] * fused.value + probe[1] * box.dx + probe[2] * box.dy +
                        probe[3] * box.dw + probe[4] * box.dh;
    if (with_grad) {
      const DeltaVector gbox{probe[1], probe[2], probe[3], probe[4]};
      const FusionGrads g = fuse_backward(scores, boxes, probe[0], gbox);
      Tensor& gs = ps.grad("scores");
      Tensor& gb = ps.grad("boxes");
      for (int i = 0; i < 4; ++i) {
        gs[i] += g.scores[static_cast<std::size_t>(i)];
        const DeltaVector& d = g.boxes[static_cast<std::size_t>(i)];
        gb[i * 4 + 0] += d.dx;
        gb[i * 4 + 1] += d.dy;
        gb[i * 4 + 2] += d.dw;
        gb[i * 4 + 3] += d.dh;
      }
    }
    return loss;
  };
  return finish("adaptive_fusion", grad_check(fn, params));
}

// The whole training objective over a frozen region set, so the loss is a
// pure function of the parameters.
GradCheckRow end_to_end_row(std::uint64_t seed) {
  FenModel model = make_model(tiny_config(), seed ^ 0x7be4d911u);

  SceneSpec sspec;
  sspec.width = 32;
  sspec.height = 32;
  sspec.min_words = 1;
  sspec.max_words = 2;
  sspec.min_word_height = 8;
  sspec.max_word_height = 14;
  sspec.max_aspect = 2.5;
  sspec.seed = seed ^ 0xa6c3f05bu;
  const Scene scene = generate_scene(sspec, 0);

  std::vector<Proposal> regions;
  for (const Box& gt : scene.gts) {
    regions.push_back({gt, 0.9, BoxSource::rpn});
    Box shifted = gt;
    shifted.cx += 2.0;
    shifted.cy += 1.0;
    regions.push_back({clip_box(shifted, sspec.width, sspec.height), 0.8, BoxSource::rpn});
  }
  regions.push_back({Box{8.0, 24.0, 12.0, 10.0}, 0.3, BoxSource::rpn});
  regions.push_back({Box{24.0, 8.0, 10.0, 12.0}, 0.2, BoxSource::rpn});

  // A smaller anchor sample keeps the loss value small, which keeps the
  // difference quotient's rounding noise below the gradient signal.
  TrainOptions opts;
  opts.anchor_cap = 32;
  LossFn fn = [&](ParameterStore&, bool with_grad) {
    return train_step_frozen(model, scene.image, scene.gts, opts, 1234, regions, with_grad).total;
  };
  return finish("end_to_end_loss", grad_check_largest(fn, model.params, 1e-5, 4));
}

}  // namespace

std::vector<GradCheckRow> run_gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckRow> rows;

  rows.push_back(
      layer_row("conv3x3", LayerSpec::conv("w", 3, 4, 3, 3), {{3, 5, 6}}, rng, true));
  rows.push_back(layer_row("conv3x3_stride2", LayerSpec::conv("w", 3, 4, 3, 3, 2), {{3, 6, 8}},
                           rng, true));
  rows.push_back(
      layer_row("conv1x3", LayerSpec::conv("w", 3, 4, 1, 3), {{3, 5, 6}}, rng, true));
  rows.push_back(layer_row("maxpool", LayerSpec::maxpool(), {{3, 6, 8}}, rng, false));
  rows.push_back(
      layer_row("upsample_conv", LayerSpec::upsample_conv("w", 3, 4), {{3, 4, 5}}, rng, true));
  rows.push_back(layer_row("concat", LayerSpec::concat(), {{2, 4, 5}, {3, 4, 5}}, rng, true));
  rows.push_back(layer_row("relu", LayerSpec::relu(), {{3, 5, 6}}, rng, true));

  {
    // Randomize the second conv so the check does not run at the identity
    // initialization.
    const LayerSpec spec = LayerSpec::residual_block("w", 3);
    GradCheckRow row = [&] {
      ParameterStore params;
      init_layer_params(spec, params, rng);
      fill_uniform(params.value("w.conv2.weight"), rng, -0.4, 0.4);
      fill_uniform(params.value("w.conv2.bias"), rng, -0.2, 0.2);
      Tensor& input = params.create("input0", {3, 5, 6});
      fill_signed(input, rng, 0.1, 1.0);
      Tensor probe;
      {
        LayerCache cache;
        Tensor out = layer_forward(spec, params, input, cache);
        probe = Tensor(out.dims());
        fill_signed(probe, rng, 0.1, 1.0);
      }
      LossFn fn = [&](ParameterStore& ps, bool with_grad) {
        LayerCache cache;
        Tensor out = layer_forward(spec, ps, ps.value("input0"), cache);
        const double loss = (out.array() * probe.array()).sum();
        if (with_grad)
          ps.grad("input0").array() += layer_backward(spec, ps, probe, cache)[0].array();
        return loss;
      };
      return finish("residual_block", grad_check(fn, params));
    }();
    rows.push_back(std::move(row));
  }

  rows.push_back(
      layer_row("bottleneck", LayerSpec::bottleneck("w", 4, 3), {{4, 5, 6}}, rng, true));

  rows.push_back(rpn_head_row(seed, rng));
  rows.push_back(hyper_row(seed, rng));
  rows.push_back(psroi_row(rng));
  rows.push_back(fusion_row(rng));
  rows.push_back(end_to_end_row(seed));
  return rows;
}

}  // namespace fen
