#include "fen/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "fen/errors.hpp"

namespace fen {

namespace {

std::string grid_name(const PoolGrid& g) {
  return std::to_string(g.w_bins) + "x" + std::to_string(g.h_bins);
}

// Every layer the architecture can use, ablation branches included.
struct Arch {
  std::array<LayerSpec, 5> stage;
  LayerSpec rpn_a, rpn_b, rpn_reduce, rpn_up, rpn_merge, rpn_refine, rpn_plain, rpn_cls, rpn_reg;
  std::array<LayerSpec, 3> hyper_tap;
  LayerSpec hyper_mix;
  std::array<LayerSpec, 4> head_cls, head_reg;
  std::array<PoolGrid, 4> grids;
  int anchor_count = 0;
};

Arch make_arch(const ModelConfig& cfg) {
  Arch a;
  const auto& ch = cfg.stage_channels;
  a.stage[0] = LayerSpec::conv("backbone.stage1", cfg.image_channels, ch[0], 3, 3, 2);
  a.stage[1] = LayerSpec::conv("backbone.stage2", ch[0], ch[1], 3, 3, 2);
  a.stage[2] = LayerSpec::conv("backbone.stage3", ch[1], ch[2], 3, 3, 2);
  a.stage[3] = LayerSpec::conv("backbone.stage4a", ch[2], ch[3], 3, 3);
  a.stage[4] = LayerSpec::conv("backbone.stage4b", ch[3], ch[3], 3, 3);

  a.anchor_count = static_cast<int>(build_anchor_set().size());
  const int bc = cfg.branch_channels;
  a.rpn_a = LayerSpec::conv("rpn.branch_a", ch[3], bc, 3, 3);
  a.rpn_b = LayerSpec::conv("rpn.branch_b", ch[3], bc, 1, 3);
  a.rpn_reduce = LayerSpec::bottleneck("rpn.branch_c.reduce", ch[3], bc);
  a.rpn_up = LayerSpec::upsample_conv("rpn.branch_c.up", bc, bc);
  a.rpn_merge = LayerSpec::bottleneck("rpn.merge", 3 * bc, cfg.rpn_channels);
  a.rpn_refine = LayerSpec::residual_block("rpn.refine", cfg.rpn_channels);
  a.rpn_plain = LayerSpec::conv("rpn.plain", ch[3], cfg.rpn_channels, 3, 3);
  a.rpn_cls = LayerSpec::bottleneck("rpn.cls", cfg.rpn_channels, 2 * a.anchor_count);
  a.rpn_reg = LayerSpec::bottleneck("rpn.reg", cfg.rpn_channels, 4 * a.anchor_count);

  for (int t = 0; t < 3; ++t)
    a.hyper_tap[static_cast<std::size_t>(t)] = LayerSpec::bottleneck(
        "hyper.tap" + std::to_string(t), ch[3], cfg.bottleneck_channels);
  a.hyper_mix =
      LayerSpec::conv("hyper.mix", 3 * cfg.bottleneck_channels, cfg.hyper_channels, 3, 3);

  a.grids = adaptive_pool_grids();
  for (std::size_t l = 0; l < 4; ++l) {
    const PoolGrid& g = a.grids[l];
    const std::string base = "head." + grid_name(g);
    a.head_cls[l] = LayerSpec::bottleneck(base + ".cls", cfg.hyper_channels, 2 * g.bin_count());
    a.head_reg[l] = LayerSpec::bottleneck(base + ".reg", cfg.hyper_channels, 4 * g.bin_count());
  }
  return a;
}

// indices into the canonical four grids that are pooled at runtime
std::vector<std::size_t> active_grids(const ModelConfig& cfg) {
  if (cfg.adaptive_fusion) return {0, 1, 2, 3};
  return {1};  // the 7x7 grid
}

Tensor relu_of(const Tensor& pre) {
  Tensor out = pre;
  out.array() = out.array().max(0.0);
  return out;
}

}  // namespace

std::vector<PoolGrid> ModelConfig::pool_grids() const {
  const auto all = adaptive_pool_grids();
  std::vector<PoolGrid> out;
  for (std::size_t idx : active_grids(*this)) out.push_back(all[idx]);
  return out;
}

FenModel make_model(const ModelConfig& cfg, std::uint64_t seed) {
  FenModel model;
  model.cfg = cfg;
  const Arch arch = make_arch(cfg);
  std::mt19937_64 rng(seed);
  // creation order is fixed: it is the random draw order
  for (const LayerSpec& s : arch.stage) init_layer_params(s, model.params, rng);
  init_layer_params(arch.rpn_a, model.params, rng);
  init_layer_params(arch.rpn_b, model.params, rng);
  init_layer_params(arch.rpn_reduce, model.params, rng);
  init_layer_params(arch.rpn_up, model.params, rng);
  init_layer_params(arch.rpn_merge, model.params, rng);
  init_layer_params(arch.rpn_refine, model.params, rng);
  init_layer_params(arch.rpn_plain, model.params, rng);
  init_layer_params(arch.rpn_cls, model.params, rng);
  init_layer_params(arch.rpn_reg, model.params, rng);
  for (const LayerSpec& s : arch.hyper_tap) init_layer_params(s, model.params, rng);
  init_layer_params(arch.hyper_mix, model.params, rng);
  for (std::size_t l = 0; l < 4; ++l) {
    init_layer_params(arch.head_cls[l], model.params, rng);
    init_layer_params(arch.head_reg[l], model.params, rng);
  }
  return model;
}

RpnOut network_rpn_forward(const FenModel& model, const Tensor& image, NetActs& acts) {
  if (model.params.empty()) throw DataError("network: no parameters loaded");
  if (image.rank() != 3 || image.channels() != model.cfg.image_channels)
    throw std::invalid_argument("network: image shape does not match the model");
  const Arch arch = make_arch(model.cfg);

  acts.taps.clear();
  Tensor x = image;
  for (std::size_t s = 0; s < 5; ++s) {
    Tensor pre = layer_forward(arch.stage[s], model.params, x, acts.bb_conv[s]);
    acts.bb_pre[s] = pre;
    x = relu_of(pre);
    if (s >= 2) acts.taps.push_back(x);
  }
  const Tensor& feat = acts.taps.back();
  acts.feat_h = feat.height();
  acts.feat_w = feat.width();

  Tensor trunk;
  if (model.cfg.enhanced_rpn) {
    Tensor branch_a = layer_forward(arch.rpn_a, model.params, feat, acts.rpn_a);
    Tensor branch_b = layer_forward(arch.rpn_b, model.params, feat, acts.rpn_b);

    acts.rpn_padded = (feat.height() % 2 != 0) || (feat.width() % 2 != 0);
    acts.padded_h = feat.height() + (feat.height() % 2);
    acts.padded_w = feat.width() + (feat.width() % 2);
    Tensor pooled = layer_forward(
        LayerSpec::maxpool(), model.params,
        acts.rpn_padded ? pad_replicate_hw(feat, acts.padded_h, acts.padded_w) : feat,
        acts.rpn_pool);
    Tensor reduced = layer_forward(arch.rpn_reduce, model.params, pooled, acts.rpn_reduce);
    Tensor up = layer_forward(arch.rpn_up, model.params, reduced, acts.rpn_up);
    Tensor branch_c = acts.rpn_padded ? crop_hw(up, acts.feat_h, acts.feat_w) : std::move(up);

    const Tensor branches[3] = {std::move(branch_a), std::move(branch_b), std::move(branch_c)};
    Tensor cat = layer_forward(LayerSpec::concat(), model.params,
                               std::span<const Tensor>(branches, 3), acts.rpn_concat);
    Tensor merged = layer_forward(arch.rpn_merge, model.params, cat, acts.rpn_merge);
    trunk = layer_forward(arch.rpn_refine, model.params, merged, acts.rpn_refine);
  } else {
    trunk = layer_forward(arch.rpn_plain, model.params, feat, acts.rpn_plain);
  }

  RpnOut out;
  out.cls = layer_forward(arch.rpn_cls, model.params, trunk, acts.rpn_cls);
  out.reg = layer_forward(arch.rpn_reg, model.params, trunk, acts.rpn_reg);
  return out;
}

ScoreMaps network_maps_forward(const FenModel& model, NetActs& acts) {
  if (acts.taps.size() != 3) throw std::invalid_argument("network: run the rpn forward first");
  const Arch arch = make_arch(model.cfg);

  Tensor refine_input;
  if (model.cfg.hyper_feature) {
    Tensor compressed[3];
    for (std::size_t t = 0; t < 3; ++t)
      compressed[t] =
          layer_forward(arch.hyper_tap[t], model.params, acts.taps[t], acts.hyper_tap[t]);
    Tensor cat = layer_forward(LayerSpec::concat(), model.params,
                               std::span<const Tensor>(compressed, 3), acts.hyper_concat);
    refine_input = layer_forward(arch.hyper_mix, model.params, cat, acts.hyper_mix);
  } else {
    refine_input = acts.taps.back();
  }

  const auto active = active_grids(model.cfg);
  ScoreMaps maps;
  acts.head_cls.assign(active.size(), LayerCache{});
  acts.head_reg.assign(active.size(), LayerCache{});
  for (std::size_t k = 0; k < active.size(); ++k) {
    maps.cls.push_back(
        layer_forward(arch.head_cls[active[k]], model.params, refine_input, acts.head_cls[k]));
    maps.reg.push_back(
        layer_forward(arch.head_reg[active[k]], model.params, refine_input, acts.head_reg[k]));
  }
  return maps;
}

void network_backward(FenModel& model, NetActs& acts, const Tensor& grad_rpn_cls,
                      const Tensor& grad_rpn_reg, const ScoreMaps& grad_maps) {
  const Arch arch = make_arch(model.cfg);
  const auto active = active_grids(model.cfg);
  if (grad_maps.cls.size() != active.size() || grad_maps.reg.size() != active.size())
    throw std::invalid_argument("network_backward: grad_maps arity mismatch");

  // refinement heads back to their shared input
  Tensor grad_refine_input;
  {
    bool first = true;
    for (std::size_t k = 0; k < active.size(); ++k) {
      Tensor g = layer_backward(arch.head_cls[active[k]], model.params, grad_maps.cls[k],
                                acts.head_cls[k])[0];
      g.array() += layer_backward(arch.head_reg[active[k]], model.params, grad_maps.reg[k],
                                  acts.head_reg[k])[0]
                       .array();
      if (first) {
        grad_refine_input = std::move(g);
        first = false;
      } else {
        grad_refine_input.array() += g.array();
      }
    }
  }

  std::array<Tensor, 3> tap_grads;
  for (std::size_t t = 0; t < 3; ++t) tap_grads[t] = Tensor(acts.taps[t].dims());

  if (model.cfg.hyper_feature) {
    Tensor grad_cat =
        layer_backward(arch.hyper_mix, model.params, grad_refine_input, acts.hyper_mix)[0];
    std::vector<Tensor> parts =
        layer_backward(LayerSpec::concat(), model.params, grad_cat, acts.hyper_concat);
    for (std::size_t t = 0; t < 3; ++t)
      tap_grads[t].array() +=
          layer_backward(arch.hyper_tap[t], model.params, parts[t], acts.hyper_tap[t])[0].array();
  } else {
    tap_grads[2].array() += grad_refine_input.array();
  }

  // rpn heads back to the deepest tap
  Tensor grad_trunk = layer_backward(arch.rpn_cls, model.params, grad_rpn_cls, acts.rpn_cls)[0];
  grad_trunk.array() +=
      layer_backward(arch.rpn_reg, model.params, grad_rpn_reg, acts.rpn_reg)[0].array();

  if (model.cfg.enhanced_rpn) {
    Tensor grad_merged =
        layer_backward(arch.rpn_refine, model.params, grad_trunk, acts.rpn_refine)[0];
    Tensor grad_cat = layer_backward(arch.rpn_merge, model.params, grad_merged, acts.rpn_merge)[0];
    std::vector<Tensor> parts =
        layer_backward(LayerSpec::concat(), model.params, grad_cat, acts.rpn_concat);

    Tensor grad_feat = layer_backward(arch.rpn_a, model.params, parts[0], acts.rpn_a)[0];
    grad_feat.array() += layer_backward(arch.rpn_b, model.params, parts[1], acts.rpn_b)[0].array();

    Tensor grad_up = acts.rpn_padded
                         ? crop_hw_backward(parts[2], acts.padded_h, acts.padded_w)
                         : std::move(parts[2]);
    Tensor grad_reduced = layer_backward(arch.rpn_up, model.params, grad_up, acts.rpn_up)[0];
    Tensor grad_pooled =
        layer_backward(arch.rpn_reduce, model.params, grad_reduced, acts.rpn_reduce)[0];
    Tensor grad_padded =
        layer_backward(LayerSpec::maxpool(), model.params, grad_pooled, acts.rpn_pool)[0];
    grad_feat.array() += (acts.rpn_padded
                              ? pad_replicate_hw_backward(grad_padded, acts.feat_h, acts.feat_w)
                              : std::move(grad_padded))
                             .array();
    tap_grads[2].array() += grad_feat.array();
  } else {
    tap_grads[2].array() +=
        layer_backward(arch.rpn_plain, model.params, grad_trunk, acts.rpn_plain)[0].array();
  }

  // backbone: stages 4b, 4a, 3 also feed the taps
  Tensor g = std::move(tap_grads[2]);
  for (int s = 4; s >= 0; --s) {
    g.array() *= (acts.bb_pre[static_cast<std::size_t>(s)].array() > 0.0).cast<double>();
    g = layer_backward(arch.stage[static_cast<std::size_t>(s)], model.params, g,
                       acts.bb_conv[static_cast<std::size_t>(s)])[0];
    if (s == 4) g.array() += tap_grads[1].array();
    if (s == 3) g.array() += tap_grads[0].array();
  }
  // g is now the image gradient, which nothing consumes
}

std::vector<Proposal> generate_proposals(const Tensor& cls, const Tensor& reg,
                                         const AnchorGrid& grid, double image_w, double image_h,
                                         double nms_thr, std::size_t keep, double min_side) {
  const int A = static_cast<int>(grid.shapes.size());
  if (cls.channels() != 2 * A || reg.channels() != 4 * A)
    throw std::invalid_argument("generate_proposals: head channels do not match the anchor set");
  if (cls.height() != grid.rows || cls.width() != grid.cols || reg.height() != grid.rows ||
      reg.width() != grid.cols)
    throw std::invalid_argument("generate_proposals: map extent does not match the anchor grid");

  std::vector<ScoredBox> candidates;
  candidates.reserve(grid.total());
  for (int i = 0; i < grid.rows; ++i) {
    for (int j = 0; j < grid.cols; ++j) {
      for (int a = 0; a < A; ++a) {
        const double l0 = cls(2 * a, i, j), l1 = cls(2 * a + 1, i, j);
        const double m = std::max(l0, l1);
        const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        const double text_prob = e1 / (e0 + e1);
        const DeltaVector d{reg(4 * a, i, j), reg(4 * a + 1, i, j), reg(4 * a + 2, i, j),
                            reg(4 * a + 3, i, j)};
        const Box decoded = clip_box(decode_box(grid.anchor_at(i, j, a), d), image_w, image_h);
        // valid_box also rejects non-finite decodes from a diverged network
        if (!valid_box(decoded) || decoded.w < min_side || decoded.h < min_side) continue;
        candidates.push_back({decoded, text_prob});
      }
    }
  }

  std::vector<Proposal> out;
  for (std::size_t idx : nms(candidates, nms_thr, keep))
    out.push_back({candidates[idx].box, candidates[idx].score, BoxSource::rpn});
  return out;
}

std::vector<Proposal> mine_positives(std::vector<Proposal> proposals, std::size_t references,
                                     double shrink, double grow, double image_w, double image_h) {
  const std::size_t refs = std::min(references, proposals.size());
  proposals.reserve(proposals.size() + 2 * refs);
  for (std::size_t k = 0; k < refs; ++k) {
    const Proposal& p = proposals[k];
    Box b{p.box.cx, p.box.cy, p.box.w * shrink, p.box.h * shrink};
    proposals.push_back({clip_box(b, image_w, image_h), p.score, BoxSource::scaled_small});
  }
  for (std::size_t k = 0; k < refs; ++k) {
    const Proposal& p = proposals[k];
    Box b{p.box.cx, p.box.cy, p.box.w * grow, p.box.h * grow};
    proposals.push_back({clip_box(b, image_w, image_h), p.score, BoxSource::scaled_large});
  }
  return proposals;
}

std::vector<Proposal> add_half_regions(std::vector<Proposal> proposals, std::size_t references) {
  const std::size_t refs = std::min(references, proposals.size());
  proposals.reserve(proposals.size() + 2 * refs);
  for (std::size_t k = 0; k < refs; ++k) {
    const Proposal& p = proposals[k];
    const double half_w = p.box.w / 2.0;
    proposals.push_back(
        {Box{p.box.cx - p.box.w / 4.0, p.box.cy, half_w, p.box.h}, p.score, BoxSource::half});
    proposals.push_back(
        {Box{p.box.cx + p.box.w / 4.0, p.box.cy, half_w, p.box.h}, p.score, BoxSource::half});
  }
  return proposals;
}

RegionScore score_region(const ScoreMaps& maps, const Box& roi, std::span<const PoolGrid> grids,
                         double stride) {
  if (maps.cls.size() != grids.size() || maps.reg.size() != grids.size() || grids.empty())
    throw std::invalid_argument("score_region: maps do not match the grid set");

  RegionScore rs;
  for (std::size_t l = 0; l < grids.size(); ++l) {
    PooledGrid pc = psroi_pool(maps.cls[l], roi, grids[l], stride, 2);
    std::vector<double> coarse = coarse_scores(pc);
    std::vector<double> sm = class_softmax(coarse);
    rs.branch_scores.push_back(sm[1]);
    rs.softmax_out.push_back(std::move(sm));
    rs.pooled_cls.push_back(std::move(pc));

    PooledGrid pr = psroi_pool(maps.reg[l], roi, grids[l], stride, 4);
    std::vector<double> b = coarse_scores(pr);
    rs.branch_boxes.push_back({b[0], b[1], b[2], b[3]});
    rs.pooled_reg.push_back(std::move(pr));
  }

  if (grids.size() == 4) {
    const FusedScore fused = fuse_scores(rs.branch_scores);
    rs.weights = fused.weights;
    rs.score = fused.value;
    rs.delta = fuse_boxes(rs.branch_boxes, std::span<const double>(rs.weights.data(), 4));
  } else {
    rs.weights = {1.0, 0.0, 0.0, 0.0};
    rs.score = rs.branch_scores[0];
    rs.delta = rs.branch_boxes[0];
  }
  return rs;
}

void score_region_backward(const RegionScore& rs, double grad_score,
                           const DeltaVector& grad_delta, std::span<const PoolGrid> grids,
                           ScoreMaps& grad_maps) {
  if (rs.pooled_cls.size() != grids.size() || grad_maps.cls.size() != grids.size())
    throw std::invalid_argument("score_region_backward: arity mismatch");

  std::vector<double> grad_branch_scores(grids.size(), 0.0);
  std::vector<DeltaVector> grad_branch_boxes(grids.size());
  if (grids.size() == 4) {
    const FusionGrads fg = fuse_backward(rs.branch_scores, rs.branch_boxes, grad_score, grad_delta);
    for (std::size_t l = 0; l < 4; ++l) {
      grad_branch_scores[l] = fg.scores[l];
      grad_branch_boxes[l] = fg.boxes[l];
    }
  } else {
    grad_branch_scores[0] = grad_score;
    grad_branch_boxes[0] = grad_delta;
  }

  for (std::size_t l = 0; l < grids.size(); ++l) {
    const int bins = grids[l].bin_count();
    // classification: fused score saw softmax output 1 only
    const std::vector<double> grad_sm{0.0, grad_branch_scores[l]};
    const std::vector<double> grad_coarse = class_softmax_backward(rs.softmax_out[l], grad_sm);
    std::vector<double> grad_vals(static_cast<std::size_t>(2 * bins));
    for (int c = 0; c < 2; ++c)
      for (int b = 0; b < bins; ++b)
        grad_vals[static_cast<std::size_t>(c * bins + b)] = grad_coarse[static_cast<std::size_t>(c)] / bins;
    psroi_backward(rs.pooled_cls[l], grad_vals, grad_maps.cls[l]);

    // regression: each component is the mean of its bins
    std::vector<double> grad_reg_vals(static_cast<std::size_t>(4 * bins));
    const DeltaVector& gb = grad_branch_boxes[l];
    const double comps[4] = {gb.dx, gb.dy, gb.dw, gb.dh};
    for (int c = 0; c < 4; ++c)
      for (int b = 0; b < bins; ++b)
        grad_reg_vals[static_cast<std::size_t>(c * bins + b)] = comps[c] / bins;
    psroi_backward(rs.pooled_reg[l], grad_reg_vals, grad_maps.reg[l]);
  }
}

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w) {
  if (image.rank() != 3) throw std::invalid_argument("resize_bilinear: expected rank-3 input");
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_bilinear: bad target size");
  const int C = image.channels(), H = image.height(), W = image.width();
  Tensor out({C, out_h, out_w});
  const double fy = static_cast<double>(H) / out_h;
  const double fx = static_cast<double>(W) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double sy = std::clamp((y + 0.5) * fy - 0.5, 0.0, static_cast<double>(H - 1));
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, H - 1);
    const double wy = sy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double sx = std::clamp((x + 0.5) * fx - 0.5, 0.0, static_cast<double>(W - 1));
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, W - 1);
      const double wx = sx - x0;
      for (int c = 0; c < C; ++c) {
        const double top = (1.0 - wx) * image(c, y0, x0) + wx * image(c, y0, x1);
        const double bot = (1.0 - wx) * image(c, y1, x0) + wx * image(c, y1, x1);
        out(c, y, x) = (1.0 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

namespace {

std::vector<Detection> detect_single(const FenModel& model, const Tensor& image,
                                     const DetectOptions& opts) {
  NetActs acts;
  const RpnOut rpn = network_rpn_forward(model, image, acts);
  const double stride = model.cfg.feature_stride();
  const AnchorGrid grid = place_anchors(rpn.cls.height(), rpn.cls.width(), stride);
  const double img_w = image.width(), img_h = image.height();

  std::vector<Proposal> proposals = generate_proposals(
      rpn.cls, rpn.reg, grid, img_w, img_h, opts.proposal_nms, opts.proposal_keep);
  if (opts.half_regions) proposals = add_half_regions(std::move(proposals), opts.half_references);

  const ScoreMaps maps = network_maps_forward(model, acts);
  const std::vector<PoolGrid> grids = model.cfg.pool_grids();

  std::vector<ScoredBox> scored;
  for (const Proposal& p : proposals) {
    const RegionScore rs = score_region(maps, p.box, grids, stride);
    if (rs.score < opts.score_threshold) continue;
    const Box refined = clip_box(decode_box(p.box, rs.delta), img_w, img_h);
    if (!(refined.w > 0.0) || !(refined.h > 0.0)) continue;
    scored.push_back({refined, rs.score});
  }

  std::vector<Detection> out;
  for (std::size_t idx : nms(scored, opts.nms_threshold))
    out.push_back({scored[idx].box, scored[idx].score});
  return out;
}

}  // namespace

std::vector<Detection> detect(const FenModel& model, const Tensor& image,
                              const DetectOptions& opts) {
  if (opts.scales.empty()) return detect_single(model, image, opts);

  std::vector<ScoredBox> pooled;
  for (double s : opts.scales) {
    if (!(s > 0.0)) throw std::invalid_argument("detect: scales must be positive");
    const int oh = std::max<int>(1, static_cast<int>(std::lround(image.height() * s)));
    const int ow = std::max<int>(1, static_cast<int>(std::lround(image.width() * s)));
    const Tensor scaled = resize_bilinear(image, oh, ow);
    const std::vector<Detection> dets = detect_single(model, scaled, opts);
    const double fx = static_cast<double>(image.width()) / ow;
    const double fy = static_cast<double>(image.height()) / oh;
    for (const Detection& d : dets) {
      Box b{d.box.cx * fx, d.box.cy * fy, d.box.w * fx, d.box.h * fy};
      pooled.push_back({b, d.score});
    }
  }

  std::vector<Detection> out;
  for (std::size_t idx : nms(pooled, opts.nms_threshold))
    out.push_back({pooled[idx].box, pooled[idx].score});
  return out;
}

namespace {

StepReport run_train_step(FenModel& model, const Tensor& image, std::span<const Box> gts,
                          const TrainOptions& opts, std::uint64_t seed,
                          const std::span<const Proposal>* frozen, bool with_grad) {
  NetActs acts;
  const RpnOut rpn = network_rpn_forward(model, image, acts);
  const double stride = model.cfg.feature_stride();
  const AnchorGrid grid = place_anchors(rpn.cls.height(), rpn.cls.width(), stride);
  const double img_w = image.width(), img_h = image.height();

  // anchor losses
  const std::vector<AnchorLabel> labels =
      label_anchors(grid, gts, opts.anchor_pos_iou, opts.anchor_neg_iou, opts.anchor_cap, seed);

  struct RpnSampleRef {
    int i, j, a;
  };
  std::vector<LossSample> rpn_samples;
  std::vector<RpnSampleRef> rpn_refs;
  const int A = static_cast<int>(grid.shapes.size());
  for (int i = 0; i < grid.rows; ++i) {
    for (int j = 0; j < grid.cols; ++j) {
      for (int a = 0; a < A; ++a) {
        const std::size_t flat =
            (static_cast<std::size_t>(i) * grid.cols + j) * static_cast<std::size_t>(A) + a;
        const AnchorLabel& lab = labels[flat];
        if (lab.cls == AnchorClass::ignore) continue;
        const double l0 = rpn.cls(2 * a, i, j), l1 = rpn.cls(2 * a + 1, i, j);
        const double m = std::max(l0, l1);
        const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        LossSample s;
        s.probs = {e0 / (e0 + e1), e1 / (e0 + e1)};
        s.positive = lab.cls == AnchorClass::positive;
        s.truth = s.positive ? 1 : 0;
        if (s.positive) {
          s.predicted = {rpn.reg(4 * a, i, j), rpn.reg(4 * a + 1, i, j), rpn.reg(4 * a + 2, i, j),
                         rpn.reg(4 * a + 3, i, j)};
          s.target = lab.target;
        }
        rpn_samples.push_back(std::move(s));
        rpn_refs.push_back({i, j, a});
      }
    }
  }

  StepReport report;
  report.rpn = multitask_loss(rpn_samples, opts.lambda);

  Tensor grad_cls(rpn.cls.dims());
  Tensor grad_reg(rpn.reg.dims());
  if (with_grad) {
    const double n = static_cast<double>(std::max<std::size_t>(1, report.rpn.matched));
    for (std::size_t k = 0; k < rpn_samples.size(); ++k) {
      const LossSample& s = rpn_samples[k];
      const auto [i, j, a] = rpn_refs[k];
      // d(ce o softmax)/dlogit = prob - onehot
      grad_cls(2 * a, i, j) += (s.probs[0] - (s.truth == 0 ? 1.0 : 0.0)) / n;
      grad_cls(2 * a + 1, i, j) += (s.probs[1] - (s.truth == 1 ? 1.0 : 0.0)) / n;
      if (s.positive) {
        const DeltaVector g = smooth_l1_grad(s.predicted, s.target);
        grad_reg(4 * a, i, j) += opts.lambda * g.dx / n;
        grad_reg(4 * a + 1, i, j) += opts.lambda * g.dy / n;
        grad_reg(4 * a + 2, i, j) += opts.lambda * g.dw / n;
        grad_reg(4 * a + 3, i, j) += opts.lambda * g.dh / n;
      }
    }
  }

  // region refinement on the current proposals; box geometry carries no
  // gradient back to the rpn heads
  std::vector<Proposal> proposals;
  if (frozen) {
    proposals.assign(frozen->begin(), frozen->end());
  } else {
    proposals = generate_proposals(rpn.cls, rpn.reg, grid, img_w, img_h, opts.proposal_nms,
                                   opts.proposal_keep);
    if (opts.mining)
      proposals =
          mine_positives(std::move(proposals), opts.mine_references, 0.7, 1.3, img_w, img_h);
  }
  report.proposals = proposals.size();

  const ScoreMaps maps = network_maps_forward(model, acts);
  const std::vector<PoolGrid> grids = model.cfg.pool_grids();

  ScoreMaps grad_maps;
  for (const Tensor& t : maps.cls) grad_maps.cls.emplace_back(t.dims());
  for (const Tensor& t : maps.reg) grad_maps.reg.emplace_back(t.dims());

  if (!proposals.empty()) {
    // label every region, then train on a balanced subsample: the loss is
    // normalised by positive count, so an uncapped background majority
    // would drown the positives
    constexpr std::size_t region_pos_cap = 64;
    constexpr std::size_t region_neg_floor = 16;
    std::vector<double> best_iou(proposals.size(), 0.0);
    std::vector<std::size_t> best_gt(proposals.size(), 0);
    std::vector<std::size_t> rpos, rneg;
    for (std::size_t k = 0; k < proposals.size(); ++k) {
      for (std::size_t g = 0; g < gts.size(); ++g) {
        const double v = iou(proposals[k].box, gts[g]);
        if (v > best_iou[k]) {
          best_iou[k] = v;
          best_gt[k] = g;
        }
      }
      const bool positive = !gts.empty() && best_iou[k] >= opts.region_pos_iou;
      (positive ? rpos : rneg).push_back(k);
    }
    std::mt19937_64 rrng(seed ^ 0x5851f42d4c957f2dull);
    std::shuffle(rpos.begin(), rpos.end(), rrng);
    std::shuffle(rneg.begin(), rneg.end(), rrng);
    const std::size_t keep_pos = std::min(rpos.size(), region_pos_cap);
    const std::size_t keep_neg =
        std::min(rneg.size(), std::max(3 * keep_pos, region_neg_floor));
    std::vector<std::size_t> chosen(rpos.begin(), rpos.begin() + keep_pos);
    chosen.insert(chosen.end(), rneg.begin(), rneg.begin() + keep_neg);
    std::sort(chosen.begin(), chosen.end());

    std::vector<LossSample> refine_samples;
    std::vector<RegionScore> scores;
    refine_samples.reserve(chosen.size());
    scores.reserve(chosen.size());
    for (const std::size_t k : chosen) {
      const Proposal& p = proposals[k];
      RegionScore rs = score_region(maps, p.box, grids, stride);
      LossSample s;
      s.probs = {1.0 - rs.score, rs.score};
      s.positive = !gts.empty() && best_iou[k] >= opts.region_pos_iou;
      s.truth = s.positive ? 1 : 0;
      if (s.positive) {
        s.predicted = rs.delta;
        s.target = encode_box(gts[best_gt[k]], p.box);
      }
      refine_samples.push_back(std::move(s));
      scores.push_back(std::move(rs));
    }
    report.refine = multitask_loss(refine_samples, opts.lambda);
    report.refine_positives = report.refine.matched;

    if (with_grad) {
      const double n = static_cast<double>(std::max<std::size_t>(1, report.refine.matched));
      for (std::size_t k = 0; k < refine_samples.size(); ++k) {
        const LossSample& s = refine_samples[k];
        const RegionScore& rs = scores[k];
        // probs are (1-S, S): truth 1 pulls S up, truth 0 pushes it down
        const double grad_score = (s.truth == 1 ? -1.0 / std::max(rs.score, 1e-12)
                                                : 1.0 / std::max(1.0 - rs.score, 1e-12)) /
                                  n;
        DeltaVector grad_delta;
        if (s.positive) {
          grad_delta = smooth_l1_grad(s.predicted, s.target);
          grad_delta.dx *= opts.lambda / n;
          grad_delta.dy *= opts.lambda / n;
          grad_delta.dw *= opts.lambda / n;
          grad_delta.dh *= opts.lambda / n;
        }
        score_region_backward(rs, grad_score, grad_delta, grids, grad_maps);
      }
    }
  }

  if (with_grad) network_backward(model, acts, grad_cls, grad_reg, grad_maps);
  report.total = report.rpn.total + report.refine.total;
  if (!std::isfinite(report.total)) throw NumericError("training loss is non-finite");
  return report;
}

}  // namespace

StepReport train_step(FenModel& model, const Tensor& image, std::span<const Box> gts,
                      const TrainOptions& opts, std::uint64_t seed) {
  return run_train_step(model, image, gts, opts, seed, nullptr, true);
}

StepReport train_step_frozen(FenModel& model, const Tensor& image, std::span<const Box> gts,
                             const TrainOptions& opts, std::uint64_t seed,
                             std::span<const Proposal> regions, bool with_grad) {
  return run_train_step(model, image, gts, opts, seed, &regions, with_grad);
}

double PmStats::plain_ratio() const {
  if (plain_neg == 0)
    return plain_pos == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return static_cast<double>(plain_pos) / static_cast<double>(plain_neg);
}

double PmStats::mined_ratio() const {
  if (mined_neg == 0)
    return mined_pos == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return static_cast<double>(mined_pos) / static_cast<double>(mined_neg);
}

PmStats pm_statistics(const FenModel& model, const SceneSpec& scenes, std::size_t scene_count,
                      const TrainOptions& opts) {
  PmStats stats;
  for (std::size_t idx = 0; idx < scene_count; ++idx) {
    const Scene scene = generate_scene(scenes, idx);
    NetActs acts;
    const RpnOut rpn = network_rpn_forward(model, scene.image, acts);
    const AnchorGrid grid =
        place_anchors(rpn.cls.height(), rpn.cls.width(), model.cfg.feature_stride());
    const double img_w = scene.image.width(), img_h = scene.image.height();

    std::vector<Proposal> plain = generate_proposals(rpn.cls, rpn.reg, grid, img_w, img_h,
                                                     opts.proposal_nms, opts.proposal_keep);
    auto is_positive = [&](const Box& b) {
      for (const Box& g : scene.gts)
        if (iou(b, g) >= opts.region_pos_iou) return true;
      return false;
    };
    for (const Proposal& p : plain) (is_positive(p.box) ? stats.plain_pos : stats.plain_neg)++;

    const std::vector<Proposal> mined =
        mine_positives(std::move(plain), opts.mine_references, 0.7, 1.3, img_w, img_h);
    for (const Proposal& p : mined) (is_positive(p.box) ? stats.mined_pos : stats.mined_neg)++;
  }
  return stats;
}

}  // namespace fen
