#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "fen/anchors.hpp"
#include "fen/geometry.hpp"
#include "fen/layers.hpp"
#include "fen/loss.hpp"
#include "fen/psroi.hpp"
#include "fen/synthdata.hpp"
#include "fen/tensor.hpp"

namespace fen {

// Network shape and ablation switches. The backbone is four stages of
// conv3x3+relu; the first three stride 2, the last runs at stride 1 as two
// convs, so the final three stage outputs share one resolution and serve as
// the taps of the hyper feature.
struct ModelConfig {
  int image_channels = 1;
  std::array<int, 4> stage_channels{16, 32, 64, 64};
  int branch_channels = 32;      // per enhancement branch
  int rpn_channels = 64;         // merged rpn feature
  int bottleneck_channels = 16;  // per-tap compression before concatenation
  int hyper_channels = 64;

  bool enhanced_rpn = true;    // three-branch head vs a plain 3x3 conv
  bool hyper_feature = true;   // combined taps vs the deepest tap alone
  bool adaptive_fusion = true; // four pooled grids vs a single 7x7

  int feature_stride() const { return 8; }
  std::vector<PoolGrid> pool_grids() const;
};

struct FenModel {
  ModelConfig cfg;
  ParameterStore params;
};

// Builds and seeds every parameter the architecture can use, switches
// included, so checkpoints are interchangeable across ablations.
FenModel make_model(const ModelConfig& cfg, std::uint64_t seed);

// Per-grid score maps: cls[l] has 2*bins channels, reg[l] 4*bins.
struct ScoreMaps {
  std::vector<Tensor> cls;
  std::vector<Tensor> reg;
};

// All forward byproducts one backward pass needs.
struct NetActs {
  // backbone
  std::array<LayerCache, 5> bb_conv;
  std::array<Tensor, 5> bb_pre;  // pre-activation, for the relu masks
  std::vector<Tensor> taps;      // three stride-8 maps; taps.back() is deepest

  // region proposal head
  bool rpn_padded = false;  // odd extent handled by replicate-pad + crop
  int feat_h = 0, feat_w = 0;
  int padded_h = 0, padded_w = 0;
  LayerCache rpn_a, rpn_b, rpn_pool, rpn_reduce, rpn_up, rpn_concat, rpn_merge, rpn_refine;
  LayerCache rpn_plain;
  LayerCache rpn_cls, rpn_reg;

  // refinement trunk
  std::array<LayerCache, 3> hyper_tap;
  LayerCache hyper_concat, hyper_mix;
  std::vector<LayerCache> head_cls, head_reg;
};

struct RpnOut {
  Tensor cls;  // 2a channels, background/text logit pairs per anchor
  Tensor reg;  // 4a channels
};

RpnOut network_rpn_forward(const FenModel& model, const Tensor& image, NetActs& acts);
ScoreMaps network_maps_forward(const FenModel& model, NetActs& acts);

// Single backward sweep for both heads; accumulates parameter gradients.
// Pass zero tensors for paths that received no loss.
void network_backward(FenModel& model, NetActs& acts, const Tensor& grad_rpn_cls,
                      const Tensor& grad_rpn_reg, const ScoreMaps& grad_maps);

enum class BoxSource { rpn, scaled_small, scaled_large, half };

struct Proposal {
  Box box;
  double score = 0.0;
  BoxSource source = BoxSource::rpn;
};

// Decodes every anchor, clips to the image, drops boxes under min_side,
// suppresses at nms_thr and keeps the top `keep` by score (descending).
std::vector<Proposal> generate_proposals(const Tensor& cls, const Tensor& reg,
                                         const AnchorGrid& grid, double image_w, double image_h,
                                         double nms_thr = 0.7, std::size_t keep = 200,
                                         double min_side = 2.0);

// Appends center-preserving rescales (shrink, then grow) of the top
// `references` proposals, clipped to the image. Scores carry over. Input must
// be sorted by descending score.
std::vector<Proposal> mine_positives(std::vector<Proposal> proposals, std::size_t references,
                                     double shrink, double grow, double image_w, double image_h);

// Appends the left and right vertical halves of the top `references`
// proposals. Input must be sorted by descending score.
std::vector<Proposal> add_half_regions(std::vector<Proposal> proposals, std::size_t references);

// One region scored against the maps: pooled votes per grid, softmaxed text
// probability per grid, adaptively fused score and offsets.
struct RegionScore {
  double score = 0.0;
  DeltaVector delta;
  std::array<double, 4> weights{};
  std::vector<double> branch_scores;
  std::vector<DeltaVector> branch_boxes;
  std::vector<PooledGrid> pooled_cls, pooled_reg;
  std::vector<std::vector<double>> softmax_out;
};

RegionScore score_region(const ScoreMaps& maps, const Box& roi, std::span<const PoolGrid> grids,
                         double stride);

// Adjoint of score_region; scatters into grad_maps.
void score_region_backward(const RegionScore& rs, double grad_score,
                           const DeltaVector& grad_delta, std::span<const PoolGrid> grids,
                           ScoreMaps& grad_maps);

struct Detection {
  Box box;
  double score = 0.0;
};

struct DetectOptions {
  double score_threshold = 0.5;
  double nms_threshold = 0.3;
  bool half_regions = true;
  std::vector<double> scales;  // empty: native resolution only
  double proposal_nms = 0.7;
  std::size_t proposal_keep = 200;
  std::size_t half_references = 50;
};

// Full detection pass. With several scales the image is resized per scale,
// detections are mapped back to native coordinates, pooled and suppressed
// once more at nms_threshold.
std::vector<Detection> detect(const FenModel& model, const Tensor& image,
                              const DetectOptions& opts);

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w);

struct TrainOptions {
  double lambda = 1.0;
  double anchor_pos_iou = 0.7;
  double anchor_neg_iou = 0.3;
  std::size_t anchor_cap = 256;
  double region_pos_iou = 0.5;
  bool mining = true;
  std::size_t mine_references = 50;
  double proposal_nms = 0.7;
  std::size_t proposal_keep = 200;
};

struct StepReport {
  LossReport rpn;
  LossReport refine;
  double total = 0.0;  // rpn.total + refine.total
  std::size_t proposals = 0;
  std::size_t refine_positives = 0;
};

// Forward, losses, and a full backward sweep. Gradients accumulate in
// model.params; the caller owns the optimizer step.
StepReport train_step(FenModel& model, const Tensor& image, std::span<const Box> gts,
                      const TrainOptions& opts, std::uint64_t seed);

// Same losses over a caller-supplied region set instead of freshly generated
// proposals, optionally skipping the backward sweep. The loss becomes a pure
// function of the parameters, which is what a finite-difference probe needs.
StepReport train_step_frozen(FenModel& model, const Tensor& image, std::span<const Box> gts,
                             const TrainOptions& opts, std::uint64_t seed,
                             std::span<const Proposal> regions, bool with_grad);

// Proposal label balance over a deterministic scene stream, with and without
// mined rescales. Positives are proposals with IoU >= region_pos_iou against
// any gt.
struct PmStats {
  std::size_t plain_pos = 0, plain_neg = 0;
  std::size_t mined_pos = 0, mined_neg = 0;
  double plain_ratio() const;
  double mined_ratio() const;
};

PmStats pm_statistics(const FenModel& model, const SceneSpec& scenes, std::size_t scene_count,
                      const TrainOptions& opts);

}  // namespace fen
