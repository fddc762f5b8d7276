#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fen/geometry.hpp"

namespace fen {

// One anchor shape: w = scale*sqrt(ratio), h = scale/sqrt(ratio), so ratio is
// w/h and scale^2 the area.
struct AnchorShape {
  double scale = 0.0;
  double ratio = 0.0;
  double w = 0.0;
  double h = 0.0;
};

// The full bank is scales {32,64,112,192,304,416} x ratios {1,2,3,4,6} with
// the 6 widest shapes removed, leaving 24. Order is by (scale, ratio).
std::vector<AnchorShape> build_anchor_set();

// Anchors tiled over a feature map. Cell (i,j) centers its anchors at
// ((j+0.5)*stride, (i+0.5)*stride) in image coordinates. Flat index:
// (i*cols + j)*shapes + a.
struct AnchorGrid {
  int rows = 0;
  int cols = 0;
  double stride = 0.0;
  std::vector<AnchorShape> shapes;

  std::size_t total() const { return static_cast<std::size_t>(rows) * cols * shapes.size(); }
  Box anchor_at(int i, int j, int a) const;
  Box anchor(std::size_t flat) const;
};

AnchorGrid place_anchors(int rows, int cols, double stride);

enum class AnchorClass { positive, negative, ignore };

struct AnchorLabel {
  AnchorClass cls = AnchorClass::ignore;
  DeltaVector target;  // meaningful for positives only
  int gt_index = -1;
};

// IoU-based labels, one per flat anchor index:
//   best IoU >= pos_thr -> positive against its best gt,
//   best IoU <  neg_thr -> negative, otherwise ignore.
// Each gt additionally claims its highest-IoU anchor, so every gt ends up
// with at least one positive. The result is then subsampled to at most
// sample_cap retained labels with positives at most half, extras demoted to
// ignore; gt-claimed anchors are never demoted. No gts means every sampled
// label is negative.
std::vector<AnchorLabel> label_anchors(const AnchorGrid& grid, std::span<const Box> gts,
                                       double pos_thr, double neg_thr, std::size_t sample_cap,
                                       std::uint64_t seed);

}  // namespace fen
