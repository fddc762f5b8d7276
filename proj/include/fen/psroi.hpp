#pragma once

#include <array>
#include <span>
#include <vector>

#include "fen/geometry.hpp"
#include "fen/tensor.hpp"

namespace fen {

// Pooling grid: w_bins columns by h_bins rows. Wider grids spend their bins
// horizontally, matching wide text.
struct PoolGrid {
  int w_bins = 0;
  int h_bins = 0;
  int bin_count() const { return w_bins * h_bins; }
};

// The four grids pooled per region before fusion.
std::array<PoolGrid, 4> adaptive_pool_grids();  // 3x3, 7x7, 8x3, 11x3

// Pooled responses of one region over one grid, plus everything the backward
// scatter needs. values layout: (c * h_bins + i) * w_bins + j.
struct PooledGrid {
  PoolGrid grid;
  int classes = 0;
  std::vector<double> values;
  std::vector<int> pixel_counts;             // per bin (i * w_bins + j)
  std::vector<std::array<int, 4>> bin_rect;  // x0,y0,x1,y1 feature pixels, half-open
  int map_channels = 0;
  int map_h = 0;
  int map_w = 0;

  double value_at(int c, int i, int j) const {
    return values[static_cast<std::size_t>((c * grid.h_bins + i) * grid.w_bins + j)];
  }
};

// Position-sensitive pooling. `maps` has classes * bin_count channels laid out
// class-major: channel (c * h_bins + i) * w_bins + j serves class c, bin
// (i,j). The region is given in image coordinates; `stride` converts to
// feature pixels (floor for the near corner, ceil for the far one). Each bin
// averages its own channel over the bin's pixel span, summing rows first;
// empty bins pool to zero. A region that misses the feature extent entirely
// is an error.
PooledGrid psroi_pool(const Tensor& maps, const Box& roi, const PoolGrid& grid, double stride,
                      int classes);

// Scatters d(loss)/d(values) back onto the score maps: each pixel of a bin
// receives grad/pixel_count. maps_grad must match the pooled maps' shape.
void psroi_backward(const PooledGrid& pooled, std::span<const double> grad_values,
                    Tensor& maps_grad);

// Per-class mean over all bins (the vote aggregation step).
std::vector<double> coarse_scores(const PooledGrid& pooled);

std::vector<double> class_softmax(std::span<const double> scores);

// d(loss)/d(scores) given softmax outputs s and d(loss)/d(s).
std::vector<double> class_softmax_backward(std::span<const double> softmax_out,
                                           std::span<const double> grad_out);

// Adaptive fusion of the four grid scores: weights W_l = S_l / sum(S), fused
// score sum(W_l * S_l). Branch scores must be strictly positive, which
// softmax outputs are.
struct FusedScore {
  std::array<double, 4> weights{};
  double value = 0.0;
};
FusedScore fuse_scores(std::span<const double> branch_scores);

// Fused box offsets: component-wise sum(W_l * B_l).
DeltaVector fuse_boxes(std::span<const DeltaVector> branch_boxes,
                       std::span<const double> weights);

// Adjoint of the fused score/box pair with respect to the branch scores and
// branch boxes. Weights are a function of the scores, so box gradients flow
// into the scores as well.
struct FusionGrads {
  std::array<double, 4> scores{};
  std::array<DeltaVector, 4> boxes{};
};
FusionGrads fuse_backward(std::span<const double> branch_scores,
                          std::span<const DeltaVector> branch_boxes, double grad_fused_score,
                          const DeltaVector& grad_fused_box);

}  // namespace fen
