#include "fen/psroi.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fen {

namespace {

double dv_comp(const DeltaVector& d, int k) {
  switch (k) {
    case 0: return d.dx;
    case 1: return d.dy;
    case 2: return d.dw;
    default: return d.dh;
  }
}

double& dv_comp(DeltaVector& d, int k) {
  switch (k) {
    case 0: return d.dx;
    case 1: return d.dy;
    case 2: return d.dw;
    default: return d.dh;
  }
}

}  // namespace

std::array<PoolGrid, 4> adaptive_pool_grids() {
  return {PoolGrid{3, 3}, PoolGrid{7, 7}, PoolGrid{8, 3}, PoolGrid{11, 3}};
}

PooledGrid psroi_pool(const Tensor& maps, const Box& roi, const PoolGrid& grid, double stride,
                      int classes) {
  if (grid.w_bins <= 0 || grid.h_bins <= 0) throw std::invalid_argument("psroi_pool: bad grid");
  if (classes <= 0) throw std::invalid_argument("psroi_pool: bad class count");
  if (maps.rank() != 3 || maps.channels() != classes * grid.bin_count())
    throw std::invalid_argument("psroi_pool: maps channels do not match grid");
  if (!(stride > 0.0)) throw std::invalid_argument("psroi_pool: bad stride");

  const Corners c = to_corners(roi);
  int x0 = static_cast<int>(std::floor(c.x1 / stride));
  int y0 = static_cast<int>(std::floor(c.y1 / stride));
  int x1 = static_cast<int>(std::ceil(c.x2 / stride));
  int y1 = static_cast<int>(std::ceil(c.y2 / stride));
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, maps.width());
  y1 = std::min(y1, maps.height());
  const int rw = x1 - x0, rh = y1 - y0;
  if (rw <= 0 || rh <= 0)
    throw std::invalid_argument("psroi_pool: region misses the feature extent");

  const int kw = grid.w_bins, kh = grid.h_bins;
  PooledGrid out;
  out.grid = grid;
  out.classes = classes;
  out.map_channels = maps.channels();
  out.map_h = maps.height();
  out.map_w = maps.width();
  out.values.assign(static_cast<std::size_t>(classes) * grid.bin_count(), 0.0);
  out.pixel_counts.assign(static_cast<std::size_t>(grid.bin_count()), 0);
  out.bin_rect.assign(static_cast<std::size_t>(grid.bin_count()), {0, 0, 0, 0});

  for (int i = 0; i < kh; ++i) {
    const int ys = y0 + (i * rh) / kh;
    const int ye = y0 + ((i + 1) * rh + kh - 1) / kh;
    for (int j = 0; j < kw; ++j) {
      const int xs = x0 + (j * rw) / kw;
      const int xe = x0 + ((j + 1) * rw + kw - 1) / kw;
      const int bin = i * kw + j;
      const int n = (ye - ys) * (xe - xs);
      out.pixel_counts[static_cast<std::size_t>(bin)] = n;
      out.bin_rect[static_cast<std::size_t>(bin)] = {xs, ys, xe, ye};
      if (n == 0) continue;
      for (int cls = 0; cls < classes; ++cls) {
        const int ch = (cls * kh + i) * kw + j;
        double sum = 0.0;
        for (int y = ys; y < ye; ++y)
          for (int x = xs; x < xe; ++x) sum += maps(ch, y, x);
        out.values[static_cast<std::size_t>(cls * kh * kw + bin)] = sum / n;
      }
    }
  }
  return out;
}

void psroi_backward(const PooledGrid& pooled, std::span<const double> grad_values,
                    Tensor& maps_grad) {
  if (pooled.classes <= 0 || pooled.values.empty())
    throw std::invalid_argument("psroi_backward: no pooled result to run backward through");
  if (grad_values.size() != pooled.values.size())
    throw std::invalid_argument("psroi_backward: gradient length mismatch");
  if (maps_grad.rank() != 3 || maps_grad.channels() != pooled.map_channels ||
      maps_grad.height() != pooled.map_h || maps_grad.width() != pooled.map_w)
    throw std::invalid_argument("psroi_backward: maps_grad shape mismatch");

  const int kw = pooled.grid.w_bins, kh = pooled.grid.h_bins;
  for (int cls = 0; cls < pooled.classes; ++cls) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const int bin = i * kw + j;
        const int n = pooled.pixel_counts[static_cast<std::size_t>(bin)];
        if (n == 0) continue;
        const double g = grad_values[static_cast<std::size_t>(cls * kh * kw + bin)] / n;
        const auto [xs, ys, xe, ye] = pooled.bin_rect[static_cast<std::size_t>(bin)];
        const int ch = (cls * kh + i) * kw + j;
        for (int y = ys; y < ye; ++y)
          for (int x = xs; x < xe; ++x) maps_grad(ch, y, x) += g;
      }
    }
  }
}

std::vector<double> coarse_scores(const PooledGrid& pooled) {
  if (pooled.classes <= 0) throw std::invalid_argument("coarse_scores: empty pooled result");
  const int bins = pooled.grid.bin_count();
  std::vector<double> out(static_cast<std::size_t>(pooled.classes), 0.0);
  for (int cls = 0; cls < pooled.classes; ++cls) {
    double sum = 0.0;
    for (int b = 0; b < bins; ++b) sum += pooled.values[static_cast<std::size_t>(cls * bins + b)];
    out[static_cast<std::size_t>(cls)] = sum / bins;
  }
  return out;
}

std::vector<double> class_softmax(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("class_softmax: empty input");
  const double m = *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - m);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

std::vector<double> class_softmax_backward(std::span<const double> softmax_out,
                                           std::span<const double> grad_out) {
  if (softmax_out.size() != grad_out.size())
    throw std::invalid_argument("class_softmax_backward: size mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < softmax_out.size(); ++i) dot += grad_out[i] * softmax_out[i];
  std::vector<double> grad_in(softmax_out.size());
  for (std::size_t i = 0; i < softmax_out.size(); ++i)
    grad_in[i] = softmax_out[i] * (grad_out[i] - dot);
  return grad_in;
}

FusedScore fuse_scores(std::span<const double> branch_scores) {
  if (branch_scores.size() != 4) throw std::invalid_argument("fuse_scores: expected 4 branches");
  double total = 0.0;
  for (double s : branch_scores) {
    if (!(s > 0.0)) throw std::invalid_argument("fuse_scores: scores must be positive");
    total += s;
  }
  FusedScore out;
  for (std::size_t l = 0; l < 4; ++l) out.weights[l] = branch_scores[l] / total;
  for (std::size_t l = 0; l < 4; ++l) out.value += out.weights[l] * branch_scores[l];
  return out;
}

DeltaVector fuse_boxes(std::span<const DeltaVector> branch_boxes,
                       std::span<const double> weights) {
  if (branch_boxes.size() != weights.size() || branch_boxes.empty())
    throw std::invalid_argument("fuse_boxes: size mismatch");
  DeltaVector out;
  for (std::size_t l = 0; l < branch_boxes.size(); ++l) {
    out.dx += weights[l] * branch_boxes[l].dx;
    out.dy += weights[l] * branch_boxes[l].dy;
    out.dw += weights[l] * branch_boxes[l].dw;
    out.dh += weights[l] * branch_boxes[l].dh;
  }
  return out;
}

FusionGrads fuse_backward(std::span<const double> branch_scores,
                          std::span<const DeltaVector> branch_boxes, double grad_fused_score,
                          const DeltaVector& grad_fused_box) {
  if (branch_scores.size() != 4 || branch_boxes.size() != 4)
    throw std::invalid_argument("fuse_backward: expected 4 branches");
  const FusedScore fused = fuse_scores(branch_scores);
  const DeltaVector fused_box =
      fuse_boxes(branch_boxes, std::span<const double>(fused.weights.data(), 4));
  double total = 0.0;
  for (double s : branch_scores) total += s;
  double wsq = 0.0;
  for (double w : fused.weights) wsq += w * w;

  FusionGrads g;
  for (std::size_t m = 0; m < 4; ++m) {
    // d(fused score)/dS_m = 2 W_m - sum(W^2)
    double acc = grad_fused_score * (2.0 * fused.weights[m] - wsq);
    // box path: d(fused box_k)/dS_m = (B_mk - fused_k) / total
    for (int k = 0; k < 4; ++k)
      acc += dv_comp(grad_fused_box, k) * (dv_comp(branch_boxes[m], k) - dv_comp(fused_box, k)) /
             total;
    g.scores[m] = acc;
    for (int k = 0; k < 4; ++k)
      dv_comp(g.boxes[m], k) = dv_comp(grad_fused_box, k) * fused.weights[m];
  }
  return g;
}

}  // namespace fen
