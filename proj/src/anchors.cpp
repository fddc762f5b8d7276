#include "fen/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace fen {

namespace {
constexpr double kScales[] = {32.0, 64.0, 112.0, 192.0, 304.0, 416.0};
constexpr double kRatios[] = {1.0, 2.0, 3.0, 4.0, 6.0};
constexpr std::size_t kDropWidest = 6;
}  // namespace

std::vector<AnchorShape> build_anchor_set() {
  std::vector<AnchorShape> all;
  for (double s : kScales)
    for (double r : kRatios)
      all.push_back({s, r, s * std::sqrt(r), s / std::sqrt(r)});

  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return all[a].w > all[b].w; });

  std::vector<bool> dropped(all.size(), false);
  for (std::size_t k = 0; k < kDropWidest; ++k) dropped[order[k]] = true;

  std::vector<AnchorShape> kept;
  kept.reserve(all.size() - kDropWidest);
  for (std::size_t i = 0; i < all.size(); ++i)
    if (!dropped[i]) kept.push_back(all[i]);
  return kept;
}

Box AnchorGrid::anchor_at(int i, int j, int a) const {
  const AnchorShape& s = shapes[static_cast<std::size_t>(a)];
  return {(j + 0.5) * stride, (i + 0.5) * stride, s.w, s.h};
}

Box AnchorGrid::anchor(std::size_t flat) const {
  const std::size_t a = flat % shapes.size();
  const std::size_t cell = flat / shapes.size();
  const int j = static_cast<int>(cell % static_cast<std::size_t>(cols));
  const int i = static_cast<int>(cell / static_cast<std::size_t>(cols));
  return anchor_at(i, j, static_cast<int>(a));
}

AnchorGrid place_anchors(int rows, int cols, double stride) {
  if (rows <= 0 || cols <= 0 || !(stride > 0.0))
    throw std::invalid_argument("place_anchors: bad grid");
  AnchorGrid g;
  g.rows = rows;
  g.cols = cols;
  g.stride = stride;
  g.shapes = build_anchor_set();
  return g;
}

std::vector<AnchorLabel> label_anchors(const AnchorGrid& grid, std::span<const Box> gts,
                                       double pos_thr, double neg_thr, std::size_t sample_cap,
                                       std::uint64_t seed) {
  if (!(pos_thr >= neg_thr)) throw std::invalid_argument("label_anchors: pos_thr < neg_thr");
  const std::size_t n = grid.total();
  std::vector<AnchorLabel> labels(n);

  std::vector<double> best_iou(n, 0.0);
  std::vector<int> best_gt(n, -1);
  // iou matrix is small enough to keep whole: anchors x gts
  std::vector<double> mat(n * gts.size());
  for (std::size_t a = 0; a < n; ++a) {
    const Box anchor = grid.anchor(a);
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchor, gts[g]);
      mat[a * gts.size() + g] = v;
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_gt[a] = static_cast<int>(g);
      }
    }
  }

  for (std::size_t a = 0; a < n; ++a) {
    if (!gts.empty() && best_iou[a] >= pos_thr) {
      labels[a].cls = AnchorClass::positive;
      labels[a].gt_index = best_gt[a];
      labels[a].target = encode_box(gts[static_cast<std::size_t>(best_gt[a])], grid.anchor(a));
    } else if (best_iou[a] < neg_thr) {
      labels[a].cls = AnchorClass::negative;
    }
  }

  // every gt claims its best anchor, first-come on conflicts
  std::vector<bool> claimed(n, false);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    std::size_t best = n;
    double best_v = -1.0;
    for (std::size_t a = 0; a < n; ++a) {
      if (claimed[a]) continue;
      const double v = mat[a * gts.size() + g];
      if (v > best_v) {
        best_v = v;
        best = a;
      }
    }
    if (best == n) break;  // more gts than anchors
    claimed[best] = true;
    labels[best].cls = AnchorClass::positive;
    labels[best].gt_index = static_cast<int>(g);
    labels[best].target = encode_box(gts[g], grid.anchor(best));
  }

  std::vector<std::size_t> pos, neg;
  for (std::size_t a = 0; a < n; ++a) {
    if (labels[a].cls == AnchorClass::positive && !claimed[a]) pos.push_back(a);
    if (labels[a].cls == AnchorClass::negative) neg.push_back(a);
  }
  std::size_t forced = 0;
  for (std::size_t a = 0; a < n; ++a)
    if (claimed[a]) ++forced;

  std::mt19937_64 rng(seed);
  const std::size_t pos_quota = sample_cap / 2;
  const std::size_t keep_pos =
      forced + (forced < pos_quota ? std::min(pos.size(), pos_quota - forced) : 0);
  std::shuffle(pos.begin(), pos.end(), rng);
  for (std::size_t k = keep_pos - forced; k < pos.size(); ++k)
    labels[pos[k]].cls = AnchorClass::ignore;

  // Negatives are capped at three per positive (floor of 16 for text-free
  // images); filling to sample_cap would drown the positives once the loss
  // is normalised by positive count.
  const std::size_t neg_room = sample_cap - std::min(sample_cap, keep_pos);
  const std::size_t neg_cap = std::min(std::max<std::size_t>(3 * keep_pos, 16), neg_room);
  const std::size_t keep_neg = std::min(neg.size(), neg_cap);
  std::shuffle(neg.begin(), neg.end(), rng);
  for (std::size_t k = keep_neg; k < neg.size(); ++k) labels[neg[k]].cls = AnchorClass::ignore;

  return labels;
}

}  // namespace fen
