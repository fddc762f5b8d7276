#include "fen/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fen {

namespace {
constexpr double kDeltaClamp = 10.0;
}

bool valid_box(const Box& b) {
  return std::isfinite(b.cx) && std::isfinite(b.cy) && b.w > 0.0 && b.h > 0.0;
}

double box_area(const Box& b) { return b.w * b.h; }

Corners to_corners(const Box& b) {
  return {b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0};
}

Box from_corners(const Corners& c) {
  if (!(c.x2 > c.x1) || !(c.y2 > c.y1))
    throw std::invalid_argument("from_corners: degenerate box");
  return {(c.x1 + c.x2) / 2.0, (c.y1 + c.y2) / 2.0, c.x2 - c.x1, c.y2 - c.y1};
}

Box from_corners(double x1, double y1, double x2, double y2) {
  return from_corners(Corners{x1, y1, x2, y2});
}

double iou(const Corners& a, const Corners& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  return inter / (area_a + area_b - inter);
}

double iou(const Box& a, const Box& b) { return iou(to_corners(a), to_corners(b)); }

std::vector<std::size_t> nms(std::span<const ScoredBox> candidates, double threshold,
                             std::size_t max_keep) {
  if (!(threshold > 0.0) || threshold > 1.0)
    throw std::invalid_argument("nms: threshold outside (0, 1]");
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // stable sort keeps lower input index first on equal scores
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return candidates[a].score > candidates[b].score;
  });

  std::vector<std::size_t> kept;
  kept.reserve(std::min(candidates.size(), max_keep));
  for (std::size_t idx : order) {
    if (kept.size() >= max_keep) break;
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (iou(candidates[idx].box, candidates[k].box) > threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

Box decode_box(const Box& reference, const DeltaVector& delta, bool* clamped) {
  if (!valid_box(reference)) throw std::invalid_argument("decode_box: invalid reference");
  bool hit = false;
  auto clamp_log = [&hit](double v) {
    if (v > kDeltaClamp) {
      hit = true;
      return kDeltaClamp;
    }
    if (v < -kDeltaClamp) {
      hit = true;
      return -kDeltaClamp;
    }
    return v;
  };
  Box out;
  out.cx = reference.cx + reference.w * delta.dx;
  out.cy = reference.cy + reference.h * delta.dy;
  out.w = reference.w * std::exp(clamp_log(delta.dw));
  out.h = reference.h * std::exp(clamp_log(delta.dh));
  if (clamped) *clamped = hit;
  return out;
}

DeltaVector encode_box(const Box& target, const Box& reference) {
  if (!valid_box(target) || !valid_box(reference))
    throw std::invalid_argument("encode_box: invalid box");
  DeltaVector d;
  d.dx = (target.cx - reference.cx) / reference.w;
  d.dy = (target.cy - reference.cy) / reference.h;
  d.dw = std::log(target.w / reference.w);
  d.dh = std::log(target.h / reference.h);
  return d;
}

Box clip_box(const Box& b, double image_w, double image_h) {
  Corners c = to_corners(b);
  c.x1 = std::clamp(c.x1, 0.0, image_w);
  c.x2 = std::clamp(c.x2, 0.0, image_w);
  c.y1 = std::clamp(c.y1, 0.0, image_h);
  c.y2 = std::clamp(c.y2, 0.0, image_h);
  Box out;
  out.cx = (c.x1 + c.x2) / 2.0;
  out.cy = (c.y1 + c.y2) / 2.0;
  out.w = c.x2 - c.x1;
  out.h = c.y2 - c.y1;
  return out;
}

}  // namespace fen
