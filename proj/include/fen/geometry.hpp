#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace fen {

// Axis-aligned box, continuous coordinates, center form. w and h are strictly
// positive for a valid box.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
};

// Corner form (x1,y1) top-left, (x2,y2) bottom-right, half-open in spirit:
// area = (x2-x1)*(y2-y1).
struct Corners {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
};

// Box regression offsets: dx,dy shift the center in units of the reference
// size, dw,dh scale width/height on a log scale.
struct DeltaVector {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;
};

struct ScoredBox {
  Box box;
  double score = 0.0;
};

bool valid_box(const Box& b);
double box_area(const Box& b);

Corners to_corners(const Box& b);
Box from_corners(const Corners& c);
Box from_corners(double x1, double y1, double x2, double y2);

// Intersection over union. Disjoint boxes give exactly 0.
double iou(const Box& a, const Box& b);
double iou(const Corners& a, const Corners& b);

// Greedy suppression over candidates sorted by descending score. Returns kept
// indices into `candidates`, ordered by descending score; score ties keep the
// lower input index first. A box is suppressed iff IoU with an already kept
// box strictly exceeds `threshold`. max_keep truncates the kept list early;
// greedy selection makes the capped result a prefix of the uncapped one.
std::vector<std::size_t> nms(std::span<const ScoredBox> candidates, double threshold,
                             std::size_t max_keep = static_cast<std::size_t>(-1));

// Applies offsets to a reference box:
//   x = x0 + w0*dx, y = y0 + h0*dy, w = w0*exp(dw), h = h0*exp(dh).
// dw/dh are clamped to [-10, 10] before exponentiation; *clamped reports
// whether clamping fired.
Box decode_box(const Box& reference, const DeltaVector& delta, bool* clamped = nullptr);

// Inverse of decode_box for valid boxes.
DeltaVector encode_box(const Box& target, const Box& reference);

// Clamps a box to the image rectangle [0,w]x[0,h]. The result can be
// degenerate (zero width or height) when the input lies fully outside.
Box clip_box(const Box& b, double image_w, double image_h);

}  // namespace fen
