#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"
#include "fen/anchors.hpp"

using namespace fen;

TEST_CASE("anchor bank holds exactly 24 shapes from the 6x5 lattice") {
  const auto shapes = build_anchor_set();
  REQUIRE(shapes.size() == 24);
  const std::set<double> scales{32, 64, 112, 192, 304, 416};
  const std::set<double> ratios{1, 2, 3, 4, 6};
  for (const auto& s : shapes) {
    CHECK(scales.count(s.scale) == 1);
    CHECK(ratios.count(s.ratio) == 1);
    CHECK(s.w == doctest::Approx(s.scale * std::sqrt(s.ratio)));
    CHECK(s.h == doctest::Approx(s.scale / std::sqrt(s.ratio)));
  }
}

TEST_CASE("the six widest lattice shapes are pruned") {
  const auto shapes = build_anchor_set();
  auto present = [&](double scale, double ratio) {
    return std::any_of(shapes.begin(), shapes.end(), [&](const AnchorShape& s) {
      return s.scale == scale && s.ratio == ratio;
    });
  };
  // the dropped shapes, in decreasing width order
  CHECK_FALSE(present(416, 6));
  CHECK_FALSE(present(416, 4));
  CHECK_FALSE(present(304, 6));
  CHECK_FALSE(present(416, 3));
  CHECK_FALSE(present(304, 4));
  CHECK_FALSE(present(416, 2));
  // every survivor is narrower than the narrowest dropped shape
  const double narrowest_dropped = 416 * std::sqrt(2.0);
  for (const auto& s : shapes) CHECK(s.w < narrowest_dropped);
}

TEST_CASE("anchor grid centers cells at half-stride offsets") {
  const AnchorGrid grid = place_anchors(4, 6, 8.0);
  CHECK(grid.total() == 4u * 6u * 24u);
  const Box b = grid.anchor_at(2, 3, 0);
  CHECK(b.cx == doctest::Approx((3 + 0.5) * 8.0));
  CHECK(b.cy == doctest::Approx((2 + 0.5) * 8.0));
  // flat index agrees with the (i,j,a) accessor
  const std::size_t flat = (2u * 6u + 3u) * 24u + 5u;
  const Box via_flat = grid.anchor(flat);
  const Box via_ijk = grid.anchor_at(2, 3, 5);
  CHECK(via_flat.cx == doctest::Approx(via_ijk.cx));
  CHECK(via_flat.w == doctest::Approx(via_ijk.w));
}

TEST_CASE("every gt claims at least one positive anchor") {
  const AnchorGrid grid = place_anchors(16, 16, 8.0);
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> center(20.0, 100.0);
  std::uniform_real_distribution<double> size(8.0, 60.0);
  for (int t = 0; t < 100; ++t) {
    std::vector<Box> gts;
    const int n = 1 + static_cast<int>(rng() % 3);
    for (int g = 0; g < n; ++g) gts.push_back({center(rng), center(rng), size(rng), size(rng)});
    const auto labels = label_anchors(grid, gts, 0.7, 0.3, 256, rng());
    std::vector<bool> claimed(gts.size(), false);
    for (const auto& lab : labels)
      if (lab.cls == AnchorClass::positive) {
        REQUIRE(lab.gt_index >= 0);
        REQUIRE(lab.gt_index < static_cast<int>(gts.size()));
        claimed[static_cast<std::size_t>(lab.gt_index)] = true;
      }
    for (std::size_t g = 0; g < gts.size(); ++g) CHECK(claimed[g]);
  }
}

TEST_CASE("label sampling respects the cap and the positive quota") {
  const AnchorGrid grid = place_anchors(16, 16, 8.0);
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> center(20.0, 100.0);
  std::uniform_real_distribution<double> size(10.0, 50.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<Box> gts;
    const int n = 1 + static_cast<int>(rng() % 4);
    for (int g = 0; g < n; ++g) gts.push_back({center(rng), center(rng), size(rng), size(rng)});
    const auto labels = label_anchors(grid, gts, 0.7, 0.3, 256, rng());
    std::size_t pos = 0, neg = 0;
    for (const auto& lab : labels) {
      pos += lab.cls == AnchorClass::positive;
      neg += lab.cls == AnchorClass::negative;
    }
    CHECK(pos + neg <= 256);
    CHECK(pos <= 128);
    CHECK(neg >= 1);
  }
}

TEST_CASE("no ground truth means every retained label is negative") {
  const AnchorGrid grid = place_anchors(8, 8, 8.0);
  const auto labels = label_anchors(grid, {}, 0.7, 0.3, 256, 5);
  std::size_t pos = 0, neg = 0;
  for (const auto& lab : labels) {
    pos += lab.cls == AnchorClass::positive;
    neg += lab.cls == AnchorClass::negative;
  }
  CHECK(pos == 0);
  CHECK(neg > 0);
}

TEST_CASE("labeling is deterministic in the seed") {
  const AnchorGrid grid = place_anchors(12, 12, 8.0);
  const std::vector<Box> gts{{40, 40, 30, 12}, {80, 70, 50, 20}};
  const auto a = label_anchors(grid, gts, 0.7, 0.3, 64, 99);
  const auto b = label_anchors(grid, gts, 0.7, 0.3, 64, 99);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].cls == b[i].cls);
}

TEST_CASE("positive labels encode their gt against the anchor") {
  const AnchorGrid grid = place_anchors(16, 16, 8.0);
  const std::vector<Box> gts{{64, 64, 40, 16}};
  const auto labels = label_anchors(grid, gts, 0.7, 0.3, 256, 7);
  bool any = false;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].cls != AnchorClass::positive) continue;
    any = true;
    const Box decoded = decode_box(grid.anchor(i), labels[i].target);
    CHECK(decoded.cx == doctest::Approx(64.0));
    CHECK(decoded.cy == doctest::Approx(64.0));
    CHECK(decoded.w == doctest::Approx(40.0));
    CHECK(decoded.h == doctest::Approx(16.0));
  }
  CHECK(any);
}
