#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "fen/psroi.hpp"

using namespace fen;

namespace {

Tensor random_maps(int channels, int h, int w, std::mt19937_64& rng) {
  Tensor t({channels, h, w});
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

// Independent re-derivation of the pooled values: real-valued floor/ceil bin
// edges, per-pixel accumulation per class channel.
std::vector<double> pool_reference(const Tensor& maps, const Box& roi, const PoolGrid& grid,
                                   double stride, int classes) {
  const Corners c = to_corners(roi);
  const int x0 = std::max(static_cast<int>(std::floor(c.x1 / stride)), 0);
  const int y0 = std::max(static_cast<int>(std::floor(c.y1 / stride)), 0);
  const int x1 = std::min(static_cast<int>(std::ceil(c.x2 / stride)), maps.width());
  const int y1 = std::min(static_cast<int>(std::ceil(c.y2 / stride)), maps.height());
  const int rw = x1 - x0, rh = y1 - y0;
  const int kw = grid.w_bins, kh = grid.h_bins;
  std::vector<double> values(static_cast<std::size_t>(classes) * kw * kh, 0.0);
  for (int i = 0; i < kh; ++i) {
    const int ys = y0 + static_cast<int>(std::floor(i * rh / static_cast<double>(kh)));
    const int ye = y0 + static_cast<int>(std::ceil((i + 1) * rh / static_cast<double>(kh)));
    for (int j = 0; j < kw; ++j) {
      const int xs = x0 + static_cast<int>(std::floor(j * rw / static_cast<double>(kw)));
      const int xe = x0 + static_cast<int>(std::ceil((j + 1) * rw / static_cast<double>(kw)));
      const int n = (ye - ys) * (xe - xs);
      if (n == 0) continue;
      for (int cls = 0; cls < classes; ++cls) {
        const int ch = (cls * kh + i) * kw + j;
        double sum = 0.0;
        for (int y = ys; y < ye; ++y)
          for (int x = xs; x < xe; ++x) sum += maps(ch, y, x);
        values[static_cast<std::size_t>(cls * kh * kw + i * kw + j)] = sum / n;
      }
    }
  }
  return values;
}

}  // namespace

TEST_CASE("the four pooling grids are 3x3, 7x7, 8x3 and 11x3") {
  const auto grids = adaptive_pool_grids();
  CHECK(grids[0].w_bins == 3);
  CHECK(grids[0].h_bins == 3);
  CHECK(grids[1].w_bins == 7);
  CHECK(grids[1].h_bins == 7);
  CHECK(grids[2].w_bins == 8);
  CHECK(grids[2].h_bins == 3);
  CHECK(grids[3].w_bins == 11);
  CHECK(grids[3].h_bins == 3);
}

TEST_CASE("pooling matches the per-pixel reference on random regions") {
  std::mt19937_64 rng(2024);
  const double stride = 8.0;
  const int classes = 2;
  for (const PoolGrid& grid : adaptive_pool_grids()) {
    for (int t = 0; t < 100; ++t) {
      const int h = 12 + static_cast<int>(rng() % 20);
      const int w = 12 + static_cast<int>(rng() % 20);
      const Tensor maps = random_maps(classes * grid.bin_count(), h, w, rng);
      std::uniform_real_distribution<double> cx(10.0, (w - 2) * stride);
      std::uniform_real_distribution<double> cy(10.0, (h - 2) * stride);
      std::uniform_real_distribution<double> side(6.0, 120.0);
      const Box roi{cx(rng), cy(rng), side(rng), side(rng)};
      const PooledGrid got = psroi_pool(maps, roi, grid, stride, classes);
      const std::vector<double> want = pool_reference(maps, roi, grid, stride, classes);
      REQUIRE(got.values.size() == want.size());
      for (std::size_t k = 0; k < want.size(); ++k) CHECK(got.values[k] == want[k]);
    }
  }
}

TEST_CASE("region corners round outward to whole feature pixels") {
  // x in [12, 20.1) covers feature columns 1..2, y in [9, 15) covers row 1.
  Tensor maps({1, 6, 6});
  for (Eigen::Index i = 0; i < maps.size(); ++i) maps[i] = 1.0;
  const Box roi = from_corners({12.0, 9.0, 20.1, 15.0});
  const PooledGrid pooled = psroi_pool(maps, roi, PoolGrid{1, 1}, 8.0, 1);
  const auto [xs, ys, xe, ye] = pooled.bin_rect[0];
  CHECK(xs == 1);
  CHECK(ys == 1);
  CHECK(xe == 3);
  CHECK(ye == 2);
  CHECK(pooled.pixel_counts[0] == 2);
}

TEST_CASE("bins always cover at least one pixel, even for tiny regions") {
  std::mt19937_64 rng(7);
  for (const PoolGrid& grid : adaptive_pool_grids()) {
    for (int t = 0; t < 100; ++t) {
      const Tensor maps = random_maps(2 * grid.bin_count(), 10, 10, rng);
      std::uniform_real_distribution<double> c(16.0, 64.0);
      std::uniform_real_distribution<double> side(1.0, 12.0);
      const Box roi{c(rng), c(rng), side(rng), side(rng)};
      const PooledGrid pooled = psroi_pool(maps, roi, grid, 8.0, 2);
      for (int n : pooled.pixel_counts) CHECK(n >= 1);
    }
  }
}

TEST_CASE("a region outside the feature extent is an error") {
  Tensor maps({9, 8, 8});
  CHECK_THROWS_AS(psroi_pool(maps, Box{-40.0, -40.0, 10.0, 10.0}, PoolGrid{3, 3}, 8.0, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(psroi_pool(maps, Box{1000.0, 32.0, 10.0, 10.0}, PoolGrid{3, 3}, 8.0, 1),
                  std::invalid_argument);
}

TEST_CASE("backward scatter is the exact adjoint of pooling") {
  std::mt19937_64 rng(55);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (const PoolGrid& grid : adaptive_pool_grids()) {
    const int classes = 2;
    const Tensor maps = random_maps(classes * grid.bin_count(), 14, 18, rng);
    const Box roi{60.0, 50.0, 70.0, 45.0};
    const PooledGrid pooled = psroi_pool(maps, roi, grid, 8.0, classes);
    std::vector<double> g(pooled.values.size());
    for (double& v : g) v = dist(rng);

    Tensor maps_grad = Tensor::zeros({maps.channels(), maps.height(), maps.width()});
    psroi_backward(pooled, g, maps_grad);

    double lhs = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) lhs += g[k] * pooled.values[k];
    const double rhs = (maps_grad.array() * maps.array()).sum();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("coarse scores are the per-class mean over bins") {
  // constant channels: pooled value for (class, bin) is that channel's value
  const PoolGrid grid{3, 3};
  const int classes = 2;
  Tensor maps({classes * grid.bin_count(), 10, 10});
  for (int ch = 0; ch < maps.channels(); ++ch)
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 10; ++x) maps(ch, y, x) = 0.1 * ch;
  const Box roi{40.0, 40.0, 30.0, 30.0};
  const PooledGrid pooled = psroi_pool(maps, roi, grid, 8.0, classes);
  const std::vector<double> scores = coarse_scores(pooled);
  REQUIRE(scores.size() == 2);
  // class 0 spans channels 0..8, class 1 spans 9..17
  CHECK(scores[0] == doctest::Approx(0.1 * 4.0).epsilon(1e-12));
  CHECK(scores[1] == doctest::Approx(0.1 * 13.0).epsilon(1e-12));
}

TEST_CASE("softmax normalises and keeps order") {
  const std::vector<double> s{1.0, 3.0, 2.0};
  const std::vector<double> p = class_softmax(s);
  CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p[1] > p[2]);
  CHECK(p[2] > p[0]);
  // two-class closed form
  const std::vector<double> q = class_softmax(std::vector<double>{0.0, std::log(3.0)});
  CHECK(q[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax backward matches finite differences") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> s(4), g(4);
  for (double& v : s) v = dist(rng);
  for (double& v : g) v = dist(rng);
  const std::vector<double> p = class_softmax(s);
  const std::vector<double> gi = class_softmax_backward(p, g);
  const double eps = 1e-6;
  for (std::size_t m = 0; m < 4; ++m) {
    auto loss = [&](double delta) {
      std::vector<double> sp = s;
      sp[m] += delta;
      const std::vector<double> pp = class_softmax(sp);
      double acc = 0.0;
      for (std::size_t i = 0; i < 4; ++i) acc += g[i] * pp[i];
      return acc;
    };
    const double fd = (loss(eps) - loss(-eps)) / (2.0 * eps);
    CHECK(gi[m] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("fusion weights are scores over their sum") {
  const std::array<double, 4> s{0.4, 0.2, 0.2, 0.2};
  const FusedScore f = fuse_scores(s);
  CHECK(f.weights[0] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(f.value == doctest::Approx(0.28).epsilon(1e-12));
  const double wsum = f.weights[0] + f.weights[1] + f.weights[2] + f.weights[3];
  CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fusion preserves the argmax and stays inside the score range") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> dist(0.05, 1.0);
  for (int t = 0; t < 200; ++t) {
    std::array<double, 4> s;
    for (double& v : s) v = dist(rng);
    const FusedScore f = fuse_scores(s);
    double wsum = 0.0;
    for (double w : f.weights) wsum += w;
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));
    const std::size_t arg =
        static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
    const std::size_t warg = static_cast<std::size_t>(
        std::max_element(f.weights.begin(), f.weights.end()) - f.weights.begin());
    CHECK(arg == warg);
    CHECK(f.value >= *std::min_element(s.begin(), s.end()) - 1e-12);
    CHECK(f.value <= *std::max_element(s.begin(), s.end()) + 1e-12);
  }
}

TEST_CASE("non-positive branch scores are rejected") {
  CHECK_THROWS_AS(fuse_scores(std::array<double, 4>{0.5, 0.0, 0.2, 0.3}),
                  std::invalid_argument);
  CHECK_THROWS_AS(fuse_scores(std::array<double, 4>{0.5, -0.1, 0.2, 0.3}),
                  std::invalid_argument);
}

TEST_CASE("fused boxes are the weight-blended branch offsets") {
  const std::array<DeltaVector, 4> boxes{DeltaVector{1, 0, 0, 0}, DeltaVector{0, 1, 0, 0},
                                         DeltaVector{0, 0, 1, 0}, DeltaVector{0, 0, 0, 1}};
  const std::array<double, 4> w{0.4, 0.3, 0.2, 0.1};
  const DeltaVector fused = fuse_boxes(boxes, w);
  CHECK(fused.dx == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(fused.dy == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(fused.dw == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(fused.dh == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("fusion backward matches finite differences") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> pos(0.05, 1.0);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::array<double, 4> s;
  std::array<DeltaVector, 4> b;
  for (double& v : s) v = pos(rng);
  for (DeltaVector& d : b) d = {dist(rng), dist(rng), dist(rng), dist(rng)};
  const double gs = dist(rng);
  const DeltaVector gb{dist(rng), dist(rng), dist(rng), dist(rng)};

  auto loss = [&](const std::array<double, 4>& ss, const std::array<DeltaVector, 4>& bb) {
    const FusedScore f = fuse_scores(ss);
    const DeltaVector fb = fuse_boxes(bb, std::span<const double>(f.weights.data(), 4));
    return gs * f.value + gb.dx * fb.dx + gb.dy * fb.dy + gb.dw * fb.dw + gb.dh * fb.dh;
  };

  const FusionGrads g = fuse_backward(s, b, gs, gb);
  const double eps = 1e-6;
  for (std::size_t m = 0; m < 4; ++m) {
    auto sp = s;
    auto sm = s;
    sp[m] += eps;
    sm[m] -= eps;
    const double fd = (loss(sp, b) - loss(sm, b)) / (2.0 * eps);
    CHECK(g.scores[m] == doctest::Approx(fd).epsilon(1e-5));
    for (int k = 0; k < 4; ++k) {
      auto bp = b;
      auto bm = b;
      auto bump = [&](DeltaVector& d, double delta) {
        switch (k) {
          case 0: d.dx += delta; break;
          case 1: d.dy += delta; break;
          case 2: d.dw += delta; break;
          default: d.dh += delta; break;
        }
      };
      bump(bp[m], eps);
      bump(bm[m], -eps);
      const double fdb = (loss(s, bp) - loss(s, bm)) / (2.0 * eps);
      const double got = k == 0   ? g.boxes[m].dx
                         : k == 1 ? g.boxes[m].dy
                         : k == 2 ? g.boxes[m].dw
                                  : g.boxes[m].dh;
      CHECK(got == doctest::Approx(fdb).epsilon(1e-5));
    }
  }
}
