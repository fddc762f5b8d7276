#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "fen/eval.hpp"
#include "fen/synthdata.hpp"

using namespace fen;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path dir = fs::temp_directory_path() / (std::string("fen_synth_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("identical spec and index give a bit-identical scene") {
  SceneSpec spec;
  spec.seed = 11;
  const Scene a = generate_scene(spec, 3);
  const Scene b = generate_scene(spec, 3);
  REQUIRE(a.image.size() == b.image.size());
  for (Eigen::Index i = 0; i < a.image.size(); ++i) CHECK(a.image[i] == b.image[i]);
  REQUIRE(a.gts.size() == b.gts.size());
  for (std::size_t g = 0; g < a.gts.size(); ++g) {
    CHECK(a.gts[g].cx == b.gts[g].cx);
    CHECK(a.gts[g].w == b.gts[g].w);
  }
  // a different index produces a different image
  const Scene c = generate_scene(spec, 4);
  bool any_diff = false;
  for (Eigen::Index i = 0; i < a.image.size() && !any_diff; ++i)
    any_diff = a.image[i] != c.image[i];
  CHECK(any_diff);
}

TEST_CASE("word count range (1,1) yields exactly one box") {
  SceneSpec spec;
  spec.min_words = 1;
  spec.max_words = 1;
  spec.seed = 21;
  for (std::uint64_t i = 0; i < 20; ++i) CHECK(generate_scene(spec, i).gts.size() == 1);
}

TEST_CASE("boxes stay inside the image and respect spacing over 1000 scenes") {
  SceneSpec spec;
  spec.seed = 5;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const Scene scene = generate_scene(spec, i);
    REQUIRE(scene.gts.size() >= 1);
    REQUIRE(scene.gts.size() <= static_cast<std::size_t>(spec.max_words));
    for (const Box& b : scene.gts) {
      const Corners c = to_corners(b);
      CHECK(c.x1 >= 0.0);
      CHECK(c.y1 >= 0.0);
      CHECK(c.x2 <= spec.width);
      CHECK(c.y2 <= spec.height);
      CHECK(b.h >= spec.min_word_height);
      CHECK(b.h <= spec.max_word_height);
      // stripe-alignment trims up to 3 px off the sampled width
      CHECK(b.w >= spec.min_aspect * b.h - 3.0);
      CHECK(b.w <= spec.max_aspect * b.h);
    }
    for (std::size_t p = 0; p < scene.gts.size(); ++p)
      for (std::size_t q = p + 1; q < scene.gts.size(); ++q)
        CHECK(iou(scene.gts[p], scene.gts[q]) <= spec.max_overlap);
  }
}

TEST_CASE("every box exactly bounds its ink") {
  SceneSpec spec;
  spec.min_words = 1;
  spec.max_words = 1;
  spec.seed = 33;
  const double dim_cap = spec.bg_high + spec.noise + 1e-9;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const Scene scene = generate_scene(spec, i);
    REQUIRE(scene.gts.size() == 1);
    const Corners c = to_corners(scene.gts[0]);
    const int x1 = static_cast<int>(c.x1), y1 = static_cast<int>(c.y1);
    const int x2 = static_cast<int>(c.x2), y2 = static_cast<int>(c.y2);
    // nothing bright outside the box
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        if (x >= x1 && x < x2 && y >= y1 && y < y2) continue;
        CHECK(scene.image(0, y, x) <= dim_cap);
      }
    // every border row and column of the box carries ink
    auto col_max = [&](int x) {
      double m = 0.0;
      for (int y = y1; y < y2; ++y) m = std::max(m, scene.image(0, y, x));
      return m;
    };
    auto row_max = [&](int y) {
      double m = 0.0;
      for (int x = x1; x < x2; ++x) m = std::max(m, scene.image(0, y, x));
      return m;
    };
    CHECK(col_max(x1) >= spec.fg_low);
    CHECK(col_max(x2 - 1) >= spec.fg_low);
    CHECK(row_max(y1) >= spec.fg_low);
    CHECK(row_max(y2 - 1) >= spec.fg_low);
  }
}

TEST_CASE("pgm round trip reproduces the scene exactly") {
  SceneSpec spec;
  spec.seed = 44;
  const fs::path dir = temp_dir("pgm");
  for (std::uint64_t i = 0; i < 5; ++i) {
    const Scene scene = generate_scene(spec, i);
    const fs::path p = dir / ("s" + std::to_string(i) + ".pgm");
    write_pgm(scene.image, p);
    const Tensor back = read_pgm(p);
    REQUIRE(back.size() == scene.image.size());
    for (Eigen::Index k = 0; k < back.size(); ++k) CHECK(back[k] == scene.image[k]);
  }
  fs::remove_all(dir);
}

TEST_CASE("rendering zero scenes leaves an empty manifest") {
  const fs::path dir = temp_dir("empty");
  SceneSpec spec;
  const auto entries = render_dataset(spec, 0, dir);
  CHECK(entries.empty());
  CHECK(read_manifest(dir / "manifest.tsv").empty());
  fs::remove_all(dir);
}

TEST_CASE("a rendered dataset parses back through the eval readers") {
  const fs::path dir = temp_dir("ds");
  SceneSpec spec;
  spec.seed = 55;
  const auto entries = render_dataset(spec, 10, dir);
  REQUIRE(entries.size() == 10);

  // manifest is sorted by image path and resolves to the same pairs
  const auto manifest = read_manifest(dir / "manifest.tsv");
  REQUIRE(manifest.size() == 10);
  for (std::size_t i = 1; i < manifest.size(); ++i)
    CHECK(manifest[i - 1].image_path.string() < manifest[i].image_path.string());

  for (std::size_t i = 0; i < manifest.size(); ++i) {
    CHECK(fs::exists(manifest[i].image_path));
    const Tensor img = read_pgm(manifest[i].image_path);
    CHECK(img.height() == spec.height);
    CHECK(img.width() == spec.width);
    const auto gts = read_gt_file(manifest[i].gt_path);
    const Scene scene = generate_scene(spec, i);
    REQUIRE(gts.size() == scene.gts.size());
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const Corners want = to_corners(scene.gts[g]);
      CHECK(gts[g].box.x1 == want.x1);
      CHECK(gts[g].box.y1 == want.y1);
      CHECK(gts[g].box.x2 == want.x2);
      CHECK(gts[g].box.y2 == want.y2);
      CHECK(gts[g].care);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("a spec smaller than its largest word is rejected") {
  SceneSpec spec;
  spec.height = 32;
  spec.max_word_height = 48;
  CHECK_THROWS_AS(generate_scene(spec, 0), std::invalid_argument);
  SceneSpec bad_count;
  bad_count.min_words = 3;
  bad_count.max_words = 2;
  CHECK_THROWS_AS(generate_scene(bad_count, 0), std::invalid_argument);
}
