#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fen/geometry.hpp"
#include "fen/tensor.hpp"

namespace fen {

// Parameters of the synthetic scene stream. Scenes are grayscale, one channel
// in [0,1], with striped rectangles standing in for words.
struct SceneSpec {
  int width = 128;
  int height = 128;
  int min_words = 1;
  int max_words = 4;
  int min_word_height = 8;
  int max_word_height = 48;
  double min_aspect = 1.0;
  double max_aspect = 6.0;
  double max_overlap = 0.1;  // pairwise IoU cap between placed words
  double bg_low = 0.05;
  double bg_high = 0.35;
  double fg_low = 0.75;
  double fg_high = 1.0;
  double noise = 0.03;
  std::uint64_t seed = 0;
};

struct Scene {
  Tensor image;  // {1, H, W}
  std::vector<Box> gts;
};

// Deterministic function of (spec.seed, index). Words are placed by rejection
// sampling, at most 100 attempts each; the first word always lands, so every
// scene has at least one. Stripe period is 2-4 px.
Scene generate_scene(const SceneSpec& spec, std::uint64_t index);

void write_pgm(const Tensor& image, const std::filesystem::path& path);
Tensor read_pgm(const std::filesystem::path& path);  // 8-bit binary P5 only

struct DatasetEntry {
  std::filesystem::path image_path;
  std::filesystem::path gt_path;
};

// Renders scenes [0, n) to out_dir as img_%05d.pgm plus gt_img_%05d.txt and a
// manifest.tsv of image<TAB>gt lines, sorted by image path.
std::vector<DatasetEntry> render_dataset(const SceneSpec& spec, std::size_t n,
                                         const std::filesystem::path& out_dir);

// Reads a manifest.tsv, resolving relative paths against the manifest's
// directory.
std::vector<DatasetEntry> read_manifest(const std::filesystem::path& manifest);

}  // namespace fen
