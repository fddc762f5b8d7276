#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fen/pipeline.hpp"

namespace fen {

// One run's worth of knobs. Defaults are the full configuration: every
// structural toggle on. Unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 42;

  // training
  std::size_t iterations = 5000;
  double learning_rate = 0.003;
  double momentum = 0.9;
  double lambda = 1.0;
  std::size_t train_scenes = 200;
  int image_size = 128;

  // structural toggles
  bool enable_fe_rpn = true;
  bool enable_hyper = true;
  bool enable_pm = true;
  bool enable_adaptive = true;
  bool enable_half_region = true;
  bool enable_multiscale = true;
  std::vector<double> scales{1.0, 1.25, 1.4};

  // detection
  double score_threshold = 0.5;
  double nms_threshold = 0.3;

  // pm statistics
  std::size_t stream_scenes = 500;

  // paths
  std::filesystem::path data_dir;   // rendered dataset; empty trains on the seeded stream
  std::filesystem::path checkpoint = "fen.ckpt";
  std::filesystem::path train_log = "train_log.csv";
  std::filesystem::path images;     // detect input: a .pgm file or a directory of them
  std::filesystem::path out_dir = ".";
  std::filesystem::path gt_dir;
  std::filesystem::path det_dir;
  std::filesystem::path metrics_out;  // empty: stdout only

  std::string protocol = "ic13";  // or "deteval"
  bool per_image = false;
};

// Applies `key = value`. Unknown keys and malformed values raise UsageError.
void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value);

// Line-oriented `key = value` file; '#' starts a comment, blank lines skip.
RunConfig load_config_file(const std::filesystem::path& path);

// File first, then `key=value` overrides in order.
RunConfig make_run_config(const std::filesystem::path& path,
                          std::span<const std::string> overrides);

ModelConfig model_config(const RunConfig& cfg);
TrainOptions train_options(const RunConfig& cfg);
DetectOptions detect_options(const RunConfig& cfg);

}  // namespace fen
