#include "fen/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "fen/checkpoint.hpp"
#include "fen/errors.hpp"
#include "fen/eval.hpp"
#include "fen/gradsuite.hpp"
#include "fen/loss.hpp"
#include "fen/pipeline.hpp"
#include "fen/synthdata.hpp"

namespace fen {
namespace {

namespace fs = std::filesystem;

std::uint64_t step_seed(std::uint64_t seed, std::size_t iteration) {
  return seed + 0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(iteration) + 1);
}

std::vector<Scene> load_training_scenes(const RunConfig& cfg) {
  std::vector<Scene> scenes;
  if (!cfg.data_dir.empty()) {
    const auto entries = read_manifest(cfg.data_dir / "manifest.tsv");
    for (const auto& entry : entries) {
      Scene scene;
      scene.image = read_pgm(entry.image_path);
      for (const GtBox& gt : read_gt_file(entry.gt_path))
        if (gt.care) scene.gts.push_back(from_corners(gt.box));
      scenes.push_back(std::move(scene));
    }
  } else {
    SceneSpec sspec;
    sspec.width = cfg.image_size;
    sspec.height = cfg.image_size;
    sspec.seed = cfg.seed;
    for (std::size_t i = 0; i < cfg.train_scenes; ++i)
      scenes.push_back(generate_scene(sspec, i));
  }
  if (scenes.empty()) throw DataError("training dataset is empty");
  return scenes;
}

// Corner integer, halves rounding up.
long long half_up(double v) { return static_cast<long long>(std::floor(v + 0.5)); }

void write_detection_file(const fs::path& path, const std::vector<Detection>& dets) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write detection file: " + path.string());
  char line[160];
  for (const Detection& d : dets) {
    const Corners c = to_corners(d.box);
    std::snprintf(line, sizeof(line), "%lld,%lld,%lld,%lld,%.4f\n", half_up(c.x1), half_up(c.y1),
                  half_up(c.x2), half_up(c.y2), d.score);
    out << line;
  }
}

}  // namespace

int cmd_train(const RunConfig& cfg) {
  const std::vector<Scene> scenes = load_training_scenes(cfg);

  FenModel model = make_model(model_config(cfg), cfg.seed);
  const TrainOptions opts = train_options(cfg);
  SgdOptimizer sgd(cfg.learning_rate, cfg.momentum);

  std::ofstream log(cfg.train_log);
  if (!log) throw DataError("cannot write training log: " + cfg.train_log.string());
  log << "iter,total,cls,loc,N\n";

  char line[256];
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const Scene& scene = scenes[it % scenes.size()];
    const std::uint64_t it_seed = step_seed(cfg.seed, it);
    const StepReport rep = train_step(model, scene.image, scene.gts, opts, it_seed);
    sgd.step(model.params);
    std::snprintf(line, sizeof(line), "%zu,%.6f,%.6f,%.6f,%zu\n", it, rep.total,
                  rep.rpn.cls_term + rep.refine.cls_term, rep.rpn.loc_term + rep.refine.loc_term,
                  rep.rpn.matched + rep.refine.matched);
    log << line;
  }
  log.flush();
  if (!log) throw DataError("short write on training log: " + cfg.train_log.string());

  save_checkpoint(model.params, cfg.checkpoint);
  return 0;
}

int cmd_detect(const RunConfig& cfg) {
  if (cfg.images.empty()) throw UsageError("detect needs 'images' in the config");

  FenModel model = make_model(model_config(cfg), cfg.seed);
  model.params = load_checkpoint(cfg.checkpoint);

  std::vector<fs::path> inputs;
  if (fs::is_directory(cfg.images)) {
    for (const auto& entry : fs::directory_iterator(cfg.images))
      if (entry.is_regular_file() && entry.path().extension() == ".pgm")
        inputs.push_back(entry.path());
    std::sort(inputs.begin(), inputs.end());
  } else if (fs::exists(cfg.images)) {
    inputs.push_back(cfg.images);
  }
  if (inputs.empty()) throw DataError("no .pgm images at: " + cfg.images.string());

  fs::create_directories(cfg.out_dir);
  const DetectOptions dopts = detect_options(cfg);
  for (const fs::path& p : inputs) {
    const Tensor image = read_pgm(p);
    const std::vector<Detection> dets = detect(model, image, dopts);
    write_detection_file(cfg.out_dir / ("res_" + p.stem().string() + ".txt"), dets);
  }
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  if (cfg.gt_dir.empty() || cfg.det_dir.empty())
    throw UsageError("eval needs 'gt_dir' and 'det_dir' in the config");

  const auto corpus = load_eval_corpus(cfg.gt_dir, cfg.det_dir);
  const EvalProtocol proto =
      cfg.protocol == "deteval" ? EvalProtocol::deteval() : EvalProtocol::ic13();
  const MetricsReport rep = evaluate_corpus(corpus, proto);

  char line[256];
  std::string text;
  std::snprintf(line, sizeof(line), "%s,%.6f,%.6f,%.6f\n", rep.protocol.c_str(), rep.recall,
                rep.precision, rep.fmeasure);
  text += line;
  if (cfg.per_image) {
    for (const auto& [stem, input] : corpus) {
      const MetricsReport r =
          metrics_from_stats(match_image(input.gts, input.dets, proto), proto.name);
      std::snprintf(line, sizeof(line), "%s,%.6f,%.6f,%.6f\n", stem.c_str(), r.recall,
                    r.precision, r.fmeasure);
      text += line;
    }
  }

  std::cout << text;
  if (!cfg.metrics_out.empty()) {
    std::ofstream out(cfg.metrics_out);
    if (!out) throw DataError("cannot write metrics file: " + cfg.metrics_out.string());
    out << text;
  }
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg) {
  const std::vector<GradCheckRow> rows = run_gradient_suite(cfg.seed);
  bool all_pass = true;
  char line[128];
  for (const GradCheckRow& row : rows) {
    std::snprintf(line, sizeof(line), "%-18s %12.4e  %s\n", row.name.c_str(), row.max_rel_err,
                  row.pass ? "PASS" : "FAIL");
    std::cout << line;
    all_pass = all_pass && row.pass;
  }
  if (!all_pass) throw NumericError("gradient check failed");
  return 0;
}

int cmd_pmstats(const RunConfig& cfg) {
  FenModel model = make_model(model_config(cfg), cfg.seed);
  if (fs::exists(cfg.checkpoint)) model.params = load_checkpoint(cfg.checkpoint);

  SceneSpec sspec;
  sspec.width = cfg.image_size;
  sspec.height = cfg.image_size;
  sspec.seed = cfg.seed;

  const PmStats st = pm_statistics(model, sspec, cfg.stream_scenes, train_options(cfg));
  char line[128];
  std::snprintf(line, sizeof(line), "plain,%zu,%zu,%.6f\n", st.plain_pos, st.plain_neg,
                st.plain_ratio());
  std::cout << line;
  std::snprintf(line, sizeof(line), "mined,%zu,%zu,%.6f\n", st.mined_pos, st.mined_neg,
                st.mined_ratio());
  std::cout << line;
  return 0;
}

}  // namespace fen
