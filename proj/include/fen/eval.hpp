#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fen/geometry.hpp"

namespace fen {

struct GtBox {
  Corners box;
  bool care = true;  // "###" transcriptions mark don't-care regions
};

struct ScoredCorners {
  Corners box;
  double score = 0.0;
};

struct EvalInput {
  std::vector<GtBox> gts;
  std::vector<Corners> dets;
};

// Area-overlap matching with one-to-one, one-to-many (split) and many-to-one
// (merge) passes. tr bounds the area recall of a match, tp the area
// precision. Split and merge participants earn the configured credits instead
// of the full 1.0 a one-to-one match earns.
struct EvalProtocol {
  std::string name;
  double tr = 0.8;
  double tp = 0.4;
  double split_credit = 0.8;
  double merge_credit = 0.8;
  double dontcare_overlap = 0.5;  // detection absorbed when covered this much

  static EvalProtocol deteval();  // penalized splits and merges (0.8)
  static EvalProtocol ic13();     // unpenalized splits and merges (1.0)
};

struct ImageMatchStats {
  double gt_credit = 0.0;
  double det_credit = 0.0;
  std::size_t gt_count = 0;   // care gts only
  std::size_t det_count = 0;  // after don't-care absorption
};

ImageMatchStats match_image(std::span<const GtBox> gts, std::span<const Corners> dets,
                            const EvalProtocol& protocol);

struct MetricsReport {
  std::string protocol;
  double recall = 0.0;
  double precision = 0.0;
  double fmeasure = 0.0;
};

double fmeasure(double recall, double precision);

MetricsReport metrics_from_stats(const ImageMatchStats& stats, const std::string& protocol);

// Micro average: credits and counts sum over images before dividing.
MetricsReport evaluate_corpus(const std::map<std::string, EvalInput>& corpus,
                              const EvalProtocol& protocol);

// Ground truth lines are x1,y1,x2,y2,"transcription".
std::vector<GtBox> read_gt_file(const std::filesystem::path& path);
// Detection lines are x1,y1,x2,y2,score.
std::vector<ScoredCorners> read_det_file(const std::filesystem::path& path);

// Pairs gt_<stem>.txt in gt_dir with res_<stem>.txt in det_dir. A missing
// detection file means the detector found nothing there; a detection file
// with no ground truth counterpart is an error.
std::map<std::string, EvalInput> load_eval_corpus(const std::filesystem::path& gt_dir,
                                                  const std::filesystem::path& det_dir);

}  // namespace fen
