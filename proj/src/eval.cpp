#include "fen/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "fen/errors.hpp"

namespace fen {

namespace {

double corner_area(const Corners& c) { return (c.x2 - c.x1) * (c.y2 - c.y1); }

double inter_area(const Corners& a, const Corners& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (ix > 0.0 && iy > 0.0) ? ix * iy : 0.0;
}

}  // namespace

EvalProtocol EvalProtocol::deteval() {
  EvalProtocol p;
  p.name = "deteval";
  p.split_credit = 0.8;
  p.merge_credit = 0.8;
  return p;
}

EvalProtocol EvalProtocol::ic13() {
  EvalProtocol p;
  p.name = "ic13";
  p.split_credit = 1.0;
  p.merge_credit = 1.0;
  return p;
}

ImageMatchStats match_image(std::span<const GtBox> gts, std::span<const Corners> dets,
                            const EvalProtocol& protocol) {
  std::vector<Corners> care;
  std::vector<Corners> dontcare;
  for (const GtBox& g : gts) (g.care ? care : dontcare).push_back(g.box);

  // a detection mostly inside a don't-care region is dropped from scoring
  std::vector<Corners> counted;
  for (const Corners& d : dets) {
    const double area = corner_area(d);
    bool absorbed = false;
    for (const Corners& dc : dontcare) {
      if (area > 0.0 && inter_area(dc, d) / area > protocol.dontcare_overlap) {
        absorbed = true;
        break;
      }
    }
    if (!absorbed) counted.push_back(d);
  }

  const std::size_t G = care.size(), D = counted.size();
  ImageMatchStats stats;
  stats.gt_count = G;
  stats.det_count = D;
  if (G == 0 || D == 0) return stats;

  std::vector<double> sigma(G * D), tau(G * D);  // area recall / area precision
  for (std::size_t i = 0; i < G; ++i) {
    for (std::size_t j = 0; j < D; ++j) {
      const double inter = inter_area(care[i], counted[j]);
      sigma[i * D + j] = inter / corner_area(care[i]);
      tau[i * D + j] = inter / corner_area(counted[j]);
    }
  }
  auto qualifies = [&](std::size_t i, std::size_t j) {
    return sigma[i * D + j] >= protocol.tr && tau[i * D + j] >= protocol.tp;
  };

  std::vector<bool> gt_matched(G, false), det_matched(D, false);

  // one-to-one: the pair must be each other's only qualifying partner
  for (std::size_t i = 0; i < G; ++i) {
    for (std::size_t j = 0; j < D; ++j) {
      if (!qualifies(i, j)) continue;
      bool unique = true;
      for (std::size_t jj = 0; jj < D && unique; ++jj)
        if (jj != j && qualifies(i, jj)) unique = false;
      for (std::size_t ii = 0; ii < G && unique; ++ii)
        if (ii != i && qualifies(ii, j)) unique = false;
      if (unique) {
        gt_matched[i] = true;
        det_matched[j] = true;
        stats.gt_credit += 1.0;
        stats.det_credit += 1.0;
      }
    }
  }

  // one gt split across several detections: each piece precise enough,
  // recall adds up across the set
  for (std::size_t i = 0; i < G; ++i) {
    if (gt_matched[i]) continue;
    std::vector<std::size_t> parts;
    double recall_sum = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      if (det_matched[j]) continue;
      if (tau[i * D + j] >= protocol.tp && sigma[i * D + j] > 0.0) {
        parts.push_back(j);
        recall_sum += sigma[i * D + j];
      }
    }
    if (parts.size() >= 2 && recall_sum >= protocol.tr) {
      gt_matched[i] = true;
      stats.gt_credit += protocol.split_credit;
      for (std::size_t j : parts) {
        det_matched[j] = true;
        stats.det_credit += protocol.split_credit;
      }
    }
  }

  // several gts merged into one detection: each gt recalled enough,
  // precision adds up across the set
  for (std::size_t j = 0; j < D; ++j) {
    if (det_matched[j]) continue;
    std::vector<std::size_t> parts;
    double precision_sum = 0.0;
    for (std::size_t i = 0; i < G; ++i) {
      if (gt_matched[i]) continue;
      if (sigma[i * D + j] >= protocol.tr) {
        parts.push_back(i);
        precision_sum += tau[i * D + j];
      }
    }
    if (parts.size() >= 2 && precision_sum >= protocol.tp) {
      det_matched[j] = true;
      stats.det_credit += protocol.merge_credit;
      for (std::size_t i : parts) {
        gt_matched[i] = true;
        stats.gt_credit += protocol.merge_credit;
      }
    }
  }

  return stats;
}

double fmeasure(double recall, double precision) {
  const double s = recall + precision;
  return s > 0.0 ? 2.0 * recall * precision / s : 0.0;
}

MetricsReport metrics_from_stats(const ImageMatchStats& stats, const std::string& protocol) {
  MetricsReport r;
  r.protocol = protocol;
  r.recall = stats.gt_count > 0 ? stats.gt_credit / static_cast<double>(stats.gt_count) : 0.0;
  r.precision =
      stats.det_count > 0 ? stats.det_credit / static_cast<double>(stats.det_count) : 0.0;
  r.fmeasure = fmeasure(r.recall, r.precision);
  return r;
}

MetricsReport evaluate_corpus(const std::map<std::string, EvalInput>& corpus,
                              const EvalProtocol& protocol) {
  ImageMatchStats total;
  for (const auto& [key, input] : corpus) {
    const ImageMatchStats s = match_image(input.gts, input.dets, protocol);
    total.gt_credit += s.gt_credit;
    total.det_credit += s.det_credit;
    total.gt_count += s.gt_count;
    total.det_count += s.det_count;
  }
  return metrics_from_stats(total, protocol.name);
}

namespace {

std::string strip(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && (s[b] == ' ' || s[b] == '\t')) ++b;
  return s.substr(b);
}

// parses the first `count` comma-separated numeric fields; returns the rest
std::string parse_fields(const std::string& line, int count, double* out,
                         const std::filesystem::path& path, std::size_t lineno) {
  std::size_t pos = 0;
  for (int f = 0; f < count; ++f) {
    const std::size_t comma = line.find(',', pos);
    if (comma == std::string::npos && f != count - 1)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": too few fields");
    const std::size_t end = (comma == std::string::npos) ? line.size() : comma;
    const std::string field = strip(line.substr(pos, end - pos));
    try {
      std::size_t used = 0;
      out[f] = std::stod(field, &used);
      if (used != field.size()) throw std::invalid_argument(field);
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed field");
    }
    pos = (comma == std::string::npos) ? line.size() : comma + 1;
  }
  return pos >= line.size() ? std::string{} : line.substr(pos);
}

Corners corners_checked(const double* v, const std::filesystem::path& path, std::size_t lineno) {
  Corners c{v[0], v[1], v[2], v[3]};
  if (!(c.x2 > c.x1) || !(c.y2 > c.y1))
    throw DataError(path.string() + ":" + std::to_string(lineno) + ": degenerate box");
  return c;
}

}  // namespace

std::vector<GtBox> read_gt_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("read_gt_file: cannot open " + path.string());
  std::vector<GtBox> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = strip(line);
    if (line.empty()) continue;
    double v[4];
    std::string rest = strip(parse_fields(line, 4, v, path, lineno));
    if (rest.empty())
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": missing transcription");
    if (rest.size() >= 2 && rest.front() == '"' && rest.back() == '"')
      rest = rest.substr(1, rest.size() - 2);
    GtBox g;
    g.box = corners_checked(v, path, lineno);
    g.care = rest != "###";
    out.push_back(g);
  }
  return out;
}

std::vector<ScoredCorners> read_det_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("read_det_file: cannot open " + path.string());
  std::vector<ScoredCorners> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = strip(line);
    if (line.empty()) continue;
    double v[5];
    parse_fields(line, 5, v, path, lineno);
    ScoredCorners d;
    d.box = corners_checked(v, path, lineno);
    d.score = v[4];
    out.push_back(d);
  }
  return out;
}

std::map<std::string, EvalInput> load_eval_corpus(const std::filesystem::path& gt_dir,
                                                  const std::filesystem::path& det_dir) {
  if (!std::filesystem::is_directory(gt_dir))
    throw DataError("load_eval_corpus: not a directory: " + gt_dir.string());
  if (!std::filesystem::is_directory(det_dir))
    throw DataError("load_eval_corpus: not a directory: " + det_dir.string());

  std::map<std::string, EvalInput> corpus;
  for (const auto& entry : std::filesystem::directory_iterator(gt_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("gt_", 0) != 0 || entry.path().extension() != ".txt") continue;
    const std::string stem = name.substr(3, name.size() - 3 - 4);
    EvalInput input;
    input.gts = read_gt_file(entry.path());
    const std::filesystem::path det_path = det_dir / ("res_" + stem + ".txt");
    if (std::filesystem::exists(det_path)) {
      for (const ScoredCorners& d : read_det_file(det_path)) input.dets.push_back(d.box);
    }
    corpus.emplace(stem, std::move(input));
  }

  for (const auto& entry : std::filesystem::directory_iterator(det_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("res_", 0) != 0 || entry.path().extension() != ".txt") continue;
    const std::string stem = name.substr(4, name.size() - 4 - 4);
    if (corpus.find(stem) == corpus.end())
      throw DataError("load_eval_corpus: detection file without ground truth: " + name);
  }
  return corpus;
}

}  // namespace fen
