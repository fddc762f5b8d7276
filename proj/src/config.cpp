#include "fen/config.hpp"

#include <cstddef>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

#include "fen/errors.hpp"

namespace fen {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': not a number: '" + value + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    // stoull would wrap a negative value around instead of failing
    if (value.find('-') != std::string::npos) throw std::invalid_argument(value);
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': not a non-negative integer: '" + value + "'");
  }
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(parse_u64(key, value));
}

int parse_int(const std::string& key, const std::string& value) {
  const std::uint64_t v = parse_u64(key, value);
  if (v > static_cast<std::uint64_t>(std::numeric_limits<int>::max()))
    throw UsageError("config key '" + key + "': out of range: '" + value + "'");
  return static_cast<int>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw UsageError("config key '" + key + "': expected true/false/1/0, got '" + value + "'");
}

std::vector<double> parse_scales(const std::string& key, const std::string& value) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= value.size()) {
    const std::size_t comma = value.find(',', pos);
    const std::string item =
        trim(comma == std::string::npos ? value.substr(pos) : value.substr(pos, comma - pos));
    if (!item.empty()) {
      const double v = parse_double(key, item);
      if (v <= 0.0) throw UsageError("config key '" + key + "': scales must be positive");
      out.push_back(v);
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace

void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "seed")
    cfg.seed = parse_u64(key, value);
  else if (key == "iterations")
    cfg.iterations = parse_size(key, value);
  else if (key == "learning_rate")
    cfg.learning_rate = parse_double(key, value);
  else if (key == "momentum")
    cfg.momentum = parse_double(key, value);
  else if (key == "lambda")
    cfg.lambda = parse_double(key, value);
  else if (key == "train_scenes")
    cfg.train_scenes = parse_size(key, value);
  else if (key == "image_size")
    cfg.image_size = parse_int(key, value);
  else if (key == "enable_fe_rpn")
    cfg.enable_fe_rpn = parse_bool(key, value);
  else if (key == "enable_hyper")
    cfg.enable_hyper = parse_bool(key, value);
  else if (key == "enable_pm")
    cfg.enable_pm = parse_bool(key, value);
  else if (key == "enable_adaptive")
    cfg.enable_adaptive = parse_bool(key, value);
  else if (key == "enable_half_region")
    cfg.enable_half_region = parse_bool(key, value);
  else if (key == "enable_multiscale")
    cfg.enable_multiscale = parse_bool(key, value);
  else if (key == "scales")
    cfg.scales = parse_scales(key, value);
  else if (key == "score_threshold")
    cfg.score_threshold = parse_double(key, value);
  else if (key == "nms_threshold")
    cfg.nms_threshold = parse_double(key, value);
  else if (key == "stream_scenes")
    cfg.stream_scenes = parse_size(key, value);
  else if (key == "data_dir")
    cfg.data_dir = value;
  else if (key == "checkpoint")
    cfg.checkpoint = value;
  else if (key == "train_log")
    cfg.train_log = value;
  else if (key == "images")
    cfg.images = value;
  else if (key == "out_dir")
    cfg.out_dir = value;
  else if (key == "gt_dir")
    cfg.gt_dir = value;
  else if (key == "det_dir")
    cfg.det_dir = value;
  else if (key == "metrics_out")
    cfg.metrics_out = value;
  else if (key == "protocol") {
    if (value != "ic13" && value != "deteval")
      throw UsageError("config key 'protocol': expected ic13 or deteval, got '" + value + "'");
    cfg.protocol = value;
  } else if (key == "per_image")
    cfg.per_image = parse_bool(key, value);
  else
    throw UsageError("unknown config key: '" + key + "'");
}

RunConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path.string());
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw UsageError(path.string() + ":" + std::to_string(lineno) +
                       ": expected 'key = value'");
    set_config_key(cfg, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
  return cfg;
}

RunConfig make_run_config(const std::filesystem::path& path,
                          std::span<const std::string> overrides) {
  RunConfig cfg = load_config_file(path);
  for (const std::string& item : overrides) {
    const std::size_t eq = item.find('=');
    if (eq == std::string::npos)
      throw UsageError("--set expects key=value, got '" + item + "'");
    set_config_key(cfg, trim(item.substr(0, eq)), trim(item.substr(eq + 1)));
  }
  return cfg;
}

ModelConfig model_config(const RunConfig& cfg) {
  ModelConfig m;
  m.enhanced_rpn = cfg.enable_fe_rpn;
  m.hyper_feature = cfg.enable_hyper;
  m.adaptive_fusion = cfg.enable_adaptive;
  return m;
}

TrainOptions train_options(const RunConfig& cfg) {
  TrainOptions t;
  t.lambda = cfg.lambda;
  t.mining = cfg.enable_pm;
  return t;
}

DetectOptions detect_options(const RunConfig& cfg) {
  DetectOptions d;
  d.score_threshold = cfg.score_threshold;
  d.nms_threshold = cfg.nms_threshold;
  d.half_regions = cfg.enable_half_region;
  if (cfg.enable_multiscale) d.scales = cfg.scales;
  return d;
}

}  // namespace fen
