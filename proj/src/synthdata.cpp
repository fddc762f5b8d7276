#include "fen/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

#include "fen/errors.hpp"

namespace fen {

namespace {

// splitmix-style mix so neighbouring (seed, index) pairs decorrelate
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

constexpr int kPlacementAttempts = 100;

struct IntRect {
  int x = 0, y = 0, w = 0, h = 0;
};

Box rect_box(const IntRect& r) {
  return from_corners(static_cast<double>(r.x), static_cast<double>(r.y),
                      static_cast<double>(r.x + r.w), static_cast<double>(r.y + r.h));
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, std::uint64_t index) {
  // the largest word must fit at its narrowest, so a first placement always succeeds
  if (spec.height < spec.max_word_height ||
      spec.width < static_cast<int>(std::ceil(spec.max_word_height * spec.min_aspect)))
    throw std::invalid_argument("generate_scene: scene smaller than the largest word");
  if (spec.min_words < 1 || spec.max_words < spec.min_words)
    throw std::invalid_argument("generate_scene: bad word count range");

  std::mt19937_64 rng(mix_seed(spec.seed, index));

  Scene scene;
  scene.image = Tensor({1, spec.height, spec.width});

  std::uniform_real_distribution<double> bg_dist(spec.bg_low, spec.bg_high);
  std::uniform_real_distribution<double> noise_dist(-spec.noise, spec.noise);
  const double bg = bg_dist(rng);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x)
      scene.image(0, y, x) = std::clamp(bg + noise_dist(rng), 0.0, 1.0);

  std::uniform_int_distribution<int> count_dist(spec.min_words, spec.max_words);
  const int words = count_dist(rng);

  std::uniform_int_distribution<int> height_dist(spec.min_word_height, spec.max_word_height);
  std::uniform_real_distribution<double> fg_dist(spec.fg_low, spec.fg_high);
  std::uniform_int_distribution<int> period_dist(2, 4);

  std::vector<IntRect> placed;
  for (int w = 0; w < words; ++w) {
    IntRect rect;
    bool ok = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
      const int h = height_dist(rng);
      const int min_w = static_cast<int>(std::ceil(h * spec.min_aspect));
      const int max_w =
          std::min(spec.width, static_cast<int>(std::floor(h * spec.max_aspect)));
      if (min_w > max_w) continue;
      std::uniform_int_distribution<int> width_dist(min_w, max_w);
      const int ww = width_dist(rng);
      std::uniform_int_distribution<int> x_dist(0, spec.width - ww);
      std::uniform_int_distribution<int> y_dist(0, spec.height - h);
      rect = {x_dist(rng), y_dist(rng), ww, h};
      const Box candidate = rect_box(rect);
      ok = true;
      for (const IntRect& other : placed)
        if (iou(candidate, rect_box(other)) > spec.max_overlap) {
          ok = false;
          break;
        }
    }
    if (!ok) continue;  // crowded scene, settle for fewer words

    const double fg = fg_dist(rng);
    const int period = period_dist(rng);
    const int lit = (period + 1) / 2;
    // the stripe pattern must end on a lit column so the box bounds the ink
    while ((rect.w - 1) % period >= lit) --rect.w;
    // shrinking the right edge can raise IoU against an earlier word; the
    // spacing invariant is on the final boxes, so re-check and drop on breach
    bool spaced = true;
    for (const IntRect& other : placed)
      if (iou(rect_box(rect), rect_box(other)) > spec.max_overlap) {
        spaced = false;
        break;
      }
    if (!spaced) continue;
    placed.push_back(rect);
    for (int x = rect.x; x < rect.x + rect.w; ++x) {
      if ((x - rect.x) % period >= lit) continue;
      for (int y = rect.y; y < rect.y + rect.h; ++y) scene.image(0, y, x) = fg;
    }
  }

  // intensities live on the 8-bit grid so the PGM round trip is lossless
  // and in-memory scenes match rendered ones exactly
  for (Eigen::Index i = 0; i < scene.image.size(); ++i)
    scene.image[i] = static_cast<double>(std::lround(scene.image[i] * 255.0)) / 255.0;

  scene.gts.reserve(placed.size());
  for (const IntRect& r : placed) scene.gts.push_back(rect_box(r));
  return scene;
}

void write_pgm(const Tensor& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || image.channels() != 1)
    throw std::invalid_argument("write_pgm: expected a single-channel image");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("write_pgm: cannot open " + path.string());
  os << "P5\n" << image.width() << " " << image.height() << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(image.width()));
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      const long v = std::lround(image(0, y, x) * 255.0);
      row[static_cast<std::size_t>(x)] = static_cast<unsigned char>(std::clamp(v, 0L, 255L));
    }
    os.write(reinterpret_cast<const char*>(row.data()), image.width());
  }
  if (!os) throw DataError("write_pgm: write failed: " + path.string());
}

namespace {

int pgm_token(std::istream& is, const std::filesystem::path& path) {
  // header tokens are whitespace separated; '#' starts a comment to EOL
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (std::isspace(c)) {
      c = is.get();
    } else {
      break;
    }
  }
  if (c == EOF) throw DataError("read_pgm: truncated header: " + path.string());
  int value = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    any = true;
    c = is.get();
  }
  if (!any) throw DataError("read_pgm: malformed header: " + path.string());
  return value;
}

}  // namespace

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("read_pgm: cannot open " + path.string());
  char p, five;
  is.get(p);
  is.get(five);
  if (!is || p != 'P' || five != '5') throw DataError("read_pgm: not a binary PGM: " + path.string());
  const int w = pgm_token(is, path);
  const int h = pgm_token(is, path);
  const int maxval = pgm_token(is, path);
  if (w <= 0 || h <= 0 || maxval != 255)
    throw DataError("read_pgm: unsupported PGM variant: " + path.string());
  // exactly one whitespace byte separates header from payload; pgm_token
  // already consumed it while scanning past the maxval digits
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw DataError("read_pgm: truncated payload: " + path.string());
  Tensor img({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      img(0, y, x) = buf[static_cast<std::size_t>(y) * w + x] / 255.0;
  return img;
}

std::vector<DatasetEntry> render_dataset(const SceneSpec& spec, std::size_t n,
                                         const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream manifest(out_dir / "manifest.tsv");
  if (!manifest) throw DataError("render_dataset: cannot write manifest");

  std::vector<DatasetEntry> entries;
  entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    char img_name[32], gt_name[32];
    std::snprintf(img_name, sizeof img_name, "img_%05zu.pgm", i);
    std::snprintf(gt_name, sizeof gt_name, "gt_img_%05zu.txt", i);

    const Scene scene = generate_scene(spec, i);
    write_pgm(scene.image, out_dir / img_name);

    std::ofstream gt(out_dir / gt_name);
    if (!gt) throw DataError("render_dataset: cannot write gt file");
    for (const Box& b : scene.gts) {
      const Corners c = to_corners(b);
      // corners are integral by construction; floor/ceil is the documented
      // outward rounding for fractional boxes
      gt << static_cast<long>(std::floor(c.x1)) << "," << static_cast<long>(std::floor(c.y1))
         << "," << static_cast<long>(std::ceil(c.x2)) << ","
         << static_cast<long>(std::ceil(c.y2)) << ",\"TEXT\"\n";
    }
    manifest << img_name << "\t" << gt_name << "\n";
    entries.push_back({out_dir / img_name, out_dir / gt_name});
  }
  return entries;
}

std::vector<DatasetEntry> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw DataError("read_manifest: cannot open " + manifest.string());
  const std::filesystem::path base = manifest.parent_path();
  std::vector<DatasetEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError("read_manifest: missing tab at line " + std::to_string(lineno));
    DatasetEntry e;
    e.image_path = base / line.substr(0, tab);
    e.gt_path = base / line.substr(tab + 1);
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace fen
