#include "fen/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "fen/errors.hpp"

namespace fen {

namespace {

constexpr char kMagic[4] = {'F', 'E', 'N', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw DataError("checkpoint: truncated file");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_checkpoint(const ParameterStore& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open for writing: " + path.string());
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(params.count()));
  for (const auto& [name, p] : params) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const unsigned char rank = static_cast<unsigned char>(p.value.rank());
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (int d : p.value.dims()) write_u32(os, static_cast<std::uint32_t>(d));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) write_f64(os, p.value[i]);
  }
  if (!os) throw DataError("checkpoint: write failed: " + path.string());
}

ParameterStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("checkpoint: bad magic: " + path.string());
  const std::uint32_t version = read_u32(is);
  if (version != kVersion) throw DataError("checkpoint: unsupported version");
  const std::uint32_t count = read_u32(is);

  ParameterStore store;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = read_u32(is);
    if (name_len > (1u << 20)) throw DataError("checkpoint: implausible name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw DataError("checkpoint: truncated file");
    unsigned char rank;
    is.read(reinterpret_cast<char*>(&rank), 1);
    if (!is || rank == 0 || rank > 8) throw DataError("checkpoint: bad tensor rank");
    std::vector<int> dims(rank);
    for (auto& d : dims) {
      const std::uint32_t v = read_u32(is);
      if (v == 0 || v > (1u << 28)) throw DataError("checkpoint: bad dimension");
      d = static_cast<int>(v);
    }
    Tensor& value = store.create(name, dims);
    for (Eigen::Index i = 0; i < value.size(); ++i) value[i] = read_f64(is);
  }
  return store;
}

}  // namespace fen
