#pragma once

#include <filesystem>

#include "fen/tensor.hpp"

namespace fen {

// Binary checkpoint, little-endian throughout:
//   magic "FENK", u32 version (1), u32 tensor count,
//   then per tensor: u32 name length, name bytes, u8 rank,
//   u32 dims[rank], f64 values (flat, storage order).
// Tensors are written in sorted name order, so identical parameters produce
// byte-identical files.
void save_checkpoint(const ParameterStore& params, const std::filesystem::path& path);

// Loads values; gradients come back zeroed. Malformed or truncated files
// raise DataError.
ParameterStore load_checkpoint(const std::filesystem::path& path);

}  // namespace fen
