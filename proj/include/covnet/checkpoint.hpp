#pragma once

#include <cstdint>
#include <string>

#include "covnet/nets.hpp"

namespace covnet {

inline constexpr char kCheckpointMagic[4] = {'C', 'V', 'R', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (all integers little-endian):
//   "CVRS" | u32 version | u32 header length | header (architecture JSON)
//   | u64 FNV-1a of the header | u32 tensor count
//   | per tensor: u32 name length, name, u32 rank, u32 extents..., f32 data...
// Tensors are written in the graph's parameter order. Doubles are narrowed.
template <typename T>
std::string checkpoint_bytes(const ModelGraph<T>& model);

template <typename T>
void save_checkpoint(const ModelGraph<T>& model, const std::string& path);

// Rebuilds the graph described by the header and fills in the stored tensors.
template <typename T>
ModelGraph<T> parse_checkpoint(const std::string& bytes);

template <typename T>
ModelGraph<T> load_checkpoint(const std::string& path);

// As above, but the stored header must describe exactly `expected`.
template <typename T>
ModelGraph<T> load_checkpoint(const std::string& path, const ArchConfig& expected);

}  // namespace covnet
