#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "flipreid/model.hpp"

namespace flipreid {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "FRMC" checkpoint: magic, u32 version, u32 entry count, then per entry a
/// length-prefixed name, u32 rank, u32 dims and little-endian f64 values.
/// Architecture, clip bounds and running batch-norm statistics are stored
/// alongside the trainable arrays.
std::vector<std::uint8_t> encode_checkpoint(const Model &model);
Model decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path &path, const Model &model);
Model load_checkpoint(const std::filesystem::path &path);

/// SHA-1 of the encoded checkpoint.
std::string checkpoint_hash(const Model &model);

} // namespace flipreid
