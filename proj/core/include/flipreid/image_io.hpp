#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "flipreid/synth_data.hpp"

namespace flipreid {

// "FRID" image files: magic, u32 channels, u32 height, u32 width, then pixels.
std::vector<std::uint8_t> encode_image(const Image &image);
Image decode_image(std::span<const std::uint8_t> bytes);
void write_image(const std::filesystem::path &path, const Image &image);
Image read_image(const std::filesystem::path &path);

/// Writes every sample as an image file under `dir/images/` plus
/// `dir/manifest.csv` with header `path,identity,camera,split`.
std::filesystem::path write_manifest(const std::filesystem::path &dir, const DatasetSplit &split);

/// Loads a manifest; image paths are resolved relative to the manifest's
/// directory. Rejects malformed rows, unknown splits, identities shared
/// between train and test, and query identities without a gallery entry.
DatasetSplit ingest_manifest(const std::filesystem::path &manifest_path);

} // namespace flipreid
