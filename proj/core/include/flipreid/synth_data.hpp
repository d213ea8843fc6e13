#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flipreid/rng.hpp"

namespace flipreid {

/// 8-bit image stored channel-major, row-major.
struct Image {
  std::uint32_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::uint32_t c, std::uint32_t h, std::uint32_t w, std::uint8_t fill = 0)
      : channels(c), height(h), width(w), pixels(std::size_t(c) * h * w, fill) {}

  std::uint8_t &at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  bool operator==(const Image &) const = default;
};

enum class Split { train, query, gallery };

std::string_view to_string(Split s);
Split parse_split(std::string_view s); // throws ValidationError

struct Sample {
  Image image;
  std::uint32_t identity = 0;
  std::uint32_t camera = 0;
  Split split = Split::train;

  bool operator==(const Sample &) const = default;
};

struct DatasetSpec {
  std::uint32_t num_identities = 20;
  std::uint32_t images_per_identity = 16;
  std::uint32_t num_cameras = 3;
  std::uint32_t height = 32;
  std::uint32_t width = 16;
  std::uint32_t channels = 3;
  double asymmetry_strength = 0.8;
  double noise_std = 8.0;
  /// Probability that an image shows the identity facing the other way.
  double mirror_prob = 0.5;
  /// Half-width of the per-camera, per-channel additive intensity offset.
  double camera_bias = 20.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AugmentParams {
  double flip_prob = 0.5;
  double erase_prob = 0.5;
  std::pair<double, double> erase_area_range{0.02, 0.4};
  std::pair<double, double> erase_aspect_range{0.3, 3.3};
  double grayscale_patch_prob = 0.2;
  std::pair<double, double> grayscale_patch_area_range{0.02, 0.4};

  void validate() const;
};

/// Rectangle rejection-sampling budget shared by erasing and grayscale patches.
inline constexpr int kRectAttempts = 10;

std::vector<Sample> generate_dataset(const DatasetSpec &spec);

Image horizontal_flip(const Image &image);
Image random_horizontal_flip(const Image &image, double prob, Rng &rng);
Image random_erasing(const Image &image, const AugmentParams &params, Rng &rng);
Image random_grayscale_patch(const Image &image, const AugmentParams &params, Rng &rng);

/// Training-time pipeline: flip (when `include_flip`), grayscale patch, erasing.
Image augment(const Image &image, const AugmentParams &params, bool include_flip, Rng &rng);

struct DatasetSplit {
  std::vector<Sample> train;
  std::vector<Sample> query;
  std::vector<Sample> gallery;
};

/// Partitions identities between train and test, then splits each test
/// identity into query and gallery so every query identity keeps a
/// cross-camera gallery positive.
DatasetSplit split_dataset(const std::vector<Sample> &samples, Rng &rng, double query_frac,
                           double train_identity_frac = 0.5);

} // namespace flipreid
