#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flipreid/model.hpp"
#include "flipreid/synth_data.hpp"
#include "flipreid/tensor.hpp"

namespace flipreid {

enum class InferenceMode { single, double_image };

std::string_view to_string(InferenceMode m);
InferenceMode parse_inference_mode(std::string_view s);

struct EmbeddingSet {
  Matrix features;
  std::vector<std::uint32_t> identities;
  std::vector<std::uint32_t> cameras;
  InferenceMode mode = InferenceMode::single;

  std::size_t size() const { return features.rows(); }
  void validate() const;
};

/// One forward per original image, no augmentation.
EmbeddingSet embed_single(const Model &model, std::span<const Sample> samples, std::size_t batch_size = 64);
/// Mean of the embeddings of each image and its horizontal mirror.
EmbeddingSet embed_double(const Model &model, std::span<const Sample> samples, std::size_t batch_size = 64);
EmbeddingSet embed(const Model &model, std::span<const Sample> samples, InferenceMode mode);

/// Mean over samples of |f(x) - f(flip x)| / |f(x)|.
double mean_flip_gap(const Model &model, std::span<const Sample> samples);

enum class CameraProtocol {
  /// Drop gallery items sharing both identity and camera with the query.
  standard,
  /// Drop every gallery item from the query's camera.
  literal,
};

std::string_view to_string(CameraProtocol p);

/// true marks a gallery item that takes part in the ranking.
std::vector<bool> cross_camera_mask(std::uint32_t query_id, std::uint32_t query_cam,
                                    std::span<const std::uint32_t> gallery_ids,
                                    std::span<const std::uint32_t> gallery_cams,
                                    CameraProtocol protocol = CameraProtocol::standard);

/// Mean of precision@r over the ranks r holding a match; nullopt when the
/// ranking contains no match.
std::optional<double> average_precision(std::span<const bool> sorted_match_flags);

struct EvalReport {
  double mAP = 0.0;
  std::vector<double> cmc;          // cmc[k - 1] = rank-k accuracy
  std::vector<double> per_query_ap; // 0 for invalid queries
  std::vector<bool> query_valid;
  std::size_t num_valid_queries = 0;
  std::string protocol;

  double rank1() const { return cmc.empty() ? 0.0 : cmc.front(); }
};

/// Row i, column j: Euclidean distance between query i and gallery j,
/// accumulated as a plain sum of squared differences.
Matrix euclidean_distances(const Matrix &query, const Matrix &gallery);

EvalReport evaluate(const EmbeddingSet &query, const EmbeddingSet &gallery, std::size_t max_rank = 50,
                    CameraProtocol protocol = CameraProtocol::standard);

/// Same protocol on a precomputed (possibly re-ranked) distance matrix.
/// Rankings sort ascending with ties broken by gallery index.
EvalReport evaluate_distances(const Matrix &dist, std::span<const std::uint32_t> query_ids,
                              std::span<const std::uint32_t> query_cams, std::span<const std::uint32_t> gallery_ids,
                              std::span<const std::uint32_t> gallery_cams, std::size_t max_rank = 50,
                              CameraProtocol protocol = CameraProtocol::standard);

/// {"mAP": float, "cmc": [float], "num_valid_queries": int, "protocol": string}
std::string eval_report_to_json(const EvalReport &report);

// "FREM" embedding files: magic, u32 count, u32 dim, then per sample
// u32 identity, u32 camera and dim little-endian f64 values.
std::vector<std::uint8_t> encode_embeddings(const EmbeddingSet &set);
EmbeddingSet decode_embeddings(std::span<const std::uint8_t> bytes);
void write_embeddings(const std::filesystem::path &path, const EmbeddingSet &set);
EmbeddingSet read_embeddings(const std::filesystem::path &path);

} // namespace flipreid
