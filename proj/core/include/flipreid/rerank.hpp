#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flipreid/tensor.hpp"

namespace flipreid {

struct RerankParams {
  std::size_t k1 = 20;
  std::size_t k2 = 6;
  double lambda = 0.3;

  void validate() const;
};

/// [[q_q, q_g], [q_g^T, g_g]]
Matrix joint_distance(const Matrix &q_g, const Matrix &q_q, const Matrix &g_g);

/// The k nearest points to `probe`, self excluded, ties broken by index.
std::vector<std::size_t> k_nearest(const Matrix &all_dist, std::size_t probe, std::size_t k);

/// { i in kNN(probe, k) : probe in kNN(i, k) }, sorted by index. Throws when
/// the matrix is not a square, symmetric, zero-diagonal distance matrix or
/// when k >= its size.
std::vector<std::size_t> k_reciprocal_set(const Matrix &all_dist, std::size_t probe, std::size_t k);

/// Support of the probe's encoding vector: the probe, its k-reciprocal set,
/// and R(c, ceil(k/2)) + {c} for every reciprocal neighbour c whose set
/// overlaps probe + R(probe, k) in at least two thirds of its members.
std::vector<std::size_t> expanded_reciprocal_set(const Matrix &all_dist, std::size_t probe, std::size_t k);

/// k-reciprocal re-ranking. Returns the (queries x gallery) matrix
/// (1 - lambda) * Jaccard + lambda * q_g. k1 larger than the number of
/// available neighbours is clamped, with a note appended to `warnings`.
Matrix rerank(const Matrix &q_g, const Matrix &q_q, const Matrix &g_g, const RerankParams &params,
              std::vector<std::string> *warnings = nullptr);

// "FRDM" distance matrices: magic, u32 rows, u32 cols, row-major f64.
std::vector<std::uint8_t> encode_distance_matrix(const Matrix &m);
Matrix decode_distance_matrix(std::span<const std::uint8_t> bytes);
void write_distance_matrix(const std::filesystem::path &path, const Matrix &m);
Matrix read_distance_matrix(const std::filesystem::path &path);

} // namespace flipreid
