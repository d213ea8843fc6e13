#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "flipreid/tensor.hpp"

namespace flipreid {

struct LossWeights {
  double w_triplet = 1.0;
  double w_ce = 1.0;
  double w_flip = 1.0;
  double triplet_margin = 0.3;
  /// softplus(dp - dn) instead of the hard hinge max(0, margin + dp - dn).
  bool soft_margin = false;

  void validate() const;
};

struct LossReport {
  double total = 0.0;
  double triplet = 0.0;
  double cross_entropy = 0.0;
  double flipping = 0.0;
  double active_triplet_fraction = 0.0;
};

/// D[i][j] = sqrt(max(|e_i|^2 + |e_j|^2 - 2 e_i.e_j, 0)), exact zeros on the diagonal.
Matrix pairwise_euclidean(const Matrix &embeddings);

struct TripletResult {
  double loss = 0.0;
  Matrix grad; // d loss / d embeddings
  double active_fraction = 0.0;
  std::vector<std::size_t> hardest_positive;
  std::vector<std::size_t> hardest_negative;
  /// Distance of the nearest non-differentiable point: hinge argument at
  /// zero, ties in the hardest-pair selection, or a zero selected distance.
  double kink_margin = 0.0;
};

/// Batch-hard triplet loss averaged over anchors; ties in the hardest
/// positive / negative go to the lowest index. Throws ValidationError when a
/// label lacks a positive or the batch has no negative.
TripletResult batch_hard_triplet(const Matrix &embeddings, std::span<const std::uint32_t> labels, double margin,
                                 bool soft_margin = false);

struct CrossEntropyResult {
  double loss = 0.0;
  /// Per-branch gradient with respect to the pre-softmax scores.
  std::vector<Matrix> grad_logits;
};

/// Mean of -log p[label]; with several branches the per-branch losses (and
/// gradients) are averaged.
CrossEntropyResult categorical_cross_entropy(std::span<const Matrix> branch_probabilities,
                                             std::span<const std::uint32_t> labels);
CrossEntropyResult categorical_cross_entropy(const Matrix &probabilities, std::span<const std::uint32_t> labels);

struct FlipLossResult {
  double loss = 0.0;
  Matrix grad_original;
  Matrix grad_flipped;
};

/// Mean squared error over all N x d entries.
FlipLossResult flipping_loss(const Matrix &original, const Matrix &flipped);

LossReport total_loss(double triplet, double cross_entropy, double flipping, double active_fraction,
                      const LossWeights &weights);

} // namespace flipreid
