#include "flipreid/losses.hpp"

#include <cmath>
#include <limits>
#include <map>

#include "flipreid/error.hpp"

namespace flipreid {

void LossWeights::validate() const {
  if (!(w_triplet >= 0.0 && w_ce >= 0.0 && w_flip >= 0.0 && triplet_margin >= 0.0))
    throw ValidationError("loss weights and margin must be non-negative");
  if (!(w_triplet > 0.0 || w_ce > 0.0)) throw ValidationError("at least one of w_triplet, w_ce must be positive");
}

Matrix pairwise_euclidean(const Matrix &e) {
  const std::size_t N = e.rows(), D = e.cols();
  std::vector<double> sq(N, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < D; ++k) sq[i] += e(i, k) * e(i, k);
  Matrix out(N, N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < D; ++k) dot += e(i, k) * e(j, k);
      const double d = std::sqrt(std::max(sq[i] + sq[j] - 2.0 * dot, 0.0));
      out(i, j) = d;
      out(j, i) = d;
    }
  return out;
}

TripletResult batch_hard_triplet(const Matrix &e, std::span<const std::uint32_t> labels, double margin,
                                 bool soft_margin) {
  const std::size_t N = e.rows(), D = e.cols();
  if (labels.size() != N) throw ValidationError("triplet loss: one label per embedding required");
  std::map<std::uint32_t, std::size_t> counts;
  for (auto l : labels) ++counts[l];
  for (const auto &[label, n] : counts)
    if (n < 2)
      throw ValidationError("sampler contract violated: label " + std::to_string(label) +
                            " has no positive in the batch");
  if (counts.size() < 2) throw ValidationError("sampler contract violated: batch has no negatives");

  const Matrix dist = pairwise_euclidean(e);
  TripletResult r;
  r.grad = Matrix(N, D);
  r.hardest_positive.resize(N);
  r.hardest_negative.resize(N);
  double margin_to_kink = std::numeric_limits<double>::infinity();
  std::size_t active = 0;
  const double inv_n = 1.0 / double(N);

  for (std::size_t a = 0; a < N; ++a) {
    std::size_t p = N, n = N;
    double dp = -1.0, dn = std::numeric_limits<double>::infinity();
    double dp_second = -std::numeric_limits<double>::infinity(), dn_second = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < N; ++j) {
      if (j == a) continue;
      const double d = dist(a, j);
      if (labels[j] == labels[a]) {
        if (d > dp) {
          dp_second = dp;
          dp = d;
          p = j;
        } else {
          dp_second = std::max(dp_second, d);
        }
      } else {
        if (d < dn) {
          dn_second = dn;
          dn = d;
          n = j;
        } else {
          dn_second = std::min(dn_second, d);
        }
      }
    }
    r.hardest_positive[a] = p;
    r.hardest_negative[a] = n;
    margin_to_kink = std::min({margin_to_kink, dp - dp_second, dn_second - dn, dp, dn});

    double coeff; // d loss_a / d (dp - dn)
    if (soft_margin) {
      const double z = dp - dn;
      r.loss += z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
      coeff = 1.0 / (1.0 + std::exp(-z));
      ++active;
    } else {
      const double h = margin + dp - dn;
      margin_to_kink = std::min(margin_to_kink, std::abs(h));
      if (!(h > 0.0)) continue;
      r.loss += h;
      coeff = 1.0;
      ++active;
    }
    coeff *= inv_n;
    if (dp > 0.0)
      for (std::size_t k = 0; k < D; ++k) {
        const double g = coeff * (e(a, k) - e(p, k)) / dp;
        r.grad(a, k) += g;
        r.grad(p, k) -= g;
      }
    if (dn > 0.0)
      for (std::size_t k = 0; k < D; ++k) {
        const double g = coeff * (e(a, k) - e(n, k)) / dn;
        r.grad(a, k) -= g;
        r.grad(n, k) += g;
      }
  }
  r.loss /= double(N);
  r.active_fraction = double(active) / double(N);
  r.kink_margin = margin_to_kink;
  return r;
}

CrossEntropyResult categorical_cross_entropy(std::span<const Matrix> branches, std::span<const std::uint32_t> labels) {
  CrossEntropyResult r;
  if (branches.empty()) return r;
  const double inv_b = 1.0 / double(branches.size());
  for (const auto &probs : branches) {
    const std::size_t N = probs.rows(), K = probs.cols();
    if (labels.size() != N) throw ValidationError("cross-entropy: one label per row required");
    Matrix g(N, K);
    double loss = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      if (labels[i] >= K)
        throw ValidationError("cross-entropy: label " + std::to_string(labels[i]) + " out of range for " +
                              std::to_string(K) + " classes");
      loss -= std::log(probs(i, labels[i]));
      for (std::size_t k = 0; k < K; ++k)
        g(i, k) = (probs(i, k) - (k == labels[i] ? 1.0 : 0.0)) / double(N) * inv_b;
    }
    r.loss += loss / double(N) * inv_b;
    r.grad_logits.push_back(std::move(g));
  }
  return r;
}

CrossEntropyResult categorical_cross_entropy(const Matrix &probabilities, std::span<const std::uint32_t> labels) {
  return categorical_cross_entropy(std::span<const Matrix>(&probabilities, 1), labels);
}

FlipLossResult flipping_loss(const Matrix &a, const Matrix &b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError("flipping loss: shapes " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                          " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + " differ");
  FlipLossResult r{0.0, Matrix(a.rows(), a.cols()), Matrix(a.rows(), a.cols())};
  if (a.size() == 0) return r;
  const double scale = 1.0 / double(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    r.loss += d * d;
    r.grad_original.values()[i] = 2.0 * d * scale;
    r.grad_flipped.values()[i] = -2.0 * d * scale;
  }
  r.loss *= scale;
  return r;
}

LossReport total_loss(double triplet, double cross_entropy, double flipping, double active_fraction,
                      const LossWeights &w) {
  LossReport r;
  r.triplet = triplet;
  r.cross_entropy = cross_entropy;
  r.flipping = flipping;
  r.active_triplet_fraction = active_fraction;
  r.total = w.w_triplet * triplet + w.w_ce * cross_entropy + w.w_flip * flipping;
  return r;
}

} // namespace flipreid
