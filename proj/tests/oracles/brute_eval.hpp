#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "flipreid/tensor.hpp"

namespace oracle {

struct BruteReport {
  double mAP = 0.0;
  std::vector<double> cmc;
  std::vector<std::optional<double>> ap;
  std::size_t valid = 0;
};

inline double brute_distance(const flipreid::Matrix &a, std::size_t i, const flipreid::Matrix &b, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const double d = a(i, k) - b(j, k);
    s += d * d;
  }
  return std::sqrt(s);
}

/// Selection-sort ranking and textbook AP / CMC, standard protocol (drops
/// gallery items with the query's identity and camera).
inline BruteReport brute_force_evaluate(const flipreid::Matrix &dist, const std::vector<std::uint32_t> &qid,
                                        const std::vector<std::uint32_t> &qcam,
                                        const std::vector<std::uint32_t> &gid,
                                        const std::vector<std::uint32_t> &gcam, std::size_t max_rank) {
  BruteReport r;
  r.cmc.assign(max_rank, 0.0);
  double ap_sum = 0.0;
  for (std::size_t q = 0; q < dist.rows(); ++q) {
    std::vector<bool> used(dist.cols(), false);
    std::vector<bool> match;
    for (std::size_t step = 0; step < dist.cols(); ++step) {
      std::size_t best = dist.cols();
      for (std::size_t g = 0; g < dist.cols(); ++g) {
        if (used[g]) continue;
        if (best == dist.cols() || dist(q, g) < dist(q, best)) best = g;
      }
      used[best] = true;
      if (gid[best] == qid[q] && gcam[best] == qcam[q]) continue;
      match.push_back(gid[best] == qid[q]);
    }
    std::size_t hits = 0;
    double prec_sum = 0.0;
    std::size_t first = match.size();
    for (std::size_t k = 0; k < match.size(); ++k)
      if (match[k]) {
        ++hits;
        prec_sum += double(hits) / double(k + 1);
        first = std::min(first, k);
      }
    if (hits == 0) {
      r.ap.push_back(std::nullopt);
      continue;
    }
    r.ap.push_back(prec_sum / double(hits));
    ap_sum += prec_sum / double(hits);
    ++r.valid;
    for (std::size_t k = first; k < max_rank; ++k) r.cmc[k] += 1.0;
  }
  if (r.valid > 0) {
    r.mAP = ap_sum / double(r.valid);
    for (double &c : r.cmc) c /= double(r.valid);
  }
  return r;
}

} // namespace oracle
