#include "flipreid/rerank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flipreid/binary_io.hpp"
#include "flipreid/error.hpp"

namespace flipreid {

void RerankParams::validate() const {
  if (k2 < 1 || k1 < k2) throw ValidationError("re-ranking needs k1 >= k2 >= 1");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("re-ranking lambda must lie in [0, 1]");
}

Matrix joint_distance(const Matrix &qg, const Matrix &qq, const Matrix &gg) {
  const std::size_t Q = qg.rows(), G = qg.cols();
  if (qq.rows() != Q || qq.cols() != Q || gg.rows() != G || gg.cols() != G)
    throw ValidationError("re-ranking: inconsistent distance matrix shapes");
  Matrix all(Q + G, Q + G);
  for (std::size_t i = 0; i < Q; ++i) {
    for (std::size_t j = 0; j < Q; ++j) all(i, j) = qq(i, j);
    for (std::size_t j = 0; j < G; ++j) {
      all(i, Q + j) = qg(i, j);
      all(Q + j, i) = qg(i, j);
    }
  }
  for (std::size_t i = 0; i < G; ++i)
    for (std::size_t j = 0; j < G; ++j) all(Q + i, Q + j) = gg(i, j);
  return all;
}

namespace {

void check_distance_matrix(const Matrix &d) {
  if (d.rows() != d.cols()) throw ValidationError("distance matrix must be square");
  for (std::size_t i = 0; i < d.rows(); ++i) {
    if (d(i, i) != 0.0) throw ValidationError("distance matrix must have a zero diagonal");
    for (std::size_t j = i + 1; j < d.cols(); ++j)
      if (std::abs(d(i, j) - d(j, i)) > 1e-9) throw ValidationError("distance matrix must be symmetric");
  }
}

/// Neighbour order of every point (self excluded) and the inverse positions.
struct Neighbours {
  std::vector<std::vector<std::size_t>> order;
  std::vector<std::vector<std::size_t>> position; // position[i][j]; self gets n

  explicit Neighbours(const Matrix &d) {
    const std::size_t n = d.rows();
    order.resize(n);
    position.assign(n, std::vector<std::size_t>(n, n));
    for (std::size_t i = 0; i < n; ++i) {
      auto &o = order[i];
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) o.push_back(j);
      std::stable_sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return d(i, a) < d(i, b); });
      for (std::size_t r = 0; r < o.size(); ++r) position[i][o[r]] = r;
    }
  }

  std::vector<std::size_t> reciprocal(std::size_t p, std::size_t k) const {
    std::vector<std::size_t> out;
    for (std::size_t r = 0; r < k && r < order[p].size(); ++r) {
      const std::size_t i = order[p][r];
      if (position[i][p] < k) out.push_back(i);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<std::size_t> expanded(std::size_t p, std::size_t k) const {
    auto base = reciprocal(p, k);
    base.insert(std::lower_bound(base.begin(), base.end(), p), p);
    std::vector<std::size_t> out = base;
    const std::size_t half = (k + 1) / 2;
    for (std::size_t c : base) {
      if (c == p) continue;
      auto rc = reciprocal(c, half);
      rc.insert(std::lower_bound(rc.begin(), rc.end(), c), c);
      std::vector<std::size_t> common;
      std::set_intersection(rc.begin(), rc.end(), base.begin(), base.end(), std::back_inserter(common));
      if (3 * common.size() >= 2 * rc.size()) {
        std::vector<std::size_t> merged;
        std::set_union(out.begin(), out.end(), rc.begin(), rc.end(), std::back_inserter(merged));
        out.swap(merged);
      }
    }
    return out;
  }
};

} // namespace

std::vector<std::size_t> k_nearest(const Matrix &all, std::size_t probe, std::size_t k) {
  std::vector<std::size_t> o;
  for (std::size_t j = 0; j < all.cols(); ++j)
    if (j != probe) o.push_back(j);
  std::stable_sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return all(probe, a) < all(probe, b); });
  o.resize(std::min(k, o.size()));
  return o;
}

std::vector<std::size_t> k_reciprocal_set(const Matrix &all, std::size_t probe, std::size_t k) {
  check_distance_matrix(all);
  if (k >= all.rows())
    throw ValidationError("k = " + std::to_string(k) + " must be smaller than the matrix size " +
                          std::to_string(all.rows()));
  if (probe >= all.rows()) throw ValidationError("probe index out of range");
  return Neighbours(all).reciprocal(probe, k);
}

std::vector<std::size_t> expanded_reciprocal_set(const Matrix &all, std::size_t probe, std::size_t k) {
  check_distance_matrix(all);
  if (k >= all.rows())
    throw ValidationError("k = " + std::to_string(k) + " must be smaller than the matrix size " +
                          std::to_string(all.rows()));
  if (probe >= all.rows()) throw ValidationError("probe index out of range");
  return Neighbours(all).expanded(probe, k);
}

Matrix rerank(const Matrix &q_g, const Matrix &q_q, const Matrix &g_g, const RerankParams &params_in,
              std::vector<std::string> *warnings) {
  params_in.validate();
  const Matrix all = joint_distance(q_g, q_q, g_g);
  for (double v : all.values())
    if (!(v >= 0.0)) throw ValidationError("re-ranking: distances must be non-negative");
  check_distance_matrix(all);

  const std::size_t Q = q_g.rows(), G = q_g.cols(), n = Q + G;
  if (n < 2) throw ValidationError("re-ranking needs at least two points");
  RerankParams params = params_in;
  if (params.k1 > n - 1) {
    if (warnings)
      warnings->push_back("k1 = " + std::to_string(params.k1) + " exceeds the " + std::to_string(n - 1) +
                          " available neighbours; clamped");
    params.k1 = n - 1;
  }
  params.k2 = std::min(params.k2, params.k1);

  const Neighbours nb(all);
  Matrix V(n, n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto support = nb.expanded(p, params.k1);
    double sum = 0.0;
    for (std::size_t j : support) sum += (V(p, j) = std::exp(-all(p, j)));
    for (std::size_t j : support) V(p, j) /= sum;
  }

  if (params.k2 > 1) {
    Matrix Vqe(n, n);
    for (std::size_t p = 0; p < n; ++p) {
      std::vector<std::size_t> members{p};
      for (std::size_t r = 0; r + 1 < params.k2; ++r) members.push_back(nb.order[p][r]);
      for (std::size_t m : members)
        for (std::size_t j = 0; j < n; ++j) Vqe(p, j) += V(m, j);
      for (std::size_t j = 0; j < n; ++j) Vqe(p, j) /= double(members.size());
    }
    V = std::move(Vqe);
  }

  Matrix out(Q, G);
  for (std::size_t i = 0; i < Q; ++i)
    for (std::size_t g = 0; g < G; ++g) {
      double mn = 0.0, mx = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double a = V(i, j), b = V(Q + g, j);
        mn += std::min(a, b);
        mx += std::max(a, b);
      }
      const double jaccard = mx > 0.0 ? 1.0 - mn / mx : 1.0;
      out(i, g) = (1.0 - params.lambda) * jaccard + params.lambda * q_g(i, g);
    }
  return out;
}

std::vector<std::uint8_t> encode_distance_matrix(const Matrix &m) {
  io::ByteWriter w;
  w.magic("FRDM");
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (double v : m.values()) w.f64(v);
  return w.release();
}

Matrix decode_distance_matrix(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "FRDM distance matrix");
  r.expect_magic("FRDM");
  const auto rows = r.u32(), cols = r.u32();
  if (std::size_t(rows) * cols * 8 != r.remaining())
    throw FormatError("FRDM distance matrix: payload does not match " + std::to_string(rows) + " x " +
                      std::to_string(cols));
  Matrix m(rows, cols);
  for (double &v : m.values()) v = r.f64();
  return m;
}

void write_distance_matrix(const std::filesystem::path &path, const Matrix &m) {
  io::write_file_atomic(path, encode_distance_matrix(m));
}

Matrix read_distance_matrix(const std::filesystem::path &path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_distance_matrix(bytes);
  } catch (const FormatError &e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

} // namespace flipreid
