#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "flipreid/error.hpp"
#include "flipreid/eval.hpp"
#include "flipreid/rerank.hpp"
#include "oracles/naive_rerank.hpp"
#include "unit/test_util.hpp"

using namespace flipreid;

namespace {

struct Problem {
  Matrix q_g, q_q, g_g;
};

Problem from_points(const Matrix &q, const Matrix &g) {
  return {euclidean_distances(q, g), euclidean_distances(q, q), euclidean_distances(g, g)};
}

Matrix gaussian_points(std::size_t n, std::size_t dim, std::mt19937_64 &gen, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(n, dim);
  for (double &v : m.values()) v = nd(gen);
  return m;
}

Matrix points_1d(std::vector<double> xs) {
  Matrix m(xs.size(), 1);
  for (std::size_t i = 0; i < xs.size(); ++i) m(i, 0) = xs[i];
  return m;
}

double max_abs_diff(const Matrix &a, const Matrix &b) {
  double w = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) w = std::max(w, std::abs(a.values()[i] - b.values()[i]));
  return w;
}

} // namespace

TEST_CASE("k-reciprocal sets on a line") {
  // 0 and 1 are mutual nearest neighbours; 5 points to 1 but 1 points to 0
  const Matrix pts = points_1d({0.0, 1.0, 5.0, 11.0});
  const Matrix d = euclidean_distances(pts, pts);
  CHECK(k_nearest(d, 2, 1) == std::vector<std::size_t>{1});
  CHECK(k_reciprocal_set(d, 0, 1) == std::vector<std::size_t>{1});
  CHECK(k_reciprocal_set(d, 1, 1) == std::vector<std::size_t>{0});
  CHECK(k_reciprocal_set(d, 2, 1).empty());
  CHECK(k_reciprocal_set(d, 1, 2) == std::vector<std::size_t>{0, 2});
  CHECK(expanded_reciprocal_set(d, 2, 1) == std::vector<std::size_t>{2});

  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t k = 1; k < 4; ++k) {
      const auto r = k_reciprocal_set(d, p, k);
      CHECK(std::find(r.begin(), r.end(), p) == r.end());
      CHECK(std::is_sorted(r.begin(), r.end()));
      CHECK(r.size() <= k);
      const auto e = expanded_reciprocal_set(d, p, k);
      CHECK(std::includes(e.begin(), e.end(), r.begin(), r.end()));
      CHECK(std::binary_search(e.begin(), e.end(), p));
    }

  CHECK_THROWS_AS(k_reciprocal_set(d, 0, 4), ValidationError);
  Matrix asym = d;
  asym(0, 1) += 1.0;
  CHECK_THROWS_AS(k_reciprocal_set(asym, 0, 1), ValidationError);
}

TEST_CASE("re-ranking matches a naive transcription") {
  std::mt19937_64 gen(31);
  for (int t = 0; t < 50; ++t) {
    const std::size_t Q = 5, G = 15;
    const auto pr = from_points(gaussian_points(Q, 4, gen), gaussian_points(G, 4, gen));
    const std::size_t k1 = 1 + t % 12;
    const std::size_t k2 = 1 + t % std::min<std::size_t>(k1, 4);
    const double lambda = (t % 5) / 4.0;
    const Matrix ours = rerank(pr.q_g, pr.q_q, pr.g_g, {k1, k2, lambda});
    const Matrix ref = oracle::naive_rerank(pr.q_g, pr.q_q, pr.g_g, k1, k2, lambda);
    INFO("k1 " << k1 << " k2 " << k2 << " lambda " << lambda);
    CHECK(max_abs_diff(ours, ref) <= 1e-6);
  }
}

TEST_CASE("re-ranking bounds and lambda = 1") {
  std::mt19937_64 gen(5);
  const auto pr = from_points(gaussian_points(4, 3, gen), gaussian_points(12, 3, gen));
  CHECK(rerank(pr.q_g, pr.q_q, pr.g_g, {6, 3, 1.0}) == pr.q_g);
  const Matrix j = rerank(pr.q_g, pr.q_q, pr.g_g, {6, 3, 0.0});
  for (double v : j.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  const Matrix mix = rerank(pr.q_g, pr.q_q, pr.g_g, {6, 3, 0.3});
  for (std::size_t i = 0; i < mix.size(); ++i)
    CHECK(mix.values()[i] == doctest::Approx(0.7 * j.values()[i] + 0.3 * pr.q_g.values()[i]).epsilon(1e-12));
}

TEST_CASE("gallery permutation permutes the re-ranked columns") {
  std::mt19937_64 gen(8);
  const Matrix q = gaussian_points(3, 3, gen), g = gaussian_points(10, 3, gen);
  std::vector<std::size_t> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  Matrix gp(10, 3);
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t k = 0; k < 3; ++k) gp(i, k) = g(perm[i], k);
  const auto a = from_points(q, g), b = from_points(q, gp);
  const Matrix ra = rerank(a.q_g, a.q_q, a.g_g, {5, 2, 0.3});
  const Matrix rb = rerank(b.q_g, b.q_q, b.g_g, {5, 2, 0.3});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 10; ++j) CHECK(rb(i, j) == doctest::Approx(ra(i, perm[j])).epsilon(1e-12));
}

TEST_CASE("re-ranking helps on well separated clusters") {
  std::mt19937_64 gen(12);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t ids = 6, per = 5;
  EmbeddingSet query, gallery;
  query.features = Matrix(ids, 4);
  gallery.features = Matrix(ids * per, 4);
  std::vector<std::vector<double>> centres(ids, std::vector<double>(4));
  for (auto &c : centres)
    for (double &v : c) v = 4.0 * nd(gen);
  for (std::size_t i = 0; i < ids; ++i) {
    for (std::size_t k = 0; k < 4; ++k) query.features(i, k) = centres[i][k] + nd(gen);
    query.identities.push_back(std::uint32_t(i));
    query.cameras.push_back(0);
    for (std::size_t s = 0; s < per; ++s) {
      for (std::size_t k = 0; k < 4; ++k) gallery.features(i * per + s, k) = centres[i][k] + nd(gen);
      gallery.identities.push_back(std::uint32_t(i));
      gallery.cameras.push_back(1);
    }
  }
  const auto pr = from_points(query.features, gallery.features);
  const auto base = evaluate(query, gallery);
  const Matrix rr = rerank(pr.q_g, pr.q_q, pr.g_g, {6, 3, 0.3});
  const auto after =
      evaluate_distances(rr, query.identities, query.cameras, gallery.identities, gallery.cameras);
  CHECK(after.mAP >= base.mAP);
}

TEST_CASE("parameter handling") {
  std::mt19937_64 gen(3);
  const auto pr = from_points(gaussian_points(2, 2, gen), gaussian_points(3, 2, gen));
  std::vector<std::string> warnings;
  const Matrix clamped = rerank(pr.q_g, pr.q_q, pr.g_g, {20, 6, 0.3}, &warnings);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("k1 = 20") != std::string::npos);
  CHECK(max_abs_diff(clamped, rerank(pr.q_g, pr.q_q, pr.g_g, {4, 4, 0.3})) == 0.0);

  CHECK_THROWS_AS(rerank(pr.q_g, pr.q_q, pr.g_g, {2, 3, 0.3}), ValidationError);
  CHECK_THROWS_AS(rerank(pr.q_g, pr.q_q, pr.g_g, {2, 0, 0.3}), ValidationError);
  CHECK_THROWS_AS(rerank(pr.q_g, pr.q_q, pr.g_g, {2, 1, 1.5}), ValidationError);
  CHECK_THROWS_AS(rerank(pr.q_g, pr.q_q, Matrix(2, 2), {2, 1, 0.3}), ValidationError);
  Matrix neg = pr.q_g;
  neg(0, 0) = -1.0;
  CHECK_THROWS_AS(rerank(neg, pr.q_q, pr.g_g, {2, 1, 0.3}), ValidationError);
}

TEST_CASE("FRDM round trip") {
  std::mt19937_64 gen(4);
  const Matrix m = gaussian_points(3, 5, gen);
  CHECK(decode_distance_matrix(encode_distance_matrix(m)) == m);
  auto bytes = encode_distance_matrix(m);
  bytes.pop_back();
  CHECK_THROWS_AS(decode_distance_matrix(bytes), FormatError);
  const auto dir = testutil::temp_dir("rerank");
  write_distance_matrix(dir / "d.frdm", m);
  CHECK(read_distance_matrix(dir / "d.frdm") == m);
  CHECK_THROWS_AS(read_distance_matrix(dir / "none.frdm"), IoError);
}
