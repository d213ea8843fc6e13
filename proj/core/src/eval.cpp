#include "flipreid/eval.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include <json.hpp>

#include "flipreid/binary_io.hpp"
#include "flipreid/error.hpp"

namespace flipreid {

std::string_view to_string(InferenceMode m) { return m == InferenceMode::single ? "single" : "double"; }

InferenceMode parse_inference_mode(std::string_view s) {
  if (s == "single") return InferenceMode::single;
  if (s == "double") return InferenceMode::double_image;
  throw ValidationError("unknown inference mode \"" + std::string(s) + "\" (expected single or double)");
}

std::string_view to_string(CameraProtocol p) {
  return p == CameraProtocol::standard ? "standard" : "literal";
}

void EmbeddingSet::validate() const {
  if (identities.size() != features.rows() || cameras.size() != features.rows())
    throw ValidationError("embedding set: identity/camera arrays do not match the feature rows");
  for (double v : features.values())
    if (!std::isfinite(v)) throw ValidationError("embedding set contains non-finite features");
}

namespace {

EmbeddingSet embed_impl(const Model &model, std::span<const Sample> samples, std::size_t batch_size, bool with_flip) {
  EmbeddingSet out;
  out.mode = with_flip ? InferenceMode::double_image : InferenceMode::single;
  out.features = Matrix(samples.size(), model.embedding_dim());
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, samples.size() - start);
    std::vector<Image> images;
    images.reserve(with_flip ? 2 * n : n);
    for (std::size_t i = 0; i < n; ++i) images.push_back(samples[start + i].image);
    if (with_flip)
      for (std::size_t i = 0; i < n; ++i) images.push_back(horizontal_flip(samples[start + i].image));
    const auto cache = model.embed(preprocess(images, model.config().preprocess));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < out.features.cols(); ++k)
        out.features(start + i, k) =
            with_flip ? 0.5 * (cache.features(i, k) + cache.features(n + i, k)) : cache.features(i, k);
  }
  for (const auto &s : samples) {
    out.identities.push_back(s.identity);
    out.cameras.push_back(s.camera);
  }
  return out;
}

} // namespace

EmbeddingSet embed_single(const Model &model, std::span<const Sample> samples, std::size_t batch_size) {
  return embed_impl(model, samples, batch_size, false);
}

EmbeddingSet embed_double(const Model &model, std::span<const Sample> samples, std::size_t batch_size) {
  return embed_impl(model, samples, batch_size, true);
}

EmbeddingSet embed(const Model &model, std::span<const Sample> samples, InferenceMode mode) {
  return mode == InferenceMode::single ? embed_single(model, samples) : embed_double(model, samples);
}

double mean_flip_gap(const Model &model, std::span<const Sample> samples) {
  if (samples.empty()) return 0.0;
  std::vector<Sample> flipped(samples.begin(), samples.end());
  for (auto &s : flipped) s.image = horizontal_flip(s.image);
  const auto a = embed_single(model, samples);
  const auto b = embed_single(model, flipped);
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double diff = 0.0, norm = 0.0;
    for (std::size_t k = 0; k < a.features.cols(); ++k) {
      const double d = a.features(i, k) - b.features(i, k);
      diff += d * d;
      norm += a.features(i, k) * a.features(i, k);
    }
    total += norm > 0.0 ? std::sqrt(diff / norm) : 0.0;
  }
  return total / double(a.size());
}

std::vector<bool> cross_camera_mask(std::uint32_t qid, std::uint32_t qcam, std::span<const std::uint32_t> gids,
                                    std::span<const std::uint32_t> gcams, CameraProtocol protocol) {
  std::vector<bool> valid(gids.size(), true);
  for (std::size_t j = 0; j < gids.size(); ++j) {
    const bool same_cam = gcams[j] == qcam;
    valid[j] = protocol == CameraProtocol::standard ? !(same_cam && gids[j] == qid) : !same_cam;
  }
  return valid;
}

std::optional<double> average_precision(std::span<const bool> flags) {
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < flags.size(); ++r) {
    if (!flags[r]) continue;
    ++hits;
    sum += double(hits) / double(r + 1);
  }
  if (hits == 0) return std::nullopt;
  return sum / double(hits);
}

Matrix euclidean_distances(const Matrix &q, const Matrix &g) {
  if (q.cols() != g.cols())
    throw ValidationError("feature dimension mismatch: query " + std::to_string(q.cols()) + ", gallery " +
                          std::to_string(g.cols()));
  Matrix d(q.rows(), g.rows());
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < g.rows(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < q.cols(); ++k) {
        const double t = q(i, k) - g(j, k);
        acc += t * t;
      }
      d(i, j) = std::sqrt(acc);
    }
  return d;
}

EvalReport evaluate(const EmbeddingSet &query, const EmbeddingSet &gallery, std::size_t max_rank,
                    CameraProtocol protocol) {
  query.validate();
  gallery.validate();
  const Matrix dist = euclidean_distances(query.features, gallery.features);
  return evaluate_distances(dist, query.identities, query.cameras, gallery.identities, gallery.cameras, max_rank,
                            protocol);
}

EvalReport evaluate_distances(const Matrix &dist, std::span<const std::uint32_t> qids,
                              std::span<const std::uint32_t> qcams, std::span<const std::uint32_t> gids,
                              std::span<const std::uint32_t> gcams, std::size_t max_rank, CameraProtocol protocol) {
  if (dist.rows() != qids.size() || qcams.size() != qids.size() || dist.cols() != gids.size() ||
      gcams.size() != gids.size())
    throw ValidationError("distance matrix shape does not match the query/gallery labels");
  if (max_rank == 0) throw ValidationError("max_rank must be positive");

  EvalReport rep;
  rep.protocol = std::string(to_string(protocol));
  rep.cmc.assign(max_rank, 0.0);
  rep.per_query_ap.assign(qids.size(), 0.0);
  rep.query_valid.assign(qids.size(), false);
  std::vector<std::size_t> first_hit_count(max_rank, 0);

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < qids.size(); ++i) {
    const auto valid = cross_camera_mask(qids[i], qcams[i], gids, gcams, protocol);
    order.clear();
    for (std::size_t j = 0; j < gids.size(); ++j)
      if (valid[j]) order.push_back(j);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dist(i, a) < dist(i, b); });
    auto flags = std::make_unique<bool[]>(order.size());
    std::size_t first = order.size();
    for (std::size_t r = 0; r < order.size(); ++r) {
      flags[r] = gids[order[r]] == qids[i];
      if (flags[r] && first == order.size()) first = r;
    }
    const auto ap = average_precision(std::span<const bool>(flags.get(), order.size()));
    if (!ap) continue;
    rep.query_valid[i] = true;
    rep.per_query_ap[i] = *ap;
    ++rep.num_valid_queries;
    if (first < max_rank) ++first_hit_count[first];
  }
  if (rep.num_valid_queries == 0) throw ValidationError("no query has a valid cross-camera positive");

  double ap_sum = 0.0;
  for (std::size_t i = 0; i < qids.size(); ++i)
    if (rep.query_valid[i]) ap_sum += rep.per_query_ap[i];
  rep.mAP = ap_sum / double(rep.num_valid_queries);
  std::size_t cum = 0;
  for (std::size_t k = 0; k < max_rank; ++k) {
    cum += first_hit_count[k];
    rep.cmc[k] = double(cum) / double(rep.num_valid_queries);
  }
  return rep;
}

std::string eval_report_to_json(const EvalReport &r) {
  nlohmann::json j = {
      {"mAP", r.mAP}, {"cmc", r.cmc}, {"num_valid_queries", r.num_valid_queries}, {"protocol", r.protocol}};
  return j.dump(2);
}

std::vector<std::uint8_t> encode_embeddings(const EmbeddingSet &set) {
  set.validate();
  io::ByteWriter w;
  w.magic("FREM");
  w.u32(static_cast<std::uint32_t>(set.size()));
  w.u32(static_cast<std::uint32_t>(set.features.cols()));
  for (std::size_t i = 0; i < set.size(); ++i) {
    w.u32(set.identities[i]);
    w.u32(set.cameras[i]);
    for (double v : set.features.row(i)) w.f64(v);
  }
  return w.release();
}

EmbeddingSet decode_embeddings(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "FREM embeddings");
  r.expect_magic("FREM");
  const auto count = r.u32();
  const auto dim = r.u32();
  if (std::size_t(count) * (8 + 8 * std::size_t(dim)) > r.remaining())
    throw FormatError("FREM embeddings: file too short for " + std::to_string(count) + " x " + std::to_string(dim));
  EmbeddingSet s;
  s.features = Matrix(count, dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    s.identities.push_back(r.u32());
    s.cameras.push_back(r.u32());
    for (std::uint32_t k = 0; k < dim; ++k) s.features(i, k) = r.f64();
  }
  r.expect_end();
  return s;
}

void write_embeddings(const std::filesystem::path &path, const EmbeddingSet &set) {
  io::write_file_atomic(path, encode_embeddings(set));
}

EmbeddingSet read_embeddings(const std::filesystem::path &path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_embeddings(bytes);
  } catch (const FormatError &e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

} // namespace flipreid
