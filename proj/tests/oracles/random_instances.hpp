#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "flipreid/eval.hpp"

namespace oracle {

struct EvalInstance {
  flipreid::EmbeddingSet query, gallery;
};

/// Small random retrieval problem. Features are drawn on a coarse grid so
/// distance ties occur; identities come from a small pool so some queries
/// have no cross-camera positive.
inline EvalInstance random_eval_instance(std::mt19937_64 &gen, std::size_t max_q = 10, std::size_t max_g = 30,
                                         std::uint32_t max_cams = 4, std::size_t dim = 3) {
  std::uniform_int_distribution<std::size_t> nq(1, max_q), ng(2, max_g);
  std::uniform_int_distribution<std::uint32_t> cams(1, max_cams);
  const std::uint32_t num_cams = cams(gen);
  const std::uint32_t num_ids = std::uniform_int_distribution<std::uint32_t>(1, 6)(gen);
  std::uniform_int_distribution<std::uint32_t> id(0, num_ids - 1), cam(0, num_cams - 1);
  std::uniform_int_distribution<int> grid(-2, 2);
  auto fill = [&](flipreid::EmbeddingSet &s, std::size_t n) {
    s.features = flipreid::Matrix(n, dim);
    for (double &v : s.features.values()) v = 0.5 * grid(gen);
    for (std::size_t i = 0; i < n; ++i) {
      s.identities.push_back(id(gen));
      s.cameras.push_back(cam(gen));
    }
  };
  EvalInstance inst;
  fill(inst.query, nq(gen));
  fill(inst.gallery, ng(gen));
  return inst;
}

/// True when at least one query has a gallery match from another camera.
inline bool has_valid_query(const EvalInstance &inst) {
  for (std::size_t q = 0; q < inst.query.size(); ++q)
    for (std::size_t g = 0; g < inst.gallery.size(); ++g)
      if (inst.gallery.identities[g] == inst.query.identities[q] && inst.gallery.cameras[g] != inst.query.cameras[q])
        return true;
  return false;
}

} // namespace oracle
