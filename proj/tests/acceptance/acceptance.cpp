// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flipreid/error.hpp"
#include "flipreid/experiment.hpp"
#include "flipreid/losses.hpp"
#include "flipreid/ops.hpp"
#include "flipreid/rerank.hpp"
#include "flipreid/training.hpp"
#include "oracles/brute_eval.hpp"
#include "oracles/brute_triplet.hpp"
#include "oracles/fd_check.hpp"
#include "oracles/naive_rerank.hpp"
#include "oracles/random_instances.hpp"

namespace fs = std::filesystem;
using namespace flipreid;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char *f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// -- 1 ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  constexpr double kStep = 1e-5;
  const auto t0 = Clock::now();
  std::mt19937_64 gen(101);
  std::uniform_int_distribution<std::size_t> ch(2, 16), hh(0, 2), ww(0, 1);
  std::uniform_int_distribution<int> pix(0, 255);
  std::size_t models = 0, skipped = 0, checked = 0, failures = 0;
  double worst = 0.0;
  std::string worst_name;
  while (models < 20) {
    ModelConfig cfg;
    cfg.height = 16 + 4 * hh(gen);
    cfg.width = 8 + 4 * ww(gen);
    cfg.blocks = {{ch(gen), 3, 2}, {ch(gen), 3, 2}};
    cfg.num_regions = 2;
    cfg.reduced_dim = 1 + ch(gen) / 4;
    cfg.num_classes = 2;
    Model model(cfg, gen());

    std::vector<Image> imgs;
    for (int i = 0; i < 4; ++i) {
      Image img(3, std::uint32_t(cfg.height), std::uint32_t(cfg.width), 0);
      for (auto &p : img.pixels) p = static_cast<std::uint8_t>(pix(gen));
      imgs.push_back(std::move(img));
    }
    for (int i = 0; i < 4; ++i) imgs.push_back(horizontal_flip(imgs[std::size_t(i)]));
    const Tensor4 x = preprocess(imgs, cfg.preprocess);
    const std::vector<std::uint32_t> labels{0, 0, 1, 1};
    LossWeights w;
    w.w_flip = 1.0 + 3.0 * std::uniform_real_distribution<double>()(gen);

    Model work = model;
    work.zero_grad();
    const auto out = step_loss(work, x, labels, TrainMode::flipreid, w, true);
    // a step-h weight perturbation moves pre-activations by O(h); keep 10 h clear of every kink
    if (out.kink_margin < 10.0 * kStep) {
      ++skipped;
      continue;
    }
    const ModelParams numeric = finite_diff_gradient(
        [&](const Model &m) {
          Model c = m;
          return step_loss(c, x, labels, TrainMode::flipreid, w, false).report.total;
        },
        model, kStep);
    const auto cmp = oracle::compare_gradients(work.params(), numeric, 1e-4, 1e-8);
    checked += cmp.checked;
    failures += cmp.failures;
    if (cmp.worst_excess > worst) {
      worst = cmp.worst_excess;
      worst_name = cmp.worst_name;
    }
    ++models;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failures == 0 && secs < 120.0;
  o.detail = std::to_string(models) + " models (" + std::to_string(skipped) + " kink-adjacent resampled), " +
             std::to_string(checked) + " scalars, " + std::to_string(failures) + " outside tolerance, worst " +
             fmt("%.3g", worst) + " of allowed at " + worst_name + ", " + fmt("%.1f s", secs);
  return o;
}

// -- 2 ---------------------------------------------------------------------------

Outcome gem_limits() {
  std::mt19937_64 gen(202);
  std::uniform_real_distribution<double> u(1e-6, 4.0);
  double worst_mean = 0.0, worst_max = 0.0;
  for (int t = 0; t < 2000; ++t) {
    // average-pooling limit on arbitrary maps
    const std::size_t h = 1 + t % 5, w = 1 + (t / 5) % 4;
    Tensor4 maps(2, 3, h, w);
    for (double &v : maps.values()) v = u(gen);
    const Matrix g1 = gem_pool(maps, 1.0, 1e-6);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < h * w; ++i) mean += maps.channel_ptr(n, c)[i];
        mean /= double(h * w);
        worst_mean = std::max(worst_mean, std::abs(g1(n, c) - mean));
      }
    // max-pooling limit on two-element windows
    Tensor4 pair(1, 4, 1, 2);
    for (double &v : pair.values()) v = u(gen);
    const Matrix g64 = gem_pool(pair, 64.0, 1e-6);
    for (std::size_t c = 0; c < 4; ++c) {
      const double mx = std::max(pair(0, c, 0, 0), pair(0, c, 0, 1));
      worst_max = std::max(worst_max, std::abs(g64(0, c) - mx));
    }
  }
  Tensor4 ex(1, 1, 1, 2);
  ex(0, 0, 0, 0) = 1.0;
  ex(0, 0, 0, 1) = 2.0;
  const double example = gem_pool(ex, 64.0, 1e-6)(0, 0);
  Outcome o;
  o.pass = worst_mean <= 1e-12 && worst_max <= 0.05 && std::abs(example - 2.0) <= 0.03;
  o.detail = "p=1 worst |gem - mean| " + fmt("%.2e", worst_mean) + ", p=64 worst |gem - max| " +
             fmt("%.4f", worst_max) + ", gem({1,2}, 64) = " + fmt("%.5f", example);
  return o;
}

// -- 3 ---------------------------------------------------------------------------

Outcome eval_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(303);
  std::size_t tested = 0, mismatches = 0, instances_with_invalid = 0, no_valid_rejected = 0, no_valid_seen = 0;
  while (tested < 100) {
    const auto inst = oracle::random_eval_instance(gen, 10, 30, 4, 3);
    if (!oracle::has_valid_query(inst)) {
      ++no_valid_seen;
      try {
        evaluate(inst.query, inst.gallery);
      } catch (const ValidationError &) {
        ++no_valid_rejected;
      }
      continue;
    }
    Matrix d(inst.query.size(), inst.gallery.size());
    for (std::size_t i = 0; i < d.rows(); ++i)
      for (std::size_t j = 0; j < d.cols(); ++j)
        d(i, j) = oracle::brute_distance(inst.query.features, i, inst.gallery.features, j);
    const auto ref = oracle::brute_force_evaluate(d, inst.query.identities, inst.query.cameras,
                                                  inst.gallery.identities, inst.gallery.cameras, 10);
    const auto rep = evaluate(inst.query, inst.gallery, 10);
    bool same = rep.mAP == ref.mAP && rep.cmc == ref.cmc && rep.num_valid_queries == ref.valid;
    for (std::size_t qi = 0; qi < inst.query.size(); ++qi) {
      same = same && rep.query_valid[qi] == ref.ap[qi].has_value();
      if (ref.ap[qi]) same = same && rep.per_query_ap[qi] == *ref.ap[qi];
    }
    if (!same) ++mismatches;
    if (ref.valid < inst.query.size()) ++instances_with_invalid;
    ++tested;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = mismatches == 0 && instances_with_invalid > 0 && no_valid_rejected == no_valid_seen && secs < 60.0;
  o.detail = std::to_string(tested) + " instances, " + std::to_string(mismatches) + " mismatches, " +
             std::to_string(instances_with_invalid) + " with queries lacking a valid positive, " +
             std::to_string(no_valid_rejected) + "/" + std::to_string(no_valid_seen) +
             " all-invalid instances rejected, " + fmt("%.2f s", secs);
  return o;
}

// -- 4 ---------------------------------------------------------------------------

Outcome rerank_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(404);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<std::size_t> k1d(1, 14);
  double worst = 0.0;
  bool lambda_one_exact = true;
  for (int t = 0; t < 50; ++t) {
    Matrix q(5, 4), g(15, 4);
    for (double &v : q.values()) v = nd(gen);
    for (double &v : g.values()) v = nd(gen);
    const Matrix qg = euclidean_distances(q, g), qq = euclidean_distances(q, q), gg = euclidean_distances(g, g);
    const std::size_t k1 = k1d(gen);
    const std::size_t k2 = std::uniform_int_distribution<std::size_t>(1, std::min<std::size_t>(k1, 6))(gen);
    const double lambda = std::uniform_real_distribution<double>(0.0, 1.0)(gen);
    const Matrix ours = rerank(qg, qq, gg, {k1, k2, lambda});
    const Matrix ref = oracle::naive_rerank(qg, qq, gg, k1, k2, lambda);
    for (std::size_t i = 0; i < ours.size(); ++i) worst = std::max(worst, std::abs(ours.values()[i] - ref.values()[i]));
    lambda_one_exact = lambda_one_exact && rerank(qg, qq, gg, {k1, k2, 1.0}) == qg;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst <= 1e-6 && lambda_one_exact && secs < 60.0;
  o.detail = "50 instances, worst |ours - naive| " + fmt("%.2e", worst) +
             (lambda_one_exact ? ", lambda=1 exact" : ", lambda=1 NOT exact") + ", " + fmt("%.2f s", secs);
  return o;
}

// -- 5, 6 -------------------------------------------------------------------------

struct Lookup {
  std::map<std::string, const ResultRow *> rows;

  explicit Lookup(const ExperimentResult &res) {
    for (const auto &r : res.rows) rows[key(r.variant, r.label, r.seed)] = &r;
  }
  static std::string key(const std::string &variant, const std::string &label, std::uint64_t seed) {
    return variant + "|" + label + "|" + std::to_string(seed);
  }
  const ResultRow *get(const std::string &variant, const std::string &label, std::uint64_t seed) const {
    const auto it = rows.find(key(variant, label, seed));
    return it == rows.end() || !it->second->ok ? nullptr : it->second;
  }
};

Outcome flip_gap(const ExperimentPlan &plan, const Lookup &lk, double secs) {
  std::size_t wins = 0;
  std::string per_seed;
  for (auto seed : plan.seeds) {
    const auto *without = lk.get("flipreid", "2.1", seed);
    const auto *with = lk.get("flipreid+flip", "3.1", seed);
    const bool win = without && with && with->flip_gap < without->flip_gap;
    wins += win ? 1 : 0;
    per_seed += " s" + std::to_string(seed) + ":" + (without && with ? fmt("%.4f", with->flip_gap) + "<" +
                                                                           fmt("%.4f", without->flip_gap) + "?" +
                                                                           (win ? "y" : "n")
                                                                     : std::string("failed"));
  }
  Outcome o;
  o.pass = wins >= 4 && secs < 600.0;
  o.detail = std::to_string(wins) + "/5 seeds lower gap with flipping loss;" + per_seed + "; experiment " +
             fmt("%.0f s", secs);
  return o;
}

Outcome table_ordering(const ExperimentPlan &plan, const Lookup &lk) {
  const double band = 0.005;
  std::size_t a = 0, b = 0, c = 0;
  std::string per_seed;
  for (auto seed : plan.seeds) {
    bool a_ok = true;
    for (const auto &[variant, family] :
         std::vector<std::pair<std::string, std::string>>{{"baseline", "1"}, {"flipreid", "2"}, {"flipreid+flip", "3"}}) {
      const auto *s = lk.get(variant, family + ".1", seed);
      const auto *d = lk.get(variant, family + ".2", seed);
      a_ok = a_ok && s && d && d->mAP >= s->mAP - band;
    }
    const auto *r11 = lk.get("baseline", "1.1", seed);
    const auto *r21 = lk.get("flipreid", "2.1", seed);
    const auto *r31 = lk.get("flipreid+flip", "3.1", seed);
    const bool b_ok = r11 && r21 && r21->mAP < r11->mAP + band;
    const bool c_ok = r21 && r31 && r31->mAP >= r21->mAP - band;
    a += a_ok;
    b += b_ok;
    c += c_ok;
    if (r11 && r21 && r31)
      per_seed += " s" + std::to_string(seed) + "[1.1 " + fmt("%.3f", r11->mAP) + " 2.1 " + fmt("%.3f", r21->mAP) +
                  " 3.1 " + fmt("%.3f", r31->mAP) + "]";
  }
  Outcome o;
  o.pass = a >= 4 && b >= 4 && c >= 4;
  o.detail = "(a) double>=single " + std::to_string(a) + "/5, (b) 2.1<1.1 " + std::to_string(b) +
             "/5, (c) 3.1>=2.1 " + std::to_string(c) + "/5 (band 0.005);" + per_seed;
  return o;
}

// -- 7 ---------------------------------------------------------------------------

/// Identity clusters seen through per-camera offsets and isotropic noise.
std::pair<EmbeddingSet, EmbeddingSet> clustered_embeddings(std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  const std::size_t ids = 20, cams = 3, per_cam = 3, dim = 16;
  std::vector<std::vector<double>> centre(ids, std::vector<double>(dim)), offset(cams, std::vector<double>(dim));
  for (auto &c : centre)
    for (double &v : c) v = nd(gen);
  for (auto &c : offset)
    for (double &v : c) v = 0.3 * nd(gen);
  EmbeddingSet q, g;
  std::vector<std::vector<double>> qrows, grows;
  for (std::uint32_t i = 0; i < ids; ++i)
    for (std::uint32_t c = 0; c < cams; ++c)
      for (std::size_t k = 0; k < per_cam; ++k) {
        std::vector<double> row(dim);
        for (std::size_t d = 0; d < dim; ++d) row[d] = centre[i][d] + offset[c][d] + 0.8 * nd(gen);
        const bool is_query = c == 0 && k == 0;
        (is_query ? qrows : grows).push_back(row);
        (is_query ? q : g).identities.push_back(i);
        (is_query ? q : g).cameras.push_back(c);
      }
  auto to_matrix = [&](const std::vector<std::vector<double>> &rows) {
    Matrix m(rows.size(), dim);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t d = 0; d < dim; ++d) m(i, d) = rows[i][d];
    return m;
  };
  q.features = to_matrix(qrows);
  g.features = to_matrix(grows);
  return {q, g};
}

Outcome rerank_direction() {
  std::size_t wins = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto [q, g] = clustered_embeddings(700 + seed);
    const RerankParams params;
    const double before = eval_embeddings(q, g, false, params).mAP;
    const double after = eval_embeddings(q, g, true, params).mAP;
    wins += after >= before;
    per_seed += " s" + std::to_string(seed) + ":" + fmt("%.3f", before) + "->" + fmt("%.3f", after);
  }
  Outcome o;
  o.pass = wins >= 4;
  o.detail = std::to_string(wins) + "/5 seeds re-ranked mAP >= original (k1 20, k2 6, lambda 0.3);" + per_seed;
  return o;
}

// -- 8 ---------------------------------------------------------------------------

Outcome determinism(const ExperimentPlan &first_plan, const ExperimentResult &first, const fs::path &second_dir) {
  ExperimentPlan plan = first_plan;
  plan.out_dir = second_dir;
  fs::remove_all(second_dir);
  const auto second = run_experiment(plan);
  std::size_t checkpoints = 0, differing = 0;
  for (const auto &r : first.rows) {
    if (r.rerank || r.mode != plan.modes.front()) continue;
    ++checkpoints;
    if (slurp(first_plan.out_dir / r.checkpoint) != slurp(second_dir / r.checkpoint) ||
        slurp(first_plan.out_dir / r.checkpoint).empty())
      ++differing;
  }
  const bool csv_same = slurp(first_plan.out_dir / "results.csv") == slurp(second_dir / "results.csv");
  const bool summary_same = slurp(first_plan.out_dir / "summary.csv") == slurp(second_dir / "summary.csv");
  Outcome o;
  o.pass = csv_same && summary_same && differing == 0 && checkpoints > 0 && second.failed_cells == 0;
  o.detail = std::string("results.csv ") + (csv_same ? "identical" : "DIFFERENT") + ", summary.csv " +
             (summary_same ? "identical" : "DIFFERENT") + ", " + std::to_string(checkpoints - differing) + "/" +
             std::to_string(checkpoints) + " checkpoints byte-identical";
  return o;
}

// -- 9 ---------------------------------------------------------------------------

Outcome triplet_oracle() {
  std::mt19937_64 gen(909);
  std::normal_distribution<double> nd;
  std::size_t mismatches = 0, tested = 0;
  while (tested < 200) {
    const std::size_t N = std::uniform_int_distribution<std::size_t>(4, 16)(gen);
    const std::uint32_t classes = std::uniform_int_distribution<std::uint32_t>(2, std::uint32_t(N / 2))(gen);
    std::vector<std::uint32_t> labels(N);
    for (std::size_t i = 0; i < N; ++i) labels[i] = i < 2 * classes ? std::uint32_t(i / 2) : std::uint32_t(gen() % classes);
    std::shuffle(labels.begin(), labels.end(), gen);
    Matrix e(N, std::uniform_int_distribution<std::size_t>(1, 8)(gen));
    for (double &v : e.values()) v = tested % 4 == 0 ? std::round(2.0 * nd(gen)) : nd(gen);
    const double margin = tested % 3 == 0 ? 0.0 : 0.3 * double(tested % 7);
    const auto r = batch_hard_triplet(e, labels, margin);
    const auto ref = oracle::brute_force_triplet(pairwise_euclidean(e), labels, margin);
    if (!(r.loss == ref.loss && r.hardest_positive == ref.pos && r.hardest_negative == ref.neg)) ++mismatches;
    ++tested;
  }
  Outcome o;
  o.pass = mismatches == 0;
  o.detail = std::to_string(tested) + " batches (N 4..16, every fourth on an integer grid), " +
             std::to_string(mismatches) + " mismatches";
  return o;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"acceptance criteria"};
  fs::path work = fs::temp_directory_path() / "flipreid_acceptance";
  app.add_option("--work-dir", work, "scratch directory for experiment outputs");
  CLI11_PARSE(app, argc, argv);

  int failed = 0;
  auto report = [&](int id, const Outcome &o) {
    std::printf("%s criterion %d: %s\n", o.pass ? "PASS" : "FAIL", id, o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  };
  auto guarded = [&](int id, const std::function<Outcome()> &fn) {
    try {
      report(id, fn());
    } catch (const std::exception &e) {
      report(id, {false, std::string("exception: ") + e.what()});
    }
  };

  guarded(1, gradient_oracle);
  guarded(2, gem_limits);
  guarded(3, eval_oracle);
  guarded(4, rerank_oracle);

  fs::remove_all(work);
  ExperimentPlan plan = default_benchmark_plan(work / "run1");
  plan.rerank = true;
  std::optional<ExperimentResult> first;
  double secs = 0.0;
  try {
    const auto t0 = Clock::now();
    first = run_experiment(plan);
    secs = seconds_since(t0);
  } catch (const std::exception &e) {
    report(5, {false, std::string("experiment failed: ") + e.what()});
    report(6, {false, "experiment failed"});
  }
  if (first) {
    const Lookup lk(*first);
    guarded(5, [&] { return flip_gap(plan, lk, secs); });
    guarded(6, [&] { return table_ordering(plan, lk); });
  }
  guarded(7, rerank_direction);
  if (first) guarded(8, [&] { return determinism(plan, *first, work / "run2"); });
  else report(8, {false, "first experiment run failed"});
  guarded(9, triplet_oracle);

  std::printf("%d of 9 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
