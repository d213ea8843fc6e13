#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "flipreid/error.hpp"
#include "flipreid/experiment.hpp"
#include "unit/test_util.hpp"

using namespace flipreid;

namespace {

std::string slurp(const std::filesystem::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.model.blocks = {{6, 3, 2}, {8, 3, 2}};
  cfg.model.reduced_dim = 3;
  cfg.batch = {2, 2};
  cfg.epochs = 1;
  cfg.steps_per_epoch = 2;
  cfg.learning_rate = 1e-3;
  return cfg;
}

ExperimentPlan tiny_plan(const std::filesystem::path &out) {
  ExperimentPlan plan;
  DatasetSpec spec;
  spec.num_identities = 6;
  spec.images_per_identity = 6;
  spec.height = 16;
  spec.width = 8;
  plan.synthetic = spec;
  plan.variants = {{"base", tiny_train()}};
  plan.out_dir = out;
  return plan;
}

EmbeddingSet shifted_copy(const EmbeddingSet &s) {
  EmbeddingSet g = s;
  for (auto &c : g.cameras) c += 1;
  return g;
}

} // namespace

TEST_CASE("one variant, two modes, one seed gives two rows") {
  const auto dir = testutil::temp_dir("experiment_rows");
  ExperimentPlan plan = tiny_plan(dir);
  const auto res = run_experiment(plan);
  REQUIRE(res.rows.size() == 2);
  CHECK(res.failed_cells == 0);
  CHECK(res.rows[0].label == "1.1");
  CHECK(res.rows[1].label == "1.2");
  CHECK(res.summary.size() == 2);
  for (const auto &r : res.rows) {
    CHECK(r.ok);
    CHECK(r.mAP >= 0.0);
    CHECK(r.mAP <= 1.0);
    CHECK(r.config_hash.size() == 40);
    CHECK(r.checkpoint == "cells/base-seed0/checkpoint.frmc");
  }
  for (const char *f : {"results.csv", "summary.csv", "results.json", "cells/base-seed0/config.json",
                        "cells/base-seed0/history.jsonl", "cells/base-seed0/checkpoint.frmc",
                        "cells/base-seed0/query_single.frem", "cells/base-seed0/gallery_double.frem"})
    CHECK(std::filesystem::exists(dir / f));

  const std::string csv = slurp(dir / "results.csv");
  CHECK(csv.rfind("variant,mode,rerank,seed,mAP,rank1\n", 0) == 0);
  CHECK(csv.find("base,double,off,0,") != std::string::npos);
  const auto doc = nlohmann::json::parse(slurp(dir / "results.json"));
  CHECK(doc.at("rows").size() == 2);
  CHECK(doc.at("failed_cells") == 0);
  CHECK(doc.at("rows")[0].at("query_embeddings_hash").get<std::string>().size() == 40);

  plan.rerank = true;
  plan.rerank_params = {5, 2, 0.3};
  plan.out_dir = dir / "rr";
  const auto rr = run_experiment(plan);
  REQUIRE(rr.rows.size() == 4);
  CHECK(rr.rows[1].label == "1.1+rr");
  CHECK(rr.rows[3].label == "1.3");
  CHECK(rr.rows[0].mAP == res.rows[0].mAP);
}

TEST_CASE("experiments are deterministic across runs and worker counts") {
  const auto dir = testutil::temp_dir("experiment_det");
  ExperimentPlan plan = tiny_plan(dir / "a");
  plan.variants.push_back({"flip", tiny_train()});
  plan.variants.back().config.mode = TrainMode::flipreid;
  plan.variants.back().config.use_flipping_loss = true;
  plan.seeds = {0, 1};
  run_experiment(plan);
  plan.out_dir = dir / "b";
  ::setenv("FLIPREID_THREADS", "2", 1);
  run_experiment(plan);
  ::unsetenv("FLIPREID_THREADS");
  CHECK(slurp(dir / "a/results.csv") == slurp(dir / "b/results.csv"));
  CHECK(slurp(dir / "a/summary.csv") == slurp(dir / "b/summary.csv"));
  for (const char *cell : {"base-seed0", "base-seed1", "flip-seed0", "flip-seed1"}) {
    const auto rel = std::filesystem::path("cells") / cell / "checkpoint.frmc";
    CHECK(slurp(dir / "a" / rel) == slurp(dir / "b" / rel));
  }
  const auto a = nlohmann::json::parse(slurp(dir / "a/results.json"));
  const auto b = nlohmann::json::parse(slurp(dir / "b/results.json"));
  CHECK(a.at("rows") == b.at("rows"));

  ::setenv("FLIPREID_THREADS", "zero", 1);
  CHECK_THROWS_AS(worker_threads(), ValidationError);
  ::unsetenv("FLIPREID_THREADS");
  CHECK(worker_threads() == 1);
}

TEST_CASE("failing cells are recorded and the run continues") {
  const auto dir = testutil::temp_dir("experiment_fail");
  ExperimentPlan plan = tiny_plan(dir);
  plan.variants.push_back({"too-wide", tiny_train()});
  plan.variants.back().config.batch = {50, 2};
  const auto res = run_experiment(plan);
  CHECK(res.failed_cells == 1);
  REQUIRE(res.rows.size() == 4);
  CHECK(res.rows[0].ok);
  CHECK_FALSE(res.rows[2].ok);
  CHECK(res.rows[2].error.find("identities") != std::string::npos);
  CHECK(slurp(dir / "results.csv").find("too-wide,single,off,0,nan,nan") != std::string::npos);
  CHECK(res.summary[2].failures == 1);
  CHECK(res.summary[2].runs == 0);
}

TEST_CASE("plan validation and JSON round trip") {
  const auto def = default_benchmark_plan("out");
  CHECK(def.variants.size() == 3);
  CHECK(def.seeds.size() == 5);
  CHECK(def.modes.size() == 2);
  CHECK_NOTHROW(def.validate());

  const ExperimentPlan back = experiment_plan_from_json(experiment_plan_to_json(def));
  CHECK(experiment_plan_to_json(back) == experiment_plan_to_json(def));

  ExperimentPlan bad = def;
  bad.manifest = "m.csv";
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = def;
  bad.variants[1].name = bad.variants[0].name;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = def;
  bad.variants[0].name = "a,b";
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = def;
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  CHECK_THROWS_AS(experiment_plan_from_json("[1"), ValidationError);
  CHECK_THROWS_AS(experiment_plan_from_json(R"({"protocol": "loose"})"), ValidationError);
  const auto partial = experiment_plan_from_json(R"({"seeds": [3], "modes": ["double"]})");
  CHECK(partial.seeds == std::vector<std::uint64_t>{3});
  CHECK(partial.modes == std::vector<InferenceMode>{InferenceMode::double_image});

  DatasetSpec spec = benchmark_dataset_spec();
  spec.seed = 42;
  CHECK(dataset_spec_to_json(dataset_spec_from_json(dataset_spec_to_json(spec))) == dataset_spec_to_json(spec));

  ExperimentPlan p = tiny_plan("unused");
  const auto d0 = experiment_dataset(p, 0), d0b = experiment_dataset(p, 0), d1 = experiment_dataset(p, 1);
  CHECK(d0.train == d0b.train);
  CHECK_FALSE(d0.train == d1.train);
}

TEST_CASE("eval_embeddings") {
  EmbeddingSet q;
  q.features = Matrix(4, 3);
  for (std::size_t i = 0; i < q.features.size(); ++i) q.features.values()[i] = double((i * 7) % 5) + 0.1 * double(i);
  q.identities = {0, 1, 2, 3};
  q.cameras = {0, 0, 0, 0};
  const EmbeddingSet g = shifted_copy(q);
  const RerankParams params{3, 2, 0.3};
  CHECK(eval_embeddings(q, g, false, params).mAP == 1.0);

  const auto dir = testutil::temp_dir("experiment_eval");
  write_embeddings(dir / "q.frem", q);
  write_embeddings(dir / "g.frem", g);
  const auto from_files = eval_embeddings(dir / "q.frem", dir / "g.frem", true, params);
  const auto in_memory = eval_embeddings(q, g, true, params);
  CHECK(from_files.mAP == in_memory.mAP);
  CHECK(from_files.cmc == in_memory.cmc);

  EmbeddingSet narrow = g;
  narrow.features = Matrix(4, 2);
  try {
    eval_embeddings(q, narrow, false, params);
    FAIL("expected a dimension mismatch");
  } catch (const ValidationError &e) {
    const std::string msg = e.what();
    CHECK(msg.find("dimension 3") != std::string::npos);
    CHECK(msg.find("dimension 2") != std::string::npos);
  }
  CHECK_THROWS_AS(eval_embeddings(dir / "q.frem", dir / "missing.frem", false, params), IoError);
}
