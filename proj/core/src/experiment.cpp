#include "flipreid/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "flipreid/binary_io.hpp"
#include "flipreid/checkpoint.hpp"
#include "flipreid/error.hpp"
#include "flipreid/hashing.hpp"
#include "flipreid/image_io.hpp"
#include "flipreid/rng.hpp"

namespace flipreid {

using json = nlohmann::ordered_json;

void ExperimentPlan::validate() const {
  if (synthetic.has_value() == manifest.has_value())
    throw ValidationError("experiment plan needs exactly one dataset source (synthetic or manifest)");
  if (synthetic) synthetic->validate();
  if (!(query_fraction > 0.0 && query_fraction < 1.0)) throw ValidationError("query_fraction must lie in (0, 1)");
  if (!(train_identity_fraction > 0.0 && train_identity_fraction < 1.0))
    throw ValidationError("train_identity_fraction must lie in (0, 1)");
  if (variants.empty()) throw ValidationError("experiment plan has no train configs");
  if (modes.empty()) throw ValidationError("experiment plan has no inference modes");
  if (seeds.empty()) throw ValidationError("experiment plan has no seeds");
  std::map<std::string, int> names;
  for (const auto &v : variants) {
    if (v.name.empty() || v.name.find_first_of(",/\\\n\"") != std::string::npos)
      throw ValidationError("variant name '" + v.name + "' is empty or contains reserved characters");
    if (names[v.name]++) throw ValidationError("duplicate variant name '" + v.name + "'");
    v.config.validate();
  }
  if (rerank) rerank_params.validate();
}

DatasetSpec benchmark_dataset_spec() {
  DatasetSpec s;
  s.num_identities = 20;
  s.num_cameras = 3;
  s.asymmetry_strength = 0.8;
  s.noise_std = 50.0;
  s.camera_bias = 40.0;
  return s;
}

TrainConfig benchmark_train_config() {
  TrainConfig c;
  c.epochs = 30;
  c.learning_rate = 3e-3;
  c.loss.triplet_margin = 1.0;
  return c;
}

ExperimentPlan default_benchmark_plan(const std::filesystem::path &out_dir) {
  ExperimentPlan plan;
  plan.synthetic = benchmark_dataset_spec();
  const TrainConfig base = benchmark_train_config();
  TrainConfig baseline = base, flip = base, flip_loss = base;
  baseline.mode = TrainMode::baseline;
  flip.mode = TrainMode::flipreid;
  flip_loss.mode = TrainMode::flipreid;
  flip_loss.use_flipping_loss = true;
  flip_loss.loss.w_flip = 4.0;
  plan.variants = {{"baseline", baseline}, {"flipreid", flip}, {"flipreid+flip", flip_loss}};
  plan.seeds = {0, 1, 2, 3, 4};
  plan.out_dir = out_dir;
  return plan;
}

namespace {

json dataset_spec_json(const DatasetSpec &s) {
  return {{"num_identities", s.num_identities}, {"images_per_identity", s.images_per_identity},
          {"num_cameras", s.num_cameras},       {"height", s.height},
          {"width", s.width},                   {"channels", s.channels},
          {"asymmetry_strength", s.asymmetry_strength}, {"noise_std", s.noise_std},
          {"mirror_prob", s.mirror_prob},       {"camera_bias", s.camera_bias},
          {"seed", s.seed}};
}

template <class T> void read_opt(const json &j, const char *key, T &dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

DatasetSpec dataset_spec_from_object(const json &j) {
  DatasetSpec s;
  read_opt(j, "num_identities", s.num_identities);
  read_opt(j, "images_per_identity", s.images_per_identity);
  read_opt(j, "num_cameras", s.num_cameras);
  read_opt(j, "height", s.height);
  read_opt(j, "width", s.width);
  read_opt(j, "channels", s.channels);
  read_opt(j, "asymmetry_strength", s.asymmetry_strength);
  read_opt(j, "noise_std", s.noise_std);
  read_opt(j, "mirror_prob", s.mirror_prob);
  read_opt(j, "camera_bias", s.camera_bias);
  read_opt(j, "seed", s.seed);
  return s;
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string row_label(std::size_t variant_index, InferenceMode mode, bool rerank) {
  const std::string family = std::to_string(variant_index + 1);
  if (mode == InferenceMode::single) return family + (rerank ? ".1+rr" : ".1");
  return family + (rerank ? ".3" : ".2");
}

struct CellOutput {
  std::vector<ResultRow> rows;
  bool failed = false;
};

CellOutput run_cell(const ExperimentPlan &plan, std::size_t variant_index, std::uint64_t seed) {
  const TrainVariant &variant = plan.variants[variant_index];
  TrainConfig cfg = variant.config;
  cfg.seed = seed;
  const std::string config_hash = sha1_hex(train_config_to_json(cfg));
  const std::filesystem::path cell_dir = plan.out_dir / "cells" / (variant.name + "-seed" + std::to_string(seed));
  const std::filesystem::path ckpt = cell_dir / "checkpoint.frmc";
  const std::string ckpt_rel = std::filesystem::relative(ckpt, plan.out_dir).generic_string();

  CellOutput out;
  auto template_row = [&](InferenceMode mode, bool rerank) {
    ResultRow r;
    r.variant = variant.name;
    r.label = row_label(variant_index, mode, rerank);
    r.mode = mode;
    r.rerank = rerank;
    r.seed = seed;
    r.config_hash = config_hash;
    r.checkpoint = ckpt_rel;
    return r;
  };

  try {
    std::filesystem::create_directories(cell_dir);
    io::write_text_atomic(cell_dir / "config.json", train_config_to_json(cfg));
    const DatasetSplit data = experiment_dataset(plan, seed);
    const TrainResult trained = train(cfg, data.train, ckpt);
    io::write_text_atomic(cell_dir / "history.jsonl", history_to_jsonl(trained.history));

    std::vector<Sample> test = data.query;
    test.insert(test.end(), data.gallery.begin(), data.gallery.end());
    const double gap = mean_flip_gap(trained.model, test);

    for (InferenceMode mode : plan.modes) {
      const EmbeddingSet q = embed(trained.model, data.query, mode);
      const EmbeddingSet g = embed(trained.model, data.gallery, mode);
      const std::string tag(to_string(mode));
      const auto q_bytes = encode_embeddings(q), g_bytes = encode_embeddings(g);
      io::write_file_atomic(cell_dir / ("query_" + tag + ".frem"), q_bytes);
      io::write_file_atomic(cell_dir / ("gallery_" + tag + ".frem"), g_bytes);

      for (bool rr : {false, true}) {
        if (rr && !plan.rerank) continue;
        const EvalReport rep = eval_embeddings(q, g, rr, plan.rerank_params, plan.protocol);
        ResultRow r = template_row(mode, rr);
        r.ok = true;
        r.mAP = rep.mAP;
        r.rank1 = rep.rank1();
        r.flip_gap = gap;
        r.query_embedding_hash = git_blob_hash(q_bytes);
        r.gallery_embedding_hash = git_blob_hash(g_bytes);
        out.rows.push_back(std::move(r));
      }
    }
  } catch (const std::exception &e) {
    out.failed = true;
    out.rows.clear();
    for (InferenceMode mode : plan.modes)
      for (bool rr : {false, true}) {
        if (rr && !plan.rerank) continue;
        ResultRow r = template_row(mode, rr);
        r.error = e.what();
        r.mAP = r.rank1 = r.flip_gap = std::nan("");
        out.rows.push_back(std::move(r));
      }
  }
  return out;
}

std::vector<CellSummary> summarize(const ExperimentPlan &plan, const std::vector<ResultRow> &rows) {
  std::vector<CellSummary> summary;
  for (std::size_t vi = 0; vi < plan.variants.size(); ++vi)
    for (InferenceMode mode : plan.modes)
      for (bool rr : {false, true}) {
        if (rr && !plan.rerank) continue;
        CellSummary s;
        s.variant = plan.variants[vi].name;
        s.label = row_label(vi, mode, rr);
        s.mode = mode;
        s.rerank = rr;
        std::vector<double> maps, r1s;
        for (const auto &r : rows) {
          if (r.variant != s.variant || r.mode != mode || r.rerank != rr) continue;
          if (!r.ok) {
            ++s.failures;
            continue;
          }
          maps.push_back(r.mAP);
          r1s.push_back(r.rank1);
        }
        s.runs = maps.size();
        auto stats = [](const std::vector<double> &v, double &mean, double &sd) {
          mean = sd = 0.0;
          if (v.empty()) {
            mean = sd = std::nan("");
            return;
          }
          for (double x : v) mean += x;
          mean /= double(v.size());
          if (v.size() > 1) {
            for (double x : v) sd += (x - mean) * (x - mean);
            sd = std::sqrt(sd / double(v.size() - 1));
          }
        };
        stats(maps, s.mAP_mean, s.mAP_std);
        stats(r1s, s.rank1_mean, s.rank1_std);
        summary.push_back(std::move(s));
      }
  return summary;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

} // namespace

std::string dataset_spec_to_json(const DatasetSpec &spec) { return dataset_spec_json(spec).dump(2); }

DatasetSpec dataset_spec_from_json(std::string_view text) {
  DatasetSpec spec;
  try {
    spec = dataset_spec_from_object(json::parse(text));
  } catch (const json::exception &e) {
    throw ValidationError(std::string("dataset spec JSON is invalid: ") + e.what());
  }
  spec.validate();
  return spec;
}

std::string experiment_plan_to_json(const ExperimentPlan &plan) {
  json j;
  if (plan.synthetic) j["dataset"] = {{"synthetic", dataset_spec_json(*plan.synthetic)}};
  else j["dataset"] = {{"manifest", plan.manifest->generic_string()}};
  j["query_fraction"] = plan.query_fraction;
  j["train_identity_fraction"] = plan.train_identity_fraction;
  j["variants"] = json::array();
  for (const auto &v : plan.variants)
    j["variants"].push_back({{"name", v.name}, {"config", json::parse(train_config_to_json(v.config))}});
  j["modes"] = json::array();
  for (auto m : plan.modes) j["modes"].push_back(std::string(to_string(m)));
  j["rerank"] = plan.rerank;
  j["rerank_params"] = {{"k1", plan.rerank_params.k1}, {"k2", plan.rerank_params.k2},
                        {"lambda", plan.rerank_params.lambda}};
  j["protocol"] = std::string(to_string(plan.protocol));
  j["seeds"] = plan.seeds;
  j["out"] = plan.out_dir.generic_string();
  return j.dump(2);
}

ExperimentPlan experiment_plan_from_json(std::string_view text) {
  ExperimentPlan plan = default_benchmark_plan("experiment_out");
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error &e) {
    throw ValidationError(std::string("experiment plan is not valid JSON: ") + e.what());
  }
  try {
    if (j.contains("dataset")) {
      const auto &d = j["dataset"];
      plan.synthetic.reset();
      plan.manifest.reset();
      if (d.contains("synthetic")) plan.synthetic = dataset_spec_from_object(d["synthetic"]);
      if (d.contains("manifest")) plan.manifest = d["manifest"].get<std::string>();
    }
    read_opt(j, "query_fraction", plan.query_fraction);
    read_opt(j, "train_identity_fraction", plan.train_identity_fraction);
    if (j.contains("variants")) {
      plan.variants.clear();
      for (const auto &v : j["variants"]) {
        TrainVariant tv;
        tv.name = v.at("name").get<std::string>();
        tv.config = v.contains("config") ? train_config_from_json(v["config"].dump()) : benchmark_train_config();
        plan.variants.push_back(std::move(tv));
      }
    }
    if (j.contains("modes")) {
      plan.modes.clear();
      for (const auto &m : j["modes"]) plan.modes.push_back(parse_inference_mode(m.get<std::string>()));
    }
    read_opt(j, "rerank", plan.rerank);
    if (j.contains("rerank_params")) {
      const auto &r = j["rerank_params"];
      read_opt(r, "k1", plan.rerank_params.k1);
      read_opt(r, "k2", plan.rerank_params.k2);
      read_opt(r, "lambda", plan.rerank_params.lambda);
    }
    if (j.contains("protocol")) {
      const auto p = j["protocol"].get<std::string>();
      if (p == "standard") plan.protocol = CameraProtocol::standard;
      else if (p == "literal") plan.protocol = CameraProtocol::literal;
      else throw ValidationError("unknown camera protocol '" + p + "'");
    }
    if (j.contains("seeds")) plan.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("out")) plan.out_dir = j["out"].get<std::string>();
  } catch (const json::exception &e) {
    throw ValidationError(std::string("experiment plan has a field of the wrong type: ") + e.what());
  }
  plan.validate();
  return plan;
}

DatasetSplit experiment_dataset(const ExperimentPlan &plan, std::uint64_t seed) {
  if (plan.manifest) return ingest_manifest(*plan.manifest);
  DatasetSpec spec = *plan.synthetic;
  Rng mix = Rng::stream(spec.seed, seed);
  spec.seed = mix.next_u64();
  Rng split_rng = mix.fork();
  return split_dataset(generate_dataset(spec), split_rng, plan.query_fraction, plan.train_identity_fraction);
}

std::size_t worker_threads() {
  const char *env = std::getenv("FLIPREID_THREADS");
  if (!env || !*env) return 1;
  char *end = nullptr;
  const unsigned long v = std::strtoul(env, &end, 10);
  if (*end != '\0' || v == 0) throw ValidationError(std::string("FLIPREID_THREADS must be a positive integer, got '") +
                                                    env + "'");
  return v;
}

std::string results_csv(const std::vector<ResultRow> &rows) {
  std::string out = "variant,mode,rerank,seed,mAP,rank1\n";
  for (const auto &r : rows)
    out += r.variant + "," + std::string(to_string(r.mode)) + "," + (r.rerank ? "on" : "off") + "," +
           std::to_string(r.seed) + "," + fmt(r.mAP) + "," + fmt(r.rank1) + "\n";
  return out;
}

std::string summary_csv(const std::vector<CellSummary> &summary) {
  std::string out = "row,variant,mode,rerank,runs,failures,mAP_mean,mAP_std,rank1_mean,rank1_std\n";
  for (const auto &s : summary)
    out += s.label + "," + s.variant + "," + std::string(to_string(s.mode)) + "," + (s.rerank ? "on" : "off") +
           "," + std::to_string(s.runs) + "," + std::to_string(s.failures) + "," + fmt(s.mAP_mean) + "," +
           fmt(s.mAP_std) + "," + fmt(s.rank1_mean) + "," + fmt(s.rank1_std) + "\n";
  return out;
}

ExperimentResult run_experiment(const ExperimentPlan &plan) {
  plan.validate();
  try {
    std::filesystem::create_directories(plan.out_dir);
  } catch (const std::filesystem::filesystem_error &e) {
    throw IoError("cannot create output directory " + plan.out_dir.string() + ": " + e.what());
  }

  struct Cell {
    std::size_t variant;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (std::size_t v = 0; v < plan.variants.size(); ++v)
    for (auto s : plan.seeds) cells.push_back({v, s});

  std::vector<CellOutput> outputs(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) outputs[i] = run_cell(plan, cells[i].variant, cells[i].seed);
  };
  const std::size_t n_workers = std::min(worker_threads(), cells.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto &t : pool) t.join();
  }

  ExperimentResult result;
  for (auto &o : outputs) {
    result.failed_cells += o.failed ? 1 : 0;
    for (auto &r : o.rows) result.rows.push_back(std::move(r));
  }
  result.summary = summarize(plan, result.rows);

  json doc;
  doc["plan"] = json::parse(experiment_plan_to_json(plan));
  doc["rows"] = json::array();
  for (const auto &r : result.rows) {
    json row = {{"row", r.label},
                {"variant", r.variant},
                {"mode", std::string(to_string(r.mode))},
                {"rerank", r.rerank},
                {"seed", r.seed},
                {"ok", r.ok},
                {"mAP", number_or_null(r.mAP)},
                {"rank1", number_or_null(r.rank1)},
                {"flip_gap", number_or_null(r.flip_gap)},
                {"config_hash", r.config_hash},
                {"checkpoint", r.checkpoint},
                {"query_embeddings_hash", r.query_embedding_hash},
                {"gallery_embeddings_hash", r.gallery_embedding_hash}};
    if (!r.ok) row["error"] = r.error;
    doc["rows"].push_back(std::move(row));
  }
  doc["summary"] = json::array();
  for (const auto &s : result.summary)
    doc["summary"].push_back({{"row", s.label},
                              {"variant", s.variant},
                              {"mode", std::string(to_string(s.mode))},
                              {"rerank", s.rerank},
                              {"runs", s.runs},
                              {"failures", s.failures},
                              {"mAP_mean", number_or_null(s.mAP_mean)},
                              {"mAP_std", number_or_null(s.mAP_std)},
                              {"rank1_mean", number_or_null(s.rank1_mean)},
                              {"rank1_std", number_or_null(s.rank1_std)}});
  doc["failed_cells"] = result.failed_cells;

  io::write_text_atomic(plan.out_dir / "results.csv", results_csv(result.rows));
  io::write_text_atomic(plan.out_dir / "summary.csv", summary_csv(result.summary));
  io::write_text_atomic(plan.out_dir / "results.json", doc.dump(2) + "\n");
  return result;
}

EvalReport eval_embeddings(const EmbeddingSet &query, const EmbeddingSet &gallery, bool rerank,
                           const RerankParams &params, CameraProtocol protocol, std::vector<std::string> *warnings) {
  query.validate();
  gallery.validate();
  if (query.features.cols() != gallery.features.cols())
    throw ValidationError("query embeddings have dimension " + std::to_string(query.features.cols()) +
                          " but gallery embeddings have dimension " + std::to_string(gallery.features.cols()));
  if (!rerank) return evaluate(query, gallery, 50, protocol);
  const Matrix qg = euclidean_distances(query.features, gallery.features);
  const Matrix qq = euclidean_distances(query.features, query.features);
  const Matrix gg = euclidean_distances(gallery.features, gallery.features);
  const Matrix d = flipreid::rerank(qg, qq, gg, params, warnings);
  EvalReport rep = evaluate_distances(d, query.identities, query.cameras, gallery.identities, gallery.cameras, 50,
                                      protocol);
  return rep;
}

EvalReport eval_embeddings(const std::filesystem::path &query_file, const std::filesystem::path &gallery_file,
                           bool rerank, const RerankParams &params, CameraProtocol protocol,
                           std::vector<std::string> *warnings) {
  return eval_embeddings(read_embeddings(query_file), read_embeddings(gallery_file), rerank, params, protocol,
                         warnings);
}

} // namespace flipreid
