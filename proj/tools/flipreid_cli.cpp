#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "flipreid/binary_io.hpp"
#include "flipreid/checkpoint.hpp"
#include "flipreid/error.hpp"
#include "flipreid/eval.hpp"
#include "flipreid/experiment.hpp"
#include "flipreid/image_io.hpp"
#include "flipreid/rerank.hpp"
#include "flipreid/rng.hpp"
#include "flipreid/training.hpp"

namespace fs = std::filesystem;
using namespace flipreid;

namespace {

enum Exit { kOk = 0, kValidation = 2, kPartial = 3, kIo = 4 };

std::string read_text(const fs::path &p) {
  const auto bytes = io::read_file(p);
  return {bytes.begin(), bytes.end()};
}

bool on_off(const std::string &s) { return s == "on"; }

const auto kOnOff = CLI::IsMember({"on", "off"});

struct RerankOptions {
  std::string rerank = "off";
  RerankParams params;

  void add(CLI::App *cmd) {
    cmd->add_option("--rerank", rerank, "k-reciprocal re-ranking")->check(kOnOff);
    cmd->add_option("--k1", params.k1, "reciprocal neighbourhood size");
    cmd->add_option("--k2", params.k2, "query expansion size");
    cmd->add_option("--lambda", params.lambda, "weight of the original distance");
  }
};

CameraProtocol parse_protocol(const std::string &s) {
  return s == "literal" ? CameraProtocol::literal : CameraProtocol::standard;
}

void print_warnings(const std::vector<std::string> &warnings) {
  for (const auto &w : warnings) std::cerr << "warning: " << w << "\n";
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Flip-consistent person re-identification toolkit"};
  app.require_subcommand(1);

  // generate
  auto *gen = app.add_subcommand("generate", "write a synthetic dataset and its manifest");
  std::optional<fs::path> gen_config;
  std::optional<std::uint64_t> gen_seed;
  fs::path gen_out = "dataset";
  double gen_query_frac = 0.25, gen_train_frac = 0.5;
  gen->add_option("--config", gen_config, "dataset spec JSON")->check(CLI::ExistingFile);
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--query-fraction", gen_query_frac, "share of each test identity used as queries");
  gen->add_option("--train-fraction", gen_train_frac, "share of identities used for training");

  // train
  auto *tr = app.add_subcommand("train", "train a model on the train split of a manifest");
  fs::path tr_manifest, tr_out = "model";
  std::optional<fs::path> tr_config;
  std::optional<std::uint64_t> tr_seed;
  std::optional<std::string> tr_mode, tr_flip;
  tr->add_option("--manifest", tr_manifest, "manifest CSV")->required();
  tr->add_option("--config", tr_config, "train config JSON")->check(CLI::ExistingFile);
  tr->add_option("--seed", tr_seed, "training seed");
  tr->add_option("--mode", tr_mode, "training scheme")->check(CLI::IsMember({"baseline", "flipreid"}));
  tr->add_option("--flip-loss", tr_flip, "flipping loss (flipreid mode only)")->check(kOnOff);
  tr->add_option("--out", tr_out, "output directory");

  // embed
  auto *em = app.add_subcommand("embed", "embed the query and gallery splits of a manifest");
  fs::path em_manifest, em_checkpoint, em_out = "embeddings";
  std::string em_inference = "single";
  em->add_option("--manifest", em_manifest, "manifest CSV")->required();
  em->add_option("--checkpoint", em_checkpoint, "model checkpoint")->required();
  em->add_option("--inference", em_inference, "inference mode")->check(CLI::IsMember({"single", "double"}));
  em->add_option("--out", em_out, "output directory");

  // evaluate
  auto *ev = app.add_subcommand("evaluate", "evaluate query/gallery embedding files");
  fs::path ev_query, ev_gallery;
  std::optional<fs::path> ev_out;
  std::string ev_protocol = "standard";
  RerankOptions ev_rr;
  ev->add_option("--query", ev_query, "query embeddings (FREM)")->required();
  ev->add_option("--gallery", ev_gallery, "gallery embeddings (FREM)")->required();
  ev->add_option("--protocol", ev_protocol, "camera filtering rule")->check(CLI::IsMember({"standard", "literal"}));
  ev->add_option("--out", ev_out, "directory receiving eval.json");
  ev_rr.add(ev);

  // rerank
  auto *rr = app.add_subcommand("rerank", "write re-ranked query-gallery distances");
  fs::path rr_query, rr_gallery, rr_out = "rerank";
  RerankParams rr_params;
  rr->add_option("--query", rr_query, "query embeddings (FREM)")->required();
  rr->add_option("--gallery", rr_gallery, "gallery embeddings (FREM)")->required();
  rr->add_option("--k1", rr_params.k1, "reciprocal neighbourhood size");
  rr->add_option("--k2", rr_params.k2, "query expansion size");
  rr->add_option("--lambda", rr_params.lambda, "weight of the original distance");
  rr->add_option("--out", rr_out, "output directory");

  // experiment
  auto *ex = app.add_subcommand("experiment", "run the train/inference/re-ranking comparison");
  std::optional<fs::path> ex_config, ex_manifest, ex_out;
  std::optional<std::uint64_t> ex_seed;
  std::optional<std::string> ex_mode, ex_flip, ex_inference, ex_rerank;
  std::optional<std::size_t> ex_k1, ex_k2;
  std::optional<double> ex_lambda;
  ex->add_option("--config", ex_config, "experiment plan JSON")->check(CLI::ExistingFile);
  ex->add_option("--manifest", ex_manifest, "use a manifest instead of synthetic data");
  ex->add_option("--seed", ex_seed, "run a single seed");
  ex->add_option("--mode", ex_mode, "keep only variants with this training scheme")
      ->check(CLI::IsMember({"baseline", "flipreid"}));
  ex->add_option("--flip-loss", ex_flip, "keep only variants with this flipping-loss setting")->check(kOnOff);
  ex->add_option("--inference", ex_inference, "evaluate a single inference mode")
      ->check(CLI::IsMember({"single", "double"}));
  ex->add_option("--rerank", ex_rerank, "add re-ranked rows")->check(kOnOff);
  ex->add_option("--k1", ex_k1, "reciprocal neighbourhood size");
  ex->add_option("--k2", ex_k2, "query expansion size");
  ex->add_option("--lambda", ex_lambda, "weight of the original distance");
  ex->add_option("--out", ex_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kValidation;
  }

  try {
    if (*gen) {
      DatasetSpec spec = gen_config ? dataset_spec_from_json(read_text(*gen_config)) : DatasetSpec{};
      if (gen_seed) spec.seed = *gen_seed;
      spec.validate();
      Rng split_rng = Rng::stream(spec.seed, 0x5EED);
      const auto split = split_dataset(generate_dataset(spec), split_rng, gen_query_frac, gen_train_frac);
      const auto manifest = write_manifest(gen_out, split);
      io::write_text_atomic(gen_out / "dataset.json", dataset_spec_to_json(spec) + "\n");
      std::cout << manifest.string() << "\n";
    } else if (*tr) {
      TrainConfig cfg = tr_config ? train_config_from_json(read_text(*tr_config)) : benchmark_train_config();
      if (tr_seed) cfg.seed = *tr_seed;
      if (tr_mode) cfg.mode = parse_train_mode(*tr_mode);
      if (tr_flip) cfg.use_flipping_loss = on_off(*tr_flip);
      cfg.validate();
      const auto data = ingest_manifest(tr_manifest);
      fs::create_directories(tr_out);
      const auto result = train(cfg, data.train, tr_out / "checkpoint.frmc");
      io::write_text_atomic(tr_out / "config.json", train_config_to_json(cfg) + "\n");
      io::write_text_atomic(tr_out / "history.jsonl", history_to_jsonl(result.history));
      std::cout << "trained " << result.history.steps.size() << " steps";
      if (!result.history.steps.empty()) std::cout << ", final loss " << result.history.steps.back().report.total;
      std::cout << "\n" << (tr_out / "checkpoint.frmc").string() << "\n";
    } else if (*em) {
      const Model model = load_checkpoint(em_checkpoint);
      const auto data = ingest_manifest(em_manifest);
      const InferenceMode mode = parse_inference_mode(em_inference);
      fs::create_directories(em_out);
      write_embeddings(em_out / ("query_" + em_inference + ".frem"), embed(model, data.query, mode));
      write_embeddings(em_out / ("gallery_" + em_inference + ".frem"), embed(model, data.gallery, mode));
      std::cout << (em_out / ("query_" + em_inference + ".frem")).string() << "\n"
                << (em_out / ("gallery_" + em_inference + ".frem")).string() << "\n";
    } else if (*ev) {
      std::vector<std::string> warnings;
      const auto report = eval_embeddings(ev_query, ev_gallery, on_off(ev_rr.rerank), ev_rr.params,
                                          parse_protocol(ev_protocol), &warnings);
      print_warnings(warnings);
      const std::string doc = eval_report_to_json(report);
      if (ev_out) {
        fs::create_directories(*ev_out);
        io::write_text_atomic(*ev_out / "eval.json", doc + "\n");
      }
      std::cout << doc << "\n";
    } else if (*rr) {
      rr_params.validate();
      const auto q = read_embeddings(rr_query), g = read_embeddings(rr_gallery);
      if (q.features.cols() != g.features.cols())
        throw ValidationError("query embeddings have dimension " + std::to_string(q.features.cols()) +
                              " but gallery embeddings have dimension " + std::to_string(g.features.cols()));
      const Matrix qg = euclidean_distances(q.features, g.features);
      std::vector<std::string> warnings;
      const Matrix d = rerank(qg, euclidean_distances(q.features, q.features),
                              euclidean_distances(g.features, g.features), rr_params, &warnings);
      print_warnings(warnings);
      fs::create_directories(rr_out);
      write_distance_matrix(rr_out / "original.frdm", qg);
      write_distance_matrix(rr_out / "reranked.frdm", d);
      std::cout << (rr_out / "reranked.frdm").string() << "\n";
    } else if (*ex) {
      ExperimentPlan plan = ex_config ? experiment_plan_from_json(read_text(*ex_config))
                                      : default_benchmark_plan("experiment_out");
      if (ex_manifest) {
        plan.synthetic.reset();
        plan.manifest = *ex_manifest;
      }
      if (ex_seed) plan.seeds = {*ex_seed};
      if (ex_inference) plan.modes = {parse_inference_mode(*ex_inference)};
      if (ex_rerank) plan.rerank = on_off(*ex_rerank);
      if (ex_k1) plan.rerank_params.k1 = *ex_k1;
      if (ex_k2) plan.rerank_params.k2 = *ex_k2;
      if (ex_lambda) plan.rerank_params.lambda = *ex_lambda;
      if (ex_out) plan.out_dir = *ex_out;
      std::erase_if(plan.variants, [&](const TrainVariant &v) {
        if (ex_mode && v.config.mode != parse_train_mode(*ex_mode)) return true;
        if (ex_flip && v.config.use_flipping_loss != on_off(*ex_flip)) return true;
        return false;
      });
      const auto result = run_experiment(plan);
      std::cout << summary_csv(result.summary);
      if (result.failed_cells > 0) {
        for (const auto &r : result.rows)
          if (!r.ok) std::cerr << "failed: " << r.variant << " seed " << r.seed << ": " << r.error << "\n";
        return kPartial;
      }
    }
  } catch (const std::invalid_argument &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const TrainingDiverged &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPartial;
  } catch (const FormatError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const IoError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kOk;
}
