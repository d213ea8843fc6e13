#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flipreid/eval.hpp"
#include "flipreid/rerank.hpp"
#include "flipreid/synth_data.hpp"
#include "flipreid/training.hpp"

namespace flipreid {

struct TrainVariant {
  std::string name;
  TrainConfig config; // seed is replaced per experiment seed
};

struct ExperimentPlan {
  /// Exactly one of the two sources is set.
  std::optional<DatasetSpec> synthetic;
  std::optional<std::filesystem::path> manifest;
  /// Synthetic data only: share of each test identity sent to the query set
  /// and share of identities used for training.
  double query_fraction = 0.25;
  double train_identity_fraction = 0.5;

  std::vector<TrainVariant> variants;
  std::vector<InferenceMode> modes{InferenceMode::single, InferenceMode::double_image};
  bool rerank = false;
  RerankParams rerank_params;
  CameraProtocol protocol = CameraProtocol::standard;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out_dir = "experiment_out";

  void validate() const;
};

/// 20 identities, 3 cameras, asymmetry 0.8, heavy pixel noise.
DatasetSpec benchmark_dataset_spec();
/// Training recipe shared by the default variants.
TrainConfig benchmark_train_config();
/// baseline, flipreid (no flipping loss) and flipreid+flip (w_flip 4) on the
/// synthetic benchmark, single and double inference, seeds 0..4.
ExperimentPlan default_benchmark_plan(const std::filesystem::path &out_dir);

std::string dataset_spec_to_json(const DatasetSpec &spec);
/// Absent keys keep the DatasetSpec defaults.
DatasetSpec dataset_spec_from_json(std::string_view json);

std::string experiment_plan_to_json(const ExperimentPlan &plan);
/// Absent keys keep the defaults of default_benchmark_plan().
ExperimentPlan experiment_plan_from_json(std::string_view json);

/// Synthetic data for one experiment seed (the dataset seed is mixed with it).
DatasetSplit experiment_dataset(const ExperimentPlan &plan, std::uint64_t seed);

struct ResultRow {
  std::string variant;
  std::string label; // row family such as "1.1" or "3.3"
  InferenceMode mode = InferenceMode::single;
  bool rerank = false;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double mAP = 0.0;
  double rank1 = 0.0;
  double flip_gap = 0.0;
  std::string config_hash;
  std::string checkpoint;
  std::string query_embedding_hash;
  std::string gallery_embedding_hash;
};

struct CellSummary {
  std::string variant;
  std::string label;
  InferenceMode mode = InferenceMode::single;
  bool rerank = false;
  std::size_t runs = 0;
  std::size_t failures = 0;
  double mAP_mean = 0.0, mAP_std = 0.0;
  double rank1_mean = 0.0, rank1_std = 0.0;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<CellSummary> summary;
  std::size_t failed_cells = 0;
};

/// Worker count from FLIPREID_THREADS (default 1).
std::size_t worker_threads();

/// Trains every (variant, seed) cell, embeds, evaluates and writes
/// results.csv, results.json, summary.csv and per-cell artifacts under
/// out_dir. Failing cells are recorded and the run continues. Output files
/// do not depend on the worker count.
ExperimentResult run_experiment(const ExperimentPlan &plan);

std::string results_csv(const std::vector<ResultRow> &rows);
std::string summary_csv(const std::vector<CellSummary> &summary);

/// Evaluation of two "FREM" files, optionally re-ranked.
EvalReport eval_embeddings(const std::filesystem::path &query_file, const std::filesystem::path &gallery_file,
                           bool rerank, const RerankParams &params,
                           CameraProtocol protocol = CameraProtocol::standard,
                           std::vector<std::string> *warnings = nullptr);
EvalReport eval_embeddings(const EmbeddingSet &query, const EmbeddingSet &gallery, bool rerank,
                           const RerankParams &params, CameraProtocol protocol = CameraProtocol::standard,
                           std::vector<std::string> *warnings = nullptr);

} // namespace flipreid
