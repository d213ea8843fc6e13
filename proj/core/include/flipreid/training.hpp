#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flipreid/losses.hpp"
#include "flipreid/model.hpp"
#include "flipreid/rng.hpp"
#include "flipreid/synth_data.hpp"

namespace flipreid {

struct PKBatchSpec {
  std::size_t P = 4; // identities per batch
  std::size_t K = 4; // instances per identity

  void validate() const;
};

enum class TrainMode { baseline, flipreid };

std::string_view to_string(TrainMode m);
TrainMode parse_train_mode(std::string_view s);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct TrainConfig {
  PKBatchSpec batch;
  std::size_t epochs = 30;
  /// 0 selects ceil(train samples / (P * K)).
  std::size_t steps_per_epoch = 0;
  double learning_rate = 3e-4;
  AdamHyper adam;
  LossWeights loss;
  AugmentParams augment;
  TrainMode mode = TrainMode::baseline;
  bool use_flipping_loss = false;
  std::uint64_t seed = 0;
  /// Lower bound enforced on GeM powers after each update.
  double min_gem_p = 0.1;
  /// Architecture; num_classes is overwritten with the train identity count.
  ModelConfig model;

  void validate() const;
  /// Weights actually applied: w_flip is zeroed unless the flipping loss is on.
  LossWeights effective_weights() const;
};

std::string train_config_to_json(const TrainConfig &cfg);
/// Parses a JSON document; absent keys keep their defaults.
TrainConfig train_config_from_json(std::string_view json);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  LossReport report;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_seconds;
};

/// One JSON object per line: {step, epoch, total, triplet, ce, flip, active_triplet_fraction}.
std::string history_to_jsonl(const TrainHistory &history);

/// P identities x K instances; identities with fewer than K samples are drawn
/// with replacement.
std::vector<Sample> pk_sample(std::span<const Sample> train, const PKBatchSpec &spec, Rng &rng);

struct AdamState {
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;
};

/// Bias-corrected Adam on every trainable parameter, using the grad slots.
void optimizer_step(ModelParams &params, AdamState &state, double learning_rate, const AdamHyper &hyper);

struct StepOutcome {
  LossReport report;
  ClassifyCache classify;
  double kink_margin = 0.0;
};

/// Loss (and, when `accumulate_grads`, parameter gradients) of one step on
/// already-augmented, pre-processed images. For TrainMode::flipreid `images`
/// holds 2N rows: the N originals followed by their mirrors, run as a single
/// forward pass with shared weights. Does not modify parameter values.
StepOutcome step_loss(Model &model, const Tensor4 &images, std::span<const std::uint32_t> labels, TrainMode mode,
                      const LossWeights &weights, bool accumulate_grads);

/// Baseline step: augment (random flip included), embed once, triplet + CE,
/// one Adam update.
LossReport train_step_baseline(Model &model, AdamState &state, std::span<const Sample> batch,
                               std::span<const std::uint32_t> labels, const TrainConfig &cfg, Rng &aug_rng,
                               std::size_t step_index = 0);

/// FlipReID step: augment without random flip, embed the image and its mirror,
/// triplet and classifier on the mean feature, optional flipping loss.
LossReport train_step_flipreid(Model &model, AdamState &state, std::span<const Sample> batch,
                               std::span<const std::uint32_t> labels, const TrainConfig &cfg, Rng &aug_rng,
                               std::size_t step_index = 0);

struct TrainResult {
  Model model;
  TrainHistory history;
  std::map<std::uint32_t, std::uint32_t> class_of_identity;
};

/// Builds a model for the train identities and runs epochs x steps_per_epoch
/// steps. Deterministic for a fixed config. Throws TrainingDiverged with the
/// offending step on a non-finite loss.
TrainResult train(const TrainConfig &cfg, std::span<const Sample> train_set,
                  const std::optional<std::filesystem::path> &checkpoint_path = std::nullopt);

} // namespace flipreid
