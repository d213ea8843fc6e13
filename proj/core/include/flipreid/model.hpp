#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flipreid/ops.hpp"
#include "flipreid/tensor.hpp"

namespace flipreid {

enum class Mode { train, eval };

/// A trainable (or stored) array and its gradient slot.
struct Param {
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool trainable = true;

  Param() = default;
  Param(std::vector<std::size_t> s, double fill, bool is_trainable = true);
  std::size_t size() const { return value.size(); }
};

struct BlockConfig {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 2;
};

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 16;
  std::vector<BlockConfig> blocks{{16, 3, 2}, {32, 3, 2}};
  std::size_t num_regions = 2;
  std::size_t reduced_dim = 8;
  std::size_t num_classes = 10;
  double clip_lo = 0.0;
  double clip_hi = 8.0;
  double gem_init_p = 3.0;
  double gem_eps = 1e-6;
  double bn_momentum = 0.9;
  /// Added to the batch variance in train mode.
  double bn_train_eps = 1e-10;
  /// Lower bound applied to the running variance in eval mode.
  double bn_var_floor = 1e-5;
  PreprocessConfig preprocess;

  void validate() const;
  std::size_t feature_height() const;
  std::size_t feature_width() const;
  std::size_t backbone_channels() const;
  /// Embedding width of each branch; index 0 is the global branch.
  std::vector<std::size_t> branch_dims() const;
  std::size_t embedding_dim() const;
};

struct ConvBlock {
  std::size_t kernel = 3;
  std::size_t stride = 2;
  Param weight; // [out, in, k, k]
  Param bias;   // [out]
};

struct RegionBranch {
  Param reduce; // [reduced, channels]
  Param gem_p;  // [1]
};

/// Batch-norm + dense classifier attached to one branch.
struct ClassifierHead {
  Param bn_scale, bn_shift;
  Param bn_running_mean, bn_running_var; // not trainable
  Param dense_weight;                    // [classes, dim]
  Param dense_bias;                      // [classes]
};

struct ModelParams {
  std::vector<ConvBlock> blocks;
  Param global_gem_p;
  std::vector<RegionBranch> regions;
  std::vector<ClassifierHead> heads;
  double clip_lo = 0.0;
  double clip_hi = 8.0;

  /// Visits every stored array with a stable name, in a fixed order.
  void for_each(const std::function<void(const std::string &, Param &)> &fn);
  void for_each(const std::function<void(const std::string &, const Param &)> &fn) const;
  void zero_grad();
};

/// Intermediates of the inference model (pre-processing excluded).
struct EmbedCache {
  std::uint64_t model_id = 0;
  std::vector<Tensor4> block_inputs; // input of each conv block
  std::vector<Tensor4> block_pre;    // pre-activation of each conv block
  Tensor4 maps;                      // backbone output
  Matrix global_pooled;
  std::vector<Tensor4> region_reduced;
  std::vector<Matrix> region_pooled;
  Matrix features; // concatenated clipped embeddings
};

struct HeadCache {
  Mode mode = Mode::eval;
  Matrix input;
  Matrix normalized;
  std::vector<double> batch_mean, batch_var, inv_std;
  Matrix probabilities;
};

struct ClassifyCache {
  std::uint64_t model_id = 0;
  std::vector<HeadCache> heads;
};

struct ForwardResult {
  Matrix features;
  std::vector<Matrix> probabilities; // per head
  EmbedCache embed;
  ClassifyCache classify;
};

/// Batch-norm (batch statistics in train mode, running statistics in eval
/// mode), dense layer and softmax for one branch.
HeadCache batchnorm_dense_softmax(const Matrix &embedding, const ClassifierHead &head, Mode mode,
                                  double train_eps, double var_floor);

/// Returns the gradient with respect to `cache.input`; accumulates the
/// head's parameter gradients.
Matrix batchnorm_dense_backward(const HeadCache &cache, ClassifierHead &head, const Matrix &grad_logits,
                                double var_floor);

void update_running_stats(ClassifierHead &head, const HeadCache &cache, double momentum);

class Model {
public:
  Model(ModelConfig cfg, std::uint64_t seed);
  Model(ModelConfig cfg, ModelParams params);
  Model(const Model &other);
  Model &operator=(const Model &other);
  Model(Model &&) noexcept = default;
  Model &operator=(Model &&) noexcept = default;

  const ModelConfig &config() const { return cfg_; }
  ModelParams &params() { return params_; }
  const ModelParams &params() const { return params_; }
  std::uint64_t id() const { return id_; }

  std::size_t embedding_dim() const { return cfg_.embedding_dim(); }

  Tensor4 backbone_forward(const Tensor4 &x) const;

  /// Backbone, global and regional branches up to the clipping layers.
  EmbedCache embed(const Tensor4 &x) const;
  /// Accumulates parameter gradients for d(loss)/d(features).
  void embed_backward(const EmbedCache &cache, const Matrix &grad_features);

  ClassifyCache classify(const Matrix &features, Mode mode) const;
  /// Accumulates head gradients and returns d(loss)/d(features). Heads with an
  /// empty gradient matrix are skipped.
  Matrix classify_backward(const ClassifyCache &cache, std::span<const Matrix> grad_logits);
  void commit_running_stats(const ClassifyCache &cache);

  ForwardResult forward(const Tensor4 &x, Mode mode) const;
  void backward(const ForwardResult &fwd, const Matrix &grad_features, std::span<const Matrix> grad_logits);

  void zero_grad() { params_.zero_grad(); }

  /// Smallest distance of any ReLU pre-activation, GeM floor or clip bound
  /// from its kink in `cache`. Finite-difference checks are unreliable below
  /// the perturbation size.
  double kink_margin(const EmbedCache &cache) const;

private:
  void check_cache(std::uint64_t cache_id) const;

  ModelConfig cfg_;
  ModelParams params_;
  std::uint64_t id_;
};

/// Central differences (L(theta + h) - L(theta - h)) / 2h for every trainable
/// scalar. The returned parameter set carries the estimates in its grad slots.
using LossFn = std::function<double(const Model &)>;
ModelParams finite_diff_gradient(const LossFn &loss_fn, const Model &model, double step);

/// Same oracle on a flat vector.
std::vector<double> finite_diff_gradient(const std::function<double(std::span<const double>)> &loss_fn,
                                         std::vector<double> theta, double step);

} // namespace flipreid
