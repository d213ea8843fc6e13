#include "flipreid/model.hpp"

#include <atomic>
#include <cmath>
#include <limits>

#include "flipreid/error.hpp"
#include "flipreid/rng.hpp"

namespace flipreid {

namespace {

std::uint64_t next_model_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

Matrix as_matrix(const Param &p) {
  Matrix m(p.shape.at(0), p.shape.at(1));
  std::copy(p.value.begin(), p.value.end(), m.values().begin());
  return m;
}

void fill_normal(Param &p, double stddev, Rng &rng) {
  for (double &v : p.value) v = stddev * rng.normal();
}

Matrix columns(const Matrix &m, std::size_t begin, std::size_t count) {
  Matrix out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = m(r, begin + c);
  return out;
}

void set_columns(Matrix &m, std::size_t begin, const Matrix &src) {
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < src.cols(); ++c) m(r, begin + c) = src(r, c);
}

} // namespace

Param::Param(std::vector<std::size_t> s, double fill, bool is_trainable) : shape(std::move(s)), trainable(is_trainable) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  value.assign(n, fill);
  grad.assign(n, 0.0);
}

void ModelConfig::validate() const {
  if (in_channels == 0 || height == 0 || width == 0) throw ConfigError("input shape must be positive");
  if (blocks.empty()) throw ConfigError("backbone needs at least one block");
  for (const auto &b : blocks)
    if (b.out_channels == 0 || b.kernel == 0 || b.stride == 0 || b.kernel % 2 == 0)
      throw ConfigError("backbone blocks need positive channels/stride and an odd kernel");
  if (num_regions == 0) throw ConfigError("num_regions must be positive");
  if (reduced_dim == 0) throw ConfigError("reduced_dim must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (!(clip_lo < clip_hi)) throw ConfigError("clip_lo must be below clip_hi");
  if (!(gem_init_p > 0.0) || !(gem_eps > 0.0)) throw ConfigError("GeM power and eps must be positive");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw ConfigError("bn_momentum must lie in [0, 1)");
  if (!(bn_train_eps >= 0.0) || !(bn_var_floor > 0.0)) throw ConfigError("batch-norm eps values must be non-negative");
  preprocess.validate(in_channels);
  if (feature_height() < num_regions)
    throw ConfigError("backbone output height " + std::to_string(feature_height()) + " is smaller than num_regions " +
                      std::to_string(num_regions));
}

std::size_t ModelConfig::feature_height() const {
  std::size_t h = height;
  for (const auto &b : blocks) h = conv_output_size(h, b.kernel, b.stride);
  return h;
}

std::size_t ModelConfig::feature_width() const {
  std::size_t w = width;
  for (const auto &b : blocks) w = conv_output_size(w, b.kernel, b.stride);
  return w;
}

std::size_t ModelConfig::backbone_channels() const { return blocks.back().out_channels; }

std::vector<std::size_t> ModelConfig::branch_dims() const {
  std::vector<std::size_t> dims{backbone_channels()};
  dims.insert(dims.end(), num_regions, reduced_dim);
  return dims;
}

std::size_t ModelConfig::embedding_dim() const { return backbone_channels() + num_regions * reduced_dim; }

void ModelParams::for_each(const std::function<void(const std::string &, Param &)> &fn) {
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    fn("backbone." + std::to_string(b) + ".weight", blocks[b].weight);
    fn("backbone." + std::to_string(b) + ".bias", blocks[b].bias);
  }
  fn("global.gem_p", global_gem_p);
  for (std::size_t r = 0; r < regions.size(); ++r) {
    fn("region." + std::to_string(r) + ".reduce", regions[r].reduce);
    fn("region." + std::to_string(r) + ".gem_p", regions[r].gem_p);
  }
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const auto pre = "head." + std::to_string(h) + ".";
    fn(pre + "bn_scale", heads[h].bn_scale);
    fn(pre + "bn_shift", heads[h].bn_shift);
    fn(pre + "bn_running_mean", heads[h].bn_running_mean);
    fn(pre + "bn_running_var", heads[h].bn_running_var);
    fn(pre + "dense_weight", heads[h].dense_weight);
    fn(pre + "dense_bias", heads[h].dense_bias);
  }
}

void ModelParams::for_each(const std::function<void(const std::string &, const Param &)> &fn) const {
  const_cast<ModelParams *>(this)->for_each([&](const std::string &n, Param &p) { fn(n, p); });
}

void ModelParams::zero_grad() {
  for_each([](const std::string &, Param &p) { std::fill(p.grad.begin(), p.grad.end(), 0.0); });
}

// -- classifier head -----------------------------------------------------------

HeadCache batchnorm_dense_softmax(const Matrix &x, const ClassifierHead &head, Mode mode, double train_eps,
                                  double var_floor) {
  const std::size_t N = x.rows(), D = x.cols(), K = head.dense_bias.size();
  if (head.bn_scale.size() != D || head.dense_weight.size() != K * D)
    throw ConfigError("classifier head expects " + std::to_string(head.bn_scale.size()) + " features, got " +
                      std::to_string(D));
  if (mode == Mode::train && N < 2) throw ConfigError("train-mode batch norm needs a batch of at least 2");

  HeadCache c;
  c.mode = mode;
  c.input = x;
  c.batch_mean.assign(D, 0.0);
  c.batch_var.assign(D, 0.0);
  c.inv_std.assign(D, 0.0);
  if (mode == Mode::train) {
    for (std::size_t j = 0; j < D; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < N; ++i) m += x(i, j);
      m /= double(N);
      double v = 0.0;
      for (std::size_t i = 0; i < N; ++i) v += (x(i, j) - m) * (x(i, j) - m);
      v /= double(N);
      c.batch_mean[j] = m;
      c.batch_var[j] = v;
      c.inv_std[j] = 1.0 / std::sqrt(v + train_eps);
    }
  } else {
    for (std::size_t j = 0; j < D; ++j) {
      c.batch_mean[j] = head.bn_running_mean.value[j];
      c.batch_var[j] = head.bn_running_var.value[j];
      c.inv_std[j] = 1.0 / std::sqrt(std::max(head.bn_running_var.value[j], var_floor));
    }
  }
  c.normalized = Matrix(N, D);
  Matrix logits(N, K);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < D; ++j) c.normalized(i, j) = (x(i, j) - c.batch_mean[j]) * c.inv_std[j];
    for (std::size_t k = 0; k < K; ++k) {
      double acc = head.dense_bias.value[k];
      for (std::size_t j = 0; j < D; ++j)
        acc += head.dense_weight.value[k * D + j] *
               (head.bn_scale.value[j] * c.normalized(i, j) + head.bn_shift.value[j]);
      logits(i, k) = acc;
    }
  }
  c.probabilities = softmax_rows(logits);
  return c;
}

Matrix batchnorm_dense_backward(const HeadCache &c, ClassifierHead &head, const Matrix &G, double) {
  const std::size_t N = c.input.rows(), D = c.input.cols(), K = head.dense_bias.size();
  Matrix dxhat(N, D);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const double g = G(i, k);
      if (g == 0.0) continue;
      head.dense_bias.grad[k] += g;
      for (std::size_t j = 0; j < D; ++j) {
        const double y = head.bn_scale.value[j] * c.normalized(i, j) + head.bn_shift.value[j];
        head.dense_weight.grad[k * D + j] += g * y;
        dxhat(i, j) += g * head.dense_weight.value[k * D + j];
      }
    }
  }
  // dxhat currently holds d/dy; convert through the affine part
  for (std::size_t j = 0; j < D; ++j)
    for (std::size_t i = 0; i < N; ++i) {
      head.bn_scale.grad[j] += dxhat(i, j) * c.normalized(i, j);
      head.bn_shift.grad[j] += dxhat(i, j);
      dxhat(i, j) *= head.bn_scale.value[j];
    }
  Matrix dx(N, D);
  if (c.mode == Mode::train) {
    for (std::size_t j = 0; j < D; ++j) {
      double s = 0.0, sx = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        s += dxhat(i, j);
        sx += dxhat(i, j) * c.normalized(i, j);
      }
      for (std::size_t i = 0; i < N; ++i)
        dx(i, j) = c.inv_std[j] / double(N) * (double(N) * dxhat(i, j) - s - c.normalized(i, j) * sx);
    }
  } else {
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < D; ++j) dx(i, j) = dxhat(i, j) * c.inv_std[j];
  }
  return dx;
}

void update_running_stats(ClassifierHead &head, const HeadCache &c, double momentum) {
  if (c.mode != Mode::train) return;
  for (std::size_t j = 0; j < c.batch_mean.size(); ++j) {
    head.bn_running_mean.value[j] = momentum * head.bn_running_mean.value[j] + (1.0 - momentum) * c.batch_mean[j];
    head.bn_running_var.value[j] = momentum * head.bn_running_var.value[j] + (1.0 - momentum) * c.batch_var[j];
  }
}

// -- model -----------------------------------------------------------------------

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), id_(next_model_id()) {
  cfg_.validate();
  Rng rng(seed);
  std::size_t in_c = cfg_.in_channels;
  for (const auto &b : cfg_.blocks) {
    ConvBlock blk;
    blk.kernel = b.kernel;
    blk.stride = b.stride;
    blk.weight = Param({b.out_channels, in_c, b.kernel, b.kernel}, 0.0);
    blk.bias = Param({b.out_channels}, 0.0);
    fill_normal(blk.weight, std::sqrt(2.0 / double(in_c * b.kernel * b.kernel)), rng);
    params_.blocks.push_back(std::move(blk));
    in_c = b.out_channels;
  }
  params_.global_gem_p = Param({1}, cfg_.gem_init_p);
  for (std::size_t r = 0; r < cfg_.num_regions; ++r) {
    RegionBranch reg;
    reg.reduce = Param({cfg_.reduced_dim, in_c}, 0.0);
    fill_normal(reg.reduce, std::sqrt(2.0 / double(in_c)), rng);
    reg.gem_p = Param({1}, cfg_.gem_init_p);
    params_.regions.push_back(std::move(reg));
  }
  for (auto d : cfg_.branch_dims()) {
    ClassifierHead h;
    h.bn_scale = Param({d}, 1.0);
    h.bn_shift = Param({d}, 0.0);
    h.bn_running_mean = Param({d}, 0.0, false);
    h.bn_running_var = Param({d}, 1.0, false);
    h.dense_weight = Param({cfg_.num_classes, d}, 0.0);
    fill_normal(h.dense_weight, 0.01, rng);
    h.dense_bias = Param({cfg_.num_classes}, 0.0);
    params_.heads.push_back(std::move(h));
  }
  params_.clip_lo = cfg_.clip_lo;
  params_.clip_hi = cfg_.clip_hi;
}

Model::Model(ModelConfig cfg, ModelParams params)
    : cfg_(std::move(cfg)), params_(std::move(params)), id_(next_model_id()) {
  cfg_.validate();
  if (params_.blocks.size() != cfg_.blocks.size() || params_.regions.size() != cfg_.num_regions ||
      params_.heads.size() != cfg_.num_regions + 1)
    throw ConfigError("parameter set does not match model configuration");
}

Model::Model(const Model &o) : cfg_(o.cfg_), params_(o.params_), id_(next_model_id()) {}

Model &Model::operator=(const Model &o) {
  if (this != &o) {
    cfg_ = o.cfg_;
    params_ = o.params_;
    id_ = next_model_id();
  }
  return *this;
}

void Model::check_cache(std::uint64_t cache_id) const {
  if (cache_id != id_) throw ConfigError("forward cache was produced by a different model instance");
}

Tensor4 Model::backbone_forward(const Tensor4 &x) const {
  if (x.channels() != cfg_.in_channels)
    throw ConfigError("backbone expects " + std::to_string(cfg_.in_channels) + " input channels");
  Tensor4 a = x;
  for (const auto &blk : params_.blocks) {
    a = conv2d_forward(a, blk.weight.value, blk.bias.value, blk.weight.shape[0], blk.kernel, blk.stride);
    relu_inplace(a);
  }
  if (a.height() < cfg_.num_regions)
    throw ConfigError("backbone output height " + std::to_string(a.height()) + " is smaller than num_regions");
  return a;
}

EmbedCache Model::embed(const Tensor4 &x) const {
  if (x.channels() != cfg_.in_channels)
    throw ConfigError("model expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                      std::to_string(x.channels()));
  EmbedCache c;
  c.model_id = id_;
  Tensor4 a = x;
  for (const auto &blk : params_.blocks) {
    c.block_inputs.push_back(a);
    Tensor4 z = conv2d_forward(a, blk.weight.value, blk.bias.value, blk.weight.shape[0], blk.kernel, blk.stride);
    a = z;
    relu_inplace(a);
    c.block_pre.push_back(std::move(z));
  }
  c.maps = std::move(a);

  const std::size_t N = x.batch();
  c.features = Matrix(N, cfg_.embedding_dim());
  c.global_pooled = gem_pool(c.maps, params_.global_gem_p.value[0], cfg_.gem_eps);
  set_columns(c.features, 0, clip(c.global_pooled, params_.clip_lo, params_.clip_hi));

  auto stripes = slice_regions(c.maps, cfg_.num_regions);
  std::size_t col = cfg_.backbone_channels();
  for (std::size_t r = 0; r < cfg_.num_regions; ++r) {
    const auto &reg = params_.regions[r];
    c.region_reduced.push_back(reduce_channels(stripes[r], as_matrix(reg.reduce)));
    c.region_pooled.push_back(gem_pool(c.region_reduced.back(), reg.gem_p.value[0], cfg_.gem_eps));
    set_columns(c.features, col, clip(c.region_pooled.back(), params_.clip_lo, params_.clip_hi));
    col += cfg_.reduced_dim;
  }
  return c;
}

void Model::embed_backward(const EmbedCache &c, const Matrix &grad_features) {
  check_cache(c.model_id);
  if (grad_features.rows() != c.features.rows() || grad_features.cols() != c.features.cols())
    throw ConfigError("feature gradient shape does not match the forward cache");

  const double lo = params_.clip_lo, hi = params_.clip_hi;
  const std::size_t C = cfg_.backbone_channels();

  Matrix gg = clip_backward(c.global_pooled, lo, hi, columns(grad_features, 0, C));
  GemGrad g = gem_pool_backward(c.maps, params_.global_gem_p.value[0], cfg_.gem_eps, c.global_pooled, gg);
  params_.global_gem_p.grad[0] += g.grad_p;
  Tensor4 dmaps = std::move(g.grad_maps);

  const auto bounds = region_bounds(c.maps.height(), cfg_.num_regions);
  auto stripes = slice_regions(c.maps, cfg_.num_regions);
  std::size_t col = C;
  for (std::size_t r = 0; r < cfg_.num_regions; ++r) {
    auto &reg = params_.regions[r];
    Matrix gr = clip_backward(c.region_pooled[r], lo, hi, columns(grad_features, col, cfg_.reduced_dim));
    col += cfg_.reduced_dim;
    GemGrad rg = gem_pool_backward(c.region_reduced[r], reg.gem_p.value[0], cfg_.gem_eps, c.region_pooled[r], gr);
    reg.gem_p.grad[0] += rg.grad_p;
    Tensor4 dstripe;
    Matrix dkernel(cfg_.reduced_dim, C);
    reduce_channels_backward(stripes[r], as_matrix(reg.reduce), rg.grad_maps, dstripe, dkernel);
    for (std::size_t i = 0; i < dkernel.size(); ++i) reg.reduce.grad[i] += dkernel.values()[i];
    const std::size_t row0 = bounds[r].first, W = c.maps.width();
    for (std::size_t n = 0; n < dmaps.batch(); ++n)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double *src = dstripe.channel_ptr(n, ch);
        double *dst = dmaps.channel_ptr(n, ch) + row0 * W;
        for (std::size_t i = 0; i < dstripe.plane(); ++i) dst[i] += src[i];
      }
  }

  Tensor4 grad = std::move(dmaps);
  for (std::size_t b = params_.blocks.size(); b-- > 0;) {
    auto &blk = params_.blocks[b];
    relu_backward_inplace(c.block_pre[b], grad);
    Tensor4 gx;
    conv2d_backward(c.block_inputs[b], blk.weight.value, grad, blk.kernel, blk.stride, b > 0 ? &gx : nullptr,
                    blk.weight.grad, blk.bias.grad);
    grad = std::move(gx);
  }
}

ClassifyCache Model::classify(const Matrix &features, Mode mode) const {
  if (features.cols() != cfg_.embedding_dim())
    throw ConfigError("classifier expects " + std::to_string(cfg_.embedding_dim()) + "-dim features, got " +
                      std::to_string(features.cols()));
  ClassifyCache c;
  c.model_id = id_;
  std::size_t col = 0;
  const auto dims = cfg_.branch_dims();
  for (std::size_t h = 0; h < dims.size(); ++h) {
    c.heads.push_back(batchnorm_dense_softmax(columns(features, col, dims[h]), params_.heads[h], mode,
                                              cfg_.bn_train_eps, cfg_.bn_var_floor));
    col += dims[h];
  }
  return c;
}

Matrix Model::classify_backward(const ClassifyCache &c, std::span<const Matrix> grad_logits) {
  check_cache(c.model_id);
  if (grad_logits.size() != c.heads.size()) throw ConfigError("one logit gradient per classifier head expected");
  const std::size_t N = c.heads.front().input.rows();
  Matrix grad(N, cfg_.embedding_dim());
  std::size_t col = 0;
  for (std::size_t h = 0; h < c.heads.size(); ++h) {
    const std::size_t d = c.heads[h].input.cols();
    if (grad_logits[h].size() != 0)
      set_columns(grad, col,
                  batchnorm_dense_backward(c.heads[h], params_.heads[h], grad_logits[h], cfg_.bn_var_floor));
    col += d;
  }
  return grad;
}

void Model::commit_running_stats(const ClassifyCache &c) {
  check_cache(c.model_id);
  for (std::size_t h = 0; h < c.heads.size(); ++h) update_running_stats(params_.heads[h], c.heads[h], cfg_.bn_momentum);
}

ForwardResult Model::forward(const Tensor4 &x, Mode mode) const {
  ForwardResult r;
  r.embed = embed(x);
  r.features = r.embed.features;
  r.classify = classify(r.features, mode);
  for (const auto &h : r.classify.heads) r.probabilities.push_back(h.probabilities);
  return r;
}

void Model::backward(const ForwardResult &fwd, const Matrix &grad_features, std::span<const Matrix> grad_logits) {
  Matrix g = classify_backward(fwd.classify, grad_logits);
  if (grad_features.size() != 0) {
    if (grad_features.rows() != g.rows() || grad_features.cols() != g.cols())
      throw ConfigError("feature gradient shape does not match the forward cache");
    for (std::size_t i = 0; i < g.size(); ++i) g.values()[i] += grad_features.values()[i];
  }
  embed_backward(fwd.embed, g);
}

double Model::kink_margin(const EmbedCache &c) const {
  double m = std::numeric_limits<double>::infinity();
  for (const auto &z : c.block_pre)
    for (double v : z.values()) m = std::min(m, std::abs(v));
  const double eps = cfg_.gem_eps;
  auto floor_margin = [&](const Tensor4 &t) {
    for (double v : t.values())
      if (v != 0.0) m = std::min(m, std::abs(v - eps));
  };
  floor_margin(c.maps);
  for (const auto &t : c.region_reduced) floor_margin(t);
  auto clip_margin = [&](const Matrix &pooled) {
    for (double v : pooled.values()) {
      if (v <= eps * (1.0 + 1e-9)) continue; // fully floored: constant under small perturbations
      m = std::min({m, std::abs(v - params_.clip_lo), std::abs(v - params_.clip_hi)});
    }
  };
  clip_margin(c.global_pooled);
  for (const auto &p : c.region_pooled) clip_margin(p);
  return m;
}

ModelParams finite_diff_gradient(const LossFn &loss_fn, const Model &model, double step) {
  Model work = model;
  ModelParams out = model.params();
  std::vector<Param *> targets;
  out.for_each([&](const std::string &, Param &p) { targets.push_back(&p); });
  std::size_t idx = 0;
  work.params().for_each([&](const std::string &, Param &p) {
    Param &dst = *targets[idx++];
    std::fill(dst.grad.begin(), dst.grad.end(), 0.0);
    if (!p.trainable) return;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + step;
      const double lp = loss_fn(work);
      p.value[i] = orig - step;
      const double lm = loss_fn(work);
      p.value[i] = orig;
      dst.grad[i] = (lp - lm) / (2.0 * step);
    }
  });
  return out;
}

std::vector<double> finite_diff_gradient(const std::function<double(std::span<const double>)> &loss_fn,
                                         std::vector<double> theta, double step) {
  std::vector<double> g(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = theta[i];
    theta[i] = orig + step;
    const double lp = loss_fn(theta);
    theta[i] = orig - step;
    const double lm = loss_fn(theta);
    theta[i] = orig;
    g[i] = (lp - lm) / (2.0 * step);
  }
  return g;
}

} // namespace flipreid
