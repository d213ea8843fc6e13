#include "flipreid/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "flipreid/checkpoint.hpp"
#include "flipreid/error.hpp"

namespace flipreid {

using nlohmann::json;

void PKBatchSpec::validate() const {
  if (P < 2 || K < 2) throw ValidationError("PK batch needs P >= 2 and K >= 2");
}

std::string_view to_string(TrainMode m) { return m == TrainMode::baseline ? "baseline" : "flipreid"; }

TrainMode parse_train_mode(std::string_view s) {
  if (s == "baseline") return TrainMode::baseline;
  if (s == "flipreid") return TrainMode::flipreid;
  throw ValidationError("unknown training mode \"" + std::string(s) + "\" (expected baseline or flipreid)");
}

void TrainConfig::validate() const {
  batch.validate();
  loss.validate();
  augment.validate();
  if (!(learning_rate >= 0.0)) throw ValidationError("learning_rate must be non-negative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0))
    throw ValidationError("invalid Adam hyperparameters");
  if (use_flipping_loss && mode != TrainMode::flipreid)
    throw ValidationError("the flipping loss requires mode = flipreid");
  if (!(min_gem_p > 0.0)) throw ValidationError("min_gem_p must be positive");
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = loss;
  if (!(mode == TrainMode::flipreid && use_flipping_loss)) w.w_flip = 0.0;
  return w;
}

// -- JSON --------------------------------------------------------------------------

namespace {

json model_to_json(const ModelConfig &m) {
  json blocks = json::array();
  for (const auto &b : m.blocks) blocks.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"stride", b.stride}});
  return {{"in_channels", m.in_channels},
          {"height", m.height},
          {"width", m.width},
          {"blocks", blocks},
          {"num_regions", m.num_regions},
          {"reduced_dim", m.reduced_dim},
          {"clip_lo", m.clip_lo},
          {"clip_hi", m.clip_hi},
          {"gem_init_p", m.gem_init_p},
          {"gem_eps", m.gem_eps},
          {"bn_momentum", m.bn_momentum},
          {"bn_train_eps", m.bn_train_eps},
          {"bn_var_floor", m.bn_var_floor},
          {"channel_mean", m.preprocess.channel_mean},
          {"channel_std", m.preprocess.channel_std}};
}

template <class T> void read_opt(const json &j, const char *key, T &dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void model_from_json(const json &j, ModelConfig &m) {
  read_opt(j, "in_channels", m.in_channels);
  read_opt(j, "height", m.height);
  read_opt(j, "width", m.width);
  if (j.contains("blocks")) {
    m.blocks.clear();
    for (const auto &b : j.at("blocks")) {
      BlockConfig bc;
      read_opt(b, "out_channels", bc.out_channels);
      read_opt(b, "kernel", bc.kernel);
      read_opt(b, "stride", bc.stride);
      m.blocks.push_back(bc);
    }
  }
  read_opt(j, "num_regions", m.num_regions);
  read_opt(j, "reduced_dim", m.reduced_dim);
  read_opt(j, "clip_lo", m.clip_lo);
  read_opt(j, "clip_hi", m.clip_hi);
  read_opt(j, "gem_init_p", m.gem_init_p);
  read_opt(j, "gem_eps", m.gem_eps);
  read_opt(j, "bn_momentum", m.bn_momentum);
  read_opt(j, "bn_train_eps", m.bn_train_eps);
  read_opt(j, "bn_var_floor", m.bn_var_floor);
  read_opt(j, "channel_mean", m.preprocess.channel_mean);
  read_opt(j, "channel_std", m.preprocess.channel_std);
}

json range_json(const std::pair<double, double> &r) { return json::array({r.first, r.second}); }

void read_range(const json &j, const char *key, std::pair<double, double> &r) {
  if (!j.contains(key)) return;
  const auto &a = j.at(key);
  if (!a.is_array() || a.size() != 2) throw ValidationError(std::string(key) + " must be a two-element array");
  r = {a[0].get<double>(), a[1].get<double>()};
}

} // namespace

std::string train_config_to_json(const TrainConfig &c) {
  json j = {
      {"batch", {{"P", c.batch.P}, {"K", c.batch.K}}},
      {"epochs", c.epochs},
      {"steps_per_epoch", c.steps_per_epoch},
      {"learning_rate", c.learning_rate},
      {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}, {"weight_decay", c.adam.weight_decay}}},
      {"loss",
       {{"w_triplet", c.loss.w_triplet},
        {"w_ce", c.loss.w_ce},
        {"w_flip", c.loss.w_flip},
        {"triplet_margin", c.loss.triplet_margin},
        {"soft_margin", c.loss.soft_margin}}},
      {"augment",
       {{"flip_prob", c.augment.flip_prob},
        {"erase_prob", c.augment.erase_prob},
        {"erase_area_range", range_json(c.augment.erase_area_range)},
        {"erase_aspect_range", range_json(c.augment.erase_aspect_range)},
        {"grayscale_patch_prob", c.augment.grayscale_patch_prob},
        {"grayscale_patch_area_range", range_json(c.augment.grayscale_patch_area_range)}}},
      {"mode", std::string(to_string(c.mode))},
      {"use_flipping_loss", c.use_flipping_loss},
      {"seed", c.seed},
      {"min_gem_p", c.min_gem_p},
      {"model", model_to_json(c.model)},
  };
  return j.dump(2);
}

TrainConfig train_config_from_json(std::string_view text) {
  TrainConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error &e) {
    throw ValidationError(std::string("train config is not valid JSON: ") + e.what());
  }
  try {
    if (j.contains("batch")) {
      read_opt(j["batch"], "P", c.batch.P);
      read_opt(j["batch"], "K", c.batch.K);
    }
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "steps_per_epoch", c.steps_per_epoch);
    read_opt(j, "learning_rate", c.learning_rate);
    if (j.contains("adam")) {
      const auto &a = j["adam"];
      read_opt(a, "beta1", c.adam.beta1);
      read_opt(a, "beta2", c.adam.beta2);
      read_opt(a, "eps", c.adam.eps);
      read_opt(a, "weight_decay", c.adam.weight_decay);
    }
    if (j.contains("loss")) {
      const auto &l = j["loss"];
      read_opt(l, "w_triplet", c.loss.w_triplet);
      read_opt(l, "w_ce", c.loss.w_ce);
      read_opt(l, "w_flip", c.loss.w_flip);
      read_opt(l, "triplet_margin", c.loss.triplet_margin);
      read_opt(l, "soft_margin", c.loss.soft_margin);
    }
    if (j.contains("augment")) {
      const auto &a = j["augment"];
      read_opt(a, "flip_prob", c.augment.flip_prob);
      read_opt(a, "erase_prob", c.augment.erase_prob);
      read_range(a, "erase_area_range", c.augment.erase_area_range);
      read_range(a, "erase_aspect_range", c.augment.erase_aspect_range);
      read_opt(a, "grayscale_patch_prob", c.augment.grayscale_patch_prob);
      read_range(a, "grayscale_patch_area_range", c.augment.grayscale_patch_area_range);
    }
    if (j.contains("mode")) c.mode = parse_train_mode(j["mode"].get<std::string>());
    read_opt(j, "use_flipping_loss", c.use_flipping_loss);
    read_opt(j, "seed", c.seed);
    read_opt(j, "min_gem_p", c.min_gem_p);
    if (j.contains("model")) model_from_json(j["model"], c.model);
  } catch (const json::exception &e) {
    throw ValidationError(std::string("train config has a field of the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

std::string history_to_jsonl(const TrainHistory &h) {
  std::ostringstream out;
  for (const auto &s : h.steps) {
    json j = {{"step", s.step},
              {"epoch", s.epoch},
              {"total", s.report.total},
              {"triplet", s.report.triplet},
              {"ce", s.report.cross_entropy},
              {"flip", s.report.flipping},
              {"active_triplet_fraction", s.report.active_triplet_fraction}};
    out << j.dump() << '\n';
  }
  return out.str();
}

// -- sampling ----------------------------------------------------------------------

std::vector<Sample> pk_sample(std::span<const Sample> train, const PKBatchSpec &spec, Rng &rng) {
  spec.validate();
  std::map<std::uint32_t, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < train.size(); ++i) by_id[train[i].identity].push_back(i);
  if (by_id.size() < spec.P)
    throw ConfigError("pk_sample: " + std::to_string(by_id.size()) + " train identities, P = " + std::to_string(spec.P));

  std::vector<std::uint32_t> ids;
  for (const auto &kv : by_id) ids.push_back(kv.first);
  for (std::size_t i = 0; i < spec.P; ++i)
    std::swap(ids[i], ids[static_cast<std::size_t>(rng.uniform_int(std::int64_t(i), std::int64_t(ids.size()) - 1))]);

  std::vector<Sample> batch;
  batch.reserve(spec.P * spec.K);
  for (std::size_t i = 0; i < spec.P; ++i) {
    auto pool = by_id[ids[i]];
    for (std::size_t k = 0; k < pool.size(); ++k)
      std::swap(pool[k], pool[static_cast<std::size_t>(rng.uniform_int(std::int64_t(k), std::int64_t(pool.size()) - 1))]);
    for (std::size_t k = 0; k < spec.K; ++k) {
      const std::size_t idx =
          k < pool.size() ? pool[k] : pool[static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(pool.size()) - 1))];
      batch.push_back(train[idx]);
    }
  }
  return batch;
}

// -- optimisation --------------------------------------------------------------------

void optimizer_step(ModelParams &params, AdamState &state, double lr, const AdamHyper &hyper) {
  std::vector<Param *> trainable;
  params.for_each([&](const std::string &, Param &p) {
    if (p.trainable) trainable.push_back(&p);
  });
  if (state.m.empty()) {
    for (auto *p : trainable) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  if (state.m.size() != trainable.size()) throw ConfigError("optimizer state does not match the parameter set");
  ++state.t;
  const double c1 = 1.0 - std::pow(hyper.beta1, double(state.t));
  const double c2 = 1.0 - std::pow(hyper.beta2, double(state.t));
  for (std::size_t k = 0; k < trainable.size(); ++k) {
    Param &p = *trainable[k];
    auto &m = state.m[k];
    auto &v = state.v[k];
    if (m.size() != p.size()) throw ConfigError("optimizer state does not match the parameter set");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i] + hyper.weight_decay * p.value[i];
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
      p.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + hyper.eps);
    }
  }
}

// -- steps ---------------------------------------------------------------------------

StepOutcome step_loss(Model &model, const Tensor4 &images, std::span<const std::uint32_t> labels, TrainMode mode,
                      const LossWeights &w, bool accumulate_grads) {
  const bool flip = mode == TrainMode::flipreid;
  const std::size_t N = labels.size();
  if (images.batch() != (flip ? 2 * N : N))
    throw ConfigError("step_loss: expected " + std::to_string(flip ? 2 * N : N) + " images, got " +
                      std::to_string(images.batch()));

  EmbedCache ec = model.embed(images);
  const std::size_t D = ec.features.cols();
  Matrix feat(N, D), f_orig, f_flip;
  if (flip) {
    f_orig = Matrix(N, D);
    f_flip = Matrix(N, D);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t k = 0; k < D; ++k) {
        f_orig(i, k) = ec.features(i, k);
        f_flip(i, k) = ec.features(N + i, k);
        feat(i, k) = 0.5 * (f_orig(i, k) + f_flip(i, k));
      }
  } else {
    feat = ec.features;
  }

  const TripletResult trip = batch_hard_triplet(feat, labels, w.triplet_margin, w.soft_margin);
  StepOutcome out;
  out.classify = model.classify(feat, Mode::train);
  std::vector<Matrix> probs;
  for (const auto &h : out.classify.heads) probs.push_back(h.probabilities);
  CrossEntropyResult ce = categorical_cross_entropy(probs, labels);

  const bool use_flip = flip && w.w_flip > 0.0;
  FlipLossResult fl;
  if (use_flip) fl = flipping_loss(f_orig, f_flip);

  out.report = total_loss(trip.loss, ce.loss, use_flip ? fl.loss : 0.0, trip.active_fraction, w);
  out.kink_margin = std::min(model.kink_margin(ec), trip.kink_margin);
  if (!accumulate_grads) return out;

  for (auto &g : ce.grad_logits)
    for (double &v : g.values()) v *= w.w_ce;
  Matrix gfeat = model.classify_backward(out.classify, ce.grad_logits);
  for (std::size_t i = 0; i < gfeat.size(); ++i) gfeat.values()[i] += w.w_triplet * trip.grad.values()[i];

  if (!flip) {
    model.embed_backward(ec, gfeat);
    return out;
  }
  Matrix gF(2 * N, D);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < D; ++k) {
      gF(i, k) = 0.5 * gfeat(i, k) + (use_flip ? w.w_flip * fl.grad_original(i, k) : 0.0);
      gF(N + i, k) = 0.5 * gfeat(i, k) + (use_flip ? w.w_flip * fl.grad_flipped(i, k) : 0.0);
    }
  model.embed_backward(ec, gF);
  return out;
}

namespace {

LossReport apply_step(Model &model, AdamState &state, const std::vector<Image> &images,
                      std::span<const std::uint32_t> labels, const TrainConfig &cfg, std::size_t step_index) {
  const Tensor4 x = preprocess(images, model.config().preprocess);
  model.zero_grad();
  StepOutcome out = step_loss(model, x, labels, cfg.mode, cfg.effective_weights(), true);
  const auto &r = out.report;
  if (!std::isfinite(r.total))
    throw TrainingDiverged(step_index, "non-finite loss (triplet " + std::to_string(r.triplet) + ", ce " +
                                           std::to_string(r.cross_entropy) + ", flip " + std::to_string(r.flipping) +
                                           ")");
  model.commit_running_stats(out.classify);
  optimizer_step(model.params(), state, cfg.learning_rate, cfg.adam);
  auto clamp_p = [&](Param &p) { p.value[0] = std::max(p.value[0], cfg.min_gem_p); };
  clamp_p(model.params().global_gem_p);
  for (auto &reg : model.params().regions) clamp_p(reg.gem_p);
  return r;
}

} // namespace

LossReport train_step_baseline(Model &model, AdamState &state, std::span<const Sample> batch,
                               std::span<const std::uint32_t> labels, const TrainConfig &cfg, Rng &aug_rng,
                               std::size_t step_index) {
  std::vector<Image> images;
  images.reserve(batch.size());
  for (const auto &s : batch) images.push_back(augment(s.image, cfg.augment, true, aug_rng));
  TrainConfig base = cfg;
  base.mode = TrainMode::baseline;
  base.use_flipping_loss = false;
  return apply_step(model, state, images, labels, base, step_index);
}

LossReport train_step_flipreid(Model &model, AdamState &state, std::span<const Sample> batch,
                               std::span<const std::uint32_t> labels, const TrainConfig &cfg, Rng &aug_rng,
                               std::size_t step_index) {
  std::vector<Image> images;
  images.reserve(2 * batch.size());
  for (const auto &s : batch) images.push_back(augment(s.image, cfg.augment, false, aug_rng));
  for (std::size_t i = 0; i < batch.size(); ++i) images.push_back(horizontal_flip(images[i]));
  TrainConfig fr = cfg;
  fr.mode = TrainMode::flipreid;
  return apply_step(model, state, images, labels, fr, step_index);
}

TrainResult train(const TrainConfig &cfg_in, std::span<const Sample> train_set,
                  const std::optional<std::filesystem::path> &checkpoint_path) {
  cfg_in.validate();
  TrainConfig cfg = cfg_in;

  std::map<std::uint32_t, std::uint32_t> class_of;
  for (const auto &s : train_set) class_of.emplace(s.identity, 0);
  std::uint32_t next = 0;
  for (auto &kv : class_of) kv.second = next++;
  if (class_of.size() < cfg.batch.P)
    throw ConfigError("training set has " + std::to_string(class_of.size()) + " identities, P = " +
                      std::to_string(cfg.batch.P));
  cfg.model.num_classes = class_of.size();
  if (!train_set.empty()) {
    cfg.model.in_channels = train_set.front().image.channels;
    cfg.model.height = train_set.front().image.height;
    cfg.model.width = train_set.front().image.width;
  }

  Rng init_rng = Rng::stream(cfg.seed, 1);
  Rng sampler = Rng::stream(cfg.seed, 2);
  Rng aug_rng = Rng::stream(cfg.seed, 3);

  TrainResult result{Model(cfg.model, init_rng.next_u64()), {}, class_of};
  AdamState state;
  const std::size_t bs = cfg.batch.P * cfg.batch.K;
  const std::size_t steps = cfg.steps_per_epoch ? cfg.steps_per_epoch : (train_set.size() + bs - 1) / bs;

  std::size_t step = 0;
  std::vector<std::uint32_t> labels(bs);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t s = 0; s < steps; ++s, ++step) {
      const auto batch = pk_sample(train_set, cfg.batch, sampler);
      for (std::size_t i = 0; i < batch.size(); ++i) labels[i] = class_of.at(batch[i].identity);
      const LossReport r = cfg.mode == TrainMode::baseline
                               ? train_step_baseline(result.model, state, batch, labels, cfg, aug_rng, step)
                               : train_step_flipreid(result.model, state, batch, labels, cfg, aug_rng, step);
      result.history.steps.push_back({step, epoch, r});
    }
    result.history.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  if (checkpoint_path) save_checkpoint(*checkpoint_path, result.model);
  return result;
}

} // namespace flipreid
