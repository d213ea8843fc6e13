#include "flipreid/synth_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>

#include "flipreid/error.hpp"

namespace flipreid {

std::string_view to_string(Split s) {
  switch (s) {
  case Split::train: return "train";
  case Split::query: return "query";
  case Split::gallery: return "gallery";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  throw ValidationError("unknown split \"" + std::string(s) + "\" (expected train, query or gallery)");
}

void DatasetSpec::validate() const {
  if (num_identities < 2) throw ValidationError("num_identities must be >= 2");
  if (images_per_identity < 2) throw ValidationError("images_per_identity must be >= 2");
  if (num_cameras < 2) throw ValidationError("num_cameras must be >= 2 for cross-camera evaluation");
  if (height == 0 || width == 0) throw ValidationError("image height and width must be positive");
  if (channels == 0) throw ValidationError("channels must be positive");
  if (!(asymmetry_strength >= 0.0 && asymmetry_strength <= 1.0))
    throw ValidationError("asymmetry_strength must lie in [0, 1]");
  if (!(noise_std >= 0.0)) throw ValidationError("noise_std must be non-negative");
  if (!(mirror_prob >= 0.0 && mirror_prob <= 1.0)) throw ValidationError("mirror_prob must lie in [0, 1]");
  if (!(camera_bias >= 0.0)) throw ValidationError("camera_bias must be non-negative");
}

namespace {

bool is_prob(double p) { return p >= 0.0 && p <= 1.0; }

void check_area_range(const std::pair<double, double> &r, const char *name) {
  if (!(r.first > 0.0 && r.second <= 1.0 && r.first <= r.second))
    throw ValidationError(std::string(name) + " must satisfy 0 < min <= max <= 1");
}

std::uint8_t to_pixel(double v) { return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0)); }

struct Rect {
  std::size_t y, x, h, w;
};

// Rejection-samples a rectangle with the requested area fraction and aspect
// ratio (height / width) that fits inside the image.
std::optional<Rect> sample_rect(const Image &img, std::pair<double, double> area_range,
                                std::pair<double, double> aspect_range, Rng &rng) {
  const double area_total = double(img.height) * img.width;
  for (int attempt = 0; attempt < kRectAttempts; ++attempt) {
    const double area = rng.uniform(area_range.first, area_range.second) * area_total;
    const double aspect = rng.uniform(aspect_range.first, aspect_range.second);
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
    if (h == 0 || w == 0 || h > img.height || w > img.width) continue;
    const auto y = static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(img.height - h)));
    const auto x = static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(img.width - w)));
    return Rect{y, x, h, w};
  }
  return std::nullopt;
}

} // namespace

void AugmentParams::validate() const {
  if (!is_prob(flip_prob) || !is_prob(erase_prob) || !is_prob(grayscale_patch_prob))
    throw ValidationError("augmentation probabilities must lie in [0, 1]");
  check_area_range(erase_area_range, "erase_area_range");
  check_area_range(grayscale_patch_area_range, "grayscale_patch_area_range");
  if (!(erase_aspect_range.first > 0.0 && erase_aspect_range.first <= erase_aspect_range.second))
    throw ValidationError("erase_aspect_range must satisfy 0 < min <= max");
}

std::vector<Sample> generate_dataset(const DatasetSpec &spec) {
  spec.validate();
  const std::size_t H = spec.height, W = spec.width, C = spec.channels;
  // Coarse body grid: 4x4 pixel cells, at least two columns so that a cell
  // can differ from its mirror.
  const std::size_t grid_h = std::max<std::size_t>(2, H / 4);
  const std::size_t grid_w = std::max<std::size_t>(2, W / 4);

  Rng rng(spec.seed);
  Rng palette_rng = Rng::stream(spec.seed, 1);

  // Small shared clothing palette: symmetric cues alone collide across identities.
  constexpr std::size_t kPalette = 4;
  std::vector<std::vector<double>> palette(kPalette, std::vector<double>(C));
  for (auto &col : palette)
    for (auto &v : col) v = palette_rng.uniform(40.0, 215.0);

  std::vector<std::vector<double>> cam_offset(spec.num_cameras, std::vector<double>(C));
  for (auto &cam : cam_offset)
    for (auto &v : cam) v = palette_rng.uniform(-spec.camera_bias, spec.camera_bias);

  std::vector<Sample> out;
  out.reserve(std::size_t(spec.num_identities) * spec.images_per_identity);
  std::vector<double> texture(C * H * W), proto(C * H * W);

  for (std::uint32_t id = 0; id < spec.num_identities; ++id) {
    Rng id_rng = Rng::stream(spec.seed, 1000 + id);
    const auto &shirt = palette[id_rng.uniform_int(0, kPalette - 1)];
    const auto &pants = palette[id_rng.uniform_int(0, kPalette - 1)];

    // cell colours: clothing base plus random detail cells
    std::vector<double> cells(C * grid_h * grid_w);
    auto cell = [&](std::size_t c, std::size_t gy, std::size_t gx) -> double & {
      return cells[(c * grid_h + gy) * grid_w + gx];
    };
    for (std::size_t gy = 0; gy < grid_h; ++gy)
      for (std::size_t gx = 0; gx < grid_w; ++gx) {
        const auto &base = gy < grid_h / 2 ? shirt : pants;
        const bool detail = id_rng.bernoulli(0.3);
        for (std::size_t c = 0; c < C; ++c) cell(c, gy, gx) = detail ? id_rng.uniform(0.0, 255.0) : base[c];
      }
    // one guaranteed one-sided accessory so that every prototype is asymmetric
    {
      const auto gy = static_cast<std::size_t>(id_rng.uniform_int(0, std::int64_t(grid_h) - 1));
      const auto gx = static_cast<std::size_t>(id_rng.uniform_int(0, std::int64_t(grid_w / 2) - 1));
      const auto &base = gy < grid_h / 2 ? shirt : pants;
      for (std::size_t c = 0; c < C; ++c)
        cell(c, gy, gx) = base[c] > 127.5 ? base[c] - 100.0 : base[c] + 100.0;
    }

    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          texture[(c * H + y) * W + x] = cell(c, y * grid_h / H, x * grid_w / W);

    // prototype = symmetric part + asymmetry * antisymmetric part
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double a = texture[(c * H + y) * W + x];
          const double b = texture[(c * H + y) * W + (W - 1 - x)];
          proto[(c * H + y) * W + x] = 0.5 * (a + b) + spec.asymmetry_strength * 0.5 * (a - b);
        }

    std::uint32_t first_cam = 0;
    for (std::uint32_t k = 0; k < spec.images_per_identity; ++k) {
      std::uint32_t cam = static_cast<std::uint32_t>(rng.uniform_int(0, spec.num_cameras - 1));
      if (k == 0) first_cam = cam;
      if (k == 1 && cam == first_cam)
        cam = (cam + 1 + static_cast<std::uint32_t>(rng.uniform_int(0, spec.num_cameras - 2))) % spec.num_cameras;
      const bool mirrored = rng.bernoulli(spec.mirror_prob);

      Sample s;
      s.identity = id;
      s.camera = cam;
      s.image = Image(spec.channels, spec.height, spec.width);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const std::size_t sx = mirrored ? W - 1 - x : x;
            double v = proto[(c * H + y) * W + sx] + cam_offset[cam][c];
            if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
            s.image.at(c, y, x) = to_pixel(v);
          }
      out.push_back(std::move(s));
    }
  }
  return out;
}

Image horizontal_flip(const Image &image) {
  Image out = image;
  const std::size_t W = image.width;
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < W; ++x) out.at(c, y, x) = image.at(c, y, W - 1 - x);
  return out;
}

Image random_horizontal_flip(const Image &image, double prob, Rng &rng) {
  return rng.uniform() < prob ? horizontal_flip(image) : image;
}

Image random_erasing(const Image &image, const AugmentParams &params, Rng &rng) {
  params.validate();
  if (!(rng.uniform() < params.erase_prob)) return image;
  const auto rect = sample_rect(image, params.erase_area_range, params.erase_aspect_range, rng);
  if (!rect) return image;
  Image out = image;
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = rect->y; y < rect->y + rect->h; ++y)
      for (std::size_t x = rect->x; x < rect->x + rect->w; ++x)
        out.at(c, y, x) = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return out;
}

Image random_grayscale_patch(const Image &image, const AugmentParams &params, Rng &rng) {
  params.validate();
  if (params.grayscale_patch_prob > 0.0 && image.channels != 3)
    throw ValidationError("random_grayscale_patch requires a 3-channel image, got " +
                          std::to_string(image.channels));
  if (!(rng.uniform() < params.grayscale_patch_prob)) return image;
  const auto rect = sample_rect(image, params.grayscale_patch_area_range, params.erase_aspect_range, rng);
  if (!rect) return image;
  Image out = image;
  for (std::size_t y = rect->y; y < rect->y + rect->h; ++y)
    for (std::size_t x = rect->x; x < rect->x + rect->w; ++x) {
      const double luma = 0.299 * image.at(0, y, x) + 0.587 * image.at(1, y, x) + 0.114 * image.at(2, y, x);
      const auto g = to_pixel(luma);
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = g;
    }
  return out;
}

Image augment(const Image &image, const AugmentParams &params, bool include_flip, Rng &rng) {
  Image out = include_flip ? random_horizontal_flip(image, params.flip_prob, rng) : image;
  if (image.channels == 3) out = random_grayscale_patch(out, params, rng);
  return random_erasing(out, params, rng);
}

DatasetSplit split_dataset(const std::vector<Sample> &samples, Rng &rng, double query_frac,
                           double train_identity_frac) {
  if (!(query_frac > 0.0 && query_frac < 1.0)) throw ValidationError("query_frac must lie in (0, 1)");
  if (!(train_identity_frac >= 0.0 && train_identity_frac < 1.0))
    throw ValidationError("train_identity_frac must lie in [0, 1)");

  std::map<std::uint32_t, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < samples.size(); ++i) by_id[samples[i].identity].push_back(i);
  for (const auto &[id, idx] : by_id)
    if (idx.size() < 2)
      throw ValidationError("identity " + std::to_string(id) + " has fewer than 2 samples");

  std::vector<std::uint32_t> ids;
  for (const auto &kv : by_id) ids.push_back(kv.first);
  for (std::size_t i = ids.size(); i > 1; --i)
    std::swap(ids[i - 1], ids[static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(i) - 1))]);

  auto n_train = static_cast<std::size_t>(std::lround(train_identity_frac * double(ids.size())));
  n_train = std::min(n_train, ids.size() - 1);
  const std::set<std::uint32_t> train_ids(ids.begin(), ids.begin() + std::ptrdiff_t(n_train));

  std::vector<Split> assign(samples.size(), Split::train);
  for (auto id : ids) {
    if (train_ids.count(id)) continue;
    auto idx = by_id[id];
    for (std::size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(i) - 1))]);
    auto nq = static_cast<std::size_t>(std::lround(query_frac * double(idx.size())));
    nq = std::clamp<std::size_t>(nq, 1, idx.size() - 1);
    // A split violates the cross-camera guarantee only when every sample of
    // the identity shares one camera.
    std::set<std::uint32_t> cams;
    for (auto i : idx) cams.insert(samples[i].camera);
    if (cams.size() < 2)
      throw ValidationError("identity " + std::to_string(id) +
                            " is seen by a single camera; cannot form a cross-camera query");
    for (std::size_t k = 0; k < idx.size(); ++k) assign[idx[k]] = k < nq ? Split::query : Split::gallery;
  }

  DatasetSplit out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Sample s = samples[i];
    s.split = assign[i];
    switch (s.split) {
    case Split::train: out.train.push_back(std::move(s)); break;
    case Split::query: out.query.push_back(std::move(s)); break;
    case Split::gallery: out.gallery.push_back(std::move(s)); break;
    }
  }
  return out;
}

} // namespace flipreid
