#include "flipreid/ops.hpp"

#include <algorithm>
#include <cmath>

#include "flipreid/error.hpp"

namespace flipreid {

void PreprocessConfig::validate(std::size_t channels) const {
  if (channel_mean.size() != channels || channel_std.size() != channels)
    throw ConfigError("preprocess config has " + std::to_string(channel_mean.size()) + " means / " +
                      std::to_string(channel_std.size()) + " stds for " + std::to_string(channels) + " channels");
  for (double s : channel_std)
    if (!(s > 0.0)) throw ConfigError("preprocess channel_std must be positive");
}

Tensor4 preprocess(std::span<const Image> images, const PreprocessConfig &cfg) {
  if (images.empty()) return {};
  const auto &first = images.front();
  cfg.validate(first.channels);
  Tensor4 out(images.size(), first.channels, first.height, first.width);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto &img = images[n];
    if (img.channels != first.channels || img.height != first.height || img.width != first.width)
      throw ConfigError("preprocess: images in a batch must share one shape");
    for (std::size_t c = 0; c < img.channels; ++c) {
      double *dst = out.channel_ptr(n, c);
      const std::uint8_t *src = img.pixels.data() + c * img.height * img.width;
      for (std::size_t i = 0; i < std::size_t(img.height) * img.width; ++i)
        dst[i] = (src[i] / 255.0 - cfg.channel_mean[c]) / cfg.channel_std[c];
    }
  }
  return out;
}

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride) {
  const std::size_t pad = kernel / 2;
  return (in + 2 * pad - kernel) / stride + 1;
}

Tensor4 conv2d_forward(const Tensor4 &x, std::span<const double> weight, std::span<const double> bias,
                       std::size_t out_channels, std::size_t kernel, std::size_t stride) {
  const std::size_t N = x.batch(), C = x.channels(), H = x.height(), W = x.width();
  if (weight.size() != out_channels * C * kernel * kernel || bias.size() != out_channels)
    throw ConfigError("conv2d: weight shape does not match input channels");
  const std::size_t OH = conv_output_size(H, kernel, stride), OW = conv_output_size(W, kernel, stride);
  const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
  Tensor4 out(N, out_channels, OH, OW);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < out_channels; ++o) {
      double *dst = out.channel_ptr(n, o);
      std::fill(dst, dst + OH * OW, bias[o]);
      for (std::size_t c = 0; c < C; ++c) {
        const double *src = x.channel_ptr(n, c);
        const double *wk = weight.data() + (o * C + c) * kernel * kernel;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const double wv = wk[ky * kernel + kx];
            if (wv == 0.0) continue;
            for (std::size_t oy = 0; oy < OH; ++oy) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              const double *row = src + iy * W;
              double *drow = dst + oy * OW;
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                drow[ox] += wv * row[ix];
              }
            }
          }
      }
    }
  return out;
}

void conv2d_backward(const Tensor4 &x, std::span<const double> weight, const Tensor4 &grad_out,
                     std::size_t kernel, std::size_t stride, Tensor4 *grad_x, std::span<double> grad_weight,
                     std::span<double> grad_bias) {
  const std::size_t N = x.batch(), C = x.channels(), H = x.height(), W = x.width();
  const std::size_t O = grad_out.channels(), OH = grad_out.height(), OW = grad_out.width();
  const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
  if (grad_x) *grad_x = Tensor4(N, C, H, W);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      const double *g = grad_out.channel_ptr(n, o);
      double gsum = 0.0;
      for (std::size_t i = 0; i < OH * OW; ++i) gsum += g[i];
      grad_bias[o] += gsum;
      for (std::size_t c = 0; c < C; ++c) {
        const double *src = x.channel_ptr(n, c);
        double *gx = grad_x ? grad_x->channel_ptr(n, c) : nullptr;
        const double *wk = weight.data() + (o * C + c) * kernel * kernel;
        double *gw = grad_weight.data() + (o * C + c) * kernel * kernel;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const double wv = wk[ky * kernel + kx];
            double acc = 0.0;
            for (std::size_t oy = 0; oy < OH; ++oy) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              const double *row = src + iy * W;
              const double *grow = g + oy * OW;
              double *gxrow = gx ? gx + iy * W : nullptr;
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                acc += grow[ox] * row[ix];
                if (gxrow) gxrow[ix] += grow[ox] * wv;
              }
            }
            gw[ky * kernel + kx] += acc;
          }
      }
    }
}

void relu_inplace(Tensor4 &x) {
  for (double &v : x.values()) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(const Tensor4 &pre, Tensor4 &grad) {
  auto p = pre.values();
  auto g = grad.values();
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(p[i] > 0.0)) g[i] = 0.0;
}

Matrix gem_pool(const Tensor4 &maps, double p, double eps) {
  if (!(p > 0.0)) throw ValidationError("gem_pool: power must be positive");
  if (!(eps > 0.0)) throw ValidationError("gem_pool: eps must be positive");
  const std::size_t N = maps.batch(), C = maps.channels(), S = maps.plane();
  Matrix out(N, C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double *v = maps.channel_ptr(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < S; ++i) acc += std::pow(std::max(v[i], eps), p);
      out(n, c) = std::pow(acc / double(S), 1.0 / p);
    }
  return out;
}

GemGrad gem_pool_backward(const Tensor4 &maps, double p, double eps, const Matrix &out, const Matrix &grad_out) {
  const std::size_t N = maps.batch(), C = maps.channels(), S = maps.plane();
  GemGrad g{Tensor4(N, C, maps.height(), maps.width()), 0.0};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double go = grad_out(n, c);
      if (go == 0.0) continue;
      const double *v = maps.channel_ptr(n, c);
      double *gv = g.grad_maps.channel_ptr(n, c);
      double m = 0.0, mlog = 0.0;
      for (std::size_t i = 0; i < S; ++i) {
        const double y = std::max(v[i], eps);
        const double yp = std::pow(y, p);
        m += yp;
        mlog += yp * std::log(y);
      }
      m /= double(S);
      mlog /= double(S);
      const double o = out(n, c);
      // d out / d v_i = m^(1/p - 1) * v_i^(p - 1) / S on the unfloored region
      const double scale = std::pow(m, 1.0 / p - 1.0) / double(S);
      for (std::size_t i = 0; i < S; ++i)
        if (v[i] > eps) gv[i] = go * scale * std::pow(v[i], p - 1.0);
      g.grad_p += go * o * (-std::log(m) / (p * p) + mlog / (p * m));
    }
  return g;
}

Matrix clip(const Matrix &v, double lo, double hi) {
  if (!(lo < hi)) throw ValidationError("clip: lo must be below hi");
  Matrix out = v;
  for (double &x : out.values()) x = std::min(std::max(x, lo), hi);
  return out;
}

Matrix clip_backward(const Matrix &v, double lo, double hi, const Matrix &grad_out) {
  Matrix g = grad_out;
  auto vv = v.values();
  auto gg = g.values();
  for (std::size_t i = 0; i < gg.size(); ++i)
    if (!(vv[i] > lo && vv[i] < hi)) gg[i] = 0.0;
  return g;
}

std::vector<std::pair<std::size_t, std::size_t>> region_bounds(std::size_t height, std::size_t num_regions) {
  if (num_regions == 0) throw ConfigError("num_regions must be positive");
  if (height < num_regions)
    throw ConfigError("feature map height " + std::to_string(height) + " is smaller than num_regions " +
                      std::to_string(num_regions));
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t base = height / num_regions, extra = height % num_regions;
  std::size_t start = 0;
  for (std::size_t r = 0; r < num_regions; ++r) {
    const std::size_t h = base + (r < extra ? 1 : 0);
    out.emplace_back(start, start + h);
    start += h;
  }
  return out;
}

std::vector<Tensor4> slice_regions(const Tensor4 &maps, std::size_t num_regions) {
  std::vector<Tensor4> out;
  for (auto [begin, end] : region_bounds(maps.height(), num_regions)) {
    Tensor4 s(maps.batch(), maps.channels(), end - begin, maps.width());
    for (std::size_t n = 0; n < maps.batch(); ++n)
      for (std::size_t c = 0; c < maps.channels(); ++c)
        std::copy(maps.channel_ptr(n, c) + begin * maps.width(), maps.channel_ptr(n, c) + end * maps.width(),
                  s.channel_ptr(n, c));
    out.push_back(std::move(s));
  }
  return out;
}

Tensor4 concat_regions(std::span<const Tensor4> stripes) {
  if (stripes.empty()) return {};
  std::size_t H = 0;
  for (const auto &s : stripes) H += s.height();
  const auto &f = stripes.front();
  Tensor4 out(f.batch(), f.channels(), H, f.width());
  std::size_t row = 0;
  for (const auto &s : stripes) {
    for (std::size_t n = 0; n < f.batch(); ++n)
      for (std::size_t c = 0; c < f.channels(); ++c)
        std::copy(s.channel_ptr(n, c), s.channel_ptr(n, c) + s.plane(), out.channel_ptr(n, c) + row * f.width());
    row += s.height();
  }
  return out;
}

Tensor4 reduce_channels(const Tensor4 &maps, const Matrix &kernel) {
  if (kernel.cols() != maps.channels())
    throw ConfigError("reduce_channels: kernel expects " + std::to_string(kernel.cols()) + " input channels, maps have " +
                      std::to_string(maps.channels()));
  const std::size_t N = maps.batch(), C = maps.channels(), O = kernel.rows(), S = maps.plane();
  Tensor4 out(N, O, maps.height(), maps.width());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      double *dst = out.channel_ptr(n, o);
      for (std::size_t c = 0; c < C; ++c) {
        const double k = kernel(o, c);
        const double *src = maps.channel_ptr(n, c);
        for (std::size_t i = 0; i < S; ++i) dst[i] += k * src[i];
      }
    }
  return out;
}

void reduce_channels_backward(const Tensor4 &maps, const Matrix &kernel, const Tensor4 &grad_out, Tensor4 &grad_maps,
                              Matrix &grad_kernel) {
  const std::size_t N = maps.batch(), C = maps.channels(), O = kernel.rows(), S = maps.plane();
  grad_maps = Tensor4(N, C, maps.height(), maps.width());
  if (grad_kernel.rows() != O || grad_kernel.cols() != C) grad_kernel = Matrix(O, C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      const double *g = grad_out.channel_ptr(n, o);
      for (std::size_t c = 0; c < C; ++c) {
        const double *src = maps.channel_ptr(n, c);
        double *gm = grad_maps.channel_ptr(n, c);
        const double k = kernel(o, c);
        double acc = 0.0;
        for (std::size_t i = 0; i < S; ++i) {
          acc += g[i] * src[i];
          gm[i] += g[i] * k;
        }
        grad_kernel(o, c) += acc;
      }
    }
}

Matrix softmax_rows(const Matrix &logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    auto dst = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t k = 0; k < in.size(); ++k) sum += (dst[k] = std::exp(in[k] - mx));
    for (double &v : dst) v /= sum;
  }
  return out;
}

} // namespace flipreid
