#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "flipreid/synth_data.hpp"
#include "flipreid/tensor.hpp"

namespace flipreid {

struct PreprocessConfig {
  std::vector<double> channel_mean{0.485, 0.456, 0.406};
  std::vector<double> channel_std{0.229, 0.224, 0.225};

  void validate(std::size_t channels) const;
};

/// Scales u8 pixels to [0, 1] and standardises each channel.
Tensor4 preprocess(std::span<const Image> images, const PreprocessConfig &cfg);

// -- convolution -------------------------------------------------------------
// Weights are laid out [out, in, k, k]; padding is k / 2 on every side.

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride);

Tensor4 conv2d_forward(const Tensor4 &x, std::span<const double> weight, std::span<const double> bias,
                       std::size_t out_channels, std::size_t kernel, std::size_t stride);

/// Accumulates into grad_weight / grad_bias; writes grad_x when non-null.
void conv2d_backward(const Tensor4 &x, std::span<const double> weight, const Tensor4 &grad_out,
                     std::size_t kernel, std::size_t stride, Tensor4 *grad_x, std::span<double> grad_weight,
                     std::span<double> grad_bias);

void relu_inplace(Tensor4 &x);
/// grad *= [pre > 0]
void relu_backward_inplace(const Tensor4 &pre, Tensor4 &grad);

// -- GeM pooling ---------------------------------------------------------------

/// out[n][c] = (mean_{y,x} max(v, eps)^p)^(1/p)
Matrix gem_pool(const Tensor4 &maps, double p, double eps);

struct GemGrad {
  Tensor4 grad_maps;
  double grad_p = 0.0;
};

GemGrad gem_pool_backward(const Tensor4 &maps, double p, double eps, const Matrix &out, const Matrix &grad_out);

// -- clipping -----------------------------------------------------------------

Matrix clip(const Matrix &v, double lo, double hi);
/// Passes gradient only where lo < v < hi.
Matrix clip_backward(const Matrix &v, double lo, double hi, const Matrix &grad_out);

// -- regional slicing -----------------------------------------------------------

/// Row ranges [begin, end) of each stripe, top to bottom; earlier stripes
/// absorb the remainder.
std::vector<std::pair<std::size_t, std::size_t>> region_bounds(std::size_t height, std::size_t num_regions);

std::vector<Tensor4> slice_regions(const Tensor4 &maps, std::size_t num_regions);
Tensor4 concat_regions(std::span<const Tensor4> stripes);

// -- 1x1 channel reduction ----------------------------------------------------

/// kernel is (out_channels x in_channels).
Tensor4 reduce_channels(const Tensor4 &maps, const Matrix &kernel);
void reduce_channels_backward(const Tensor4 &maps, const Matrix &kernel, const Tensor4 &grad_out, Tensor4 &grad_maps,
                              Matrix &grad_kernel);

// -- dense / softmax ------------------------------------------------------------

Matrix softmax_rows(const Matrix &logits);

} // namespace flipreid
