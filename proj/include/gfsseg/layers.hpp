#pragma once

#include <vector>

#include "gfsseg/rng.hpp"
#include "gfsseg/tensor.hpp"

namespace gfsseg {

// Minimal layer zoo for the toy segmentation network. Every layer keeps its
// parameters and gradient buffers inline; forward fills a cache that the
// matching backward consumes. All math is double precision so finite
// difference checks are tight.

struct Conv2dCache {
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0, batch = 0;
  // One im2col matrix per batch item, (in_ch*k*k) x (out_h*out_w), row-major.
  std::vector<std::vector<double>> cols;
};

struct Conv2d {
  int in_ch = 0, out_ch = 0, ksize = 1, stride = 1, pad = 0;
  Tensor weight;  // {out_ch, in_ch, k, k}
  Tensor bias;    // {1, out_ch, 1, 1}
  Tensor weight_grad, bias_grad;

  Conv2d() = default;
  Conv2d(int in, int out, int k, int stride_, Rng& rng);

  Tensor forward(const Tensor& x, Conv2dCache& cache) const;
  // Accumulates into weight_grad/bias_grad; returns grad wrt input.
  Tensor backward(const Tensor& grad_out, const Conv2dCache& cache);
  void zero_grad();
};

struct BatchNormCache {
  bool training = false;
  int batch = 0, h = 0, w = 0;
  std::vector<double> inv_std;  // per channel
  std::vector<double> xhat;     // normalized input, same layout as x
};

struct BatchNorm2d {
  int ch = 0;
  double eps = 1e-5;
  double momentum = 0.1;
  Tensor gamma, beta;                  // {1, ch, 1, 1}
  Tensor running_mean, running_var;    // {1, ch, 1, 1}
  Tensor gamma_grad, beta_grad;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels);

  // training=true uses batch statistics and updates the running estimates;
  // training=false normalizes with the stored running statistics.
  Tensor forward(const Tensor& x, bool training, BatchNormCache& cache);
  Tensor backward(const Tensor& grad_out, const BatchNormCache& cache);
  void zero_grad();
};

struct ReluCache {
  std::vector<bool> active;
};

Tensor relu_forward(const Tensor& x, ReluCache& cache);
Tensor relu_backward(const Tensor& grad_out, const ReluCache& cache);

// Adaptive average pooling to an out_size x out_size grid, PyTorch region
// convention: bin i covers [floor(i*H/S), ceil((i+1)*H/S)).
Tensor adaptive_avg_pool(const Tensor& x, int out_size);
Tensor adaptive_avg_pool_backward(const Tensor& grad_out, int in_h, int in_w);

// Bilinear resize with half-pixel centers (align_corners=false convention).
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
Tensor bilinear_resize_backward(const Tensor& grad_out, int in_h, int in_w);

}  // namespace gfsseg
