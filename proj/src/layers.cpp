#include "gfsseg/layers.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace gfsseg {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

Conv2d::Conv2d(int in, int out, int k, int stride_, Rng& rng)
    : in_ch(in), out_ch(out), ksize(k), stride(stride_), pad(k / 2),
      weight(out, in, k, k), bias(Tensor::vec(out)),
      weight_grad(out, in, k, k), bias_grad(Tensor::vec(out)) {
  // He initialization, suited to the ReLU blocks this net is made of.
  double stddev = std::sqrt(2.0 / (in * k * k));
  for (auto& v : weight.data) v = rng.normal(0.0, stddev);
}

void Conv2d::zero_grad() {
  weight_grad.zero();
  bias_grad.zero();
}

namespace {

void im2col(const Tensor& x, int item, int ksize, int stride, int pad, int out_h, int out_w,
            std::vector<double>& col) {
  const int in_ch = x.c, in_h = x.h, in_w = x.w;
  col.assign(static_cast<std::size_t>(in_ch) * ksize * ksize * out_h * out_w, 0.0);
  std::size_t row = 0;
  for (int c = 0; c < in_ch; ++c) {
    for (int ky = 0; ky < ksize; ++ky) {
      for (int kx = 0; kx < ksize; ++kx, ++row) {
        double* dst = col.data() + row * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= in_h) continue;
          for (int ox = 0; ox < out_w; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= in_w) continue;
            dst[oy * out_w + ox] = x.at(item, c, iy, ix);
          }
        }
      }
    }
  }
}

void col2im_add(const std::vector<double>& col, int item, int in_ch, int in_h, int in_w,
                int ksize, int stride, int pad, int out_h, int out_w, Tensor& grad_in) {
  std::size_t row = 0;
  for (int c = 0; c < in_ch; ++c) {
    for (int ky = 0; ky < ksize; ++ky) {
      for (int kx = 0; kx < ksize; ++kx, ++row) {
        const double* src = col.data() + row * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= in_h) continue;
          for (int ox = 0; ox < out_w; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= in_w) continue;
            grad_in.at(item, c, iy, ix) += src[oy * out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x, Conv2dCache& cache) const {
  if (x.c != in_ch)
    throw domain_error("conv expects " + std::to_string(in_ch) + " channels, got " +
                       std::to_string(x.c));
  const int out_h = (x.h + 2 * pad - ksize) / stride + 1;
  const int out_w = (x.w + 2 * pad - ksize) / stride + 1;
  cache.in_h = x.h;
  cache.in_w = x.w;
  cache.out_h = out_h;
  cache.out_w = out_w;
  cache.batch = x.n;
  cache.cols.assign(static_cast<std::size_t>(x.n), {});

  Tensor out(x.n, out_ch, out_h, out_w);
  const int krows = in_ch * ksize * ksize;
  ConstMapRM w_mat(weight.data.data(), out_ch, krows);
  for (int b = 0; b < x.n; ++b) {
    auto& col = cache.cols[static_cast<std::size_t>(b)];
    im2col(x, b, ksize, stride, pad, out_h, out_w, col);
    ConstMapRM col_mat(col.data(), krows, out_h * out_w);
    MapRM out_mat(out.data.data() + static_cast<std::size_t>(b) * out_ch * out_h * out_w,
                  out_ch, out_h * out_w);
    out_mat.noalias() = w_mat * col_mat;
    for (int c = 0; c < out_ch; ++c) out_mat.row(c).array() += bias.data[static_cast<std::size_t>(c)];
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& grad_out, const Conv2dCache& cache) {
  const int krows = in_ch * ksize * ksize;
  const int spatial = cache.out_h * cache.out_w;
  Tensor grad_in(cache.batch, in_ch, cache.in_h, cache.in_w);
  MapRM wgrad_mat(weight_grad.data.data(), out_ch, krows);
  ConstMapRM w_mat(weight.data.data(), out_ch, krows);
  std::vector<double> dcol(static_cast<std::size_t>(krows) * spatial);
  for (int b = 0; b < cache.batch; ++b) {
    ConstMapRM go_mat(grad_out.data.data() + static_cast<std::size_t>(b) * out_ch * spatial,
                      out_ch, spatial);
    ConstMapRM col_mat(cache.cols[static_cast<std::size_t>(b)].data(), krows, spatial);
    wgrad_mat.noalias() += go_mat * col_mat.transpose();
    for (int c = 0; c < out_ch; ++c) bias_grad.data[static_cast<std::size_t>(c)] += go_mat.row(c).sum();
    MapRM dcol_mat(dcol.data(), krows, spatial);
    dcol_mat.noalias() = w_mat.transpose() * go_mat;
    col2im_add(dcol, b, in_ch, cache.in_h, cache.in_w, ksize, stride, pad, cache.out_h,
               cache.out_w, grad_in);
  }
  return grad_in;
}

BatchNorm2d::BatchNorm2d(int channels)
    : ch(channels), gamma(Tensor::vec(channels)), beta(Tensor::vec(channels)),
      running_mean(Tensor::vec(channels)), running_var(Tensor::vec(channels)),
      gamma_grad(Tensor::vec(channels)), beta_grad(Tensor::vec(channels)) {
  std::fill(gamma.data.begin(), gamma.data.end(), 1.0);
  std::fill(running_var.data.begin(), running_var.data.end(), 1.0);
}

void BatchNorm2d::zero_grad() {
  gamma_grad.zero();
  beta_grad.zero();
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training, BatchNormCache& cache) {
  cache.training = training;
  cache.batch = x.n;
  cache.h = x.h;
  cache.w = x.w;
  cache.inv_std.assign(static_cast<std::size_t>(ch), 0.0);
  cache.xhat.assign(x.size(), 0.0);

  const double m = static_cast<double>(x.n) * x.h * x.w;
  Tensor out(x.n, x.c, x.h, x.w);
  for (int c = 0; c < ch; ++c) {
    double mean, var;
    if (training) {
      double sum = 0, sumsq = 0;
      for (int b = 0; b < x.n; ++b)
        for (int y = 0; y < x.h; ++y)
          for (int xx = 0; xx < x.w; ++xx) {
            double v = x.at(b, c, y, xx);
            sum += v;
            sumsq += v * v;
          }
      mean = sum / m;
      var = std::max(0.0, sumsq / m - mean * mean);
      running_mean.data[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * running_mean.data[static_cast<std::size_t>(c)] + momentum * mean;
      double unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
      running_var.data[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * running_var.data[static_cast<std::size_t>(c)] + momentum * unbiased;
    } else {
      mean = running_mean.data[static_cast<std::size_t>(c)];
      var = running_var.data[static_cast<std::size_t>(c)];
    }
    double inv_std = 1.0 / std::sqrt(var + eps);
    cache.inv_std[static_cast<std::size_t>(c)] = inv_std;
    double g = gamma.data[static_cast<std::size_t>(c)];
    double be = beta.data[static_cast<std::size_t>(c)];
    for (int b = 0; b < x.n; ++b)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx) {
          double xhat = (x.at(b, c, y, xx) - mean) * inv_std;
          cache.xhat[((static_cast<std::size_t>(b) * ch + c) * x.h + y) * x.w + xx] = xhat;
          out.at(b, c, y, xx) = g * xhat + be;
        }
  }
  return out;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out, const BatchNormCache& cache) {
  const int n = cache.batch, h = cache.h, w = cache.w;
  const double m = static_cast<double>(n) * h * w;
  Tensor grad_in(n, ch, h, w);
  for (int c = 0; c < ch; ++c) {
    double g = gamma.data[static_cast<std::size_t>(c)];
    double inv_std = cache.inv_std[static_cast<std::size_t>(c)];
    double sum_dy = 0, sum_dy_xhat = 0;
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          double dy = grad_out.at(b, c, y, xx);
          double xhat = cache.xhat[((static_cast<std::size_t>(b) * ch + c) * h + y) * w + xx];
          sum_dy += dy;
          sum_dy_xhat += dy * xhat;
        }
    gamma_grad.data[static_cast<std::size_t>(c)] += sum_dy_xhat;
    beta_grad.data[static_cast<std::size_t>(c)] += sum_dy;
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          double dy = grad_out.at(b, c, y, xx);
          double xhat = cache.xhat[((static_cast<std::size_t>(b) * ch + c) * h + y) * w + xx];
          if (cache.training) {
            grad_in.at(b, c, y, xx) =
                g * inv_std / m * (m * dy - sum_dy - xhat * sum_dy_xhat);
          } else {
            grad_in.at(b, c, y, xx) = g * inv_std * dy;
          }
        }
  }
  return grad_in;
}

Tensor relu_forward(const Tensor& x, ReluCache& cache) {
  cache.active.assign(x.size(), false);
  Tensor out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x.data[i] > 0.0) {
      cache.active[i] = true;
    } else {
      out.data[i] = 0.0;
    }
  }
  return out;
}

Tensor relu_backward(const Tensor& grad_out, const ReluCache& cache) {
  Tensor grad_in = grad_out;
  for (std::size_t i = 0; i < grad_in.size(); ++i)
    if (!cache.active[i]) grad_in.data[i] = 0.0;
  return grad_in;
}

namespace {

inline void pool_bounds(int i, int in_size, int out_size, int& lo, int& hi) {
  lo = i * in_size / out_size;
  hi = ((i + 1) * in_size + out_size - 1) / out_size;
}

}  // namespace

Tensor adaptive_avg_pool(const Tensor& x, int out_size) {
  if (out_size < 1 || out_size > x.h || out_size > x.w)
    throw config_error("pooling scale " + std::to_string(out_size) +
                       " exceeds feature size " + std::to_string(std::min(x.h, x.w)));
  Tensor out(x.n, x.c, out_size, out_size);
  for (int b = 0; b < x.n; ++b)
    for (int c = 0; c < x.c; ++c)
      for (int oy = 0; oy < out_size; ++oy) {
        int y0, y1;
        pool_bounds(oy, x.h, out_size, y0, y1);
        for (int ox = 0; ox < out_size; ++ox) {
          int x0, x1;
          pool_bounds(ox, x.w, out_size, x0, x1);
          double sum = 0;
          for (int y = y0; y < y1; ++y)
            for (int xx = x0; xx < x1; ++xx) sum += x.at(b, c, y, xx);
          out.at(b, c, oy, ox) = sum / ((y1 - y0) * (x1 - x0));
        }
      }
  return out;
}

Tensor adaptive_avg_pool_backward(const Tensor& grad_out, int in_h, int in_w) {
  Tensor grad_in(grad_out.n, grad_out.c, in_h, in_w);
  const int out_size = grad_out.h;
  for (int b = 0; b < grad_out.n; ++b)
    for (int c = 0; c < grad_out.c; ++c)
      for (int oy = 0; oy < out_size; ++oy) {
        int y0, y1;
        pool_bounds(oy, in_h, out_size, y0, y1);
        for (int ox = 0; ox < out_size; ++ox) {
          int x0, x1;
          pool_bounds(ox, in_w, out_size, x0, x1);
          double g = grad_out.at(b, c, oy, ox) / ((y1 - y0) * (x1 - x0));
          for (int y = y0; y < y1; ++y)
            for (int xx = x0; xx < x1; ++xx) grad_in.at(b, c, y, xx) += g;
        }
      }
  return grad_in;
}

namespace {

struct LerpCoord {
  int lo = 0, hi = 0;
  double frac = 0.0;
};

std::vector<LerpCoord> lerp_table(int out_size, int in_size) {
  std::vector<LerpCoord> table(static_cast<std::size_t>(out_size));
  double scale = static_cast<double>(in_size) / out_size;
  for (int i = 0; i < out_size; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    int lo = static_cast<int>(std::floor(src));
    double frac = src - lo;
    if (lo < 0) {
      lo = 0;
      frac = 0.0;
    }
    if (lo >= in_size - 1) {
      lo = in_size - 1;
      frac = 0.0;
    }
    table[static_cast<std::size_t>(i)] = {lo, std::min(lo + 1, in_size - 1), frac};
  }
  return table;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  auto ty = lerp_table(out_h, x.h);
  auto tx = lerp_table(out_w, x.w);
  Tensor out(x.n, x.c, out_h, out_w);
  for (int b = 0; b < x.n; ++b)
    for (int c = 0; c < x.c; ++c)
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& cy = ty[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& cx = tx[static_cast<std::size_t>(ox)];
          double top = (1.0 - cx.frac) * x.at(b, c, cy.lo, cx.lo) +
                       cx.frac * x.at(b, c, cy.lo, cx.hi);
          double bot = (1.0 - cx.frac) * x.at(b, c, cy.hi, cx.lo) +
                       cx.frac * x.at(b, c, cy.hi, cx.hi);
          out.at(b, c, oy, ox) = (1.0 - cy.frac) * top + cy.frac * bot;
        }
      }
  return out;
}

Tensor bilinear_resize_backward(const Tensor& grad_out, int in_h, int in_w) {
  auto ty = lerp_table(grad_out.h, in_h);
  auto tx = lerp_table(grad_out.w, in_w);
  Tensor grad_in(grad_out.n, grad_out.c, in_h, in_w);
  for (int b = 0; b < grad_out.n; ++b)
    for (int c = 0; c < grad_out.c; ++c)
      for (int oy = 0; oy < grad_out.h; ++oy) {
        const auto& cy = ty[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < grad_out.w; ++ox) {
          const auto& cx = tx[static_cast<std::size_t>(ox)];
          double g = grad_out.at(b, c, oy, ox);
          grad_in.at(b, c, cy.lo, cx.lo) += (1.0 - cy.frac) * (1.0 - cx.frac) * g;
          grad_in.at(b, c, cy.lo, cx.hi) += (1.0 - cy.frac) * cx.frac * g;
          grad_in.at(b, c, cy.hi, cx.lo) += cy.frac * (1.0 - cx.frac) * g;
          grad_in.at(b, c, cy.hi, cx.hi) += cy.frac * cx.frac * g;
        }
      }
  return grad_in;
}

}  // namespace gfsseg
