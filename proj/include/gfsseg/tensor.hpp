#pragma once

#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gfsseg {

// Dense NCHW tensor of doubles. Lower-rank data uses leading dims of 1,
// e.g. a bias vector is {1, c, 1, 1} and a single image {1, c, h, w}.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_),
        data(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0) {}

  static Tensor vec(int c_) { return Tensor(1, c_, 1, 1); }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  double& at(int in, int ic, int ih, int iw) {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
  }
  double at(int in, int ic, int ih, int iw) const {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
  }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

// Integer label grid, row-major h x w. Values are class indices or the
// dataset's ignore sentinel.
struct LabelGrid {
  int h = 0, w = 0;
  std::vector<std::int32_t> data;

  LabelGrid() = default;
  LabelGrid(int h_, int w_, std::int32_t fill = 0)
      : h(h_), w(w_), data(static_cast<std::size_t>(h_) * w_, fill) {}

  std::int32_t& at(int ih, int iw) { return data[static_cast<std::size_t>(ih) * w + iw]; }
  std::int32_t at(int ih, int iw) const { return data[static_cast<std::size_t>(ih) * w + iw]; }
  std::size_t size() const { return data.size(); }
};

struct domain_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ingestion_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct eval_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gfsseg
