#pragma once

// Minimal layer toolkit for the denoiser: parameters live in one flat store so
// the optimiser, serialiser and gradient checks treat them uniformly.

#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "trajdiff/error.hpp"

namespace trajdiff::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
struct ParamStore {
  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
  };

  std::vector<T> values;
  std::vector<T> grads;
  std::vector<Entry> entries;

  std::size_t add(std::string name, std::vector<int> shape) {
    std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                    [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    Entry e{std::move(name), std::move(shape), values.size(), n};
    values.resize(values.size() + n, T(0));
    grads.resize(values.size(), T(0));
    entries.push_back(std::move(e));
    return entries.back().offset;
  }

  T* w(std::size_t off) { return values.data() + off; }
  const T* w(std::size_t off) const { return values.data() + off; }
  T* g(std::size_t off) { return grads.data() + off; }

  void zero_grad() { std::fill(grads.begin(), grads.end(), T(0)); }
  std::size_t count() const { return values.size(); }
};

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
inline T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
inline T silu_grad(T x) {
  T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

/// 3x3 (padding 1) or 1x1 convolution via im2col + GEMM.
template <typename T>
struct Conv2d {
  int cin = 0, cout = 0, k = 3;
  std::size_t w_off = 0, b_off = 0;

  void init(ParamStore<T>& ps, const std::string& name, int in, int out, int ksize) {
    cin = in;
    cout = out;
    k = ksize;
    w_off = ps.add(name + ".weight", {out, in, ksize, ksize});
    b_off = ps.add(name + ".bias", {out});
  }

  void reset(ParamStore<T>& ps, std::mt19937_64& rng, double gain = 1.0) const {
    std::normal_distribution<double> nd(0.0, gain * std::sqrt(2.0 / (cin * k * k)));
    T* w = ps.w(w_off);
    for (int i = 0; i < cout * cin * k * k; ++i) w[i] = static_cast<T>(nd(rng));
    std::fill(ps.w(b_off), ps.w(b_off) + cout, T(0));
  }

  static void im2col(const T* x, int c, int h, int wd, T* col) {
    const std::size_t hw = static_cast<std::size_t>(h) * wd;
    for (int ci = 0; ci < c; ++ci) {
      const T* src = x + ci * hw;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          T* dst = col + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
          const int dx = kx - 1;
          for (int r = 0; r < h; ++r) {
            const int sr = r + ky - 1;
            T* drow = dst + static_cast<std::size_t>(r) * wd;
            if (sr < 0 || sr >= h) {
              std::fill(drow, drow + wd, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(sr) * wd;
            const int lo = std::max(0, -dx), hi = std::min(wd, wd - dx);
            for (int cc = 0; cc < lo; ++cc) drow[cc] = T(0);
            for (int cc = lo; cc < hi; ++cc) drow[cc] = srow[cc + dx];
            for (int cc = hi; cc < wd; ++cc) drow[cc] = T(0);
          }
        }
      }
    }
  }

  static void col2im_add(const T* col, int c, int h, int wd, T* dx_out) {
    const std::size_t hw = static_cast<std::size_t>(h) * wd;
    for (int ci = 0; ci < c; ++ci) {
      T* dst = dx_out + ci * hw;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const T* src = col + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
          const int dx = kx - 1;
          for (int r = 0; r < h; ++r) {
            const int sr = r + ky - 1;
            if (sr < 0 || sr >= h) continue;
            const T* crow = src + static_cast<std::size_t>(r) * wd;
            T* drow = dst + static_cast<std::size_t>(sr) * wd;
            const int lo = std::max(0, -dx), hi = std::min(wd, wd - dx);
            for (int cc = lo; cc < hi; ++cc) drow[cc + dx] += crow[cc];
          }
        }
      }
    }
  }

  /// y = conv(x). For 3x3 kernels the im2col buffer is kept in `col` for backward.
  void forward(const ParamStore<T>& ps, const T* x, int h, int wd, T* y, std::vector<T>& col) const {
    const int hw = h * wd;
    ConstMapMat<T> W(ps.w(w_off), cout, cin * k * k);
    MapMat<T> Y(y, cout, hw);
    if (k == 3) {
      col.resize(static_cast<std::size_t>(cin) * 9 * hw);
      im2col(x, cin, h, wd, col.data());
      Y.noalias() = W * ConstMapMat<T>(col.data(), cin * 9, hw);
    } else {
      Y.noalias() = W * ConstMapMat<T>(x, cin, hw);
    }
    const T* b = ps.w(b_off);
    for (int o = 0; o < cout; ++o) Y.row(o).array() += b[o];
  }

  /// Accumulates parameter gradients; adds the input gradient into dx when non-null.
  void backward(ParamStore<T>& ps, const T* x, const std::vector<T>& col, int h, int wd, const T* dy, T* dx,
                std::vector<T>& scratch) const {
    const int hw = h * wd;
    ConstMapMat<T> dY(dy, cout, hw);
    MapMat<T> gW(ps.g(w_off), cout, cin * k * k);
    T* gb = ps.g(b_off);
    // Fixed summation order, independent of buffer alignment.
    for (int o = 0; o < cout; ++o) {
      double acc = 0.0;
      for (const T* p = dy + static_cast<std::size_t>(o) * hw; p != dy + static_cast<std::size_t>(o + 1) * hw; ++p) acc += *p;
      gb[o] += static_cast<T>(acc);
    }
    ConstMapMat<T> W(ps.w(w_off), cout, cin * k * k);
    if (k == 3) {
      ConstMapMat<T> C(col.data(), cin * 9, hw);
      gW.noalias() += dY * C.transpose();
      if (dx) {
        scratch.resize(static_cast<std::size_t>(cin) * 9 * hw);
        MapMat<T> dC(scratch.data(), cin * 9, hw);
        dC.noalias() = W.transpose() * dY;
        col2im_add(scratch.data(), cin, h, wd, dx);
      }
    } else {
      ConstMapMat<T> X(x, cin, hw);
      gW.noalias() += dY * X.transpose();
      if (dx) {
        MapMat<T> dX(dx, cin, hw);
        dX.noalias() += W.transpose() * dY;
      }
    }
  }
};

/// Group normalisation with per-channel affine.
template <typename T>
struct GroupNorm {
  int channels = 0, groups = 1;
  std::size_t gamma_off = 0, beta_off = 0;
  static constexpr double kEps = 1e-5;

  struct Cache {
    std::vector<T> xhat;
    std::vector<T> rstd;
  };

  void init(ParamStore<T>& ps, const std::string& name, int c) {
    channels = c;
    groups = std::gcd(c, 8);
    gamma_off = ps.add(name + ".gamma", {c});
    beta_off = ps.add(name + ".beta", {c});
  }

  void reset(ParamStore<T>& ps) const {
    std::fill(ps.w(gamma_off), ps.w(gamma_off) + channels, T(1));
    std::fill(ps.w(beta_off), ps.w(beta_off) + channels, T(0));
  }

  void forward(const ParamStore<T>& ps, const T* x, int hw, T* y, Cache& cache) const {
    const int cpg = channels / groups;
    const std::size_t n = static_cast<std::size_t>(cpg) * hw;
    cache.xhat.resize(static_cast<std::size_t>(channels) * hw);
    cache.rstd.resize(groups);
    const T* gamma = ps.w(gamma_off);
    const T* beta = ps.w(beta_off);
    for (int g = 0; g < groups; ++g) {
      const T* xs = x + g * n;
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += xs[i];
      mean /= n;
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) var += (xs[i] - mean) * (xs[i] - mean);
      var /= n;
      const T rstd = static_cast<T>(1.0 / std::sqrt(var + kEps));
      cache.rstd[g] = rstd;
      T* xh = cache.xhat.data() + g * n;
      for (std::size_t i = 0; i < n; ++i) xh[i] = (xs[i] - static_cast<T>(mean)) * rstd;
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* xc = cache.xhat.data() + static_cast<std::size_t>(c) * hw;
        T* yc = y + static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) yc[i] = gamma[c] * xc[i] + beta[c];
      }
    }
  }

  /// dx is overwritten.
  void backward(ParamStore<T>& ps, const Cache& cache, int hw, const T* dy, T* dx) const {
    const int cpg = channels / groups;
    const std::size_t n = static_cast<std::size_t>(cpg) * hw;
    const T* gamma = ps.w(gamma_off);
    T* ggamma = ps.g(gamma_off);
    T* gbeta = ps.g(beta_off);
    for (int g = 0; g < groups; ++g) {
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* dyc = dy + static_cast<std::size_t>(c) * hw;
        const T* xc = cache.xhat.data() + static_cast<std::size_t>(c) * hw;
        double sg = 0.0, sb = 0.0;
        for (int i = 0; i < hw; ++i) {
          sg += dyc[i] * xc[i];
          sb += dyc[i];
        }
        ggamma[c] += static_cast<T>(sg);
        gbeta[c] += static_cast<T>(sb);
        sum_dxhat += gamma[c] * sb;
        sum_dxhat_xhat += gamma[c] * sg;
      }
      const T rstd = cache.rstd[g];
      const T a = static_cast<T>(sum_dxhat / n);
      const T b = static_cast<T>(sum_dxhat_xhat / n);
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* dyc = dy + static_cast<std::size_t>(c) * hw;
        const T* xc = cache.xhat.data() + static_cast<std::size_t>(c) * hw;
        T* dxc = dx + static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) dxc[i] = rstd * (gamma[c] * dyc[i] - a - xc[i] * b);
      }
    }
  }
};

/// Dense layer on vectors.
template <typename T>
struct Linear {
  int in = 0, out = 0;
  std::size_t w_off = 0, b_off = 0;

  void init(ParamStore<T>& ps, const std::string& name, int i, int o) {
    in = i;
    out = o;
    w_off = ps.add(name + ".weight", {o, i});
    b_off = ps.add(name + ".bias", {o});
  }

  void reset(ParamStore<T>& ps, std::mt19937_64& rng, double gain = 1.0) const {
    std::normal_distribution<double> nd(0.0, gain * std::sqrt(2.0 / in));
    T* w = ps.w(w_off);
    for (int i = 0; i < in * out; ++i) w[i] = static_cast<T>(nd(rng));
    std::fill(ps.w(b_off), ps.w(b_off) + out, T(0));
  }

  void forward(const ParamStore<T>& ps, const T* x, T* y) const {
    const T* w = ps.w(w_off);
    const T* b = ps.w(b_off);
    for (int o = 0; o < out; ++o) {
      T acc = b[o];
      for (int i = 0; i < in; ++i) acc += w[o * in + i] * x[i];
      y[o] = acc;
    }
  }

  void backward(ParamStore<T>& ps, const T* x, const T* dy, T* dx) const {
    const T* w = ps.w(w_off);
    T* gw = ps.g(w_off);
    T* gb = ps.g(b_off);
    for (int o = 0; o < out; ++o) {
      gb[o] += dy[o];
      for (int i = 0; i < in; ++i) gw[o * in + i] += dy[o] * x[i];
    }
    if (dx) {
      for (int o = 0; o < out; ++o) {
        for (int i = 0; i < in; ++i) dx[i] += w[o * in + i] * dy[o];
      }
    }
  }
};

template <typename T>
void avg_pool2(const T* x, int c, int h, int w, T* y) {
  const int oh = h / 2, ow = w / 2;
  for (int ch = 0; ch < c; ++ch) {
    const T* xs = x + static_cast<std::size_t>(ch) * h * w;
    T* ys = y + static_cast<std::size_t>(ch) * oh * ow;
    for (int r = 0; r < oh; ++r) {
      for (int col = 0; col < ow; ++col) {
        const T* p = xs + static_cast<std::size_t>(2 * r) * w + 2 * col;
        ys[r * ow + col] = T(0.25) * (p[0] + p[1] + p[w] + p[w + 1]);
      }
    }
  }
}

/// dx (h x w) += pooled-gradient spread.
template <typename T>
void avg_pool2_backward(const T* dy, int c, int h, int w, T* dx) {
  const int oh = h / 2, ow = w / 2;
  for (int ch = 0; ch < c; ++ch) {
    const T* ds = dy + static_cast<std::size_t>(ch) * oh * ow;
    T* xs = dx + static_cast<std::size_t>(ch) * h * w;
    for (int r = 0; r < oh; ++r) {
      for (int col = 0; col < ow; ++col) {
        T g = T(0.25) * ds[r * ow + col];
        T* p = xs + static_cast<std::size_t>(2 * r) * w + 2 * col;
        p[0] += g;
        p[1] += g;
        p[w] += g;
        p[w + 1] += g;
      }
    }
  }
}

/// Nearest-neighbour 2x upsampling from (h, w) to (2h, 2w).
template <typename T>
void upsample2(const T* x, int c, int h, int w, T* y) {
  const int ow = 2 * w;
  for (int ch = 0; ch < c; ++ch) {
    const T* xs = x + static_cast<std::size_t>(ch) * h * w;
    T* ys = y + static_cast<std::size_t>(ch) * 4 * h * w;
    for (int r = 0; r < 2 * h; ++r) {
      for (int col = 0; col < ow; ++col) ys[static_cast<std::size_t>(r) * ow + col] = xs[(r / 2) * w + col / 2];
    }
  }
}

/// dx (h x w) = sum of the 2x2 upsampled gradients.
template <typename T>
void upsample2_backward(const T* dy, int c, int h, int w, T* dx) {
  const int ow = 2 * w;
  for (int ch = 0; ch < c; ++ch) {
    const T* ds = dy + static_cast<std::size_t>(ch) * 4 * h * w;
    T* xs = dx + static_cast<std::size_t>(ch) * h * w;
    for (int r = 0; r < h; ++r) {
      for (int col = 0; col < w; ++col) {
        const T* p = ds + static_cast<std::size_t>(2 * r) * ow + 2 * col;
        xs[r * w + col] = p[0] + p[1] + p[ow] + p[ow + 1];
      }
    }
  }
}

}  // namespace trajdiff::nn
