#pragma once

// Minimal dense NN layers with explicit forward/backward passes.
// Activations are (N, C, D, H, W); 2D networks use D = 1. Convolutions
// are stride-1 with 'same' zero padding, implemented via im2col and an
// Eigen GEMM. Everything is single-threaded and bit-deterministic.

#include <Eigen/Dense>

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "maskmine/core.hpp"

namespace maskmine::nn {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

struct Tensor5 {
  // convenience wrapper over FloatGrid with fixed rank 5
  static void check(const FloatGrid& g) {
    if (g.ndim() != 5) throw ShapeError("expected rank-5 activation tensor");
  }
};

struct Param {
  std::string name;
  FloatGrid value;
  FloatGrid grad;

  explicit Param(std::string n, std::vector<int64_t> shape)
      : name(std::move(n)), value(shape), grad(shape) {}

  void zero_grad() { grad.fill(0.f); }
  int64_t numel() const { return value.numel(); }
};

inline void kaiming_init(FloatGrid& w, int64_t fan_in, Rng& rng) {
  float std = std::sqrt(2.f / static_cast<float>(fan_in));
  for (auto& x : w.data) x = std * static_cast<float>(rng.normal());
}

class Layer {
 public:
  virtual ~Layer() = default;
  virtual FloatGrid forward(const FloatGrid& x, bool train) = 0;
  virtual FloatGrid backward(const FloatGrid& dy) = 0;
  virtual void collect(std::vector<Param*>& out) {}
};

// ---------------------------------------------------------------------------

class Conv : public Layer {
 public:
  Conv(std::string name, int64_t in_c, int64_t out_c, std::array<int64_t, 3> kernel, Rng& rng)
      : in_c_(in_c),
        out_c_(out_c),
        k_(kernel),
        weight_(name + ".weight", {out_c, in_c, kernel[0], kernel[1], kernel[2]}),
        bias_(name + ".bias", {out_c}) {
    kaiming_init(weight_.value, in_c * kernel[0] * kernel[1] * kernel[2], rng);
  }

  FloatGrid forward(const FloatGrid& x, bool) override {
    Tensor5::check(x);
    if (x.shape[1] != in_c_) throw ShapeError("Conv: channel mismatch");
    x_shape_ = x.shape;
    int64_t n = x.shape[0], d = x.shape[2], h = x.shape[3], w = x.shape[4];
    int64_t spatial = d * h * w;
    int64_t krows = in_c_ * k_[0] * k_[1] * k_[2];

    FloatGrid y({n, out_c_, d, h, w});
    cols_.assign(static_cast<size_t>(n * krows * spatial), 0.f);
    CMatMap wm(weight_.value.ptr(), out_c_, krows);
    for (int64_t b = 0; b < n; ++b) {
      float* col = cols_.data() + b * krows * spatial;
      im2col(x.ptr() + b * in_c_ * spatial, col, d, h, w);
      MatMap ym(y.ptr() + b * out_c_ * spatial, out_c_, spatial);
      CMatMap cm(col, krows, spatial);
      ym.noalias() = wm * cm;
      for (int64_t c = 0; c < out_c_; ++c) ym.row(c).array() += bias_.value[c];
    }
    return y;
  }

  FloatGrid backward(const FloatGrid& dy) override {
    int64_t n = x_shape_[0], d = x_shape_[2], h = x_shape_[3], w = x_shape_[4];
    int64_t spatial = d * h * w;
    int64_t krows = in_c_ * k_[0] * k_[1] * k_[2];

    FloatGrid dx(x_shape_);
    MatMap dwm(weight_.grad.ptr(), out_c_, krows);
    CMatMap wm(weight_.value.ptr(), out_c_, krows);
    std::vector<float> dcol(static_cast<size_t>(krows * spatial));
    for (int64_t b = 0; b < n; ++b) {
      CMatMap dym(dy.ptr() + b * out_c_ * spatial, out_c_, spatial);
      CMatMap cm(cols_.data() + b * krows * spatial, krows, spatial);
      dwm.noalias() += dym * cm.transpose();
      for (int64_t c = 0; c < out_c_; ++c) bias_.grad[c] += dym.row(c).sum();
      MatMap dcm(dcol.data(), krows, spatial);
      dcm.noalias() = wm.transpose() * dym;
      col2im(dcol.data(), dx.ptr() + b * in_c_ * spatial, d, h, w);
    }
    return dx;
  }

  void collect(std::vector<Param*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  int64_t out_channels() const { return out_c_; }

 private:
  void im2col(const float* x, float* col, int64_t d, int64_t h, int64_t w) const {
    int64_t spatial = d * h * w;
    std::array<int64_t, 3> pad = {k_[0] / 2, k_[1] / 2, k_[2] / 2};
    int64_t row = 0;
    for (int64_t c = 0; c < in_c_; ++c)
      for (int64_t kz = 0; kz < k_[0]; ++kz)
        for (int64_t ky = 0; ky < k_[1]; ++ky)
          for (int64_t kx = 0; kx < k_[2]; ++kx, ++row) {
            float* dst = col + row * spatial;
            int64_t oz = kz - pad[0], oy = ky - pad[1], ox = kx - pad[2];
            for (int64_t z = 0; z < d; ++z) {
              int64_t sz = z + oz;
              if (sz < 0 || sz >= d) {
                std::fill_n(dst + z * h * w, h * w, 0.f);
                continue;
              }
              for (int64_t y = 0; y < h; ++y) {
                int64_t sy = y + oy;
                float* drow = dst + (z * h + y) * w;
                if (sy < 0 || sy >= h) {
                  std::fill_n(drow, w, 0.f);
                  continue;
                }
                const float* srow = x + (c * d + sz) * h * w + sy * w;
                int64_t x0 = std::max<int64_t>(0, -ox);
                int64_t x1 = std::min<int64_t>(w, w - ox);
                if (x0 > 0) std::fill_n(drow, x0, 0.f);
                for (int64_t xx = x0; xx < x1; ++xx) drow[xx] = srow[xx + ox];
                if (x1 < w) std::fill_n(drow + x1, w - x1, 0.f);
              }
            }
          }
  }

  void col2im(const float* col, float* dx, int64_t d, int64_t h, int64_t w) const {
    int64_t spatial = d * h * w;
    std::array<int64_t, 3> pad = {k_[0] / 2, k_[1] / 2, k_[2] / 2};
    int64_t row = 0;
    for (int64_t c = 0; c < in_c_; ++c)
      for (int64_t kz = 0; kz < k_[0]; ++kz)
        for (int64_t ky = 0; ky < k_[1]; ++ky)
          for (int64_t kx = 0; kx < k_[2]; ++kx, ++row) {
            const float* src = col + row * spatial;
            int64_t oz = kz - pad[0], oy = ky - pad[1], ox = kx - pad[2];
            for (int64_t z = 0; z < d; ++z) {
              int64_t sz = z + oz;
              if (sz < 0 || sz >= d) continue;
              for (int64_t y = 0; y < h; ++y) {
                int64_t sy = y + oy;
                if (sy < 0 || sy >= h) continue;
                float* drow = dx + (c * d + sz) * h * w + sy * w;
                const float* srow = src + (z * h + y) * w;
                int64_t x0 = std::max<int64_t>(0, -ox);
                int64_t x1 = std::min<int64_t>(w, w - ox);
                for (int64_t xx = x0; xx < x1; ++xx) drow[xx + ox] += srow[xx];
              }
            }
          }
  }

  int64_t in_c_, out_c_;
  std::array<int64_t, 3> k_;
  Param weight_, bias_;
  std::vector<int64_t> x_shape_;
  std::vector<float> cols_;
};

// ---------------------------------------------------------------------------

class BatchNorm : public Layer {
 public:
  BatchNorm(std::string name, int64_t channels, float momentum = 0.1f, float eps = 1e-5f)
      : c_(channels),
        momentum_(momentum),
        eps_(eps),
        gamma_(name + ".gamma", {channels}),
        beta_(name + ".beta", {channels}),
        running_mean_({channels}),
        running_var_({channels}, 1.f) {
    gamma_.value.fill(1.f);
  }

  FloatGrid forward(const FloatGrid& x, bool train) override {
    Tensor5::check(x);
    if (x.shape[1] != c_) throw ShapeError("BatchNorm: channel mismatch");
    x_shape_ = x.shape;
    int64_t n = x.shape[0], spatial = x.shape[2] * x.shape[3] * x.shape[4];
    int64_t m = n * spatial;
    train_ = train;

    mean_.assign(static_cast<size_t>(c_), 0.f);
    var_.assign(static_cast<size_t>(c_), 0.f);
    if (train) {
      for (int64_t b = 0; b < n; ++b)
        for (int64_t c = 0; c < c_; ++c) {
          const float* s = x.ptr() + (b * c_ + c) * spatial;
          double acc = 0;
          for (int64_t i = 0; i < spatial; ++i) acc += s[i];
          mean_[static_cast<size_t>(c)] += static_cast<float>(acc);
        }
      for (int64_t c = 0; c < c_; ++c) mean_[static_cast<size_t>(c)] /= static_cast<float>(m);
      for (int64_t b = 0; b < n; ++b)
        for (int64_t c = 0; c < c_; ++c) {
          const float* s = x.ptr() + (b * c_ + c) * spatial;
          double acc = 0;
          for (int64_t i = 0; i < spatial; ++i) {
            double dlt = s[i] - mean_[static_cast<size_t>(c)];
            acc += dlt * dlt;
          }
          var_[static_cast<size_t>(c)] += static_cast<float>(acc);
        }
      for (int64_t c = 0; c < c_; ++c) var_[static_cast<size_t>(c)] /= static_cast<float>(m);
      for (int64_t c = 0; c < c_; ++c) {
        running_mean_[c] = (1 - momentum_) * running_mean_[c] + momentum_ * mean_[static_cast<size_t>(c)];
        running_var_[c] = (1 - momentum_) * running_var_[c] + momentum_ * var_[static_cast<size_t>(c)];
      }
    } else {
      for (int64_t c = 0; c < c_; ++c) {
        mean_[static_cast<size_t>(c)] = running_mean_[c];
        var_[static_cast<size_t>(c)] = running_var_[c];
      }
    }

    xhat_ = FloatGrid(x.shape);
    FloatGrid y(x.shape);
    for (int64_t b = 0; b < n; ++b)
      for (int64_t c = 0; c < c_; ++c) {
        float inv = 1.f / std::sqrt(var_[static_cast<size_t>(c)] + eps_);
        const float* s = x.ptr() + (b * c_ + c) * spatial;
        float* xh = xhat_.ptr() + (b * c_ + c) * spatial;
        float* yo = y.ptr() + (b * c_ + c) * spatial;
        float g = gamma_.value[c], be = beta_.value[c], mu = mean_[static_cast<size_t>(c)];
        for (int64_t i = 0; i < spatial; ++i) {
          xh[i] = (s[i] - mu) * inv;
          yo[i] = g * xh[i] + be;
        }
      }
    return y;
  }

  FloatGrid backward(const FloatGrid& dy) override {
    int64_t n = x_shape_[0], spatial = x_shape_[2] * x_shape_[3] * x_shape_[4];
    int64_t m = n * spatial;
    FloatGrid dx(x_shape_);

    for (int64_t c = 0; c < c_; ++c) {
      double dgamma = 0, dbeta = 0;
      for (int64_t b = 0; b < n; ++b) {
        const float* dyp = dy.ptr() + (b * c_ + c) * spatial;
        const float* xh = xhat_.ptr() + (b * c_ + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) {
          dgamma += static_cast<double>(dyp[i]) * xh[i];
          dbeta += dyp[i];
        }
      }
      gamma_.grad[c] += static_cast<float>(dgamma);
      beta_.grad[c] += static_cast<float>(dbeta);

      float inv = 1.f / std::sqrt(var_[static_cast<size_t>(c)] + eps_);
      float g = gamma_.value[c];
      if (train_) {
        float k1 = static_cast<float>(dbeta) / static_cast<float>(m);
        float k2 = static_cast<float>(dgamma) / static_cast<float>(m);
        for (int64_t b = 0; b < n; ++b) {
          const float* dyp = dy.ptr() + (b * c_ + c) * spatial;
          const float* xh = xhat_.ptr() + (b * c_ + c) * spatial;
          float* dxp = dx.ptr() + (b * c_ + c) * spatial;
          for (int64_t i = 0; i < spatial; ++i)
            dxp[i] = g * inv * (dyp[i] - k1 - xh[i] * k2);
        }
      } else {
        for (int64_t b = 0; b < n; ++b) {
          const float* dyp = dy.ptr() + (b * c_ + c) * spatial;
          float* dxp = dx.ptr() + (b * c_ + c) * spatial;
          for (int64_t i = 0; i < spatial; ++i) dxp[i] = g * inv * dyp[i];
        }
      }
    }
    return dx;
  }

  void collect(std::vector<Param*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }

  FloatGrid& running_mean() { return running_mean_; }
  FloatGrid& running_var() { return running_var_; }

 private:
  int64_t c_;
  float momentum_, eps_;
  Param gamma_, beta_;
  FloatGrid running_mean_, running_var_;
  std::vector<float> mean_, var_;
  FloatGrid xhat_;
  std::vector<int64_t> x_shape_;
  bool train_ = true;
};

// ---------------------------------------------------------------------------

class Relu : public Layer {
 public:
  FloatGrid forward(const FloatGrid& x, bool) override {
    mask_.assign(x.data.size(), 0);
    FloatGrid y(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) {
      if (x.data[i] > 0.f) {
        y.data[i] = x.data[i];
        mask_[i] = 1;
      }
    }
    return y;
  }
  FloatGrid backward(const FloatGrid& dy) override {
    FloatGrid dx(dy.shape);
    for (size_t i = 0; i < dy.data.size(); ++i)
      if (mask_[i]) dx.data[i] = dy.data[i];
    return dx;
  }

 private:
  std::vector<uint8_t> mask_;
};

// ---------------------------------------------------------------------------

class MaxPool : public Layer {
 public:
  explicit MaxPool(std::array<int64_t, 3> factor) : f_(factor) {}

  FloatGrid forward(const FloatGrid& x, bool) override {
    Tensor5::check(x);
    x_shape_ = x.shape;
    int64_t n = x.shape[0], c = x.shape[1];
    int64_t d = x.shape[2], h = x.shape[3], w = x.shape[4];
    if (d % f_[0] || h % f_[1] || w % f_[2])
      throw ShapeError("MaxPool: spatial dims not divisible by pooling factor");
    int64_t od = d / f_[0], oh = h / f_[1], ow = w / f_[2];
    FloatGrid y({n, c, od, oh, ow});
    argmax_.assign(static_cast<size_t>(y.numel()), 0);
    for (int64_t b = 0; b < n; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        const float* src = x.ptr() + (b * c + ch) * d * h * w;
        float* dst = y.ptr() + (b * c + ch) * od * oh * ow;
        int64_t* am = argmax_.data() + (b * c + ch) * od * oh * ow;
        for (int64_t z = 0; z < od; ++z)
          for (int64_t yy = 0; yy < oh; ++yy)
            for (int64_t xx = 0; xx < ow; ++xx) {
              float best = -std::numeric_limits<float>::infinity();
              int64_t best_i = 0;
              for (int64_t pz = 0; pz < f_[0]; ++pz)
                for (int64_t py = 0; py < f_[1]; ++py)
                  for (int64_t px = 0; px < f_[2]; ++px) {
                    int64_t lin = ((z * f_[0] + pz) * h + yy * f_[1] + py) * w + xx * f_[2] + px;
                    if (src[lin] > best) {
                      best = src[lin];
                      best_i = lin;
                    }
                  }
              dst[(z * oh + yy) * ow + xx] = best;
              am[(z * oh + yy) * ow + xx] = best_i;
            }
      }
    return y;
  }

  FloatGrid backward(const FloatGrid& dy) override {
    int64_t n = x_shape_[0], c = x_shape_[1];
    int64_t d = x_shape_[2], h = x_shape_[3], w = x_shape_[4];
    int64_t od = d / f_[0], oh = h / f_[1], ow = w / f_[2];
    FloatGrid dx(x_shape_);
    for (int64_t b = 0; b < n; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        const float* dyp = dy.ptr() + (b * c + ch) * od * oh * ow;
        const int64_t* am = argmax_.data() + (b * c + ch) * od * oh * ow;
        float* dxp = dx.ptr() + (b * c + ch) * d * h * w;
        for (int64_t i = 0; i < od * oh * ow; ++i) dxp[am[i]] += dyp[i];
      }
    return dx;
  }

 private:
  std::array<int64_t, 3> f_;
  std::vector<int64_t> argmax_;
  std::vector<int64_t> x_shape_;
};

// ---------------------------------------------------------------------------

class UpsampleNearest : public Layer {
 public:
  explicit UpsampleNearest(std::array<int64_t, 3> factor) : f_(factor) {}

  FloatGrid forward(const FloatGrid& x, bool) override {
    Tensor5::check(x);
    x_shape_ = x.shape;
    int64_t n = x.shape[0], c = x.shape[1];
    int64_t d = x.shape[2], h = x.shape[3], w = x.shape[4];
    FloatGrid y({n, c, d * f_[0], h * f_[1], w * f_[2]});
    int64_t oh = h * f_[1], ow = w * f_[2];
    for (int64_t b = 0; b < n; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        const float* src = x.ptr() + (b * c + ch) * d * h * w;
        float* dst = y.ptr() + (b * c + ch) * d * f_[0] * oh * ow;
        for (int64_t z = 0; z < d * f_[0]; ++z)
          for (int64_t yy = 0; yy < oh; ++yy)
            for (int64_t xx = 0; xx < ow; ++xx)
              dst[(z * oh + yy) * ow + xx] =
                  src[((z / f_[0]) * h + yy / f_[1]) * w + xx / f_[2]];
      }
    return y;
  }

  FloatGrid backward(const FloatGrid& dy) override {
    int64_t n = x_shape_[0], c = x_shape_[1];
    int64_t d = x_shape_[2], h = x_shape_[3], w = x_shape_[4];
    int64_t oh = h * f_[1], ow = w * f_[2];
    FloatGrid dx(x_shape_);
    for (int64_t b = 0; b < n; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        const float* dyp = dy.ptr() + (b * c + ch) * d * f_[0] * oh * ow;
        float* dxp = dx.ptr() + (b * c + ch) * d * h * w;
        for (int64_t z = 0; z < d * f_[0]; ++z)
          for (int64_t yy = 0; yy < oh; ++yy)
            for (int64_t xx = 0; xx < ow; ++xx)
              dxp[((z / f_[0]) * h + yy / f_[1]) * w + xx / f_[2]] +=
                  dyp[(z * oh + yy) * ow + xx];
      }
    return dx;
  }

 private:
  std::array<int64_t, 3> f_;
  std::vector<int64_t> x_shape_;
};

// ---------------------------------------------------------------------------
// Squeeze-and-excitation: global average pool -> FC -> ReLU -> FC ->
// sigmoid -> channel-wise rescale.

class SqueezeExcite : public Layer {
 public:
  SqueezeExcite(std::string name, int64_t channels, int64_t reduction, Rng& rng)
      : c_(channels),
        r_(std::max<int64_t>(1, channels / reduction)),
        w1_(name + ".fc1.weight", {r_, channels}),
        b1_(name + ".fc1.bias", {r_}),
        w2_(name + ".fc2.weight", {channels, r_}),
        b2_(name + ".fc2.bias", {channels}) {
    kaiming_init(w1_.value, channels, rng);
    kaiming_init(w2_.value, r_, rng);
  }

  FloatGrid forward(const FloatGrid& x, bool) override {
    Tensor5::check(x);
    x_ = x;
    int64_t n = x.shape[0], spatial = x.shape[2] * x.shape[3] * x.shape[4];
    s_.assign(static_cast<size_t>(n * c_), 0.f);
    a1_.assign(static_cast<size_t>(n * r_), 0.f);
    a2_.assign(static_cast<size_t>(n * c_), 0.f);
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t c = 0; c < c_; ++c) {
        const float* src = x.ptr() + (b * c_ + c) * spatial;
        double acc = 0;
        for (int64_t i = 0; i < spatial; ++i) acc += src[i];
        s_[static_cast<size_t>(b * c_ + c)] = static_cast<float>(acc / static_cast<double>(spatial));
      }
      for (int64_t j = 0; j < r_; ++j) {
        float acc = b1_.value[j];
        for (int64_t c = 0; c < c_; ++c) acc += w1_.value[j * c_ + c] * s_[static_cast<size_t>(b * c_ + c)];
        a1_[static_cast<size_t>(b * r_ + j)] = acc > 0.f ? acc : 0.f;
      }
      for (int64_t c = 0; c < c_; ++c) {
        float acc = b2_.value[c];
        for (int64_t j = 0; j < r_; ++j) acc += w2_.value[c * r_ + j] * a1_[static_cast<size_t>(b * r_ + j)];
        a2_[static_cast<size_t>(b * c_ + c)] = 1.f / (1.f + std::exp(-acc));
      }
    }
    FloatGrid y(x.shape);
    for (int64_t b = 0; b < n; ++b)
      for (int64_t c = 0; c < c_; ++c) {
        float g = a2_[static_cast<size_t>(b * c_ + c)];
        const float* src = x.ptr() + (b * c_ + c) * spatial;
        float* dst = y.ptr() + (b * c_ + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) dst[i] = g * src[i];
      }
    return y;
  }

  FloatGrid backward(const FloatGrid& dy) override {
    int64_t n = x_.shape[0], spatial = x_.shape[2] * x_.shape[3] * x_.shape[4];
    FloatGrid dx(x_.shape);
    std::vector<float> da2(static_cast<size_t>(c_)), dz2(static_cast<size_t>(c_));
    std::vector<float> da1(static_cast<size_t>(r_)), dz1(static_cast<size_t>(r_));
    std::vector<float> ds(static_cast<size_t>(c_));
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t c = 0; c < c_; ++c) {
        const float* dyp = dy.ptr() + (b * c_ + c) * spatial;
        const float* xp = x_.ptr() + (b * c_ + c) * spatial;
        float* dxp = dx.ptr() + (b * c_ + c) * spatial;
        float g = a2_[static_cast<size_t>(b * c_ + c)];
        double acc = 0;
        for (int64_t i = 0; i < spatial; ++i) {
          acc += static_cast<double>(dyp[i]) * xp[i];
          dxp[i] = g * dyp[i];
        }
        da2[static_cast<size_t>(c)] = static_cast<float>(acc);
        dz2[static_cast<size_t>(c)] = da2[static_cast<size_t>(c)] * g * (1.f - g);
      }
      std::fill(da1.begin(), da1.end(), 0.f);
      for (int64_t c = 0; c < c_; ++c) {
        b2_.grad[c] += dz2[static_cast<size_t>(c)];
        for (int64_t j = 0; j < r_; ++j) {
          w2_.grad[c * r_ + j] += dz2[static_cast<size_t>(c)] * a1_[static_cast<size_t>(b * r_ + j)];
          da1[static_cast<size_t>(j)] += w2_.value[c * r_ + j] * dz2[static_cast<size_t>(c)];
        }
      }
      for (int64_t j = 0; j < r_; ++j)
        dz1[static_cast<size_t>(j)] = a1_[static_cast<size_t>(b * r_ + j)] > 0.f ? da1[static_cast<size_t>(j)] : 0.f;
      std::fill(ds.begin(), ds.end(), 0.f);
      for (int64_t j = 0; j < r_; ++j) {
        b1_.grad[j] += dz1[static_cast<size_t>(j)];
        for (int64_t c = 0; c < c_; ++c) {
          w1_.grad[j * c_ + c] += dz1[static_cast<size_t>(j)] * s_[static_cast<size_t>(b * c_ + c)];
          ds[static_cast<size_t>(c)] += w1_.value[j * c_ + c] * dz1[static_cast<size_t>(j)];
        }
      }
      float inv_spatial = 1.f / static_cast<float>(spatial);
      for (int64_t c = 0; c < c_; ++c) {
        float add = ds[static_cast<size_t>(c)] * inv_spatial;
        float* dxp = dx.ptr() + (b * c_ + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) dxp[i] += add;
      }
    }
    return dx;
  }

  void collect(std::vector<Param*>& out) override {
    out.push_back(&w1_);
    out.push_back(&b1_);
    out.push_back(&w2_);
    out.push_back(&b2_);
  }

 private:
  int64_t c_, r_;
  Param w1_, b1_, w2_, b2_;
  FloatGrid x_;
  std::vector<float> s_, a1_, a2_;
};

// ---------------------------------------------------------------------------
// Structural helpers (not Layers: operate on two tensors)

inline FloatGrid concat_channels(const FloatGrid& a, const FloatGrid& b) {
  if (a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] || a.shape[3] != b.shape[3] ||
      a.shape[4] != b.shape[4])
    throw ShapeError("concat_channels: incompatible shapes");
  int64_t n = a.shape[0], ca = a.shape[1], cb = b.shape[1];
  int64_t spatial = a.shape[2] * a.shape[3] * a.shape[4];
  FloatGrid y({n, ca + cb, a.shape[2], a.shape[3], a.shape[4]});
  for (int64_t bb = 0; bb < n; ++bb) {
    std::copy_n(a.ptr() + bb * ca * spatial, ca * spatial, y.ptr() + bb * (ca + cb) * spatial);
    std::copy_n(b.ptr() + bb * cb * spatial, cb * spatial,
                y.ptr() + (bb * (ca + cb) + ca) * spatial);
  }
  return y;
}

inline std::pair<FloatGrid, FloatGrid> split_channels(const FloatGrid& dy, int64_t ca) {
  int64_t n = dy.shape[0], c = dy.shape[1], cb = c - ca;
  int64_t spatial = dy.shape[2] * dy.shape[3] * dy.shape[4];
  FloatGrid da({n, ca, dy.shape[2], dy.shape[3], dy.shape[4]});
  FloatGrid db({n, cb, dy.shape[2], dy.shape[3], dy.shape[4]});
  for (int64_t b = 0; b < n; ++b) {
    std::copy_n(dy.ptr() + b * c * spatial, ca * spatial, da.ptr() + b * ca * spatial);
    std::copy_n(dy.ptr() + (b * c + ca) * spatial, cb * spatial, db.ptr() + b * cb * spatial);
  }
  return {std::move(da), std::move(db)};
}

inline void add_inplace(FloatGrid& a, const FloatGrid& b) {
  if (a.shape != b.shape) throw ShapeError("add_inplace: shape mismatch");
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

// ---------------------------------------------------------------------------

struct AdamConfig {
  float lr = 1e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 1e-5f;  // classic L2 added to the gradient
};

class Adam {
 public:
  explicit Adam(std::vector<Param*> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    for (Param* p : params_) {
      m_.emplace_back(p->value.shape);
      v_.emplace_back(p->value.shape);
    }
  }

  void set_lr(float lr) { cfg_.lr = lr; }
  float lr() const { return cfg_.lr; }

  void zero_grad() {
    for (Param* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    float bc1 = 1.f - std::pow(cfg_.beta1, static_cast<float>(t_));
    float bc2 = 1.f - std::pow(cfg_.beta2, static_cast<float>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Param* p = params_[k];
      for (int64_t i = 0; i < p->numel(); ++i) {
        float g = p->grad[i] + cfg_.weight_decay * p->value[i];
        float& m = m_[k][i];
        float& v = v_[k][i];
        m = cfg_.beta1 * m + (1.f - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.f - cfg_.beta2) * g * g;
        float mhat = m / bc1;
        float vhat = v / bc2;
        p->value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  std::vector<Param*> params_;
  AdamConfig cfg_;
  std::vector<FloatGrid> m_, v_;
  int64_t t_ = 0;
};

}  // namespace maskmine::nn
