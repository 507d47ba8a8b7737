#pragma once

// Distance-transform boundary weight maps:
//   w(x) = w_c(x) + w0 * exp(-(d1(x)+d2(x))^2 / (2 sigma^2))
// with d1/d2 the Euclidean distances to the nearest and second-nearest
// foreground component and w_c the clamped inverse class frequency.

#include <cmath>
#include <limits>
#include <vector>

#include "maskmine/core.hpp"

namespace maskmine {

namespace detail {

constexpr float kFarAway = 1e6f;

// Felzenszwalb-Huttenlocher 1D squared distance transform.
inline void edt_1d(std::vector<float>& f, std::vector<float>& out, std::vector<int>& v,
                   std::vector<float>& z, int n) {
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<float>::infinity();
  z[1] = std::numeric_limits<float>::infinity();
  for (int q = 1; q < n; ++q) {
    float s;
    while (true) {
      int p = v[k];
      s = ((f[static_cast<size_t>(q)] + static_cast<float>(q) * q) -
           (f[static_cast<size_t>(p)] + static_cast<float>(p) * p)) /
          (2.f * static_cast<float>(q - p));
      if (s <= z[static_cast<size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k) + 1] = std::numeric_limits<float>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k) + 1] < static_cast<float>(q)) ++k;
    int p = v[static_cast<size_t>(k)];
    out[static_cast<size_t>(q)] =
        static_cast<float>(q - p) * static_cast<float>(q - p) + f[static_cast<size_t>(p)];
  }
}

// Exact squared EDT of a 2D indicator (distance to nearest set pixel).
inline std::vector<float> edt_2d(const std::vector<uint8_t>& ind, int64_t h, int64_t w) {
  std::vector<float> dist(static_cast<size_t>(h * w));
  for (size_t i = 0; i < dist.size(); ++i)
    dist[i] = ind[i] ? 0.f : kFarAway * kFarAway;

  int n = static_cast<int>(std::max(h, w));
  std::vector<float> f(static_cast<size_t>(n)), out(static_cast<size_t>(n));
  std::vector<int> v(static_cast<size_t>(n));
  std::vector<float> z(static_cast<size_t>(n) + 1);

  for (int64_t x = 0; x < w; ++x) {  // columns
    for (int64_t y = 0; y < h; ++y) f[static_cast<size_t>(y)] = dist[static_cast<size_t>(y * w + x)];
    edt_1d(f, out, v, z, static_cast<int>(h));
    for (int64_t y = 0; y < h; ++y) dist[static_cast<size_t>(y * w + x)] = out[static_cast<size_t>(y)];
  }
  for (int64_t y = 0; y < h; ++y) {  // rows
    for (int64_t x = 0; x < w; ++x) f[static_cast<size_t>(x)] = dist[static_cast<size_t>(y * w + x)];
    edt_1d(f, out, v, z, static_cast<int>(w));
    for (int64_t x = 0; x < w; ++x) dist[static_cast<size_t>(y * w + x)] = out[static_cast<size_t>(x)];
  }
  return dist;
}

// 8-connected component labels of a 2D binary plane; returns count.
inline int label_components_2d(const uint8_t* mask, int64_t h, int64_t w,
                               std::vector<int32_t>& labels) {
  labels.assign(static_cast<size_t>(h * w), -1);
  int count = 0;
  std::vector<int64_t> stack;
  for (int64_t s = 0; s < h * w; ++s) {
    if (!mask[s] || labels[static_cast<size_t>(s)] >= 0) continue;
    int id = count++;
    stack.push_back(s);
    labels[static_cast<size_t>(s)] = id;
    while (!stack.empty()) {
      int64_t cur = stack.back();
      stack.pop_back();
      int64_t cy = cur / w, cx = cur % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int64_t y = cy + dy, x = cx + dx;
          if ((dy == 0 && dx == 0) || y < 0 || y >= h || x < 0 || x >= w) continue;
          int64_t lin = y * w + x;
          if (mask[lin] && labels[static_cast<size_t>(lin)] < 0) {
            labels[static_cast<size_t>(lin)] = id;
            stack.push_back(lin);
          }
        }
    }
  }
  return count;
}

}  // namespace detail

struct WeightMapConfig {
  float w0 = 10.f;
  float sigma = 5.f;
  float class_weight_min = 0.1f;
  float class_weight_max = 10.f;
};

// Weight map for one 2D plane. For masks with fewer than two components
// the second distance is a large constant, killing the boundary term.
inline FloatGrid distance_weight_map_2d(const uint8_t* mask, int64_t h, int64_t w,
                                        const WeightMapConfig& cfg = {}) {
  int64_t n = h * w;
  int64_t fg = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (mask[i] > 1) throw DomainError("distance_weight_map: mask not binary");
    fg += mask[i];
  }
  double freq_fg = static_cast<double>(fg) / static_cast<double>(n);
  auto class_w = [&](bool is_fg) {
    double freq = is_fg ? freq_fg : 1.0 - freq_fg;
    double wc = freq > 0.0 ? 1.0 / freq : cfg.class_weight_max;
    return static_cast<float>(std::clamp(wc, static_cast<double>(cfg.class_weight_min),
                                         static_cast<double>(cfg.class_weight_max)));
  };

  std::vector<int32_t> labels;
  int n_comp = detail::label_components_2d(mask, h, w, labels);

  FloatGrid out({h, w});
  std::vector<float> d1(static_cast<size_t>(n), detail::kFarAway);
  std::vector<float> d2(static_cast<size_t>(n), detail::kFarAway);
  for (int c = 0; c < n_comp; ++c) {
    std::vector<uint8_t> ind(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i < n; ++i) ind[static_cast<size_t>(i)] = labels[static_cast<size_t>(i)] == c;
    std::vector<float> sq = detail::edt_2d(ind, h, w);
    for (int64_t i = 0; i < n; ++i) {
      float dist = std::sqrt(sq[static_cast<size_t>(i)]);
      if (dist < d1[static_cast<size_t>(i)]) {
        d2[static_cast<size_t>(i)] = d1[static_cast<size_t>(i)];
        d1[static_cast<size_t>(i)] = dist;
      } else if (dist < d2[static_cast<size_t>(i)]) {
        d2[static_cast<size_t>(i)] = dist;
      }
    }
  }

  float inv_two_sigma_sq = 1.f / (2.f * cfg.sigma * cfg.sigma);
  for (int64_t i = 0; i < n; ++i) {
    float sum = d1[static_cast<size_t>(i)] + d2[static_cast<size_t>(i)];
    float boundary = n_comp >= 1 ? cfg.w0 * std::exp(-sum * sum * inv_two_sigma_sq) : 0.f;
    out[i] = class_w(mask[i] != 0) + boundary;
  }
  return out;
}

// Slice-wise application over a (h,w) or (d,h,w) label grid.
inline FloatGrid distance_weight_map(const ByteGrid& mask, const WeightMapConfig& cfg = {}) {
  int64_t h = mask.shape[mask.ndim() - 2];
  int64_t w = mask.shape[mask.ndim() - 1];
  int64_t planes = mask.numel() / (h * w);
  FloatGrid out(mask.shape);
  for (int64_t p = 0; p < planes; ++p) {
    FloatGrid plane = distance_weight_map_2d(mask.ptr() + p * h * w, h, w, cfg);
    std::copy(plane.data.begin(), plane.data.end(), out.data.begin() + p * h * w);
  }
  return out;
}

}  // namespace maskmine
