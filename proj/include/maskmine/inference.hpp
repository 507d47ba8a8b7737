#pragma once

// Full-volume inference: slice-wise with multislice context for 2D
// models, tiled with center-crop stitching for 3D models. Returns raw
// logits over the whole volume so callers can collapse or threshold.

#include "maskmine/unet.hpp"
#include "maskmine/voldata.hpp"

namespace maskmine {

namespace detail {

inline int64_t round_up(int64_t v, int64_t mult) { return (v + mult - 1) / mult * mult; }

}  // namespace detail

// 2D slice-wise prediction. extra_channel, when given, is appended as one
// more input channel per slice (the combined setup feeds the liver
// probability map to the lesion network this way).
inline FloatGrid predict_volume_2d(Model& m, const Volume& v, int multislice_k,
                                   Head head = Head::binary,
                                   const FloatGrid* extra_channel = nullptr,
                                   int64_t slice_batch = 8) {
  const ModelConfig& cfg = m.config();
  if (cfg.dims != 2) throw ConfigError("predict_volume_2d: 2D model required");
  int64_t expected_c = multislice_k + (extra_channel ? 1 : 0);
  if (cfg.in_channels != expected_c)
    throw ShapeError("predict_volume_2d: input channel mismatch");

  int64_t d = v.depth(), h = v.height(), w = v.width();
  int64_t mult = 1 << cfg.depth;
  int64_t ph = detail::round_up(h, mult), pw = detail::round_up(w, mult);
  int64_t out_c = head == Head::binary ? 2 : 4;

  FloatGrid logits({out_c, d, h, w});
  for (int64_t z0 = 0; z0 < d; z0 += slice_batch) {
    int64_t zn = std::min(slice_batch, d - z0);
    FloatGrid batch({zn, cfg.in_channels, ph, pw});
    for (int64_t b = 0; b < zn; ++b) {
      FloatGrid slices = multislice_view(v, z0 + b, multislice_k);
      for (int64_t c = 0; c < multislice_k; ++c)
        for (int64_t y = 0; y < h; ++y)
          std::copy_n(&slices.at3(c, y, 0), w,
                      batch.ptr() + ((b * cfg.in_channels + c) * ph + y) * pw);
      if (extra_channel)
        for (int64_t y = 0; y < h; ++y)
          std::copy_n(extra_channel->ptr() + ((z0 + b) * h + y) * w, w,
                      batch.ptr() + ((b * cfg.in_channels + multislice_k) * ph + y) * pw);
    }
    FloatGrid out = m.forward(batch, false, head);
    for (int64_t b = 0; b < zn; ++b)
      for (int64_t c = 0; c < out_c; ++c)
        for (int64_t y = 0; y < h; ++y)
          std::copy_n(out.ptr() + ((b * out_c + c) * ph + y) * pw, w,
                      logits.ptr() + ((c * d + z0 + b) * h + y) * w);
  }
  return logits;
}

// 3D tiled prediction; tiles overlap by `overlap` voxels and only the
// tile centers are stitched into the output.
inline FloatGrid predict_volume_3d(Model& m, const Volume& v,
                                   std::array<int64_t, 3> tile = {64, 128, 128},
                                   Head head = Head::binary, int64_t overlap = 8) {
  const ModelConfig& cfg = m.config();
  if (cfg.dims != 3) throw ConfigError("predict_volume_3d: 3D model required");
  int64_t mult = 1 << cfg.depth;
  std::array<int64_t, 3> dims = {v.depth(), v.height(), v.width()};
  std::array<int64_t, 3> t{};
  for (int a = 0; a < 3; ++a)
    t[a] = std::min(detail::round_up(dims[a], mult), detail::round_up(tile[a], mult));
  int64_t out_c = head == Head::binary ? 2 : 4;

  FloatGrid logits({out_c, dims[0], dims[1], dims[2]});
  std::array<int64_t, 3> step{};
  for (int a = 0; a < 3; ++a) step[a] = std::max<int64_t>(1, t[a] - 2 * overlap);

  auto starts = [&](int a) {
    std::vector<int64_t> s;
    for (int64_t o = 0;; o += step[a]) {
      int64_t start = std::min(o, std::max<int64_t>(0, dims[a] - t[a]));
      if (s.empty() || start > s.back()) s.push_back(start);
      if (start + t[a] >= dims[a]) break;
    }
    return s;
  };
  auto zs = starts(0), ys = starts(1), xs = starts(2);

  ByteGrid written({dims[0], dims[1], dims[2]});
  for (int64_t z0 : zs)
    for (int64_t y0 : ys)
      for (int64_t x0 : xs) {
        FloatGrid in({1, 1, t[0], t[1], t[2]});
        for (int64_t z = 0; z < t[0]; ++z)
          for (int64_t y = 0; y < t[1]; ++y)
            for (int64_t x = 0; x < t[2]; ++x) {
              int64_t vz = z0 + z, vy = y0 + y, vx = x0 + x;
              in.ptr()[(z * t[1] + y) * t[2] + x] =
                  (vz < dims[0] && vy < dims[1] && vx < dims[2]) ? v.voxels.at3(vz, vy, vx) : 0.f;
            }
        FloatGrid out = m.forward(in, false, head);
        for (int64_t z = 0; z < t[0]; ++z)
          for (int64_t y = 0; y < t[1]; ++y)
            for (int64_t x = 0; x < t[2]; ++x) {
              int64_t vz = z0 + z, vy = y0 + y, vx = x0 + x;
              if (vz >= dims[0] || vy >= dims[1] || vx >= dims[2]) continue;
              // keep only tile centers, except at volume borders
              bool border_lo_z = z0 == 0, border_hi_z = z0 + t[0] >= dims[0];
              bool border_lo_y = y0 == 0, border_hi_y = y0 + t[1] >= dims[1];
              bool border_lo_x = x0 == 0, border_hi_x = x0 + t[2] >= dims[2];
              if ((z < overlap && !border_lo_z) || (z >= t[0] - overlap && !border_hi_z) ||
                  (y < overlap && !border_lo_y) || (y >= t[1] - overlap && !border_hi_y) ||
                  (x < overlap && !border_lo_x) || (x >= t[2] - overlap && !border_hi_x))
                continue;
              if (written.at3(vz, vy, vx)) continue;
              written.at3(vz, vy, vx) = 1;
              for (int64_t c = 0; c < out_c; ++c)
                logits.ptr()[((c * dims[0] + vz) * dims[1] + vy) * dims[2] + vx] =
                    out.ptr()[((c * t[0] + z) * t[1] + y) * t[2] + x];
            }
      }
  // fill any voxel not covered by a tile center from the raw stitches
  for (int64_t i = 0; i < written.numel(); ++i)
    if (!written[i]) {
      // only possible if overlap pruning removed everything; fall back to
      // nearest written voxel along x
      int64_t j = i;
      while (j > 0 && !written[j]) --j;
      for (int64_t c = 0; c < out_c; ++c)
        logits[c * written.numel() + i] = logits[c * written.numel() + j];
    }
  return logits;
}

// Dispatch on model dimensionality.
inline FloatGrid predict_volume(Model& m, const Volume& v, int multislice_k,
                                Head head = Head::binary,
                                const FloatGrid* extra_channel = nullptr,
                                std::array<int64_t, 3> tile3d = {64, 128, 128}) {
  if (m.config().dims == 2) return predict_volume_2d(m, v, multislice_k, head, extra_channel);
  return predict_volume_3d(m, v, tile3d, head);
}

// argmax over the leading channel axis -> binary mask (channel >= C/2)
inline ByteGrid binary_from_logits(const FloatGrid& logits) {
  int64_t c = logits.shape[0];
  int64_t n = logits.numel() / c;
  std::vector<int64_t> spatial(logits.shape.begin() + 1, logits.shape.end());
  ByteGrid out(spatial);
  if (c == 2) {
    for (int64_t i = 0; i < n; ++i) out[i] = logits[n + i] > logits[i] ? 1 : 0;
  } else {
    throw ShapeError("binary_from_logits: expected 2 channels");
  }
  return out;
}

// per-voxel sigmoid over all channels
inline FloatGrid sigmoid_probs(const FloatGrid& logits) {
  FloatGrid p(logits.shape);
  for (size_t i = 0; i < logits.data.size(); ++i)
    p.data[i] = 1.f / (1.f + std::exp(-logits.data[i]));
  return p;
}

// softmax foreground probability of 2-channel logits
inline FloatGrid foreground_prob(const FloatGrid& logits2) {
  if (logits2.shape[0] != 2) throw ShapeError("foreground_prob: expected 2 channels");
  int64_t n = logits2.numel() / 2;
  std::vector<int64_t> spatial(logits2.shape.begin() + 1, logits2.shape.end());
  FloatGrid p(spatial);
  for (int64_t i = 0; i < n; ++i)
    p[i] = 1.f / (1.f + std::exp(logits2[i] - logits2[n + i]));
  return p;
}

}  // namespace maskmine
