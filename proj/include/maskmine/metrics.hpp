#pragma once

// Segmentation metrics and connected-component postprocessing.

#include <cstdint>
#include <deque>
#include <vector>

#include "maskmine/core.hpp"

namespace maskmine {

struct ConfusionCounts {
  int64_t tn = 0, fp = 0, fn = 0, tp = 0;
  int64_t total() const { return tn + fp + fn + tp; }
};

inline ConfusionCounts error_counts(const ByteGrid& pred, const ByteGrid& gt) {
  if (pred.shape != gt.shape) throw ShapeError("error_counts: shape mismatch");
  ConfusionCounts c;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    if (pred[i] > 1 || gt[i] > 1) throw DomainError("error_counts: mask not binary");
    if (gt[i]) {
      pred[i] ? ++c.tp : ++c.fn;
    } else {
      pred[i] ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

// 2|P∩G| / (|P|+|G|); both masks empty counts as a perfect match (1.0).
inline double dice_per_volume(const ByteGrid& pred, const ByteGrid& gt) {
  ConfusionCounts c = error_counts(pred, gt);
  int64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

enum class Connectivity { six = 6, twenty_six = 26 };

// Keep only the largest connected foreground component. Ties go to the
// component containing the smallest linear index.
inline ByteGrid largest_component(const ByteGrid& mask, Connectivity conn = Connectivity::twenty_six) {
  int64_t d = mask.ndim() == 3 ? mask.shape[0] : 1;
  int64_t h = mask.shape[mask.ndim() - 2];
  int64_t w = mask.shape[mask.ndim() - 1];

  std::vector<int32_t> label(static_cast<size_t>(mask.numel()), -1);
  std::vector<int64_t> comp_size;
  std::vector<int64_t> comp_first;

  std::deque<int64_t> queue;
  for (int64_t start = 0; start < mask.numel(); ++start) {
    if (!mask[start] || label[static_cast<size_t>(start)] >= 0) continue;
    int32_t id = static_cast<int32_t>(comp_size.size());
    comp_size.push_back(0);
    comp_first.push_back(start);
    label[static_cast<size_t>(start)] = id;
    queue.push_back(start);
    while (!queue.empty()) {
      int64_t cur = queue.front();
      queue.pop_front();
      ++comp_size[static_cast<size_t>(id)];
      int64_t cz = cur / (h * w), cy = (cur / w) % h, cx = cur % w;
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dz == 0 && dy == 0 && dx == 0) continue;
            if (conn == Connectivity::six && std::abs(dz) + std::abs(dy) + std::abs(dx) != 1)
              continue;
            int64_t z = cz + dz, y = cy + dy, x = cx + dx;
            if (z < 0 || z >= d || y < 0 || y >= h || x < 0 || x >= w) continue;
            int64_t lin = (z * h + y) * w + x;
            if (mask[lin] && label[static_cast<size_t>(lin)] < 0) {
              label[static_cast<size_t>(lin)] = id;
              queue.push_back(lin);
            }
          }
    }
  }

  ByteGrid out(mask.shape);
  if (comp_size.empty()) return out;
  size_t best = 0;
  for (size_t i = 1; i < comp_size.size(); ++i)
    if (comp_size[i] > comp_size[best] ||
        (comp_size[i] == comp_size[best] && comp_first[i] < comp_first[best]))
      best = i;
  for (int64_t i = 0; i < mask.numel(); ++i)
    out[i] = label[static_cast<size_t>(i)] == static_cast<int32_t>(best) ? 1 : 0;
  return out;
}

}  // namespace maskmine
