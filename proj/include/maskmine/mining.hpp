#pragma once

// Error-mask generation, 4-channel mining target construction and the
// collapse of multiclass error predictions back to binary masks.

#include <array>

#include "maskmine/core.hpp"
#include "maskmine/voldata.hpp"

namespace maskmine {

// Fixed class encoding. The order matters: floor(argmax/2) groups
// {TN, FP} -> background and {FN, TP} -> foreground.
enum ErrorClass : uint8_t { kTrueNegative = 0, kFalsePositive = 1, kFalseNegative = 2, kTruePositive = 3 };

struct ErrorMask {
  ByteGrid voxels;  // values in {0,1,2,3}
};

enum class MiningVariant { pwce, dice };

inline const char* to_string(MiningVariant v) { return v == MiningVariant::pwce ? "pwce" : "dice"; }

struct MiningTargets {
  std::array<ByteGrid, 4> channels;  // binary, aligned to ErrorClass indices
  MiningVariant variant = MiningVariant::pwce;
};

namespace detail {

inline void require_binary(const ByteGrid& g, const char* what) {
  for (uint8_t v : g.data)
    if (v > 1) throw DomainError(std::string(what) + ": mask not binary");
}

}  // namespace detail

// Per-voxel confusion class of a prediction against ground truth:
// (0,0)->TN, (1,0)->FP, (0,1)->FN, (1,1)->TP, i.e. 2*gt + pred.
inline ErrorMask mine_error_mask(const ByteGrid& pred, const ByteGrid& gt) {
  if (pred.shape != gt.shape) throw ShapeError("mine_error_mask: shape mismatch");
  detail::require_binary(pred, "mine_error_mask pred");
  detail::require_binary(gt, "mine_error_mask gt");
  ErrorMask e{ByteGrid(pred.shape)};
  for (int64_t i = 0; i < pred.numel(); ++i)
    e.voxels[i] = static_cast<uint8_t>(2 * gt[i] + pred[i]);
  return e;
}

// pwce variant: strict one-hot of the error mask.
// dice variant: the TP channel is replaced by the ground-truth foreground
// mask, so FN voxels carry foreground signal on two channels at once.
inline MiningTargets build_mining_targets(const ErrorMask& err, const ByteGrid& gt,
                                          MiningVariant variant) {
  if (err.voxels.shape != gt.shape) throw ShapeError("build_mining_targets: shape mismatch");
  detail::require_binary(gt, "build_mining_targets gt");
  for (uint8_t v : err.voxels.data)
    if (v > 3) throw DomainError("build_mining_targets: error class out of range");

  MiningTargets t;
  t.variant = variant;
  for (int c = 0; c < 4; ++c) {
    t.channels[static_cast<size_t>(c)] = ByteGrid(gt.shape);
    for (int64_t i = 0; i < gt.numel(); ++i)
      t.channels[static_cast<size_t>(c)][i] = err.voxels[i] == c ? 1 : 0;
  }
  if (variant == MiningVariant::dice) t.channels[kTruePositive] = gt;
  return t;
}

// Class collapse: output = floor(argmax_c logits_c / 2), ties broken
// toward the lowest class index. logits are (4, ...spatial).
inline ByteGrid collapse_to_binary(const FloatGrid& logits4) {
  if (logits4.ndim() < 2 || logits4.shape[0] != 4)
    throw ShapeError("collapse_to_binary: expected 4 leading channels");
  int64_t n = logits4.numel() / 4;
  std::vector<int64_t> spatial(logits4.shape.begin() + 1, logits4.shape.end());
  ByteGrid out(spatial);
  for (int64_t i = 0; i < n; ++i) {
    int best = 0;
    float best_v = logits4[i];
    for (int c = 1; c < 4; ++c) {
      float v = logits4[c * n + i];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out[i] = static_cast<uint8_t>(best / 2);
  }
  return out;
}

// dice-variant final mask: threshold the TP channel probability.
inline ByteGrid tp_channel_mask(const FloatGrid& probs4, float threshold = 0.5f) {
  if (probs4.ndim() < 2 || probs4.shape[0] != 4)
    throw ShapeError("tp_channel_mask: expected 4 leading channels");
  if (!(threshold > 0.f && threshold < 1.f))
    throw ParameterError("tp_channel_mask: threshold must be in (0,1)");
  int64_t n = probs4.numel() / 4;
  std::vector<int64_t> spatial(probs4.shape.begin() + 1, probs4.shape.end());
  ByteGrid out(spatial);
  for (int64_t i = 0; i < n; ++i)
    out[i] = probs4[kTruePositive * n + i] >= threshold ? 1 : 0;
  return out;
}

// One-hot expansion of an error mask into (4, ...spatial) logits-like 0/1.
inline FloatGrid one_hot_error(const ErrorMask& err) {
  std::vector<int64_t> shape = {4};
  shape.insert(shape.end(), err.voxels.shape.begin(), err.voxels.shape.end());
  FloatGrid out(shape);
  int64_t n = err.voxels.numel();
  for (int64_t i = 0; i < n; ++i) out[err.voxels[i] * n + i] = 1.f;
  return out;
}

}  // namespace maskmine
