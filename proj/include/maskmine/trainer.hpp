#pragma once

// Training orchestration: dataset container, the initial binary training
// loop and the mine-and-retrain extension.

#include <chrono>
#include <cstdio>
#include <functional>
#include <optional>

#include "maskmine/inference.hpp"
#include "maskmine/losses.hpp"
#include "maskmine/metrics.hpp"
#include "maskmine/mining.hpp"
#include "maskmine/unet.hpp"
#include "maskmine/voldata.hpp"
#include "maskmine/weight_map.hpp"

namespace maskmine {

struct LoadedCase {
  Volume image;  // windowed and normalized
  ByteGrid liver, lesion;
  std::string split;
  std::string id;

  const ByteGrid& mask(Target t) const { return t == Target::liver ? liver : lesion; }
};

struct Dataset {
  std::vector<LoadedCase> cases;
  std::vector<size_t> train_idx, val_idx;

  static Dataset load(const DatasetManifest& manifest, float hu_lo = -100.f, float hu_hi = 600.f) {
    Dataset ds;
    for (const auto& e : manifest.entries) {
      auto [vol, liver] = load_volume(manifest.root / e.volume, Target::liver);
      auto [vol2, lesion] = load_volume(manifest.root / e.volume, Target::lesion);
      (void)vol2;
      if (!liver || !lesion)
        throw ConsistencyError("dataset entry without liver/lesion labels: " + e.id);
      LoadedCase c;
      c.image = window_and_normalize(std::move(vol), hu_lo, hu_hi);
      c.liver = std::move(liver->voxels);
      c.lesion = std::move(lesion->voxels);
      c.split = e.split;
      c.id = e.id;
      if (c.split == "val")
        ds.val_idx.push_back(ds.cases.size());
      else
        ds.train_idx.push_back(ds.cases.size());
      ds.cases.push_back(std::move(c));
    }
    if (ds.train_idx.empty()) throw ConsistencyError("dataset has no training volumes");
    return ds;
  }
};

enum class StageLoss { liver_pwce, lesion_combined };

struct TrainConfig {
  int epochs = 70;
  int retrain_epochs = 30;
  int batch_size = 12;
  float lr = 1e-5f;
  float retrain_lr = 0;  // 0 -> same as lr
  float weight_decay = 1e-5f;
  int lr_step_epochs = 20;
  float lr_step_factor = 0.5f;
  int patches_per_epoch = 0;  // 0 -> 100 per training volume
  std::array<int64_t, 3> crop = {1, 256, 256};  // (d, h, w); d=1 for 2D
  int multislice_k = 3;
  CropPolicy policy = CropPolicy::uniform;
  int64_t region_margin = 16;
  bool augment_enabled = true;
  AugmentConfig augment;
  int early_stop_patience = 8;  // retraining only
  uint64_t seed = 0;

  int effective_patches(size_t n_train) const {
    return patches_per_epoch > 0 ? patches_per_epoch : static_cast<int>(100 * n_train);
  }
  float effective_retrain_lr() const { return retrain_lr > 0 ? retrain_lr : lr; }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_dice = 0;
  float lr = 0;
  double seconds = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  int best_epoch = -1;
  double best_val_dice = -1;
};

inline void write_history_csv(const TrainHistory& h, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write history " + path.string());
  f << "epoch,train_loss,val_loss,val_dice,lr,seconds\n";
  char buf[160];
  for (const auto& r : h.records) {
    std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6g,%.6g,%.6g,%.3f\n", r.epoch, r.train_loss,
                  r.val_loss, r.val_dice, static_cast<double>(r.lr), r.seconds);
    f << buf;
  }
}

// ---------------------------------------------------------------------------
// Patch batching

namespace detail {

struct SampledPatch {
  FloatGrid image;   // (c, d, h, w), d=1 for 2D
  ByteGrid label;    // (d, h, w); binary for initial training, classes 0-3
                     // for mining retraining
  std::array<int64_t, 3> origin{};
  size_t case_index = 0;
};

// crop a window from a grid with zero padding
template <typename T>
NdArray<T> crop_window(const NdArray<T>& g, std::array<int64_t, 3> origin,
                       std::array<int64_t, 3> size) {
  NdArray<T> out({size[0], size[1], size[2]});
  for (int64_t z = 0; z < size[0]; ++z)
    for (int64_t y = 0; y < size[1]; ++y)
      for (int64_t x = 0; x < size[2]; ++x) {
        int64_t vz = origin[0] + z, vy = origin[1] + y, vx = origin[2] + x;
        if (vz < g.shape[0] && vy < g.shape[1] && vx < g.shape[2])
          out.at3(z, y, x) = g.at3(vz, vy, vx);
      }
  return out;
}

// Draw one patch: crop origin via sample_crop's policy machinery, image
// assembled with multislice context for 2D models, then augmentation.
// `label_source` supplies the per-voxel training target (binary mask or
// mined error classes); `extra`, when given, is appended as one more
// input channel cropped from a same-shaped volume (2D only).
inline SampledPatch draw_patch(const Dataset& ds, size_t case_index, const ByteGrid& label_source,
                               const TrainConfig& cfg, bool is_2d, const ByteGrid* region,
                               Rng& rng, bool augment_now, const FloatGrid* extra = nullptr) {
  const LoadedCase& lc = ds.cases[case_index];
  LabelMask lm{label_source, Target::liver};
  Patch base = sample_crop(lc.image, lm, cfg.crop, cfg.policy, region, rng, cfg.region_margin);

  SampledPatch sp;
  sp.case_index = case_index;
  sp.origin = base.origin;
  sp.label = std::move(base.label);

  if (is_2d) {
    int k = cfg.multislice_k;
    int64_t c_total = k + (extra ? 1 : 0);
    sp.image = FloatGrid({c_total, 1, cfg.crop[1], cfg.crop[2]});
    for (int c = 0; c < k; ++c) {
      int64_t z = std::clamp<int64_t>(base.origin[0] + c - k / 2, 0, lc.image.depth() - 1);
      FloatGrid win = crop_window(lc.image.voxels, {z, base.origin[1], base.origin[2]},
                                  {1, cfg.crop[1], cfg.crop[2]});
      std::copy(win.data.begin(), win.data.end(), sp.image.data.begin() + c * cfg.crop[1] * cfg.crop[2]);
    }
    if (extra) {
      FloatGrid win = crop_window(*extra, base.origin, {1, cfg.crop[1], cfg.crop[2]});
      std::copy(win.data.begin(), win.data.end(),
                sp.image.data.begin() + k * cfg.crop[1] * cfg.crop[2]);
    }
  } else {
    sp.image = std::move(base.image);
    sp.image.shape = {1, cfg.crop[0], cfg.crop[1], cfg.crop[2]};
  }

  if (augment_now && cfg.augment_enabled) {
    Patch p;
    p.image = std::move(sp.image);
    p.label = std::move(sp.label);
    p = augment(std::move(p), rng, cfg.augment);
    sp.image = std::move(p.image);
    sp.label = std::move(p.label);
  }
  return sp;
}

struct Batch {
  FloatGrid images;            // (n, c, h, w) 2D or (n, c, d, h, w) 3D
  std::vector<uint8_t> labels;  // flattened (n * spatial)
  std::vector<float> weights;   // distance weight maps, same layout
};

inline Batch assemble(const std::vector<SampledPatch>& patches, bool is_2d, bool with_weights) {
  int64_t n = static_cast<int64_t>(patches.size());
  const auto& im0 = patches[0].image;  // (c, d, h, w)
  int64_t c = im0.shape[0], d = im0.shape[1], h = im0.shape[2], w = im0.shape[3];
  Batch b;
  if (is_2d)
    b.images = FloatGrid({n, c, h, w});
  else
    b.images = FloatGrid({n, c, d, h, w});
  int64_t spatial = d * h * w;
  b.labels.resize(static_cast<size_t>(n * spatial));
  if (with_weights) b.weights.resize(static_cast<size_t>(n * spatial));
  for (int64_t i = 0; i < n; ++i) {
    std::copy(patches[static_cast<size_t>(i)].image.data.begin(),
              patches[static_cast<size_t>(i)].image.data.end(),
              b.images.data.begin() + i * c * spatial);
    const auto& lbl = patches[static_cast<size_t>(i)].label;
    std::copy(lbl.data.begin(), lbl.data.end(), b.labels.begin() + i * spatial);
    if (with_weights) {
      FloatGrid wm = distance_weight_map(lbl);
      std::copy(wm.data.begin(), wm.data.end(), b.weights.begin() + i * spatial);
    }
  }
  return b;
}

// logits (n, C, ...) -> channel-major (C, n*spatial) layout expected by
// the loss functions
inline std::vector<float> to_channel_major(const FloatGrid& logits) {
  int64_t n = logits.shape[0], c = logits.shape[1];
  int64_t spatial = logits.numel() / (n * c);
  std::vector<float> out(static_cast<size_t>(logits.numel()));
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      std::copy_n(logits.ptr() + (b * c + ch) * spatial, spatial,
                  out.data() + ch * n * spatial + b * spatial);
  return out;
}

inline FloatGrid from_channel_major(std::span<const float> grad, const std::vector<int64_t>& shape) {
  FloatGrid out(shape);
  int64_t n = shape[0], c = shape[1];
  int64_t spatial = out.numel() / (n * c);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      std::copy_n(grad.data() + ch * n * spatial + b * spatial, spatial,
                  out.ptr() + (b * c + ch) * spatial);
  return out;
}

inline std::vector<FloatGrid> snapshot_params(Model& m) {
  std::vector<FloatGrid> out;
  for (nn::Param* p : m.parameters()) out.push_back(p->value);
  for (auto& [name, buf] : m.buffers()) out.push_back(*buf);
  return out;
}

inline void restore_params(Model& m, const std::vector<FloatGrid>& snap) {
  size_t i = 0;
  for (nn::Param* p : m.parameters()) p->value = snap[i++];
  for (auto& [name, buf] : m.buffers()) *buf = snap[i++];
}

}  // namespace detail

// ---------------------------------------------------------------------------

// Scalar loss + gradient for a binary-stage batch (channel-major logits).
inline LossValue<float> binary_stage_loss(std::span<const float> logits_cm,
                                          std::span<const uint8_t> labels,
                                          std::span<const float> weights, StageLoss kind) {
  if (kind == StageLoss::liver_pwce) return pwce_loss<float>(logits_cm, labels, weights);
  return combined_lesion_loss<float>(logits_cm, labels, weights);
}

// Mean dice of full-volume binary predictions over a set of cases.
// `extra_channels`, when given, holds one per-case conditioning volume.
inline double validation_dice(Model& m, const Dataset& ds, const std::vector<size_t>& idx,
                              Target target, const TrainConfig& cfg,
                              const std::vector<FloatGrid>* extra_channels = nullptr) {
  if (idx.empty()) return 0.0;
  double acc = 0;
  for (size_t i : idx) {
    const LoadedCase& lc = ds.cases[i];
    const FloatGrid* extra = extra_channels ? &(*extra_channels)[i] : nullptr;
    FloatGrid logits = predict_volume(m, lc.image, cfg.multislice_k, Head::binary, extra, cfg.crop);
    acc += dice_per_volume(binary_from_logits(logits), lc.mask(target));
  }
  return acc / static_cast<double>(idx.size());
}

// Initial binary training. Deterministic given cfg.seed. Restores the
// best-validation parameters into the model before returning.
inline TrainHistory train(Model& m, const Dataset& ds, Target target, StageLoss loss_kind,
                          const TrainConfig& cfg, int epochs_override = 0) {
  bool is_2d = m.config().dims == 2;
  int epochs = epochs_override > 0 ? epochs_override : cfg.epochs;
  int patches = cfg.effective_patches(ds.train_idx.size());
  int steps = std::max(1, (patches + cfg.batch_size - 1) / cfg.batch_size);

  nn::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.weight_decay = cfg.weight_decay;
  nn::Adam opt(m.parameters_for_head(Head::binary), ac);

  Rng root(cfg.seed);
  TrainHistory hist;
  std::vector<FloatGrid> best;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    float lr = cfg.lr * std::pow(cfg.lr_step_factor, static_cast<float>(epoch / cfg.lr_step_epochs));
    opt.set_lr(lr);

    Rng erng = root.fork(static_cast<uint64_t>(epoch) + 1);
    double loss_acc = 0;
    for (int step = 0; step < steps; ++step) {
      std::vector<detail::SampledPatch> ps;
      for (int b = 0; b < cfg.batch_size; ++b) {
        size_t ci = ds.train_idx[static_cast<size_t>(
            erng.uniform_int(0, static_cast<int64_t>(ds.train_idx.size()) - 1))];
        const LoadedCase& lc = ds.cases[ci];
        const ByteGrid* region =
            cfg.policy == CropPolicy::in_and_around_region ? &lc.liver : nullptr;
        ps.push_back(detail::draw_patch(ds, ci, lc.mask(target), cfg, is_2d, region, erng, true));
      }
      detail::Batch batch = detail::assemble(ps, is_2d, true);
      FloatGrid logits = m.forward(batch.images, true, Head::binary);
      std::vector<float> cm = detail::to_channel_major(logits);
      LossValue<float> lv = binary_stage_loss(cm, batch.labels, batch.weights, loss_kind);
      if (!std::isfinite(lv.value))
        throw NumericError("training diverged: non-finite loss at epoch " +
                           std::to_string(epoch) + " step " + std::to_string(step));
      loss_acc += lv.value;
      opt.zero_grad();
      m.backward(detail::from_channel_major(lv.grad, logits.shape));
      opt.step();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_acc / steps;
    rec.lr = lr;
    rec.val_dice = validation_dice(m, ds, ds.val_idx, target, cfg);

    // validation loss proxy on deterministic validation crops
    if (!ds.val_idx.empty()) {
      Rng vrng = root.fork("val").fork(static_cast<uint64_t>(epoch) + 1);
      std::vector<detail::SampledPatch> vs;
      for (int b = 0; b < std::min(cfg.batch_size, 8); ++b) {
        size_t ci = ds.val_idx[static_cast<size_t>(
            vrng.uniform_int(0, static_cast<int64_t>(ds.val_idx.size()) - 1))];
        const LoadedCase& lc = ds.cases[ci];
        vs.push_back(detail::draw_patch(ds, ci, lc.mask(target), cfg, is_2d, nullptr, vrng, false));
      }
      detail::Batch vb = detail::assemble(vs, is_2d, true);
      FloatGrid vlogits = m.forward(vb.images, false, Head::binary);
      std::vector<float> vcm = detail::to_channel_major(vlogits);
      rec.val_loss = binary_stage_loss(vcm, vb.labels, vb.weights, loss_kind).value;
    }

    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.records.push_back(rec);

    if (rec.val_dice > hist.best_val_dice) {
      hist.best_val_dice = rec.val_dice;
      hist.best_epoch = epoch;
      best = detail::snapshot_params(m);
    }
  }
  if (!best.empty()) detail::restore_params(m, best);
  return hist;
}

// ---------------------------------------------------------------------------
// Mining + retraining

struct VolumeMiningStats {
  std::string id;
  std::string split;
  std::array<int64_t, 4> class_counts{};  // TN, FP, FN, TP
  bool foreign = false;                   // mined on data the model was not trained on
};

struct MiningReport {
  Target target = Target::liver;
  MiningVariant variant = MiningVariant::pwce;
  std::vector<VolumeMiningStats> volumes;
};

inline nlohmann::json to_json(const MiningReport& r) {
  nlohmann::json vols = nlohmann::json::array();
  for (const auto& v : r.volumes)
    vols.push_back({{"id", v.id},
                    {"split", v.split},
                    {"tn", v.class_counts[0]},
                    {"fp", v.class_counts[1]},
                    {"fn", v.class_counts[2]},
                    {"tp", v.class_counts[3]},
                    {"foreign", v.foreign}});
  return {{"target", to_string(r.target)}, {"variant", to_string(r.variant)}, {"volumes", vols}};
}

// Optional prediction masking applied before mining (the cascade masks
// lesion predictions to the predicted liver, as at evaluation).
using PredMaskFn = std::function<ByteGrid(const LoadedCase&)>;

// Mines error masks for every case via full-volume forward passes.
inline std::pair<std::vector<ErrorMask>, MiningReport> mine_dataset(
    Model& m, const Dataset& ds, Target target, const TrainConfig& cfg, MiningVariant variant,
    const PredMaskFn& mask_fn = {}, const std::vector<FloatGrid>* extra_channels = nullptr) {
  std::vector<ErrorMask> masks;
  MiningReport report;
  report.target = target;
  report.variant = variant;
  for (size_t ci = 0; ci < ds.cases.size(); ++ci) {
    const LoadedCase& lc = ds.cases[ci];
    const FloatGrid* extra = extra_channels ? &(*extra_channels)[ci] : nullptr;
    FloatGrid logits = predict_volume(m, lc.image, cfg.multislice_k, Head::binary, extra, cfg.crop);
    ByteGrid pred = binary_from_logits(logits);
    if (mask_fn) {
      ByteGrid allowed = mask_fn(lc);
      for (int64_t i = 0; i < pred.numel(); ++i) pred[i] &= allowed[i];
    }
    ErrorMask e = mine_error_mask(pred, lc.mask(target));
    VolumeMiningStats st;
    st.id = lc.id;
    st.split = lc.split;
    for (uint8_t v : e.voxels.data) ++st.class_counts[v];
    st.foreign = lc.split == "val";
    report.volumes.push_back(std::move(st));
    masks.push_back(std::move(e));
  }
  return {std::move(masks), std::move(report)};
}

struct RetrainResult {
  TrainHistory history;
  MiningReport report;
};

// Collapse error-head logits back to a binary mask per the variant.
inline ByteGrid collapse_variant(const FloatGrid& logits4, MiningVariant variant) {
  if (variant == MiningVariant::pwce) return collapse_to_binary(logits4);
  return tp_channel_mask(sigmoid_probs(logits4));
}

// Warm-starts a freshly appended error head from the binary head. The
// rows are chosen so that both collapses reproduce the binary prediction
// exactly before any retraining step:
//   TN = bg - fg, TP = fg - bg, and FP/FN copy them with the bias lowered
// by a margin so they never win the argmax initially. The four-class
// argmax then lands on TN iff bg > fg, and sigmoid(TP) >= 0.5 iff
// fg >= bg, so retraining starts from the converged binary solution.
inline void warm_start_error_head(Model& m) {
  nn::Param *bw = nullptr, *bb = nullptr, *ew = nullptr, *eb = nullptr;
  for (nn::Param* p : m.parameters()) {
    if (p->name == "head.binary.weight") bw = p;
    else if (p->name == "head.binary.bias") bb = p;
    else if (p->name == "head.error.weight") ew = p;
    else if (p->name == "head.error.bias") eb = p;
  }
  if (!bw || !bb || !ew || !eb) throw ConsistencyError("head parameters not found");
  const int64_t in = bw->value.numel() / 2;  // kernel size 1
  const float margin = 1.0f;
  auto wrow = [&](FloatGrid& g, int64_t r) { return g.data.data() + r * in; };
  const float* bg = wrow(bw->value, 0);
  const float* fg = wrow(bw->value, 1);
  for (int64_t i = 0; i < in; ++i) {
    float d = bg[i] - fg[i];
    wrow(ew->value, kTrueNegative)[i] = d;
    wrow(ew->value, kFalsePositive)[i] = d;
    wrow(ew->value, kFalseNegative)[i] = -d;
    wrow(ew->value, kTruePositive)[i] = -d;
  }
  float db = bb->value[0] - bb->value[1];
  eb->value[kTrueNegative] = db;
  eb->value[kFalsePositive] = db - margin;
  eb->value[kFalseNegative] = -db - margin;
  eb->value[kTruePositive] = -db;
}

inline double retrain_validation_dice(Model& m, const Dataset& ds, Target target,
                                      const TrainConfig& cfg, MiningVariant variant,
                                      const std::vector<FloatGrid>* extra_channels = nullptr) {
  if (ds.val_idx.empty()) return 0.0;
  double acc = 0;
  for (size_t i : ds.val_idx) {
    const LoadedCase& lc = ds.cases[i];
    const FloatGrid* extra = extra_channels ? &(*extra_channels)[i] : nullptr;
    FloatGrid logits = predict_volume(m, lc.image, cfg.multislice_k, Head::error, extra, cfg.crop);
    acc += dice_per_volume(collapse_variant(logits, variant), lc.mask(target));
  }
  return acc / static_cast<double>(ds.val_idx.size());
}

// The Mask Mining extension: static error targets from one mining pass,
// error head appended with all pretrained weights kept, then retraining
// with the variant's multiclass loss. The original binary head stays
// frozen. Returns the best-validation model state in-place.
inline RetrainResult mine_and_retrain(Model& m, const Dataset& ds, Target target,
                                      const TrainConfig& cfg, MiningVariant variant,
                                      const PredMaskFn& mask_fn = {},
                                      const std::vector<FloatGrid>* extra_channels = nullptr) {
  bool is_2d = m.config().dims == 2;
  auto [error_masks, report] = mine_dataset(m, ds, target, cfg, variant, mask_fn, extra_channels);

  if (!m.has_error_head()) {
    m.append_error_head(Rng(cfg.seed).fork("error_head"));
    warm_start_error_head(m);
  }

  const float base_lr = cfg.effective_retrain_lr();
  nn::AdamConfig ac;
  ac.lr = base_lr;
  ac.weight_decay = cfg.weight_decay;
  nn::Adam opt(m.parameters_for_head(Head::error), ac);

  int patches = cfg.effective_patches(ds.train_idx.size());
  int steps = std::max(1, (patches + cfg.batch_size - 1) / cfg.batch_size);
  Rng root = Rng(cfg.seed).fork("retrain");

  TrainHistory hist;
  // The warm-started head already reproduces the binary prediction, so the
  // pre-retraining state is the baseline any retrain epoch must beat.
  hist.best_val_dice = retrain_validation_dice(m, ds, target, cfg, variant, extra_channels);
  std::vector<FloatGrid> best = detail::snapshot_params(m);
  int stale = 0;

  // Hard-example sampling: retraining crops are drawn in and around the
  // mined error voxels so every batch carries learning signal. Volumes
  // without errors fall back to uniform crops inside sample_crop.
  TrainConfig rcfg = cfg;
  rcfg.policy = CropPolicy::in_and_around_region;
  std::vector<ByteGrid> error_regions;
  error_regions.reserve(error_masks.size());
  for (const ErrorMask& e : error_masks) {
    ByteGrid r(e.voxels.shape);
    for (int64_t i = 0; i < r.numel(); ++i) r[i] = e.voxels[i] != kTrueNegative ? 1 : 0;
    error_regions.push_back(std::move(r));
  }

  for (int epoch = 0; epoch < cfg.retrain_epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    float lr = base_lr * std::pow(cfg.lr_step_factor, static_cast<float>(epoch / cfg.lr_step_epochs));
    opt.set_lr(lr);
    Rng erng = root.fork(static_cast<uint64_t>(epoch) + 1);

    double loss_acc = 0;
    for (int step = 0; step < steps; ++step) {
      std::vector<detail::SampledPatch> ps;
      for (int b = 0; b < cfg.batch_size; ++b) {
        size_t ci = ds.train_idx[static_cast<size_t>(
            erng.uniform_int(0, static_cast<int64_t>(ds.train_idx.size()) - 1))];
        // the label source is the mined error mask (classes 0-3)
        const FloatGrid* extra = extra_channels ? &(*extra_channels)[ci] : nullptr;
        ps.push_back(detail::draw_patch(ds, ci, error_masks[ci].voxels, rcfg, is_2d,
                                        &error_regions[ci], erng, true, extra));
      }
      detail::Batch batch = detail::assemble(ps, is_2d, false);
      FloatGrid logits = m.forward(batch.images, true, Head::error);
      std::vector<float> cm = detail::to_channel_major(logits);

      LossValue<float> lv;
      if (variant == MiningVariant::pwce) {
        lv = multiclass_pwce<float>(cm, batch.labels);
      } else {
        // ground truth is recoverable from the error classes:
        // gt = 1 iff class in {FN, TP}
        size_t n = batch.labels.size();
        ByteGrid err_grid({static_cast<int64_t>(n)});
        std::copy(batch.labels.begin(), batch.labels.end(), err_grid.data.begin());
        ByteGrid gt({static_cast<int64_t>(n)});
        for (size_t i = 0; i < n; ++i)
          gt[static_cast<int64_t>(i)] =
              (batch.labels[i] == kFalseNegative || batch.labels[i] == kTruePositive) ? 1 : 0;
        MiningTargets targets = build_mining_targets(ErrorMask{std::move(err_grid)}, gt, variant);
        std::array<std::span<const uint8_t>, 4> tspans = {
            targets.channels[0].data, targets.channels[1].data, targets.channels[2].data,
            targets.channels[3].data};
        lv = multiclass_dice<float>(cm, tspans);
      }
      if (!std::isfinite(lv.value))
        throw NumericError("retraining diverged: non-finite loss at epoch " +
                           std::to_string(epoch));
      loss_acc += lv.value;
      opt.zero_grad();
      m.backward(detail::from_channel_major(lv.grad, logits.shape));
      opt.step();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_acc / steps;
    rec.lr = lr;
    rec.val_dice = retrain_validation_dice(m, ds, target, cfg, variant, extra_channels);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.records.push_back(rec);

    if (rec.val_dice > hist.best_val_dice) {
      hist.best_val_dice = rec.val_dice;
      hist.best_epoch = epoch;
      best = detail::snapshot_params(m);
      stale = 0;
    } else if (++stale > cfg.early_stop_patience) {
      break;
    }
  }
  if (!best.empty()) detail::restore_params(m, best);
  return {std::move(hist), std::move(report)};
}

}  // namespace maskmine
