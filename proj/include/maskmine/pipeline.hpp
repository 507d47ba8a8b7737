#pragma once

// Liver/lesion pipelines: full evaluation passes over a dataset split,
// the two-stage cascade and the simultaneous (combined) setup.

#include "maskmine/trainer.hpp"

namespace maskmine {

// ---------------------------------------------------------------------------
// Evaluation

struct VolumeMetrics {
  std::string id;
  Target target = Target::liver;
  double dice = 0;
  ConfusionCounts counts;
  bool excluded_from_mean = false;  // empty lesion ground truth
};

struct MetricsReport {
  std::string label;  // e.g. "initial", "mined_dice"
  std::string split;
  std::vector<VolumeMetrics> rows;

  double mean_dice(Target t) const {
    double acc = 0;
    int n = 0;
    for (const auto& r : rows)
      if (r.target == t && !r.excluded_from_mean) {
        acc += r.dice;
        ++n;
      }
    return n ? acc / n : 0.0;
  }

  ConfusionCounts totals(Target t) const {
    ConfusionCounts c;
    for (const auto& r : rows)
      if (r.target == t) {
        c.tn += r.counts.tn;
        c.fp += r.counts.fp;
        c.fn += r.counts.fn;
        c.tp += r.counts.tp;
      }
    return c;
  }
};

struct EvalFlags {
  bool largest_component_liver = true;
  Connectivity connectivity = Connectivity::twenty_six;
  bool mask_lesion_by_liver = true;
};

// Which model/head produces each target's mask. A model whose active head
// is the error head is collapsed back to binary per the mining variant.
struct PipelineModels {
  Model* liver = nullptr;
  Model* lesion = nullptr;  // optional
  Head liver_head = Head::binary;
  Head lesion_head = Head::binary;
  MiningVariant liver_variant = MiningVariant::pwce;
  MiningVariant lesion_variant = MiningVariant::pwce;
  bool combined = false;  // lesion net consumes the liver probability map
  int multislice_k = 3;
  std::array<int64_t, 3> tile3d = {64, 128, 128};
};

namespace detail {

inline ByteGrid head_mask(Model& m, const Volume& v, Head head, MiningVariant variant, int k,
                          const FloatGrid* extra, std::array<int64_t, 3> tile) {
  FloatGrid logits = predict_volume(m, v, k, head, extra, tile);
  if (head == Head::binary) return binary_from_logits(logits);
  return collapse_variant(logits, variant);
}

}  // namespace detail

// Full-volume inference over one split with the evaluation-time
// postprocessing: largest component on the liver, lesion restricted to
// the predicted liver.
inline MetricsReport evaluate_pipeline(const PipelineModels& pm, const Dataset& ds,
                                       const std::string& split, const EvalFlags& flags = {}) {
  if (!pm.liver) throw DependencyError("evaluate_pipeline: liver model required");
  MetricsReport rep;
  rep.split = split;
  for (const LoadedCase& lc : ds.cases) {
    if (lc.split != split) continue;

    ByteGrid liver_pred = detail::head_mask(*pm.liver, lc.image, pm.liver_head, pm.liver_variant,
                                            pm.multislice_k, nullptr, pm.tile3d);
    if (flags.largest_component_liver)
      liver_pred = largest_component(liver_pred, flags.connectivity);

    VolumeMetrics lm;
    lm.id = lc.id;
    lm.target = Target::liver;
    lm.counts = error_counts(liver_pred, lc.liver);
    lm.dice = dice_per_volume(liver_pred, lc.liver);
    rep.rows.push_back(std::move(lm));

    if (!pm.lesion) continue;
    std::optional<FloatGrid> extra;
    if (pm.combined) {
      FloatGrid bl = predict_volume(*pm.liver, lc.image, pm.multislice_k, Head::binary, nullptr,
                                    pm.tile3d);
      extra = foreground_prob(bl);
    }
    ByteGrid lesion_pred =
        detail::head_mask(*pm.lesion, lc.image, pm.lesion_head, pm.lesion_variant, pm.multislice_k,
                          extra ? &*extra : nullptr, pm.tile3d);
    if (flags.mask_lesion_by_liver)
      for (int64_t i = 0; i < lesion_pred.numel(); ++i) lesion_pred[i] &= liver_pred[i];

    VolumeMetrics sm;
    sm.id = lc.id;
    sm.target = Target::lesion;
    sm.counts = error_counts(lesion_pred, lc.lesion);
    sm.dice = dice_per_volume(lesion_pred, lc.lesion);
    bool gt_empty = true;
    for (uint8_t v : lc.lesion.data)
      if (v) {
        gt_empty = false;
        break;
      }
    sm.excluded_from_mean = gt_empty;
    rep.rows.push_back(std::move(sm));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Cascade

struct StageResult {
  TrainHistory initial;
  std::optional<RetrainResult> mined;
};

struct CascadeOptions {
  ModelConfig liver_model, lesion_model;
  TrainConfig liver_train, lesion_train;
  bool mine_liver = true, mine_lesion = true;
  MiningVariant variant = MiningVariant::dice;
  uint64_t seed = 0;
};

struct CascadeResult {
  Model liver, lesion;
  StageResult liver_stage, lesion_stage;
};

// Predicted-liver mask provider for lesion mining/restriction: eval-time
// postprocessing minus the connected-component step. Uses the liver
// net's most specific head (error-head collapse once mined).
inline PredMaskFn liver_mask_provider(Model& liver, MiningVariant variant, int multislice_k,
                                      std::array<int64_t, 3> tile3d) {
  return [&liver, variant, multislice_k, tile3d](const LoadedCase& lc) {
    Head h = liver.has_error_head() ? Head::error : Head::binary;
    FloatGrid logits = predict_volume(liver, lc.image, multislice_k, h, nullptr, tile3d);
    return h == Head::binary ? binary_from_logits(logits) : collapse_variant(logits, variant);
  };
}

// Stage 1 trains the liver net (pwce + weight maps, uniform crops),
// stage 2 the lesion net (combined loss, crops in and around the liver);
// each stage optionally mines and retrains.
inline CascadeResult run_cascade(const Dataset& ds, CascadeOptions opt) {
  opt.liver_train.policy = CropPolicy::uniform;
  opt.lesion_train.policy = CropPolicy::in_and_around_region;
  opt.liver_train.seed = Rng(opt.seed).fork("liver").next_u64();
  opt.lesion_train.seed = Rng(opt.seed).fork("lesion").next_u64();

  Model liver(opt.liver_model, Rng(opt.seed).fork("liver_init"));
  StageResult liver_stage;
  liver_stage.initial = train(liver, ds, Target::liver, StageLoss::liver_pwce, opt.liver_train);
  if (opt.mine_liver)
    liver_stage.mined = mine_and_retrain(liver, ds, Target::liver, opt.liver_train, opt.variant);

  Model lesion(opt.lesion_model, Rng(opt.seed).fork("lesion_init"));
  StageResult lesion_stage;
  lesion_stage.initial =
      train(lesion, ds, Target::lesion, StageLoss::lesion_combined, opt.lesion_train);
  if (opt.mine_lesion)
    lesion_stage.mined = mine_and_retrain(
        lesion, ds, Target::lesion, opt.lesion_train, opt.variant,
        liver_mask_provider(liver, opt.variant, opt.lesion_train.multislice_k,
                            opt.lesion_train.crop));

  return {std::move(liver), std::move(lesion), std::move(liver_stage), std::move(lesion_stage)};
}

// ---------------------------------------------------------------------------
// Combined (simultaneous) setup

struct CombinedOptions {
  ModelConfig liver_model;   // in_channels = k
  ModelConfig lesion_model;  // in_channels = k + 1 (liver probability map)
  TrainConfig train;
  bool mine = false;
  MiningVariant variant = MiningVariant::dice;
  uint64_t seed = 0;
};

struct CombinedResult {
  Model liver, lesion;
  TrainHistory history;  // joint loss; val_dice = mean of the two targets
  std::optional<RetrainResult> liver_mined, lesion_mined;
};

// Liver foreground probability volumes for every case (binary head).
inline std::vector<FloatGrid> liver_probability_volumes(Model& liver, const Dataset& ds, int k,
                                                        std::array<int64_t, 3> tile3d) {
  std::vector<FloatGrid> probs;
  probs.reserve(ds.cases.size());
  for (const LoadedCase& lc : ds.cases) {
    FloatGrid logits = predict_volume(liver, lc.image, k, Head::binary, nullptr, tile3d);
    probs.push_back(foreground_prob(logits));
  }
  return probs;
}

// Trains both nets in one loop over shared crops. Each crop runs through
// the liver net; its foreground probability map (gradient-detached) is
// appended to the lesion net's input. Joint objective = liver pwce +
// lesion combined loss, both optimizers stepped per batch.
inline CombinedResult run_combined(const Dataset& ds, const CombinedOptions& opt) {
  if (opt.liver_model.dims != 2 || opt.lesion_model.dims != 2)
    throw ConfigError("run_combined: 2D configuration required");
  TrainConfig cfg = opt.train;
  cfg.policy = CropPolicy::uniform;
  if (opt.lesion_model.in_channels != cfg.multislice_k + 1)
    throw ConfigError("run_combined: lesion net must take k+1 input channels");

  Model liver(opt.liver_model, Rng(opt.seed).fork("liver_init"));
  Model lesion(opt.lesion_model, Rng(opt.seed).fork("lesion_init"));

  nn::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.weight_decay = cfg.weight_decay;
  nn::Adam liver_opt(liver.parameters_for_head(Head::binary), ac);
  nn::Adam lesion_opt(lesion.parameters_for_head(Head::binary), ac);

  int patches = cfg.effective_patches(ds.train_idx.size());
  int steps = std::max(1, (patches + cfg.batch_size - 1) / cfg.batch_size);
  int64_t hw = cfg.crop[1] * cfg.crop[2];
  Rng root(cfg.seed);

  TrainHistory hist;
  double best_liver = -1, best_lesion = -1;
  std::vector<FloatGrid> best_liver_params, best_lesion_params;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    float lr = cfg.lr * std::pow(cfg.lr_step_factor, static_cast<float>(epoch / cfg.lr_step_epochs));
    liver_opt.set_lr(lr);
    lesion_opt.set_lr(lr);
    Rng erng = root.fork(static_cast<uint64_t>(epoch) + 1);

    double loss_acc = 0;
    for (int step = 0; step < steps; ++step) {
      // both labels ride through the augmentation as a single coded grid
      // (liver + 2*lesion, nearest-neighbor safe), then get split
      std::vector<detail::SampledPatch> ps;
      for (int b = 0; b < cfg.batch_size; ++b) {
        size_t ci = ds.train_idx[static_cast<size_t>(
            erng.uniform_int(0, static_cast<int64_t>(ds.train_idx.size()) - 1))];
        const LoadedCase& lc = ds.cases[ci];
        ByteGrid coded(lc.liver.shape);
        for (int64_t i = 0; i < coded.numel(); ++i)
          coded[i] = static_cast<uint8_t>(lc.liver[i] + 2 * lc.lesion[i]);
        ps.push_back(detail::draw_patch(ds, ci, coded, cfg, true, nullptr, erng, true));
      }
      int64_t n = cfg.batch_size;
      detail::Batch batch = detail::assemble(ps, true, false);
      std::vector<uint8_t> liver_lbl(batch.labels.size()), lesion_lbl(batch.labels.size());
      for (size_t i = 0; i < batch.labels.size(); ++i) {
        liver_lbl[i] = batch.labels[i] & 1;
        lesion_lbl[i] = batch.labels[i] >> 1;
      }
      std::vector<float> liver_w(batch.labels.size()), lesion_w(batch.labels.size());
      for (int64_t b = 0; b < n; ++b) {
        ByteGrid lg({1, cfg.crop[1], cfg.crop[2]}), sg({1, cfg.crop[1], cfg.crop[2]});
        std::copy_n(liver_lbl.data() + b * hw, hw, lg.data.begin());
        std::copy_n(lesion_lbl.data() + b * hw, hw, sg.data.begin());
        FloatGrid lw = distance_weight_map(lg), sw = distance_weight_map(sg);
        std::copy(lw.data.begin(), lw.data.end(), liver_w.begin() + b * hw);
        std::copy(sw.data.begin(), sw.data.end(), lesion_w.begin() + b * hw);
      }

      FloatGrid liver_logits = liver.forward(batch.images, true, Head::binary);
      std::vector<float> liver_cm = detail::to_channel_major(liver_logits);
      LossValue<float> llv = pwce_loss<float>(liver_cm, liver_lbl, liver_w);

      // detached probability channel for the lesion net
      FloatGrid lesion_in({n, cfg.multislice_k + 1, cfg.crop[1], cfg.crop[2]});
      for (int64_t b = 0; b < n; ++b) {
        std::copy_n(batch.images.ptr() + b * cfg.multislice_k * hw, cfg.multislice_k * hw,
                    lesion_in.ptr() + b * (cfg.multislice_k + 1) * hw);
        float* dst = lesion_in.ptr() + (b * (cfg.multislice_k + 1) + cfg.multislice_k) * hw;
        const float* bg = liver_logits.ptr() + b * 2 * hw;
        const float* fg = bg + hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] = 1.f / (1.f + std::exp(bg[i] - fg[i]));
      }
      FloatGrid lesion_logits = lesion.forward(lesion_in, true, Head::binary);
      std::vector<float> lesion_cm = detail::to_channel_major(lesion_logits);
      LossValue<float> slv = combined_lesion_loss<float>(lesion_cm, lesion_lbl, lesion_w);

      if (!std::isfinite(llv.value) || !std::isfinite(slv.value))
        throw NumericError("combined training diverged at epoch " + std::to_string(epoch));
      loss_acc += llv.value + slv.value;

      liver_opt.zero_grad();
      liver.backward(detail::from_channel_major(llv.grad, liver_logits.shape));
      liver_opt.step();
      lesion_opt.zero_grad();
      lesion.backward(detail::from_channel_major(slv.grad, lesion_logits.shape));
      lesion_opt.step();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_acc / steps;
    rec.lr = lr;
    double liver_vd = validation_dice(liver, ds, ds.val_idx, Target::liver, cfg);
    std::vector<FloatGrid> probs(ds.cases.size());
    for (size_t i : ds.val_idx) {
      FloatGrid logits =
          predict_volume(liver, ds.cases[i].image, cfg.multislice_k, Head::binary, nullptr, cfg.crop);
      probs[i] = foreground_prob(logits);
    }
    double lesion_vd = validation_dice(lesion, ds, ds.val_idx, Target::lesion, cfg, &probs);
    rec.val_dice = (liver_vd + lesion_vd) / 2.0;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.records.push_back(rec);
    if (rec.val_dice > hist.best_val_dice) {
      hist.best_val_dice = rec.val_dice;
      hist.best_epoch = epoch;
    }
    if (liver_vd > best_liver) {
      best_liver = liver_vd;
      best_liver_params = detail::snapshot_params(liver);
    }
    if (lesion_vd > best_lesion) {
      best_lesion = lesion_vd;
      best_lesion_params = detail::snapshot_params(lesion);
    }
  }
  if (!best_liver_params.empty()) detail::restore_params(liver, best_liver_params);
  if (!best_lesion_params.empty()) detail::restore_params(lesion, best_lesion_params);

  CombinedResult res{std::move(liver), std::move(lesion), std::move(hist), {}, {}};
  if (opt.mine) {
    // probability inputs are frozen before either net is retrained
    std::vector<FloatGrid> probs = liver_probability_volumes(res.liver, ds, cfg.multislice_k, cfg.crop);
    TrainConfig liver_cfg = cfg;
    liver_cfg.seed = Rng(opt.seed).fork("mine_liver").next_u64();
    res.liver_mined = mine_and_retrain(res.liver, ds, Target::liver, liver_cfg, opt.variant);
    TrainConfig lesion_cfg = cfg;
    lesion_cfg.seed = Rng(opt.seed).fork("mine_lesion").next_u64();
    res.lesion_mined =
        mine_and_retrain(res.lesion, ds, Target::lesion, lesion_cfg, opt.variant, {}, &probs);
  }
  return res;
}

}  // namespace maskmine
