#pragma once

// Command implementations behind the CLI: dataset generation, training,
// mining, evaluation, the end-to-end run and the two-variant error
// control experiment. Each command works inside a fresh run directory
// named by config hash + timestamp; durable inputs it needs from earlier
// commands are looked up in the latest run directory with the same hash.

#include "maskmine/config.hpp"
#include "maskmine/report.hpp"

namespace maskmine {

namespace detail {

inline SyntheticSpec resolved_synth(const RunConfig& cfg) {
  SyntheticSpec s = cfg.synth;
  s.seed = Rng(cfg.seed).fork("synth").next_u64();
  return s;
}

inline DatasetManifest ensure_dataset(const RunConfig& cfg, bool overwrite) {
  std::filesystem::path p = cfg.dataset_path;
  if (cfg.dataset_kind == "manifest") {
    if (std::filesystem::is_directory(p)) p /= "manifest.json";
    return read_manifest(p);
  }
  std::filesystem::path manifest = p / "manifest.json";
  if (!overwrite && std::filesystem::exists(manifest)) return read_manifest(manifest);
  return make_synthetic_dataset(resolved_synth(cfg), p);
}

inline Dataset load_dataset(const RunConfig& cfg, bool overwrite) {
  return Dataset::load(ensure_dataset(cfg, overwrite), cfg.hu_window[0], cfg.hu_window[1]);
}

// per-stage train configs with the cascade's policies and seed forks
inline TrainConfig stage_cfg(const RunConfig& cfg, Target t) {
  TrainConfig c = t == Target::liver ? cfg.liver_train : cfg.lesion_train;
  c.policy = t == Target::liver ? CropPolicy::uniform : CropPolicy::in_and_around_region;
  c.seed = Rng(cfg.seed).fork(to_string(t)).next_u64();
  return c;
}

struct LoadedStage {
  Model model;
  Head head;
};

inline LoadedStage load_stage(const std::filesystem::path& dir, const std::string& stem) {
  std::filesystem::path mined = dir / (stem + "_mined.ckpt");
  std::filesystem::path initial = dir / (stem + "_initial.ckpt");
  std::filesystem::path p = std::filesystem::exists(mined) ? mined : initial;
  if (!std::filesystem::exists(p))
    throw DependencyError("no " + stem + " checkpoint under " + dir.string() +
                          " — run the train command first");
  return {Checkpoint::load(p), Checkpoint::peek_head(p)};
}

inline PipelineModels pipeline_models(const RunConfig& cfg, LoadedStage& liver,
                                      LoadedStage& lesion) {
  PipelineModels pm;
  pm.liver = &liver.model;
  pm.lesion = &lesion.model;
  pm.liver_head = liver.head;
  pm.lesion_head = lesion.head;
  pm.liver_variant = pm.lesion_variant = cfg.variant;
  pm.combined = cfg.setup == "combined";
  pm.multislice_k = cfg.liver_train.multislice_k;
  pm.tile3d = cfg.liver_train.crop;
  return pm;
}

// overlay of the lesion prediction on the validation volume with the
// most lesion foreground, at its busiest axial slice
inline std::vector<OverlaySpec> lesion_overlays(const RunConfig& cfg, const PipelineModels& pm,
                                                const Dataset& ds, const std::string& tag) {
  std::vector<OverlaySpec> out;
  if (!cfg.overlays || ds.val_idx.empty() || !pm.lesion) return out;
  size_t best_case = ds.val_idx[0];
  int64_t best_fg = -1;
  for (size_t i : ds.val_idx) {
    int64_t fg = 0;
    for (uint8_t v : ds.cases[i].lesion.data) fg += v;
    if (fg > best_fg) {
      best_fg = fg;
      best_case = i;
    }
  }
  const LoadedCase& lc = ds.cases[best_case];

  ByteGrid liver_pred = head_mask(*pm.liver, lc.image, pm.liver_head, pm.liver_variant,
                                  pm.multislice_k, nullptr, pm.tile3d);
  std::optional<FloatGrid> extra;
  if (pm.combined) {
    FloatGrid bl = predict_volume(*pm.liver, lc.image, pm.multislice_k, Head::binary, nullptr, pm.tile3d);
    extra = foreground_prob(bl);
  }
  ByteGrid lesion_pred = head_mask(*pm.lesion, lc.image, pm.lesion_head, pm.lesion_variant,
                                   pm.multislice_k, extra ? &*extra : nullptr, pm.tile3d);
  if (cfg.eval_flags.mask_lesion_by_liver) {
    ByteGrid lp = cfg.eval_flags.largest_component_liver
                      ? largest_component(liver_pred, cfg.eval_flags.connectivity)
                      : liver_pred;
    for (int64_t i = 0; i < lesion_pred.numel(); ++i) lesion_pred[i] &= lp[i];
  }

  int64_t best_z = 0, best_row = -1;
  int64_t hw = lc.image.height() * lc.image.width();
  for (int64_t z = 0; z < lc.image.depth(); ++z) {
    int64_t fg = 0;
    for (int64_t i = 0; i < hw; ++i) fg += lc.lesion[z * hw + i];
    if (fg > best_row) {
      best_row = fg;
      best_z = z;
    }
  }
  OverlaySpec o;
  o.volume = &lc.image;
  o.pred = std::move(lesion_pred);
  o.gt = lc.lesion;
  o.slice = best_z;
  o.name = "overlay_lesion_" + tag + "_" + lc.id;
  out.push_back(std::move(o));
  return out;
}

inline void save_retrain_artifacts(const std::filesystem::path& dir, const std::string& stem,
                                   Model& m, const RetrainResult& rr) {
  Checkpoint::save(m, dir / (stem + "_mined.ckpt"));
  write_history_csv(rr.history, dir / ("history_" + stem + "_retrain.csv"));
  std::ofstream f(dir / ("mining_report_" + stem + ".json"));
  f << to_json(rr.report).dump(2) << "\n";
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline std::filesystem::path cmd_synth(const RunConfig& cfg, bool overwrite) {
  if (cfg.dataset_kind != "synthetic")
    throw ConfigError("synth command requires dataset.kind = 'synthetic'");
  std::filesystem::path run_dir = make_run_dir(cfg);
  DatasetManifest m = detail::ensure_dataset(cfg, overwrite);
  std::ofstream f(run_dir / "dataset.json");
  f << nlohmann::json{{"root", m.root.string()}, {"volumes", m.entries.size()}}.dump(2) << "\n";
  return run_dir;
}

// Initial training for the configured setup; writes checkpoints and
// per-epoch histories into the run directory.
inline std::filesystem::path cmd_train(const RunConfig& cfg, bool overwrite) {
  std::filesystem::path run_dir = make_run_dir(cfg);
  Dataset ds = detail::load_dataset(cfg, overwrite);

  if (cfg.setup == "cascade") {
    TrainConfig lc = detail::stage_cfg(cfg, Target::liver);
    Model liver(cfg.liver_model, Rng(cfg.seed).fork("liver_init"));
    TrainHistory lh = train(liver, ds, Target::liver, StageLoss::liver_pwce, lc);
    Checkpoint::save(liver, run_dir / "liver_initial.ckpt");
    write_history_csv(lh, run_dir / "history_liver_initial.csv");

    TrainConfig sc = detail::stage_cfg(cfg, Target::lesion);
    Model lesion(cfg.lesion_model, Rng(cfg.seed).fork("lesion_init"));
    TrainHistory sh = train(lesion, ds, Target::lesion, StageLoss::lesion_combined, sc);
    Checkpoint::save(lesion, run_dir / "lesion_initial.ckpt");
    write_history_csv(sh, run_dir / "history_lesion_initial.csv");
  } else {
    CombinedOptions opt;
    opt.liver_model = cfg.liver_model;
    opt.lesion_model = cfg.lesion_model;
    opt.train = cfg.liver_train;
    opt.train.seed = Rng(cfg.seed).fork("combined").next_u64();
    opt.mine = false;
    opt.seed = cfg.seed;
    CombinedResult res = run_combined(ds, opt);
    Checkpoint::save(res.liver, run_dir / "liver_initial.ckpt");
    Checkpoint::save(res.lesion, run_dir / "lesion_initial.ckpt");
    write_history_csv(res.history, run_dir / "history_combined_initial.csv");
  }
  return run_dir;
}

// Mining + retraining on top of the latest initial checkpoints for this
// config hash.
inline std::filesystem::path cmd_mine(const RunConfig& cfg, bool overwrite) {
  std::filesystem::path run_dir = make_run_dir(cfg);
  std::filesystem::path prev = find_latest_run_dir(cfg, run_dir);
  if (prev.empty() || !std::filesystem::exists(prev / "liver_initial.ckpt"))
    throw DependencyError("mine: no initial checkpoint found for this config — run train first");
  Dataset ds = detail::load_dataset(cfg, overwrite);

  detail::LoadedStage liver{Checkpoint::load(prev / "liver_initial.ckpt"), Head::binary};
  detail::LoadedStage lesion{Checkpoint::load(prev / "lesion_initial.ckpt"), Head::binary};

  std::vector<FloatGrid> probs;
  if (cfg.setup == "combined")
    probs = liver_probability_volumes(liver.model, ds, cfg.liver_train.multislice_k,
                                      cfg.liver_train.crop);

  if (cfg.mine_liver) {
    TrainConfig lc = detail::stage_cfg(cfg, Target::liver);
    RetrainResult rr = mine_and_retrain(liver.model, ds, Target::liver, lc, cfg.variant);
    detail::save_retrain_artifacts(run_dir, "liver", liver.model, rr);
  }
  if (cfg.mine_lesion) {
    TrainConfig sc = detail::stage_cfg(cfg, Target::lesion);
    RetrainResult rr =
        cfg.setup == "combined"
            ? mine_and_retrain(lesion.model, ds, Target::lesion, sc, cfg.variant, {}, &probs)
            : mine_and_retrain(lesion.model, ds, Target::lesion, sc, cfg.variant,
                               liver_mask_provider(liver.model, cfg.variant, sc.multislice_k, sc.crop));
    detail::save_retrain_artifacts(run_dir, "lesion", lesion.model, rr);
  }
  return run_dir;
}

// Evaluation/report for the latest checkpoints (mined preferred).
inline std::filesystem::path cmd_eval(const RunConfig& cfg, bool overwrite) {
  std::filesystem::path run_dir = make_run_dir(cfg);
  std::filesystem::path prev = find_latest_run_dir(cfg, run_dir);
  if (prev.empty()) throw DependencyError("eval: no prior run for this config — run train first");
  Dataset ds = detail::load_dataset(cfg, overwrite);

  detail::LoadedStage liver = detail::load_stage(prev, "liver");
  detail::LoadedStage lesion = detail::load_stage(prev, "lesion");
  PipelineModels pm = detail::pipeline_models(cfg, liver, lesion);

  MetricsReport rep = evaluate_pipeline(pm, ds, cfg.eval_split, cfg.eval_flags);
  rep.label = liver.head == Head::error || lesion.head == Head::error
                  ? std::string("mined_") + to_string(cfg.variant)
                  : "initial";
  emit_report({rep}, run_dir, detail::lesion_overlays(cfg, pm, ds, rep.label));
  return run_dir;
}

// End-to-end: dataset, initial training, pre-mining evaluation, mining,
// post-mining evaluation, combined report.
inline std::filesystem::path cmd_full(const RunConfig& cfg, bool overwrite) {
  std::filesystem::path run_dir = make_run_dir(cfg);
  Dataset ds = detail::load_dataset(cfg, overwrite);

  Model liver(cfg.liver_model, Rng(cfg.seed).fork("liver_init"));
  Model lesion(cfg.lesion_model, Rng(cfg.seed).fork("lesion_init"));
  if (cfg.setup == "cascade") {
    TrainConfig lc = detail::stage_cfg(cfg, Target::liver);
    write_history_csv(train(liver, ds, Target::liver, StageLoss::liver_pwce, lc),
                      run_dir / "history_liver_initial.csv");
    TrainConfig sc = detail::stage_cfg(cfg, Target::lesion);
    write_history_csv(train(lesion, ds, Target::lesion, StageLoss::lesion_combined, sc),
                      run_dir / "history_lesion_initial.csv");
  } else {
    CombinedOptions opt;
    opt.liver_model = cfg.liver_model;
    opt.lesion_model = cfg.lesion_model;
    opt.train = cfg.liver_train;
    opt.train.seed = Rng(cfg.seed).fork("combined").next_u64();
    opt.mine = false;
    opt.seed = cfg.seed;
    CombinedResult res = run_combined(ds, opt);
    liver = std::move(res.liver);
    lesion = std::move(res.lesion);
    write_history_csv(res.history, run_dir / "history_combined_initial.csv");
  }
  Checkpoint::save(liver, run_dir / "liver_initial.ckpt");
  Checkpoint::save(lesion, run_dir / "lesion_initial.ckpt");

  detail::LoadedStage lstage{std::move(liver), Head::binary};
  detail::LoadedStage sstage{std::move(lesion), Head::binary};
  PipelineModels pm = detail::pipeline_models(cfg, lstage, sstage);
  MetricsReport pre = evaluate_pipeline(pm, ds, cfg.eval_split, cfg.eval_flags);
  pre.label = "initial";
  std::vector<OverlaySpec> overlays = detail::lesion_overlays(cfg, pm, ds, "initial");

  std::vector<FloatGrid> probs;
  if (cfg.setup == "combined")
    probs = liver_probability_volumes(lstage.model, ds, cfg.liver_train.multislice_k,
                                      cfg.liver_train.crop);
  if (cfg.mine_liver) {
    TrainConfig lc = detail::stage_cfg(cfg, Target::liver);
    RetrainResult rr = mine_and_retrain(lstage.model, ds, Target::liver, lc, cfg.variant);
    detail::save_retrain_artifacts(run_dir, "liver", lstage.model, rr);
    lstage.head = Head::error;
  }
  if (cfg.mine_lesion) {
    TrainConfig sc = detail::stage_cfg(cfg, Target::lesion);
    RetrainResult rr =
        cfg.setup == "combined"
            ? mine_and_retrain(sstage.model, ds, Target::lesion, sc, cfg.variant, {}, &probs)
            : mine_and_retrain(sstage.model, ds, Target::lesion, sc, cfg.variant,
                               liver_mask_provider(lstage.model, cfg.variant, sc.multislice_k, sc.crop));
    detail::save_retrain_artifacts(run_dir, "lesion", sstage.model, rr);
    sstage.head = Head::error;
  }

  pm = detail::pipeline_models(cfg, lstage, sstage);
  pm.liver_head = lstage.head;
  pm.lesion_head = sstage.head;
  MetricsReport post = evaluate_pipeline(pm, ds, cfg.eval_split, cfg.eval_flags);
  post.label = std::string("mined_") + to_string(cfg.variant);
  auto post_overlays = detail::lesion_overlays(cfg, pm, ds, post.label);
  overlays.insert(overlays.end(), std::make_move_iterator(post_overlays.begin()),
                  std::make_move_iterator(post_overlays.end()));

  emit_report({pre, post}, run_dir, overlays);
  return run_dir;
}

// Error-type control: one initial cascade, then both mining variants
// from the same checkpoints; emits error counts for all three states.
inline std::filesystem::path cmd_control(const RunConfig& cfg, bool overwrite) {
  if (cfg.setup != "cascade")
    throw ConfigError("control command requires setup = 'cascade'");
  std::filesystem::path run_dir = make_run_dir(cfg);
  Dataset ds = detail::load_dataset(cfg, overwrite);

  // initial cascade (no mining)
  TrainConfig lc = detail::stage_cfg(cfg, Target::liver);
  TrainConfig sc = detail::stage_cfg(cfg, Target::lesion);
  Model liver(cfg.liver_model, Rng(cfg.seed).fork("liver_init"));
  train(liver, ds, Target::liver, StageLoss::liver_pwce, lc);
  Model lesion(cfg.lesion_model, Rng(cfg.seed).fork("lesion_init"));
  train(lesion, ds, Target::lesion, StageLoss::lesion_combined, sc);
  Checkpoint::save(liver, run_dir / "liver_initial.ckpt");
  Checkpoint::save(lesion, run_dir / "lesion_initial.ckpt");

  detail::LoadedStage l0{std::move(liver), Head::binary};
  detail::LoadedStage s0{std::move(lesion), Head::binary};
  PipelineModels pm0 = detail::pipeline_models(cfg, l0, s0);
  MetricsReport initial = evaluate_pipeline(pm0, ds, cfg.eval_split, cfg.eval_flags);
  initial.label = "initial";

  std::vector<MetricsReport> reports = {initial};
  nlohmann::json counts;
  auto record = [&counts](const MetricsReport& rep) {
    for (Target t : {Target::liver, Target::lesion}) {
      ConfusionCounts c = rep.totals(t);
      counts[rep.label][to_string(t)] = {{"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}, {"tp", c.tp}};
    }
  };
  record(initial);

  for (MiningVariant variant : {MiningVariant::dice, MiningVariant::pwce}) {
    detail::LoadedStage lv{Checkpoint::load(run_dir / "liver_initial.ckpt"), Head::error};
    detail::LoadedStage sv{Checkpoint::load(run_dir / "lesion_initial.ckpt"), Head::error};
    RetrainResult lr = mine_and_retrain(lv.model, ds, Target::liver, lc, variant);
    RetrainResult sr =
        mine_and_retrain(sv.model, ds, Target::lesion, sc, variant,
                         liver_mask_provider(lv.model, variant, sc.multislice_k, sc.crop));
    (void)lr;
    (void)sr;
    RunConfig vcfg = cfg;
    vcfg.variant = variant;
    PipelineModels pm = detail::pipeline_models(vcfg, lv, sv);
    pm.liver_head = pm.lesion_head = Head::error;
    MetricsReport rep = evaluate_pipeline(pm, ds, cfg.eval_split, cfg.eval_flags);
    rep.label = std::string("mined_") + to_string(variant);
    record(rep);
    reports.push_back(std::move(rep));
  }

  {
    std::ofstream f(run_dir / "control.json");
    f << counts.dump(2) << "\n";
  }
  write_error_chart(reports, run_dir / "control.png");
  emit_report(reports, run_dir);
  return run_dir;
}

}  // namespace maskmine
