#pragma once

// Run configuration: one JSON schema covering dataset, models, training,
// mining and evaluation. Parsing is strict — unknown keys are rejected
// with a field-level message — and the fully resolved config can be
// round-tripped into the run directory.

#include <cstdlib>
#include <ctime>
#include <set>

#include "maskmine/pipeline.hpp"

namespace maskmine {

struct RunConfig {
  uint64_t seed = 0;
  std::string output_root = "runs";
  std::string setup = "cascade";  // "cascade" | "combined"

  std::string dataset_kind = "synthetic";  // "synthetic" | "manifest"
  std::string dataset_path = "data";       // synthetic output dir, or a manifest.json
  SyntheticSpec synth;
  std::array<float, 2> hu_window = {-100.f, 600.f};

  ModelConfig liver_model, lesion_model;
  TrainConfig liver_train, lesion_train;

  MiningVariant variant = MiningVariant::dice;
  bool mine_liver = true, mine_lesion = true;

  EvalFlags eval_flags;
  std::string eval_split = "val";
  bool overlays = true;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + where + "." + k + "'");
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void parse_synth(const nlohmann::json& j, SyntheticSpec& s, const std::string& where) {
  check_keys(j, {"n_volumes", "shape", "organ_blobs_min", "organ_blobs_max", "organ_radius_min",
                 "organ_radius_max", "lesion_blobs_min", "lesion_blobs_max", "lesion_radius_min",
                 "lesion_radius_max", "noise_hu", "val_fraction"},
             where);
  read_if(j, "n_volumes", s.n_volumes);
  if (j.contains("shape")) {
    auto v = j.at("shape").get<std::vector<int64_t>>();
    if (v.size() != 3) throw ConfigError(where + ".shape must have 3 entries");
    s.shape = {v[0], v[1], v[2]};
  }
  read_if(j, "organ_blobs_min", s.organ_blobs_min);
  read_if(j, "organ_blobs_max", s.organ_blobs_max);
  read_if(j, "organ_radius_min", s.organ_radius_min);
  read_if(j, "organ_radius_max", s.organ_radius_max);
  read_if(j, "lesion_blobs_min", s.lesion_blobs_min);
  read_if(j, "lesion_blobs_max", s.lesion_blobs_max);
  read_if(j, "lesion_radius_min", s.lesion_radius_min);
  read_if(j, "lesion_radius_max", s.lesion_radius_max);
  read_if(j, "noise_hu", s.noise_hu);
  read_if(j, "val_fraction", s.val_fraction);
}

inline void parse_model(const nlohmann::json& j, ModelConfig& m, const std::string& where) {
  check_keys(j, {"dims", "depth", "base_channels", "block", "se_enabled", "in_channels",
                 "out_channels", "batch_norm"},
             where);
  read_if(j, "dims", m.dims);
  read_if(j, "depth", m.depth);
  read_if(j, "base_channels", m.base_channels);
  if (j.contains("block")) m.block = block_from_string(j.at("block").get<std::string>());
  read_if(j, "se_enabled", m.se_enabled);
  read_if(j, "in_channels", m.in_channels);
  read_if(j, "out_channels", m.out_channels);
  read_if(j, "batch_norm", m.batch_norm);
}

inline void parse_train(const nlohmann::json& j, TrainConfig& t, const std::string& where) {
  check_keys(j, {"epochs", "retrain_epochs", "batch_size", "lr", "retrain_lr", "weight_decay",
                 "lr_step_epochs",
                 "lr_step_factor", "patches_per_epoch", "crop", "multislice_k", "region_margin",
                 "augment", "early_stop_patience"},
             where);
  read_if(j, "epochs", t.epochs);
  read_if(j, "retrain_epochs", t.retrain_epochs);
  read_if(j, "batch_size", t.batch_size);
  read_if(j, "lr", t.lr);
  read_if(j, "retrain_lr", t.retrain_lr);
  read_if(j, "weight_decay", t.weight_decay);
  read_if(j, "lr_step_epochs", t.lr_step_epochs);
  read_if(j, "lr_step_factor", t.lr_step_factor);
  read_if(j, "patches_per_epoch", t.patches_per_epoch);
  if (j.contains("crop")) {
    auto v = j.at("crop").get<std::vector<int64_t>>();
    if (v.size() != 3) throw ConfigError(where + ".crop must have 3 entries");
    t.crop = {v[0], v[1], v[2]};
  }
  read_if(j, "multislice_k", t.multislice_k);
  read_if(j, "region_margin", t.region_margin);
  read_if(j, "augment", t.augment_enabled);
  read_if(j, "early_stop_patience", t.early_stop_patience);
  if (t.epochs < 1) throw ConfigError(where + ".epochs must be >= 1");
  if (!(t.lr > 0)) throw ConfigError(where + ".lr must be > 0");
}

inline nlohmann::json synth_json(const SyntheticSpec& s) {
  return {{"n_volumes", s.n_volumes},
          {"shape", {s.shape[0], s.shape[1], s.shape[2]}},
          {"organ_blobs_min", s.organ_blobs_min},
          {"organ_blobs_max", s.organ_blobs_max},
          {"organ_radius_min", s.organ_radius_min},
          {"organ_radius_max", s.organ_radius_max},
          {"lesion_blobs_min", s.lesion_blobs_min},
          {"lesion_blobs_max", s.lesion_blobs_max},
          {"lesion_radius_min", s.lesion_radius_min},
          {"lesion_radius_max", s.lesion_radius_max},
          {"noise_hu", s.noise_hu},
          {"val_fraction", s.val_fraction}};
}

inline nlohmann::json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"retrain_epochs", t.retrain_epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"retrain_lr", t.retrain_lr},
          {"weight_decay", t.weight_decay},
          {"lr_step_epochs", t.lr_step_epochs},
          {"lr_step_factor", t.lr_step_factor},
          {"patches_per_epoch", t.patches_per_epoch},
          {"crop", {t.crop[0], t.crop[1], t.crop[2]}},
          {"multislice_k", t.multislice_k},
          {"region_margin", t.region_margin},
          {"augment", t.augment_enabled},
          {"early_stop_patience", t.early_stop_patience}};
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::check_keys(j, {"seed", "output_root", "setup", "dataset", "model", "train", "mining",
                         "eval"},
                     "config");
  RunConfig c;
  detail::read_if(j, "seed", c.seed);
  detail::read_if(j, "output_root", c.output_root);
  detail::read_if(j, "setup", c.setup);
  if (c.setup != "cascade" && c.setup != "combined")
    throw ConfigError("config.setup must be 'cascade' or 'combined'");

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::check_keys(d, {"kind", "path", "synthetic", "hu_window"}, "dataset");
    detail::read_if(d, "kind", c.dataset_kind);
    if (c.dataset_kind != "synthetic" && c.dataset_kind != "manifest")
      throw ConfigError("dataset.kind must be 'synthetic' or 'manifest'");
    detail::read_if(d, "path", c.dataset_path);
    if (d.contains("synthetic")) detail::parse_synth(d.at("synthetic"), c.synth, "dataset.synthetic");
    if (d.contains("hu_window")) {
      auto v = d.at("hu_window").get<std::vector<float>>();
      if (v.size() != 2 || !(v[0] < v[1]))
        throw ConfigError("dataset.hu_window must be [lo, hi] with lo < hi");
      c.hu_window = {v[0], v[1]};
    }
  }

  if (j.contains("model")) {
    detail::check_keys(j.at("model"), {"liver", "lesion"}, "model");
    if (j.at("model").contains("liver"))
      detail::parse_model(j.at("model").at("liver"), c.liver_model, "model.liver");
    if (j.at("model").contains("lesion"))
      detail::parse_model(j.at("model").at("lesion"), c.lesion_model, "model.lesion");
  }
  if (j.contains("train")) {
    detail::check_keys(j.at("train"), {"liver", "lesion"}, "train");
    if (j.at("train").contains("liver"))
      detail::parse_train(j.at("train").at("liver"), c.liver_train, "train.liver");
    if (j.at("train").contains("lesion"))
      detail::parse_train(j.at("train").at("lesion"), c.lesion_train, "train.lesion");
  }
  if (j.contains("mining")) {
    const auto& m = j.at("mining");
    detail::check_keys(m, {"variant", "liver", "lesion"}, "mining");
    if (m.contains("variant")) {
      std::string v = m.at("variant").get<std::string>();
      if (v == "pwce")
        c.variant = MiningVariant::pwce;
      else if (v == "dice")
        c.variant = MiningVariant::dice;
      else
        throw ConfigError("mining.variant must be 'pwce' or 'dice'");
    }
    detail::read_if(m, "liver", c.mine_liver);
    detail::read_if(m, "lesion", c.mine_lesion);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::check_keys(e, {"largest_component", "connectivity", "mask_lesion_by_liver", "split",
                           "overlays"},
                       "eval");
    detail::read_if(e, "largest_component", c.eval_flags.largest_component_liver);
    if (e.contains("connectivity")) {
      int v = e.at("connectivity").get<int>();
      if (v != 6 && v != 26) throw ConfigError("eval.connectivity must be 6 or 26");
      c.eval_flags.connectivity = v == 6 ? Connectivity::six : Connectivity::twenty_six;
    }
    detail::read_if(e, "mask_lesion_by_liver", c.eval_flags.mask_lesion_by_liver);
    detail::read_if(e, "split", c.eval_split);
    detail::read_if(e, "overlays", c.overlays);
  }

  // cross-field checks
  for (const ModelConfig* m : {&c.liver_model, &c.lesion_model}) m->validate();
  if (c.liver_model.dims == 2 && c.liver_model.in_channels != c.liver_train.multislice_k)
    throw ConfigError("model.liver.in_channels must equal train.liver.multislice_k");
  int64_t lesion_in = c.lesion_train.multislice_k + (c.setup == "combined" ? 1 : 0);
  if (c.lesion_model.dims == 2 && c.lesion_model.in_channels != lesion_in)
    throw ConfigError("model.lesion.in_channels must equal train.lesion.multislice_k" +
                      std::string(c.setup == "combined" ? " + 1 (combined setup)" : ""));
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

// Fully resolved config; reloading it reproduces the same RunConfig.
inline nlohmann::json effective_config(const RunConfig& c) {
  nlohmann::json el, es;  // model sections
  to_json(el, c.liver_model);
  to_json(es, c.lesion_model);
  return {{"seed", c.seed},
          {"output_root", c.output_root},
          {"setup", c.setup},
          {"dataset",
           {{"kind", c.dataset_kind},
            {"path", c.dataset_path},
            {"synthetic", detail::synth_json(c.synth)},
            {"hu_window", {c.hu_window[0], c.hu_window[1]}}}},
          {"model", {{"liver", el}, {"lesion", es}}},
          {"train",
           {{"liver", detail::train_json(c.liver_train)},
            {"lesion", detail::train_json(c.lesion_train)}}},
          {"mining",
           {{"variant", to_string(c.variant)}, {"liver", c.mine_liver}, {"lesion", c.mine_lesion}}},
          {"eval",
           {{"largest_component", c.eval_flags.largest_component_liver},
            {"connectivity", static_cast<int>(c.eval_flags.connectivity)},
            {"mask_lesion_by_liver", c.eval_flags.mask_lesion_by_liver},
            {"split", c.eval_split},
            {"overlays", c.overlays}}}};
}

// Stable 16-hex-digit hash of the resolved config (nlohmann::json keeps
// object keys sorted, so the dump is canonical).
inline std::string config_hash(const RunConfig& c) {
  std::string s = effective_config(c).dump();
  return hex64(fnv1a64(s.data(), s.size()));
}

// Output root: MASKMINE_RUN_DIR env var wins over the config value.
inline std::filesystem::path output_root(const RunConfig& c) {
  if (const char* env = std::getenv("MASKMINE_RUN_DIR")) return env;
  return c.output_root;
}

// Creates runs/<hash>-<timestamp>[-n]; a numeric suffix disambiguates
// runs within the same second.
inline std::filesystem::path make_run_dir(const RunConfig& c) {
  std::filesystem::path root = output_root(c);
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char ts[32];
  std::strftime(ts, sizeof(ts), "%Y%m%d-%H%M%S", &tm);
  std::string base = config_hash(c) + "-" + ts;
  std::filesystem::path dir = root / base;
  for (int i = 1; std::filesystem::exists(dir); ++i) dir = root / (base + "-" + std::to_string(i));
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (!std::filesystem::is_directory(dir)) throw IoError("cannot create run dir " + dir.string());
  std::ofstream f(dir / "config.json");
  f << effective_config(c).dump(2) << "\n";
  return dir;
}

// Most recent earlier run directory for the same config hash, or empty.
inline std::filesystem::path find_latest_run_dir(const RunConfig& c,
                                                 const std::filesystem::path& exclude = {}) {
  std::filesystem::path root = output_root(c);
  std::string prefix = config_hash(c) + "-";
  std::filesystem::path best;
  if (!std::filesystem::is_directory(root)) return best;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (!e.is_directory() || e.path() == exclude) continue;
    std::string name = e.path().filename().string();
    if (name.rfind(prefix, 0) != 0) continue;
    if (best.empty() || name > best.filename().string()) best = e.path();
  }
  return best;
}

}  // namespace maskmine
