#pragma once

// Volume ingestion, preprocessing, patch sampling, augmentation and the
// synthetic dataset generator.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskmine/core.hpp"
#include "maskmine/nifti.hpp"

namespace maskmine {

enum class Target { liver, lesion };

inline const char* to_string(Target t) { return t == Target::liver ? "liver" : "lesion"; }

struct Volume {
  FloatGrid voxels;                            // (z, y, x)
  std::array<float, 3> spacing{1.f, 1.f, 1.f}; // mm, (z, y, x)
  std::string id;

  int64_t depth() const { return voxels.shape[0]; }
  int64_t height() const { return voxels.shape[1]; }
  int64_t width() const { return voxels.shape[2]; }
};

struct LabelMask {
  ByteGrid voxels;  // values in {0,1}
  Target target = Target::liver;

  bool is_binary() const {
    for (uint8_t v : voxels.data)
      if (v > 1) return false;
    return true;
  }
};

struct Patch {
  // image: (c, h, w) for 2D, (1, d, h, w) for 3D
  FloatGrid image;
  ByteGrid label;               // spatial shape only
  std::optional<FloatGrid> weight;
  std::string volume_id;
  std::array<int64_t, 3> origin{0, 0, 0};  // (z, y, x) of the crop in the volume
  bool padded = false;
  bool fallback_uniform = false;  // region policy fell back to uniform
};

enum class CropPolicy { uniform, in_and_around_region };

// ---------------------------------------------------------------------------
// I/O

inline void save_volume(const std::filesystem::path& path, const Volume& v) {
  nifti::save_float(path, v.voxels, v.spacing);
}

inline std::filesystem::path sibling_label_path(const std::filesystem::path& image_path,
                                                const std::string& suffix) {
  // volume_003.nii.gz -> volume_003_<suffix>.nii.gz
  std::string name = image_path.filename().string();
  std::string ext;
  if (name.size() > 7 && name.substr(name.size() - 7) == ".nii.gz") {
    ext = ".nii.gz";
  } else if (name.size() > 4 && name.substr(name.size() - 4) == ".nii") {
    ext = ".nii";
  } else {
    throw FormatError("not a NIfTI filename: " + name);
  }
  name = name.substr(0, name.size() - ext.size()) + "_" + suffix + ext;
  return image_path.parent_path() / name;
}

inline std::pair<Volume, std::optional<LabelMask>> load_volume(
    const std::filesystem::path& path, Target label_target = Target::liver) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  nifti::NiftiImage img = nifti::load(path);
  Volume v;
  v.voxels = std::move(img.voxels);
  v.spacing = img.spacing;
  v.id = path.stem().stem().string();

  std::optional<LabelMask> label;
  auto lp = sibling_label_path(path, to_string(label_target));
  if (std::filesystem::exists(lp)) {
    nifti::NiftiImage li = nifti::load(lp);
    if (li.voxels.shape != v.voxels.shape)
      throw ConsistencyError("label shape does not match image shape for " + path.string());
    LabelMask m;
    m.target = label_target;
    m.voxels = ByteGrid(li.voxels.shape);
    for (int64_t i = 0; i < li.voxels.numel(); ++i)
      m.voxels[i] = li.voxels[i] > 0.5f ? 1 : 0;
    label = std::move(m);
  }
  return {std::move(v), std::move(label)};
}

// ---------------------------------------------------------------------------
// Preprocessing

// Clip to the HU window then map affinely onto [0, 1]. Apply exactly once.
inline Volume window_and_normalize(Volume v, float lo = -100.f, float hi = 600.f) {
  if (!(lo < hi)) throw ParameterError("window_and_normalize: lo must be < hi");
  float inv = 1.f / (hi - lo);
  for (auto& x : v.voxels.data) x = (std::clamp(x, lo, hi) - lo) * inv;
  return v;
}

// k adjacent axial slices centered on axial_index, edge slices replicated.
// Returns (k, h, w).
inline FloatGrid multislice_view(const Volume& v, int64_t axial_index, int k = 3) {
  if (k < 1 || k % 2 == 0) throw ParameterError("multislice_view: k must be odd and >= 1");
  if (axial_index < 0 || axial_index >= v.depth())
    throw ParameterError("multislice_view: axial index out of range");
  int64_t h = v.height(), w = v.width();
  FloatGrid out({k, h, w});
  for (int c = 0; c < k; ++c) {
    int64_t z = std::clamp<int64_t>(axial_index + c - k / 2, 0, v.depth() - 1);
    std::copy_n(&v.voxels.at3(z, 0, 0), h * w, &out.at3(c, 0, 0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Crop sampling

namespace detail {

inline int64_t clamp_origin(int64_t center, int64_t size, int64_t dim) {
  int64_t o = center - size / 2;
  return std::clamp<int64_t>(o, 0, std::max<int64_t>(0, dim - size));
}

}  // namespace detail

// Draw a 3D crop of `size` (z, y, x). Policy `uniform` draws the origin
// uniformly over valid origins; `in_and_around_region` draws the crop
// center from the region mask dilated by `margin` voxels per axis. An
// empty region falls back to uniform and flags the patch. Dimensions
// larger than the volume are zero-padded.
inline Patch sample_crop(const Volume& v, const LabelMask& m, std::array<int64_t, 3> size,
                         CropPolicy policy, const ByteGrid* region, Rng& rng,
                         int64_t margin = 16) {
  if (!m.voxels.same_shape(v.voxels)) throw ShapeError("sample_crop: label/volume shape mismatch");
  std::array<int64_t, 3> dims = {v.depth(), v.height(), v.width()};

  Patch p;
  p.volume_id = v.id;

  std::array<int64_t, 3> origin{};
  bool use_uniform = policy == CropPolicy::uniform;
  if (!use_uniform) {
    std::vector<int64_t> candidates;
    if (region && region->numel() == v.voxels.numel()) {
      for (int64_t i = 0; i < region->numel(); ++i)
        if ((*region)[i]) candidates.push_back(i);
    }
    if (candidates.empty()) {
      use_uniform = true;
      p.fallback_uniform = true;
    } else {
      int64_t lin = candidates[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(candidates.size()) - 1))];
      std::array<int64_t, 3> center = {lin / (dims[1] * dims[2]),
                                       (lin / dims[2]) % dims[1], lin % dims[2]};
      for (int a = 0; a < 3; ++a) {
        if (margin > 0)
          center[a] = std::clamp<int64_t>(center[a] + rng.uniform_int(-margin, margin), 0,
                                          dims[a] - 1);
        origin[a] = detail::clamp_origin(center[a], size[a], dims[a]);
      }
    }
  }
  if (use_uniform) {
    for (int a = 0; a < 3; ++a)
      origin[a] = dims[a] > size[a] ? rng.uniform_int(0, dims[a] - size[a]) : 0;
  }
  p.origin = origin;

  p.image = FloatGrid({size[0], size[1], size[2]});
  p.label = ByteGrid({size[0], size[1], size[2]});
  for (int64_t z = 0; z < size[0]; ++z)
    for (int64_t y = 0; y < size[1]; ++y)
      for (int64_t x = 0; x < size[2]; ++x) {
        int64_t vz = origin[0] + z, vy = origin[1] + y, vx = origin[2] + x;
        if (vz < dims[0] && vy < dims[1] && vx < dims[2]) {
          p.image.at3(z, y, x) = v.voxels.at3(vz, vy, vx);
          p.label.at3(z, y, x) = m.voxels.at3(vz, vy, vx);
        } else {
          p.padded = true;
        }
      }
  return p;
}

// ---------------------------------------------------------------------------
// Augmentation (axial plane only)

struct AugmentConfig {
  double flip_h_prob = 0.5;
  double flip_v_prob = 0.5;
  double rotate_prob = 0.5;
  double rotate_max_deg = 15.0;
  double zoom_prob = 0.5;
  double zoom_lo = 0.85;
  double zoom_hi = 1.15;
};

namespace detail {

// Rotation by `deg` about the center plus zoom, applied per axial slice.
// Bilinear for images, nearest for labels/weights.
template <typename T, bool Nearest>
void warp_axial(const NdArray<T>& in, NdArray<T>& out, int64_t planes, int64_t h, int64_t w,
                double deg, double zoom) {
  double rad = deg * 3.14159265358979323846 / 180.0;
  double ca = std::cos(rad), sa = std::sin(rad);
  double cy = (static_cast<double>(h) - 1) / 2.0, cx = (static_cast<double>(w) - 1) / 2.0;
  double inv_zoom = 1.0 / zoom;
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = &in.data[static_cast<size_t>(p * h * w)];
    T* dst = &out.data[static_cast<size_t>(p * h * w)];
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double dy = (static_cast<double>(y) - cy) * inv_zoom;
        double dx = (static_cast<double>(x) - cx) * inv_zoom;
        double sy = ca * dy - sa * dx + cy;
        double sx = sa * dy + ca * dx + cx;
        T val{};
        if constexpr (Nearest) {
          int64_t iy = static_cast<int64_t>(std::lround(sy));
          int64_t ix = static_cast<int64_t>(std::lround(sx));
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) val = src[iy * w + ix];
        } else {
          int64_t y0 = static_cast<int64_t>(std::floor(sy));
          int64_t x0 = static_cast<int64_t>(std::floor(sx));
          double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
          double acc = 0.0;
          for (int oy = 0; oy < 2; ++oy)
            for (int ox = 0; ox < 2; ++ox) {
              int64_t yy = y0 + oy, xx = x0 + ox;
              if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              double wgt = (oy ? fy : 1 - fy) * (ox ? fx : 1 - fx);
              acc += wgt * static_cast<double>(src[yy * w + xx]);
            }
          val = static_cast<T>(acc);
        }
        dst[y * w + x] = val;
      }
  }
}

template <typename T>
void flip_axial(NdArray<T>& g, int64_t planes, int64_t h, int64_t w, bool horiz) {
  for (int64_t p = 0; p < planes; ++p) {
    T* s = &g.data[static_cast<size_t>(p * h * w)];
    if (horiz) {
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w / 2; ++x) std::swap(s[y * w + x], s[y * w + (w - 1 - x)]);
    } else {
      for (int64_t y = 0; y < h / 2; ++y)
        for (int64_t x = 0; x < w; ++x) std::swap(s[y * w + x], s[(h - 1 - y) * w + x]);
    }
  }
}

}  // namespace detail

// Same geometric transform for image, label and weight. The leading axes
// of the patch arrays are treated as planes over the trailing (h, w).
inline Patch augment(Patch p, Rng& rng, const AugmentConfig& cfg = {}) {
  int64_t h = p.image.shape[p.image.ndim() - 2];
  int64_t w = p.image.shape[p.image.ndim() - 1];
  int64_t img_planes = p.image.numel() / (h * w);
  int64_t lbl_planes = p.label.numel() / (h * w);

  if (rng.bernoulli(cfg.flip_h_prob)) {
    detail::flip_axial(p.image, img_planes, h, w, true);
    detail::flip_axial(p.label, lbl_planes, h, w, true);
    if (p.weight) detail::flip_axial(*p.weight, lbl_planes, h, w, true);
  }
  if (rng.bernoulli(cfg.flip_v_prob)) {
    detail::flip_axial(p.image, img_planes, h, w, false);
    detail::flip_axial(p.label, lbl_planes, h, w, false);
    if (p.weight) detail::flip_axial(*p.weight, lbl_planes, h, w, false);
  }

  bool rot = rng.bernoulli(cfg.rotate_prob);
  double deg = rot ? rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg) : 0.0;
  bool zoomed = rng.bernoulli(cfg.zoom_prob);
  double zoom = zoomed ? std::clamp(rng.uniform(cfg.zoom_lo, cfg.zoom_hi), cfg.zoom_lo, cfg.zoom_hi)
                       : 1.0;
  if (rot || zoomed) {
    FloatGrid wi(p.image.shape);
    detail::warp_axial<float, false>(p.image, wi, img_planes, h, w, deg, zoom);
    p.image = std::move(wi);
    ByteGrid wl(p.label.shape);
    detail::warp_axial<uint8_t, true>(p.label, wl, lbl_planes, h, w, deg, zoom);
    p.label = std::move(wl);
    if (p.weight) {
      FloatGrid ww(p.weight->shape);
      detail::warp_axial<float, true>(*p.weight, ww, lbl_planes, h, w, deg, zoom);
      p.weight = std::move(ww);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Synthetic dataset

struct SyntheticSpec {
  int n_volumes = 20;
  std::array<int64_t, 3> shape = {64, 64, 64};
  int organ_blobs_min = 1, organ_blobs_max = 2;
  double organ_radius_min = 10.0, organ_radius_max = 18.0;
  int lesion_blobs_min = 1, lesion_blobs_max = 4;
  double lesion_radius_min = 2.0, lesion_radius_max = 5.0;
  float background_hu = -60.f;
  float organ_hu = 120.f;
  float lesion_hu = 320.f;
  float noise_hu = 60.f;
  double val_fraction = 0.15;  // 85/15 train/val split
  uint64_t seed = 0;
};

struct ManifestEntry {
  std::string volume;  // paths relative to the manifest directory
  std::string liver;
  std::string lesion;
  std::string split;  // "train" or "val"
  std::string id;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;
};

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : m.entries)
    j.push_back({{"volume", e.volume},
                 {"liver", e.liver},
                 {"lesion", e.lesion},
                 {"split", e.split},
                 {"id", e.id}});
  std::ofstream f(path);
  if (!f) throw IoError("cannot write manifest " + path.string());
  f << j.dump(2) << "\n";
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read manifest " + path.string());
  nlohmann::json j;
  f >> j;
  DatasetManifest m;
  m.root = path.parent_path();
  for (const auto& e : j) {
    ManifestEntry me;
    me.volume = e.at("volume").get<std::string>();
    me.liver = e.at("liver").get<std::string>();
    me.lesion = e.at("lesion").get<std::string>();
    me.split = e.at("split").get<std::string>();
    me.id = e.at("id").get<std::string>();
    m.entries.push_back(std::move(me));
  }
  return m;
}

namespace detail {

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;
  bool contains(int64_t z, int64_t y, int64_t x) const {
    double dz = (static_cast<double>(z) - center[0]) / radii[0];
    double dy = (static_cast<double>(y) - center[1]) / radii[1];
    double dx = (static_cast<double>(x) - center[2]) / radii[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
};

}  // namespace detail

// Build one synthetic volume with organ blobs and lesions strictly inside
// organ tissue. Intensities are in HU so the usual windowing applies.
inline std::tuple<Volume, LabelMask, LabelMask> make_synthetic_volume(const SyntheticSpec& spec,
                                                                      int index, Rng& rng) {
  auto [d, h, w] = spec.shape;
  Volume v;
  v.id = "synth_" + std::to_string(index);
  v.voxels = FloatGrid({d, h, w}, spec.background_hu);

  auto rand_ellipsoid = [&](double rmin, double rmax, std::array<double, 3> center_lo,
                            std::array<double, 3> center_hi) {
    detail::Ellipsoid e;
    for (int a = 0; a < 3; ++a) {
      e.center[a] = rng.uniform(center_lo[a], center_hi[a]);
      e.radii[a] = rng.uniform(rmin, rmax);
    }
    return e;
  };

  int n_organ = static_cast<int>(rng.uniform_int(spec.organ_blobs_min, spec.organ_blobs_max));
  std::vector<detail::Ellipsoid> organs;
  double margin = spec.organ_radius_max;
  for (int i = 0; i < n_organ; ++i)
    organs.push_back(rand_ellipsoid(spec.organ_radius_min, spec.organ_radius_max,
                                    {margin, margin, margin},
                                    {static_cast<double>(d) - margin,
                                     static_cast<double>(h) - margin,
                                     static_cast<double>(w) - margin}));

  LabelMask liver{ByteGrid({d, h, w}), Target::liver};
  for (int64_t z = 0; z < d; ++z)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (const auto& e : organs)
          if (e.contains(z, y, x)) {
            liver.voxels.at3(z, y, x) = 1;
            v.voxels.at3(z, y, x) = spec.organ_hu;
            break;
          }

  // lesions: centers drawn from organ voxels; trimmed to the organ so
  // containment holds exactly
  LabelMask lesion{ByteGrid({d, h, w}), Target::lesion};
  std::vector<int64_t> organ_voxels;
  for (int64_t i = 0; i < liver.voxels.numel(); ++i)
    if (liver.voxels[i]) organ_voxels.push_back(i);
  int n_lesion = static_cast<int>(rng.uniform_int(spec.lesion_blobs_min, spec.lesion_blobs_max));
  if (!organ_voxels.empty()) {
    for (int i = 0; i < n_lesion; ++i) {
      int64_t lin = organ_voxels[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(organ_voxels.size()) - 1))];
      detail::Ellipsoid e;
      e.center = {static_cast<double>(lin / (h * w)), static_cast<double>((lin / w) % h),
                  static_cast<double>(lin % w)};
      for (int a = 0; a < 3; ++a)
        e.radii[a] = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
      int64_t r = static_cast<int64_t>(std::ceil(spec.lesion_radius_max)) + 1;
      for (int64_t z = std::max<int64_t>(0, lin / (h * w) - r);
           z <= std::min<int64_t>(d - 1, lin / (h * w) + r); ++z)
        for (int64_t y = std::max<int64_t>(0, (lin / w) % h - r);
             y <= std::min<int64_t>(h - 1, (lin / w) % h + r); ++y)
          for (int64_t x = std::max<int64_t>(0, lin % w - r);
               x <= std::min<int64_t>(w - 1, lin % w + r); ++x)
            if (e.contains(z, y, x) && liver.voxels.at3(z, y, x)) {
              lesion.voxels.at3(z, y, x) = 1;
              v.voxels.at3(z, y, x) = spec.lesion_hu;
            }
    }
  }

  for (auto& x : v.voxels.data)
    x += spec.noise_hu * static_cast<float>(rng.normal());
  return {std::move(v), std::move(liver), std::move(lesion)};
}

// Write n_volumes NIfTI volumes plus liver/lesion labels and a manifest
// with an 85/15 train/val split. Deterministic given spec.seed.
inline DatasetManifest make_synthetic_dataset(const SyntheticSpec& spec,
                                              const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (!std::filesystem::is_directory(out_dir))
    throw IoError("cannot create dataset directory " + out_dir.string());

  Rng root(spec.seed);
  DatasetManifest manifest;
  manifest.root = out_dir;
  int n_val = std::max(1, static_cast<int>(std::lround(spec.n_volumes * spec.val_fraction)));
  for (int i = 0; i < spec.n_volumes; ++i) {
    Rng rng = root.fork(static_cast<uint64_t>(i) + 1);
    auto [v, liver, lesion] = make_synthetic_volume(spec, i, rng);
    ManifestEntry e;
    e.id = v.id;
    e.volume = v.id + ".nii.gz";
    e.liver = v.id + "_liver.nii.gz";
    e.lesion = v.id + "_lesion.nii.gz";
    e.split = i >= spec.n_volumes - n_val ? "val" : "train";
    save_volume(out_dir / e.volume, v);
    nifti::save_label(out_dir / e.liver, liver.voxels, v.spacing);
    nifti::save_label(out_dir / e.lesion, lesion.voxels, v.spacing);
    manifest.entries.push_back(std::move(e));
  }
  write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace maskmine
