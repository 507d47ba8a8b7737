#pragma once

// Report emission: metrics CSV/JSON, bar charts of dice means and error
// counts, and prediction-overlay slices. Charts carry no embedded text;
// the companion JSON documents bar order and colors.

#include <png.h>

#include "maskmine/pipeline.hpp"

namespace maskmine {

// ---------------------------------------------------------------------------
// Minimal RGB canvas + PNG writer

struct Rgb {
  uint8_t r = 0, g = 0, b = 0;
};

class Canvas {
 public:
  Canvas(int w, int h, Rgb fill = {255, 255, 255}) : w_(w), h_(h), px_(static_cast<size_t>(w) * h, fill) {}

  int width() const { return w_; }
  int height() const { return h_; }

  void set(int x, int y, Rgb c) {
    if (x >= 0 && x < w_ && y >= 0 && y < h_) px_[static_cast<size_t>(y) * w_ + x] = c;
  }
  Rgb get(int x, int y) const { return px_[static_cast<size_t>(y) * w_ + x]; }

  void rect(int x0, int y0, int w, int h, Rgb c) {
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) set(x, y, c);
  }

  void hline(int x0, int x1, int y, Rgb c) {
    for (int x = x0; x <= x1; ++x) set(x, y, c);
  }

  void save(const std::filesystem::path& path) const {
    FILE* f = std::fopen(path.string().c_str(), "wb");
    if (!f) throw IoError("cannot write image " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
      std::fclose(f);
      png_destroy_write_struct(&png, &info);
      throw IoError("png encode failed for " + path.string());
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w_), static_cast<png_uint_32>(h_), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<uint8_t> row(static_cast<size_t>(w_) * 3);
    for (int y = 0; y < h_; ++y) {
      for (int x = 0; x < w_; ++x) {
        Rgb c = px_[static_cast<size_t>(y) * w_ + x];
        row[static_cast<size_t>(x) * 3] = c.r;
        row[static_cast<size_t>(x) * 3 + 1] = c.g;
        row[static_cast<size_t>(x) * 3 + 2] = c.b;
      }
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
  }

 private:
  int w_, h_;
  std::vector<Rgb> px_;
};

// ---------------------------------------------------------------------------
// CSV / JSON

inline void write_metrics_csv(const std::vector<MetricsReport>& reports,
                              const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << "report,split,volume,target,dice,tn,fp,fn,tp,excluded_from_mean\n";
  char buf[64];
  for (const auto& rep : reports) {
    for (const auto& r : rep.rows) {
      std::snprintf(buf, sizeof(buf), "%.6f", r.dice);
      f << rep.label << ',' << rep.split << ',' << r.id << ',' << to_string(r.target) << ',' << buf
        << ',' << r.counts.tn << ',' << r.counts.fp << ',' << r.counts.fn << ',' << r.counts.tp
        << ',' << (r.excluded_from_mean ? 1 : 0) << '\n';
    }
    for (Target t : {Target::liver, Target::lesion}) {
      ConfusionCounts c = rep.totals(t);
      if (c.total() == 0) continue;
      std::snprintf(buf, sizeof(buf), "%.6f", rep.mean_dice(t));
      f << rep.label << ',' << rep.split << ",mean," << to_string(t) << ',' << buf << ',' << c.tn
        << ',' << c.fp << ',' << c.fn << ',' << c.tp << ",0\n";
    }
  }
}

inline nlohmann::json metrics_json(const std::vector<MetricsReport>& reports) {
  nlohmann::json out;
  out["conventions"] = {{"empty_empty_dice", 1.0},
                        {"mean", "volume-averaged; empty lesion ground truth excluded"}};
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& rep : reports) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows)
      rows.push_back({{"volume", r.id},
                      {"target", to_string(r.target)},
                      {"dice", r.dice},
                      {"tn", r.counts.tn},
                      {"fp", r.counts.fp},
                      {"fn", r.counts.fn},
                      {"tp", r.counts.tp},
                      {"excluded_from_mean", r.excluded_from_mean}});
    reps.push_back({{"label", rep.label},
                    {"split", rep.split},
                    {"mean_dice", {{"liver", rep.mean_dice(Target::liver)},
                                   {"lesion", rep.mean_dice(Target::lesion)}}},
                    {"volumes", rows}});
  }
  out["reports"] = reps;
  if (reports.size() >= 2) {
    // diff of each later report against the first
    nlohmann::json diffs = nlohmann::json::array();
    for (size_t i = 1; i < reports.size(); ++i)
      diffs.push_back(
          {{"label", reports[i].label + " - " + reports[0].label},
           {"liver", reports[i].mean_dice(Target::liver) - reports[0].mean_dice(Target::liver)},
           {"lesion",
            reports[i].mean_dice(Target::lesion) - reports[0].mean_dice(Target::lesion)}});
    out["mean_dice_diff"] = diffs;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Charts

namespace detail {

inline const std::array<Rgb, 6> kPalette = {{{66, 133, 244},
                                             {219, 68, 55},
                                             {244, 180, 0},
                                             {15, 157, 88},
                                             {171, 71, 188},
                                             {0, 172, 193}}};

// one group of vertical bars per entry; every group normalized to its max
inline void draw_bar_groups(Canvas& cv, const std::vector<std::vector<double>>& groups,
                            bool normalize_per_group) {
  int margin = 20, base = cv.height() - margin, top = margin;
  int n_groups = static_cast<int>(groups.size());
  if (n_groups == 0) return;
  int group_w = (cv.width() - 2 * margin) / n_groups;
  for (int g = 0; g < n_groups; ++g) {
    const auto& bars = groups[static_cast<size_t>(g)];
    double mx = normalize_per_group ? 0.0 : 1.0;
    if (normalize_per_group)
      for (double v : bars) mx = std::max(mx, v);
    if (mx <= 0) mx = 1.0;
    int n = static_cast<int>(bars.size());
    int bar_w = std::max(2, (group_w - 10) / std::max(1, n));
    for (int b = 0; b < n; ++b) {
      double frac = std::clamp(bars[static_cast<size_t>(b)] / mx, 0.0, 1.0);
      int h = static_cast<int>(frac * (base - top));
      cv.rect(margin + g * group_w + 5 + b * bar_w, base - h, bar_w - 1, h,
              kPalette[static_cast<size_t>(b) % kPalette.size()]);
    }
  }
  cv.hline(margin, cv.width() - margin, base, {0, 0, 0});
}

}  // namespace detail

// Mean-dice chart: one group per target, one bar per report.
inline void write_dice_chart(const std::vector<MetricsReport>& reports,
                             const std::filesystem::path& path) {
  Canvas cv(480, 320);
  std::vector<std::vector<double>> groups(2);
  for (const auto& rep : reports) {
    groups[0].push_back(rep.mean_dice(Target::liver));
    groups[1].push_back(rep.mean_dice(Target::lesion));
  }
  detail::draw_bar_groups(cv, groups, false);
  cv.save(path);
}

// Error-count chart: one group per (target, class) with one bar per
// report; each group normalized to its highest value.
inline void write_error_chart(const std::vector<MetricsReport>& reports,
                              const std::filesystem::path& path) {
  Canvas cv(640, 320);
  std::vector<std::vector<double>> groups;
  for (Target t : {Target::liver, Target::lesion})
    for (int cls = 0; cls < 3; ++cls) {  // FP, FN, TP
      std::vector<double> bars;
      for (const auto& rep : reports) {
        ConfusionCounts c = rep.totals(t);
        bars.push_back(static_cast<double>(cls == 0 ? c.fp : cls == 1 ? c.fn : c.tp));
      }
      groups.push_back(std::move(bars));
    }
  detail::draw_bar_groups(cv, groups, true);
  cv.save(path);
}

inline nlohmann::json chart_legend(const std::vector<MetricsReport>& reports) {
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& rep : reports) labels.push_back(rep.label);
  return {{"dice_chart", {{"groups", {"liver", "lesion"}}, {"bars", labels}}},
          {"error_chart",
           {{"groups",
             {"liver_fp", "liver_fn", "liver_tp", "lesion_fp", "lesion_fn", "lesion_tp"}},
            {"bars", labels},
            {"normalization", "per group maximum"}}}};
}

// Overlay: grayscale axial slice with false negatives in red and false
// positives in green.
inline void write_overlay_slice(const Volume& v, const ByteGrid& pred, const ByteGrid& gt,
                                int64_t z, const std::filesystem::path& path) {
  if (!pred.same_shape(v.voxels) || !gt.same_shape(v.voxels))
    throw ShapeError("write_overlay_slice: shape mismatch");
  int64_t h = v.height(), w = v.width();
  Canvas cv(static_cast<int>(w), static_cast<int>(h));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      float g = std::clamp(v.voxels.at3(z, y, x), 0.f, 1.f);
      uint8_t v8 = static_cast<uint8_t>(g * 255.f);
      Rgb c{v8, v8, v8};
      bool p = pred.at3(z, y, x), t = gt.at3(z, y, x);
      if (t && !p) c = {220, 40, 40};   // false negative
      if (p && !t) c = {40, 200, 40};   // false positive
      cv.set(static_cast<int>(x), static_cast<int>(y), c);
    }
  cv.save(path);
}

// ---------------------------------------------------------------------------

struct OverlaySpec {
  const Volume* volume = nullptr;
  ByteGrid pred, gt;
  int64_t slice = 0;
  std::string name;  // file stem
};

// Writes metrics.csv, metrics.json, dice/error charts plus a legend and
// any requested overlay slices into out_dir.
inline void emit_report(const std::vector<MetricsReport>& reports,
                        const std::filesystem::path& out_dir,
                        const std::vector<OverlaySpec>& overlays = {}) {
  if (reports.empty()) throw ParameterError("emit_report: no reports");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (!std::filesystem::is_directory(out_dir))
    throw IoError("cannot create report directory " + out_dir.string());

  write_metrics_csv(reports, out_dir / "metrics.csv");
  nlohmann::json j = metrics_json(reports);
  j["chart_legend"] = chart_legend(reports);
  {
    std::ofstream f(out_dir / "metrics.json");
    if (!f) throw IoError("cannot write metrics.json");
    f << j.dump(2) << "\n";
  }
  write_dice_chart(reports, out_dir / "dice_means.png");
  write_error_chart(reports, out_dir / "error_counts.png");
  for (const auto& o : overlays)
    write_overlay_slice(*o.volume, o.pred, o.gt, o.slice, out_dir / (o.name + ".png"));
}

}  // namespace maskmine
