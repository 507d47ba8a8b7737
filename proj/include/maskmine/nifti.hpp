#pragma once

// Minimal NIfTI-1 reader/writer (.nii and .nii.gz, via zlib).
// Supports the datatypes that occur in CT segmentation work:
// uint8, int16, int32, float32, float64. Always writes little-endian.

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "maskmine/core.hpp"

namespace maskmine::nifti {

namespace detail {

#pragma pack(push, 1)
struct Nifti1Header {
  int32_t sizeof_hdr;     // must be 348
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope, scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration, toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr int16_t DT_UINT8 = 2;
constexpr int16_t DT_INT16 = 4;
constexpr int16_t DT_INT32 = 8;
constexpr int16_t DT_FLOAT32 = 16;
constexpr int16_t DT_FLOAT64 = 64;

class GzFile {
 public:
  GzFile(const std::string& path, const char* mode) : f_(gzopen(path.c_str(), mode)) {
    if (!f_) throw IoError("cannot open " + path);
  }
  ~GzFile() {
    if (f_) gzclose(f_);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;

  void read(void* buf, size_t n) {
    if (gzread(f_, buf, static_cast<unsigned>(n)) != static_cast<int>(n))
      throw FormatError("truncated NIfTI stream");
  }
  void write(const void* buf, size_t n) {
    if (gzwrite(f_, buf, static_cast<unsigned>(n)) != static_cast<int>(n))
      throw IoError("short write to NIfTI stream");
  }

 private:
  gzFile f_;
};

}  // namespace detail

struct NiftiImage {
  // voxels stored (z, y, x); dim[1]=x, dim[2]=y, dim[3]=z on disk
  FloatGrid voxels;
  std::array<float, 3> spacing{1.f, 1.f, 1.f};  // mm per voxel, (z, y, x)
};

inline NiftiImage load(const std::filesystem::path& path) {
  detail::GzFile f(path.string(), "rb");
  detail::Nifti1Header h{};
  f.read(&h, sizeof(h));
  if (h.sizeof_hdr != 348 || std::strncmp(h.magic, "n+1", 3) != 0)
    throw FormatError("not a single-file NIfTI-1 image: " + path.string());
  if (h.dim[0] < 3 || h.dim[1] <= 0 || h.dim[2] <= 0 || h.dim[3] <= 0)
    throw FormatError("unsupported NIfTI dimensionality");

  int64_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
  int64_t n = nx * ny * nz;

  // skip extensions up to vox_offset
  int64_t skip = static_cast<int64_t>(h.vox_offset) - 348;
  if (skip < 0) throw FormatError("bad vox_offset");
  std::vector<char> junk(static_cast<size_t>(skip));
  if (skip > 0) f.read(junk.data(), junk.size());

  NiftiImage img;
  img.voxels = FloatGrid({nz, ny, nx});
  img.spacing = {h.pixdim[3], h.pixdim[2], h.pixdim[1]};
  for (float& s : img.spacing)
    if (!(s > 0.f)) s = 1.f;

  auto convert = [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> raw(static_cast<size_t>(n));
    f.read(raw.data(), raw.size() * sizeof(T));
    // disk order is x fastest; same linear order as our (z,y,x) layout
    for (int64_t i = 0; i < n; ++i) img.voxels[i] = static_cast<float>(raw[static_cast<size_t>(i)]);
  };
  switch (h.datatype) {
    case detail::DT_UINT8: convert(uint8_t{}); break;
    case detail::DT_INT16: convert(int16_t{}); break;
    case detail::DT_INT32: convert(int32_t{}); break;
    case detail::DT_FLOAT32: convert(float{}); break;
    case detail::DT_FLOAT64: convert(double{}); break;
    default: throw FormatError("unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  float slope = h.scl_slope;
  if (slope != 0.f && (slope != 1.f || h.scl_inter != 0.f))
    for (auto& v : img.voxels.data) v = v * slope + h.scl_inter;
  return img;
}

namespace detail {

inline Nifti1Header make_header(const FloatGrid& g, std::array<float, 3> spacing, int16_t dtype,
                                int16_t bitpix) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<int16_t>(g.shape[2]);
  h.dim[2] = static_cast<int16_t>(g.shape[1]);
  h.dim[3] = static_cast<int16_t>(g.shape[0]);
  h.dim[4] = h.dim[5] = h.dim[6] = h.dim[7] = 1;
  h.datatype = dtype;
  h.bitpix = bitpix;
  h.pixdim[0] = 1.f;
  h.pixdim[1] = spacing[2];
  h.pixdim[2] = spacing[1];
  h.pixdim[3] = spacing[0];
  h.vox_offset = 352.f;
  h.scl_slope = 1.f;
  h.xyzt_units = 2;  // millimeters
  h.sform_code = 0;
  h.qform_code = 0;
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

template <typename T>
void write_impl(const std::filesystem::path& path, const FloatGrid& g,
                std::array<float, 3> spacing, int16_t dtype) {
  bool gz = path.extension() == ".gz";
  GzFile f(path.string(), gz ? "wb" : "wbT");  // T = no compression wrapper
  Nifti1Header h = make_header(g, spacing, dtype, static_cast<int16_t>(sizeof(T) * 8));
  f.write(&h, sizeof(h));
  const char pad[4] = {0, 0, 0, 0};
  f.write(pad, 4);
  std::vector<T> raw(g.data.size());
  for (size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<T>(g.data[i]);
  f.write(raw.data(), raw.size() * sizeof(T));
}

}  // namespace detail

inline void save_float(const std::filesystem::path& path, const FloatGrid& g,
                       std::array<float, 3> spacing = {1.f, 1.f, 1.f}) {
  detail::write_impl<float>(path, g, spacing, detail::DT_FLOAT32);
}

inline void save_label(const std::filesystem::path& path, const ByteGrid& g,
                       std::array<float, 3> spacing = {1.f, 1.f, 1.f}) {
  FloatGrid tmp(g.shape);
  for (int64_t i = 0; i < g.numel(); ++i) tmp[i] = g[i];
  detail::write_impl<uint8_t>(path, tmp, spacing, detail::DT_UINT8);
}

}  // namespace maskmine::nifti
