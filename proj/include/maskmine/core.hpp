#pragma once

// Basic numeric containers and deterministic RNG shared by all modules.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskmine {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParameterError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConsistencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major n-d array of T. Shape order is caller convention;
// volumes use (z, y, x), network activations use (n, c, z, y, x).
template <typename T>
struct NdArray {
  std::vector<int64_t> shape;
  std::vector<T> data;

  NdArray() = default;
  explicit NdArray(std::vector<int64_t> s, T fill = T{}) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 0) throw ShapeError("negative dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 3-d access (z, y, x)
  T& at3(int64_t z, int64_t y, int64_t x) {
    return data[static_cast<size_t>((z * shape[1] + y) * shape[2] + x)];
  }
  const T& at3(int64_t z, int64_t y, int64_t x) const {
    return data[static_cast<size_t>((z * shape[1] + y) * shape[2] + x)];
  }

  template <typename U>
  bool same_shape(const NdArray<U>& o) const {
    return shape == o.shape;
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

using FloatGrid = NdArray<float>;
using ByteGrid = NdArray<uint8_t>;

// Portable deterministic RNG. Distributions are implemented here rather
// than with std:: equivalents so streams are reproducible across
// standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    // splitmix64 expansion of the seed
    state_ = seed + 0x9e3779b97f4a7c15ULL;
    for (int i = 0; i < 4; ++i) next_u64();
    has_gauss_ = false;
  }

  // Derive an independent stream, e.g. per worker or per named stage.
  Rng fork(uint64_t salt) const {
    Rng r(state_ ^ (salt * 0xbf58476d1ce4e5b9ULL + 0x94d049bb133111ebULL));
    return r;
  }
  Rng fork(const std::string& tag) const {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : tag) h = (h ^ c) * 1099511628211ULL;
    return fork(h);
  }

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [lo, hi] inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw ParameterError("uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_gauss_) {
      has_gauss_ = false;
      return gauss_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    gauss_ = r * std::sin(a);
    has_gauss_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_ = 0;
  bool has_gauss_ = false;
  double gauss_ = 0.0;
};

inline uint64_t fnv1a64(const void* p, size_t n, uint64_t h = 1469598103934665603ULL) {
  const unsigned char* b = static_cast<const unsigned char*>(p);
  for (size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace maskmine
