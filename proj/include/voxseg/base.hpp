#pragma once

#include <array>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <string>
#include <vector>

#include "voxseg/errors.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace voxseg {

/// Spatial extents (depth, width, height), D outermost in memory.
struct Shape3 {
  int d = 0, w = 0, h = 0;

  std::int64_t vox() const { return std::int64_t(d) * w * h; }
  bool operator==(const Shape3&) const = default;
  int operator[](int axis) const { return axis == 0 ? d : axis == 1 ? w : h; }

  std::string str() const {
    return std::to_string(d) + "x" + std::to_string(w) + "x" + std::to_string(h);
  }
};

/// Physical voxel size in millimeters per axis.
struct Spacing3 {
  double d = 1.0, w = 1.0, h = 1.0;

  bool operator==(const Spacing3&) const = default;
  double operator[](int axis) const { return axis == 0 ? d : axis == 1 ? w : h; }
  bool positive() const { return d > 0 && w > 0 && h > 0; }
};

inline std::int64_t flat_index(const Shape3& s, int z, int y, int x) {
  return (std::int64_t(z) * s.w + y) * s.h + x;
}

/// Dense per-channel 3D field, channel-major, each channel in C-order.
template <class T>
struct Field {
  int c = 0;
  Shape3 s{};
  std::vector<T> v;

  Field() = default;
  Field(int channels, Shape3 shape)
      : c(channels), s(shape), v(std::size_t(channels) * shape.vox(), T(0)) {}

  std::int64_t plane() const { return s.vox(); }
  std::int64_t size() const { return std::int64_t(c) * s.vox(); }
  T* ch(int ci) { return v.data() + std::size_t(ci) * plane(); }
  const T* ch(int ci) const { return v.data() + std::size_t(ci) * plane(); }
  T& at(int ci, int z, int y, int x) { return v[std::size_t(ci) * plane() + flat_index(s, z, y, x)]; }
  T at(int ci, int z, int y, int x) const { return v[std::size_t(ci) * plane() + flat_index(s, z, y, x)]; }
};

// ---- seeding ------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives a stream seed from a master seed and a stream tag. All stochastic
/// components draw from streams created this way so runs replay exactly.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t tag) {
  return splitmix64(splitmix64(master) ^ (tag + 0x9e3779b97f4a7c15ULL));
}

using Rng = std::mt19937_64;

// ---- threading ----------------------------------------------------------

namespace detail {
inline int& thread_override() {
  static int n = 0;  // 0 = auto
  return n;
}
}  // namespace detail

/// 0 restores automatic thread count. SSL_SEG_DETERMINISTIC=1 in the
/// environment always wins and forces single-threaded execution.
inline void set_num_threads(int n) { detail::thread_override() = n; }

inline int num_threads() {
  const char* det = std::getenv("SSL_SEG_DETERMINISTIC");
  if (det && det[0] == '1') return 1;
  if (detail::thread_override() > 0) return detail::thread_override();
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

/// Applies the resolved thread count to the OpenMP runtime. Parallel loops
/// write disjoint outputs with fixed per-element accumulation order, so
/// results are identical for any thread count; the single-threaded override
/// exists as the reference mode.
inline void configure_threads() {
#ifdef _OPENMP
  omp_set_num_threads(num_threads());
#endif
}

}  // namespace voxseg
