#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxseg/base.hpp"
#include "voxseg/errors.hpp"

namespace voxseg {

/// Dense 3D scalar field with physical spacing. Voxels stored C-order,
/// depth outermost, float32 semantics.
struct Volume {
  Shape3 shape{};
  Spacing3 spacing{};
  std::vector<float> voxels;

  Volume() = default;
  Volume(Shape3 s, Spacing3 sp) : shape(s), spacing(sp), voxels(check(s, sp)) {}

  float& at(int z, int y, int x) { return voxels[flat_index(shape, z, y, x)]; }
  float at(int z, int y, int x) const { return voxels[flat_index(shape, z, y, x)]; }

 private:
  static std::vector<float> check(Shape3 s, Spacing3 sp) {
    if (s.d < 1 || s.w < 1 || s.h < 1)
      throw InvalidArgument("volume shape entries must be >= 1, got " + s.str());
    if (!sp.positive()) throw InvalidArgument("volume spacing entries must be > 0");
    return std::vector<float>(s.vox(), 0.0f);
  }
};

/// Integer class field paired with a Volume; 0 is background.
struct LabelVolume {
  Shape3 shape{};
  Spacing3 spacing{};
  int num_classes = 2;
  std::vector<std::uint8_t> classes;

  LabelVolume() = default;
  LabelVolume(Shape3 s, Spacing3 sp, int nc)
      : shape(s), spacing(sp), num_classes(nc), classes(check(s, sp, nc)) {}

  std::uint8_t& at(int z, int y, int x) { return classes[flat_index(shape, z, y, x)]; }
  std::uint8_t at(int z, int y, int x) const { return classes[flat_index(shape, z, y, x)]; }

 private:
  static std::vector<std::uint8_t> check(Shape3 s, Spacing3 sp, int nc) {
    if (s.d < 1 || s.w < 1 || s.h < 1)
      throw InvalidArgument("label shape entries must be >= 1, got " + s.str());
    if (!sp.positive()) throw InvalidArgument("label spacing entries must be > 0");
    if (nc < 2 || nc > 255) throw InvalidArgument("num_classes must be in [2, 255]");
    return std::vector<std::uint8_t>(s.vox(), 0);
  }
};

/// Patch location: origin may be negative / exceed bounds (padded extraction).
struct PatchSpec {
  std::array<int, 3> origin{0, 0, 0};  // (z, y, x)
  Shape3 size{};
};

enum class ResampleMode { linear, nearest };

// ---- resampling -----------------------------------------------------------
//
// Half-voxel-centered coordinate mapping: output voxel i samples the source at
// (i + 0.5) * out_spacing / in_spacing - 0.5. At identical spacing this maps
// voxel i to exactly i, so resampling at the native spacing is the identity.

namespace detail {

template <class T>
inline std::vector<T> resample_grid(const std::vector<T>& src, Shape3 ss, Spacing3 ssp,
                                    Shape3 os, Spacing3 osp, ResampleMode mode) {
  std::vector<T> out(os.vox());
  const double rz = osp.d / ssp.d, ry = osp.w / ssp.w, rx = osp.h / ssp.h;
  auto clampi = [](int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); };

  for (int z = 0; z < os.d; ++z) {
    const double fz = (z + 0.5) * rz - 0.5;
    for (int y = 0; y < os.w; ++y) {
      const double fy = (y + 0.5) * ry - 0.5;
      for (int x = 0; x < os.h; ++x) {
        const double fx = (x + 0.5) * rx - 0.5;
        if (mode == ResampleMode::nearest) {
          const int zi = clampi(int(std::lround(fz)), ss.d);
          const int yi = clampi(int(std::lround(fy)), ss.w);
          const int xi = clampi(int(std::lround(fx)), ss.h);
          out[flat_index(os, z, y, x)] = src[flat_index(ss, zi, yi, xi)];
        } else {
          const int z0 = int(std::floor(fz)), y0 = int(std::floor(fy)), x0 = int(std::floor(fx));
          const double wz = fz - z0, wy = fy - y0, wx = fx - x0;
          double acc = 0.0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const double wgt = (dz ? wz : 1.0 - wz) * (dy ? wy : 1.0 - wy) * (dx ? wx : 1.0 - wx);
                if (wgt == 0.0) continue;
                acc += wgt * double(src[flat_index(ss, clampi(z0 + dz, ss.d), clampi(y0 + dy, ss.w),
                                                   clampi(x0 + dx, ss.h))]);
              }
          out[flat_index(os, z, y, x)] = T(acc);
        }
      }
    }
  }
  return out;
}

inline Shape3 resampled_shape(Shape3 s, Spacing3 in, Spacing3 target) {
  auto dim = [](int n, double sp, double tsp) {
    return std::max(1, int(std::lround(double(n) * sp / tsp)));
  };
  return {dim(s.d, in.d, target.d), dim(s.w, in.w, target.w), dim(s.h, in.h, target.h)};
}

}  // namespace detail

inline Volume resample(const Volume& vol, Spacing3 target, ResampleMode mode) {
  if (!target.positive()) throw InvalidArgument("resample: target spacing entries must be > 0");
  Volume out(detail::resampled_shape(vol.shape, vol.spacing, target), target);
  out.voxels = detail::resample_grid(vol.voxels, vol.shape, vol.spacing, out.shape, target, mode);
  return out;
}

/// Label resampling is always nearest-neighbor.
inline LabelVolume resample(const LabelVolume& lab, Spacing3 target) {
  if (!target.positive()) throw InvalidArgument("resample: target spacing entries must be > 0");
  LabelVolume out(detail::resampled_shape(lab.shape, lab.spacing, target), target, lab.num_classes);
  out.classes =
      detail::resample_grid(lab.classes, lab.shape, lab.spacing, out.shape, target, ResampleMode::nearest);
  return out;
}

/// Nearest-neighbor resample of labels onto an explicit target grid. Used to
/// map predictions back to a volume's native grid.
inline LabelVolume resample_labels_to_grid(const LabelVolume& lab, Shape3 out_shape,
                                           Spacing3 out_spacing) {
  LabelVolume out(out_shape, out_spacing, lab.num_classes);
  out.classes = detail::resample_grid(lab.classes, lab.shape, lab.spacing, out_shape, out_spacing,
                                      ResampleMode::nearest);
  return out;
}

// ---- intensity normalization ------------------------------------------------

/// Percentile over the full value set, linear interpolation between order
/// statistics (rank = pct/100 * (n-1)).
inline double percentile_sorted(const std::vector<float>& sorted, double pct) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double rank = pct / 100.0 * double(n - 1);
  const std::size_t i0 = std::size_t(std::floor(rank));
  if (i0 + 1 >= n) return sorted[n - 1];
  const double frac = rank - double(i0);
  return double(sorted[i0]) + (double(sorted[i0 + 1]) - double(sorted[i0])) * frac;
}

/// Clip to [lo_pct, hi_pct] percentiles of the input, then z-score over the
/// clipped volume. A zero-variance input maps to all zeros.
inline Volume normalize_intensity(const Volume& vol, double clip_lo_pct = 0.5,
                                  double clip_hi_pct = 99.5) {
  if (!(0.0 <= clip_lo_pct && clip_lo_pct < clip_hi_pct && clip_hi_pct <= 100.0))
    throw InvalidArgument("normalize_intensity: need 0 <= clip_lo_pct < clip_hi_pct <= 100");

  std::vector<float> sorted = vol.voxels;
  std::sort(sorted.begin(), sorted.end());
  const float lo = float(percentile_sorted(sorted, clip_lo_pct));
  const float hi = float(percentile_sorted(sorted, clip_hi_pct));

  Volume out(vol.shape, vol.spacing);
  double sum = 0.0;
  for (std::size_t i = 0; i < vol.voxels.size(); ++i) {
    out.voxels[i] = std::clamp(vol.voxels[i], lo, hi);
    sum += out.voxels[i];
  }
  const double mean = sum / double(out.voxels.size());
  double ss = 0.0;
  for (float f : out.voxels) ss += (double(f) - mean) * (double(f) - mean);
  const double var = ss / double(out.voxels.size());
  if (var == 0.0) {
    std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
    return out;
  }
  const double inv_std = 1.0 / std::sqrt(var);
  for (float& f : out.voxels) f = float((double(f) - mean) * inv_std);
  return out;
}

// ---- patch extraction -------------------------------------------------------

namespace detail {

template <class T>
inline std::vector<T> extract_grid(const std::vector<T>& src, Shape3 ss, const PatchSpec& spec,
                                   T pad_value) {
  if (spec.size.d < 1 || spec.size.w < 1 || spec.size.h < 1)
    throw InvalidArgument("extract_patch: size entries must be >= 1");
  std::vector<T> out(spec.size.vox(), pad_value);
  const auto [oz, oy, ox] = spec.origin;
  const int z0 = std::max(0, -oz), z1 = std::min(spec.size.d, ss.d - oz);
  const int y0 = std::max(0, -oy), y1 = std::min(spec.size.w, ss.w - oy);
  const int x0 = std::max(0, -ox), x1 = std::min(spec.size.h, ss.h - ox);
  for (int z = z0; z < z1; ++z)
    for (int y = y0; y < y1; ++y) {
      if (x1 <= x0) break;
      const T* s = &src[flat_index(ss, z + oz, y + oy, x0 + ox)];
      T* d = &out[flat_index(spec.size, z, y, x0)];
      std::copy(s, s + (x1 - x0), d);
    }
  return out;
}

template <class T>
inline void paste_grid(std::vector<T>& dst, Shape3 ds, const PatchSpec& spec,
                       const std::vector<T>& patch) {
  const auto [oz, oy, ox] = spec.origin;
  const int z0 = std::max(0, -oz), z1 = std::min(spec.size.d, ds.d - oz);
  const int y0 = std::max(0, -oy), y1 = std::min(spec.size.w, ds.w - oy);
  const int x0 = std::max(0, -ox), x1 = std::min(spec.size.h, ds.h - ox);
  for (int z = z0; z < z1; ++z)
    for (int y = y0; y < y1; ++y) {
      if (x1 <= x0) break;
      const T* s = &patch[flat_index(spec.size, z, y, x0)];
      T* d = &dst[flat_index(ds, z + oz, y + oy, x0 + ox)];
      std::copy(s, s + (x1 - x0), d);
    }
}

}  // namespace detail

inline Volume extract_patch(const Volume& vol, const PatchSpec& spec, float pad_value = 0.0f) {
  Volume out(spec.size, vol.spacing);
  out.voxels = detail::extract_grid(vol.voxels, vol.shape, spec, pad_value);
  return out;
}

inline LabelVolume extract_patch(const LabelVolume& lab, const PatchSpec& spec,
                                 std::uint8_t pad_class = 0) {
  LabelVolume out(spec.size, lab.spacing, lab.num_classes);
  out.classes = detail::extract_grid(lab.classes, lab.shape, spec, pad_class);
  return out;
}

/// Writes a patch's in-bounds voxels back into the volume (inverse of
/// extract_patch on the overlapping region).
inline void paste_patch(Volume& vol, const PatchSpec& spec, const Volume& patch) {
  detail::paste_grid(vol.voxels, vol.shape, spec, patch.voxels);
}

// ---- file format --------------------------------------------------------------
//
// A volume on disk is a pair <stem>.raw + <stem>.json. The header carries
// {shape, spacing, dtype, num_classes?}; the payload is the raw little-endian
// voxel buffer (float32 for images, uint8 for labels), C-order, depth outermost.

namespace detail {

inline std::filesystem::path strip_vol_ext(const std::filesystem::path& p) {
  if (p.extension() == ".json" || p.extension() == ".raw") {
    auto q = p;
    q.replace_extension();
    return q;
  }
  return p;
}

inline nlohmann::json read_header(const std::filesystem::path& stem) {
  const auto hp = std::filesystem::path(stem).replace_filename(stem.filename().string() + ".json");
  std::ifstream in(hp);
  if (!in) throw IoError("cannot open header " + hp.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("unparseable header " + hp.string() + ": " + e.what());
  }
  return j;
}

inline Shape3 header_shape(const nlohmann::json& j) {
  if (!j.contains("shape") || !j["shape"].is_array() || j["shape"].size() != 3)
    throw FormatError("header field 'shape' missing or not a 3-array");
  Shape3 s{j["shape"][0].get<int>(), j["shape"][1].get<int>(), j["shape"][2].get<int>()};
  if (s.d < 1 || s.w < 1 || s.h < 1) throw FormatError("header field 'shape' has entries < 1");
  return s;
}

inline Spacing3 header_spacing(const nlohmann::json& j) {
  if (!j.contains("spacing") || !j["spacing"].is_array() || j["spacing"].size() != 3)
    throw FormatError("header field 'spacing' missing or not a 3-array");
  Spacing3 sp{j["spacing"][0].get<double>(), j["spacing"][1].get<double>(),
              j["spacing"][2].get<double>()};
  if (!sp.positive()) throw FormatError("header field 'spacing' has non-positive entries");
  return sp;
}

inline std::string header_dtype(const nlohmann::json& j) {
  if (!j.contains("dtype") || !j["dtype"].is_string())
    throw FormatError("header field 'dtype' missing or not a string");
  const std::string d = j["dtype"].get<std::string>();
  if (d != "f32" && d != "u8") throw FormatError("header field 'dtype' must be 'f32' or 'u8'");
  return d;
}

inline std::vector<char> read_payload(const std::filesystem::path& stem, std::size_t expect_bytes) {
  const auto rp = std::filesystem::path(stem).replace_filename(stem.filename().string() + ".raw");
  std::ifstream in(rp, std::ios::binary);
  if (!in) throw IoError("cannot open payload " + rp.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() != expect_bytes)
    throw CorruptionError("payload " + rp.string() + " has " + std::to_string(buf.size()) +
                          " bytes, header implies " + std::to_string(expect_bytes));
  return buf;
}

inline void atomic_write(const std::filesystem::path& path, const void* data, std::size_t bytes) {
  const auto tmp = std::filesystem::path(path).replace_filename(path.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), std::streamsize(bytes));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
  atomic_write(path, text.data(), text.size());
}

}  // namespace detail

inline void save_volume(const Volume& vol, const std::filesystem::path& path) {
  const auto stem = detail::strip_vol_ext(path);
  nlohmann::json j;
  j["shape"] = {vol.shape.d, vol.shape.w, vol.shape.h};
  j["spacing"] = {vol.spacing.d, vol.spacing.w, vol.spacing.h};
  j["dtype"] = "f32";
  detail::atomic_write_text(std::filesystem::path(stem).replace_filename(stem.filename().string() + ".json"),
                            j.dump(2) + "\n");
  detail::atomic_write(std::filesystem::path(stem).replace_filename(stem.filename().string() + ".raw"),
                       vol.voxels.data(), vol.voxels.size() * sizeof(float));
}

inline void save_volume(const LabelVolume& lab, const std::filesystem::path& path) {
  const auto stem = detail::strip_vol_ext(path);
  nlohmann::json j;
  j["shape"] = {lab.shape.d, lab.shape.w, lab.shape.h};
  j["spacing"] = {lab.spacing.d, lab.spacing.w, lab.spacing.h};
  j["dtype"] = "u8";
  j["num_classes"] = lab.num_classes;
  detail::atomic_write_text(std::filesystem::path(stem).replace_filename(stem.filename().string() + ".json"),
                            j.dump(2) + "\n");
  detail::atomic_write(std::filesystem::path(stem).replace_filename(stem.filename().string() + ".raw"),
                       lab.classes.data(), lab.classes.size());
}

/// dtype string from a volume header ("f32" or "u8").
inline std::string volume_dtype(const std::filesystem::path& path) {
  return detail::header_dtype(detail::read_header(detail::strip_vol_ext(path)));
}

inline Volume load_volume(const std::filesystem::path& path) {
  const auto stem = detail::strip_vol_ext(path);
  const auto j = detail::read_header(stem);
  const Shape3 s = detail::header_shape(j);
  const Spacing3 sp = detail::header_spacing(j);
  if (detail::header_dtype(j) != "f32")
    throw FormatError("header field 'dtype' is not 'f32' for image volume " + stem.string());
  Volume vol(s, sp);
  const auto buf = detail::read_payload(stem, std::size_t(s.vox()) * sizeof(float));
  std::memcpy(vol.voxels.data(), buf.data(), buf.size());
  return vol;
}

inline LabelVolume load_label_volume(const std::filesystem::path& path) {
  const auto stem = detail::strip_vol_ext(path);
  const auto j = detail::read_header(stem);
  const Shape3 s = detail::header_shape(j);
  const Spacing3 sp = detail::header_spacing(j);
  if (detail::header_dtype(j) != "u8")
    throw FormatError("header field 'dtype' is not 'u8' for label volume " + stem.string());
  if (!j.contains("num_classes") || !j["num_classes"].is_number_integer())
    throw FormatError("header field 'num_classes' missing for label volume " + stem.string());
  LabelVolume lab(s, sp, j["num_classes"].get<int>());
  const auto buf = detail::read_payload(stem, std::size_t(s.vox()));
  std::memcpy(lab.classes.data(), buf.data(), buf.size());
  for (std::uint8_t c : lab.classes)
    if (c >= lab.num_classes)
      throw CorruptionError("label volume " + stem.string() + " contains class id " +
                            std::to_string(int(c)) + " >= num_classes " +
                            std::to_string(lab.num_classes));
  return lab;
}

}  // namespace voxseg
