#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "voxseg/base.hpp"
#include "voxseg/errors.hpp"
#include "voxseg/net.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

/// Binary box mask: 1 inside a single axis-aligned box, 0 outside.
struct CutMixMask {
  Shape3 shape{};
  PatchSpec box{};
  std::vector<std::uint8_t> values;

  std::int64_t ones() const {
    std::int64_t n = 0;
    for (auto v : values) n += v;
    return n;
  }
  double fraction() const { return double(ones()) / double(shape.vox()); }
};

/// Samples a target volume fraction uniformly in [r_min, r_max], derives box
/// sides as round(dim * fraction^(1/3)) clamped to [1, dim], and places the
/// box uniformly at random fully inside the volume.
inline CutMixMask make_cutmix_mask(Shape3 shape, double r_min, double r_max, Rng& rng) {
  if (!(0.0 < r_min && r_min <= r_max && r_max < 1.0))
    throw InvalidArgument("cutmix ratio range must satisfy 0 < r_min <= r_max < 1");
  if (1.0 / double(shape.vox()) > r_max)
    throw InvalidArgument("cutmix: shape " + shape.str() + " too small for ratio range (even a 1-voxel box exceeds r_max)");

  const double frac = std::uniform_real_distribution<double>(r_min, r_max)(rng);
  const double side = std::cbrt(frac);
  CutMixMask m;
  m.shape = shape;
  int len[3];
  for (int a = 0; a < 3; ++a)
    len[a] = std::clamp(int(std::lround(side * shape[a])), 1, shape[a]);
  m.box.size = {len[0], len[1], len[2]};
  for (int a = 0; a < 3; ++a)
    m.box.origin[a] = std::uniform_int_distribution<int>(0, shape[a] - len[a])(rng);

  m.values.assign(shape.vox(), 0);
  for (int z = 0; z < len[0]; ++z)
    for (int y = 0; y < len[1]; ++y) {
      auto* row = &m.values[flat_index(shape, z + m.box.origin[0], y + m.box.origin[1],
                                       m.box.origin[2])];
      std::fill(row, row + len[2], std::uint8_t(1));
    }
  return m;
}

/// Elementwise select: mask 1 takes a, mask 0 takes b. Never interpolates, so
/// it is equally valid for images and label maps.
template <class T>
inline std::vector<T> mix(const std::vector<T>& a, const std::vector<T>& b, const CutMixMask& m) {
  if (a.size() != b.size() || std::int64_t(a.size()) != m.shape.vox())
    throw ShapeError("mix: field sizes disagree with mask shape");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = m.values[i] ? a[i] : b[i];
  return out;
}

inline Volume mix(const Volume& a, const Volume& b, const CutMixMask& m) {
  if (!(a.shape == b.shape) || !(a.shape == m.shape)) throw ShapeError("mix: volume shapes disagree");
  Volume out(a.shape, a.spacing);
  out.voxels = mix(a.voxels, b.voxels, m);
  return out;
}

/// Per-voxel argmax pseudo-label of a network's probability output
/// (evaluation mode; the result is a constant target downstream).
inline std::vector<std::uint8_t> pseudo_label(Network& net, const Field<float>& x) {
  return argmax_labels(softmax_channels(net.forward_logits(x, false).logits));
}

}  // namespace voxseg
