#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "voxseg/base.hpp"
#include "voxseg/errors.hpp"
#include "voxseg/net.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

enum class TtaMode { none, flips3 };
enum class Accumulation { full_prob, label_only };

struct InferenceConfig {
  Shape3 patch_size{16, 16, 16};
  double overlap = 0.5;                  // in [0, 0.9]
  double gaussian_sigma_scale = 0.125;   // <= 0 selects uniform weights
  TtaMode tta = TtaMode::none;
  Accumulation accumulation = Accumulation::full_prob;
  Spacing3 target_spacing{0, 0, 0};      // non-positive entries: keep native grid
  bool resample_back = true;
  double clip_lo_pct = 0.5, clip_hi_pct = 99.5;
  std::int64_t prob_voxel_budget = 1ll << 29;  // full_prob refuses C*V above this

  bool resamples() const { return target_spacing.positive(); }

  void validate() const {
    if (!(overlap >= 0.0 && overlap <= 0.9))
      throw ConfigError("inference: overlap must be in [0, 0.9]");
    if (patch_size.d < 1 || patch_size.w < 1 || patch_size.h < 1)
      throw ConfigError("inference: patch_size entries must be >= 1");
    if (prob_voxel_budget < 1) throw ConfigError("inference: prob_voxel_budget must be >= 1");
  }
};

/// Tile origins covering the volume: per axis, step = ceil(patch*(1-overlap)),
/// final position clamped so the last patch ends at the boundary. Positions
/// come out in lexicographic order. Requires patch <= shape per axis.
inline std::vector<PatchSpec> tile_positions(Shape3 vol_shape, Shape3 patch, double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0)) throw InvalidArgument("tile_positions: overlap in [0,1)");
  if (patch.d > vol_shape.d || patch.w > vol_shape.w || patch.h > vol_shape.h)
    throw InvalidArgument("tile_positions: patch " + patch.str() + " exceeds volume " +
                          vol_shape.str() + " (pad the volume first)");
  auto axis_positions = [&](int dim, int p) {
    const int step = std::max(1, int(std::ceil(double(p) * (1.0 - overlap))));
    std::vector<int> pos;
    for (int i = 0; i + p < dim; i += step) pos.push_back(i);
    if (pos.empty() || pos.back() != dim - p) pos.push_back(dim - p);
    return pos;
  };
  const auto zs = axis_positions(vol_shape.d, patch.d);
  const auto ys = axis_positions(vol_shape.w, patch.w);
  const auto xs = axis_positions(vol_shape.h, patch.h);
  std::vector<PatchSpec> tiles;
  tiles.reserve(zs.size() * ys.size() * xs.size());
  for (int z : zs)
    for (int y : ys)
      for (int x : xs) tiles.push_back({{z, y, x}, patch});
  return tiles;
}

/// Separable Gaussian importance weights, centered, sigma = sigma_scale *
/// axis length, normalized to max 1 and floor-clamped at 1e-6.
inline std::vector<float> gaussian_weights(Shape3 patch, double sigma_scale) {
  if (!(sigma_scale > 0)) throw InvalidArgument("gaussian_weights: sigma_scale must be > 0");
  auto axis = [&](int n) {
    std::vector<double> w(n);
    const double c = (n - 1) / 2.0, sigma = sigma_scale * n;
    for (int i = 0; i < n; ++i) w[i] = std::exp(-0.5 * ((i - c) / sigma) * ((i - c) / sigma));
    return w;
  };
  const auto wz = axis(patch.d), wy = axis(patch.w), wx = axis(patch.h);
  std::vector<float> out(patch.vox());
  double mx = 0;
  for (int z = 0; z < patch.d; ++z)
    for (int y = 0; y < patch.w; ++y)
      for (int x = 0; x < patch.h; ++x) {
        const double v = wz[z] * wy[y] * wx[x];
        out[flat_index(patch, z, y, x)] = float(v);
        mx = std::max(mx, v);
      }
  for (auto& v : out) v = std::max(1e-6f, float(v / mx));
  return out;
}

template <class T>
inline Field<T> flip_field(const Field<T>& f, int axis) {
  Field<T> out(f.c, f.s);
  for (int c = 0; c < f.c; ++c)
    for (int z = 0; z < f.s.d; ++z)
      for (int y = 0; y < f.s.w; ++y)
        for (int x = 0; x < f.s.h; ++x) {
          const int sz = axis == 0 ? f.s.d - 1 - z : z;
          const int sy = axis == 1 ? f.s.w - 1 - y : y;
          const int sx = axis == 2 ? f.s.h - 1 - x : x;
          out.at(c, z, y, x) = f.at(c, sz, sy, sx);
        }
  return out;
}

/// Averages {identity, flip-axis-0, flip-axis-1, flip-axis-2} predictions
/// (each un-flipped before averaging), renormalized to the probability
/// simplex. The reduced-flip alternative to the full 8-way mirroring.
template <class Predictor>
inline Field<float> tta_predict(Predictor&& predict, const Field<float>& patch, TtaMode mode) {
  Field<float> acc = predict(patch);
  if (mode == TtaMode::none) return acc;
  for (int axis = 0; axis < 3; ++axis) {
    Field<float> p = flip_field(predict(flip_field(patch, axis)), axis);
    for (std::int64_t i = 0; i < acc.size(); ++i) acc.v[i] += p.v[i];
  }
  const std::int64_t n = acc.plane();
  for (std::int64_t i = 0; i < n; ++i) {
    float sum = 0;
    for (int c = 0; c < acc.c; ++c) sum += acc.v[std::size_t(c) * n + i];
    if (sum > 0)
      for (int c = 0; c < acc.c; ++c) acc.v[std::size_t(c) * n + i] /= sum;
  }
  return acc;
}

/// Patch fusion buffers. full_prob keeps per-class probability sums plus a
/// weight field; label_only keeps one label field plus a best-weight field —
/// no per-class storage, so its footprint is independent of C.
struct FusionState {
  Accumulation mode = Accumulation::full_prob;
  Shape3 shape{};
  int num_classes = 0;
  std::vector<float> probs;    // full_prob: C planes
  std::vector<float> weight;   // full_prob: accumulated weights; label_only: best weight
  std::vector<std::uint8_t> labels;  // label_only

  FusionState(Accumulation m, Shape3 s, int classes) : mode(m), shape(s), num_classes(classes) {
    if (mode == Accumulation::full_prob) {
      probs.assign(std::size_t(classes) * s.vox(), 0.0f);
      weight.assign(s.vox(), 0.0f);
    } else {
      labels.assign(s.vox(), 0);
      weight.assign(s.vox(), -1.0f);  // any real weight beats unclaimed
    }
  }

  std::int64_t allocated_bytes() const {
    return std::int64_t(probs.size()) * sizeof(float) + std::int64_t(weight.size()) * sizeof(float) +
           std::int64_t(labels.size());
  }

  /// Tiles must lie fully inside the volume. label_only updates strictly on
  /// greater weight, so with lexicographic patch order ties keep the earlier
  /// patch.
  void add_patch(const PatchSpec& spec, const Field<float>& patch_probs,
                 const std::vector<float>& w) {
    const auto [oz, oy, ox] = spec.origin;
    const Shape3 ps = spec.size;
    if (mode == Accumulation::full_prob) {
      const std::int64_t plane = patch_probs.plane();
      for (int c = 0; c < num_classes; ++c)
        for (int z = 0; z < ps.d; ++z)
          for (int y = 0; y < ps.w; ++y) {
            const float* src = patch_probs.v.data() + std::size_t(c) * plane +
                               flat_index(ps, z, y, 0);
            const float* wr = w.data() + flat_index(ps, z, y, 0);
            float* dst = probs.data() + std::size_t(c) * shape.vox() +
                         flat_index(shape, z + oz, y + oy, ox);
            for (int x = 0; x < ps.h; ++x) dst[x] += wr[x] * src[x];
          }
      for (int z = 0; z < ps.d; ++z)
        for (int y = 0; y < ps.w; ++y) {
          const float* wr = w.data() + flat_index(ps, z, y, 0);
          float* dst = weight.data() + flat_index(shape, z + oz, y + oy, ox);
          for (int x = 0; x < ps.h; ++x) dst[x] += wr[x];
        }
    } else {
      const auto plab = argmax_labels(patch_probs);
      for (int z = 0; z < ps.d; ++z)
        for (int y = 0; y < ps.w; ++y)
          for (int x = 0; x < ps.h; ++x) {
            const float wv = w[flat_index(ps, z, y, x)];
            const std::int64_t di = flat_index(shape, z + oz, y + oy, x + ox);
            if (wv > weight[di]) {
              weight[di] = wv;
              labels[di] = plab[flat_index(ps, z, y, x)];
            }
          }
    }
  }

  std::vector<std::uint8_t> finalize() const {
    if (mode == Accumulation::label_only) return labels;
    std::vector<std::uint8_t> out(shape.vox());
    const std::int64_t n = shape.vox();
    for (std::int64_t i = 0; i < n; ++i) {
      int best = 0;
      float bv = probs[i];
      for (int c = 1; c < num_classes; ++c) {
        const float v = probs[std::size_t(c) * n + i];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out[i] = std::uint8_t(best);
    }
    return out;
  }
};

struct InferenceStats {
  std::int64_t fusion_bytes = 0;
  std::int64_t num_tiles = 0;
  std::int64_t forwards = 0;
};

/// Whole-volume prediction: optional resampling to the working grid,
/// intensity normalization, sliding-window tiling, per-patch prediction with
/// optional flip TTA, weighted fusion, and mapping of the labels back to the
/// native grid. Deterministic: tiles are fused in lexicographic order.
///
/// Predictor: Field<float> patch -> Field<float> softmax probabilities.
template <class Predictor>
inline LabelVolume predict_volume(Predictor&& predict, const Volume& vol,
                                  const InferenceConfig& cfg, InferenceStats* stats = nullptr) {
  cfg.validate();
  Volume work = cfg.resamples() ? resample(vol, cfg.target_spacing, ResampleMode::linear) : vol;
  work = normalize_intensity(work, cfg.clip_lo_pct, cfg.clip_hi_pct);

  // center-pad up to the patch size where needed
  const Shape3 unpadded = work.shape;
  Shape3 padded{std::max(work.shape.d, cfg.patch_size.d), std::max(work.shape.w, cfg.patch_size.w),
                std::max(work.shape.h, cfg.patch_size.h)};
  std::array<int, 3> pad_lo{(padded.d - unpadded.d) / 2, (padded.w - unpadded.w) / 2,
                            (padded.h - unpadded.h) / 2};
  if (!(padded == unpadded)) {
    PatchSpec whole{{-pad_lo[0], -pad_lo[1], -pad_lo[2]}, padded};
    Volume tmp(padded, work.spacing);
    tmp.voxels = detail::extract_grid(work.voxels, work.shape, whole, 0.0f);
    work = std::move(tmp);
  }

  const auto tiles = tile_positions(work.shape, cfg.patch_size, cfg.overlap);
  const std::vector<float> weights = cfg.gaussian_sigma_scale > 0
                                         ? gaussian_weights(cfg.patch_size, cfg.gaussian_sigma_scale)
                                         : std::vector<float>(cfg.patch_size.vox(), 1.0f);

  std::optional<FusionState> fusion;
  std::int64_t forwards = 0;
  for (const auto& spec : tiles) {
    Field<float> x(1, cfg.patch_size);
    x.v = detail::extract_grid(work.voxels, work.shape, spec, 0.0f);
    Field<float> probs = tta_predict(predict, x, cfg.tta);
    forwards += cfg.tta == TtaMode::flips3 ? 4 : 1;
    if (!fusion) {
      if (cfg.accumulation == Accumulation::full_prob &&
          std::int64_t(probs.c) * work.shape.vox() > cfg.prob_voxel_budget)
        throw CapacityError("full_prob fusion needs " +
                            std::to_string(std::int64_t(probs.c) * work.shape.vox()) +
                            " accumulator voxels, over the budget of " +
                            std::to_string(cfg.prob_voxel_budget) + "; use label_only");
      fusion.emplace(cfg.accumulation, work.shape, probs.c);
    }
    fusion->add_patch(spec, probs, weights);
  }

  LabelVolume result(unpadded, work.spacing, fusion->num_classes);
  {
    const auto fused = fusion->finalize();
    PatchSpec crop{{pad_lo[0], pad_lo[1], pad_lo[2]}, unpadded};
    result.classes = detail::extract_grid(fused, work.shape, crop, std::uint8_t(0));
  }
  if (stats) {
    stats->fusion_bytes = fusion->allocated_bytes();
    stats->num_tiles = std::int64_t(tiles.size());
    stats->forwards = forwards;
  }

  if (cfg.resamples() && cfg.resample_back)
    return resample_labels_to_grid(result, vol.shape, vol.spacing);
  return result;
}

/// Adapter making a trained network usable as a predict_volume Predictor.
struct NetPredictor {
  Network* net;
  Field<float> operator()(const Field<float>& patch) const {
    return softmax_channels(net->forward_logits(patch, false).logits);
  }
};

}  // namespace voxseg
