#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "voxseg/base.hpp"
#include "voxseg/errors.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

namespace detail {

inline void check_comparable(const LabelVolume& a, const LabelVolume& b) {
  if (!(a.shape == b.shape)) throw ShapeError("metric: volume shapes differ");
  if (!(a.spacing == b.spacing)) throw ShapeError("metric: volume spacings differ");
}

}  // namespace detail

/// Dice similarity 2|P∩G| / (|P|+|G|) of the class_id masks. Both empty: 1,
/// exactly one empty: 0.
inline double dsc(const LabelVolume& pred, const LabelVolume& gt, int class_id) {
  detail::check_comparable(pred, gt);
  std::int64_t np = 0, ng = 0, inter = 0;
  for (std::size_t i = 0; i < pred.classes.size(); ++i) {
    const bool p = pred.classes[i] == class_id, g = gt.classes[i] == class_id;
    np += p;
    ng += g;
    inter += p && g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * double(inter) / double(np + ng);
}

// ---- surface distances -----------------------------------------------------

enum class SurfaceDistanceMode { automatic, brute_force, distance_transform };

namespace detail {

/// Boundary voxels: mask voxels with at least one six-connected neighbor
/// outside the mask (voxels beyond the volume count as outside).
inline std::vector<std::uint8_t> boundary_mask(const std::vector<std::uint8_t>& labels, Shape3 s,
                                               int class_id) {
  std::vector<std::uint8_t> b(labels.size(), 0);
  auto in_mask = [&](int z, int y, int x) {
    if (z < 0 || z >= s.d || y < 0 || y >= s.w || x < 0 || x >= s.h) return false;
    return labels[flat_index(s, z, y, x)] == class_id;
  };
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.w; ++y)
      for (int x = 0; x < s.h; ++x) {
        if (labels[flat_index(s, z, y, x)] != class_id) continue;
        if (!in_mask(z - 1, y, x) || !in_mask(z + 1, y, x) || !in_mask(z, y - 1, x) ||
            !in_mask(z, y + 1, x) || !in_mask(z, y, x - 1) || !in_mask(z, y, x + 1))
          b[flat_index(s, z, y, x)] = 1;
      }
  return b;
}

struct Vox {
  int z, y, x;
};

inline std::vector<Vox> boundary_voxels(const std::vector<std::uint8_t>& b, Shape3 s) {
  std::vector<Vox> out;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.w; ++y)
      for (int x = 0; x < s.h; ++x)
        if (b[flat_index(s, z, y, x)]) out.push_back({z, y, x});
  return out;
}

/// Exact squared-distance lower envelope (Felzenszwalb–Huttenlocher) along
/// one axis with physical sample spacing. Infinite entries never become
/// parabola sources, only queries.
inline void dt1d(std::vector<double>& f, double sp) {
  const double inf = std::numeric_limits<double>::infinity();
  const int n = int(f.size());
  static thread_local std::vector<int> v;
  static thread_local std::vector<double> z, d;
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  d.assign(n, inf);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double xq = q * sp;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s;
    while (true) {
      const double xv = v[k] * sp;
      s = (f[q] + xq * xq - (f[v[k]] + xv * xv)) / (2 * xq - 2 * xv);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (k >= 0) {
    k = 0;
    for (int q = 0; q < n; ++q) {
      const double xq = q * sp;
      while (z[k + 1] < xq) ++k;
      const double dx = xq - v[k] * sp;
      d[q] = dx * dx + f[v[k]];
    }
  }
  std::copy(d.begin(), d.end(), f.begin());
}

/// Squared Euclidean (mm) distance of every voxel center to the nearest set
/// voxel center; separable exact transform.
inline std::vector<double> squared_edt(const std::vector<std::uint8_t>& set, Shape3 s,
                                       Spacing3 sp) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> f(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) f[i] = set[i] ? 0.0 : inf;

  std::vector<double> line;
  line.resize(std::max({s.d, s.w, s.h}));
  // along h (contiguous)
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.w; ++y) {
      line.assign(&f[flat_index(s, z, y, 0)], &f[flat_index(s, z, y, 0)] + s.h);
      dt1d(line, sp.h);
      std::copy(line.begin(), line.begin() + s.h, &f[flat_index(s, z, y, 0)]);
    }
  // along w
  for (int z = 0; z < s.d; ++z)
    for (int x = 0; x < s.h; ++x) {
      line.resize(s.w);
      for (int y = 0; y < s.w; ++y) line[y] = f[flat_index(s, z, y, x)];
      dt1d(line, sp.w);
      for (int y = 0; y < s.w; ++y) f[flat_index(s, z, y, x)] = line[y];
    }
  // along d
  for (int y = 0; y < s.w; ++y)
    for (int x = 0; x < s.h; ++x) {
      line.resize(s.d);
      for (int z = 0; z < s.d; ++z) line[z] = f[flat_index(s, z, y, x)];
      dt1d(line, sp.d);
      for (int z = 0; z < s.d; ++z) f[flat_index(s, z, y, x)] = line[z];
    }
  return f;
}

/// Count of source boundary voxels whose nearest target boundary voxel lies
/// within tol (mm), brute force over voxel pairs. The test oracle.
inline std::int64_t within_tol_brute(const std::vector<Vox>& src, const std::vector<Vox>& dst,
                                     Spacing3 sp, double tol) {
  const double tol2 = tol * tol;
  std::int64_t n = 0;
  for (const auto& a : src) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : dst) {
      const double dz = (a.z - b.z) * sp.d, dy = (a.y - b.y) * sp.w, dx = (a.x - b.x) * sp.h;
      best = std::min(best, dz * dz + dy * dy + dx * dx);
      if (best == 0.0) break;
    }
    n += best <= tol2;
  }
  return n;
}

}  // namespace detail

/// Normalized surface dice: the fraction of boundary voxels of each mask
/// lying within tolerance_mm of the other mask's boundary, symmetrized.
/// Brute-force pairwise distances up to 64^3 voxels, exact separable distance
/// transform above (both measure voxel-center to voxel-center distance).
inline double nsd(const LabelVolume& pred, const LabelVolume& gt, int class_id, double tolerance_mm,
                  SurfaceDistanceMode mode = SurfaceDistanceMode::automatic) {
  detail::check_comparable(pred, gt);
  if (tolerance_mm < 0) throw InvalidArgument("nsd: tolerance_mm must be >= 0");
  const Shape3 s = pred.shape;
  const auto bp = detail::boundary_mask(pred.classes, s, class_id);
  const auto bg = detail::boundary_mask(gt.classes, s, class_id);
  const auto vp = detail::boundary_voxels(bp, s);
  const auto vg = detail::boundary_voxels(bg, s);
  if (vp.empty() && vg.empty()) return 1.0;
  if (vp.empty() || vg.empty()) return 0.0;

  if (mode == SurfaceDistanceMode::automatic)
    mode = s.vox() <= 64 * 64 * 64 ? SurfaceDistanceMode::brute_force
                                   : SurfaceDistanceMode::distance_transform;

  std::int64_t hit_p = 0, hit_g = 0;
  if (mode == SurfaceDistanceMode::brute_force) {
    hit_p = detail::within_tol_brute(vp, vg, pred.spacing, tolerance_mm);
    hit_g = detail::within_tol_brute(vg, vp, pred.spacing, tolerance_mm);
  } else {
    const double tol2 = tolerance_mm * tolerance_mm;
    const auto dg = detail::squared_edt(bg, s, pred.spacing);
    for (const auto& a : vp) hit_p += dg[flat_index(s, a.z, a.y, a.x)] <= tol2;
    const auto dp = detail::squared_edt(bp, s, pred.spacing);
    for (const auto& a : vg) hit_g += dp[flat_index(s, a.z, a.y, a.x)] <= tol2;
  }
  return double(hit_p + hit_g) / double(vp.size() + vg.size());
}

// ---- dataset evaluation -------------------------------------------------------

struct CaseResult {
  std::string case_id;
  std::vector<double> dsc_per_class;  // classes 1..C-1
  double dsc_mean = 0;
  std::vector<double> nsd_per_class;  // empty when NSD not requested
  double nsd_mean = 0;
};

struct EvalReport {
  std::vector<std::string> class_names;
  std::vector<CaseResult> cases;
  CaseResult aggregate;  // column means over cases
  std::vector<std::string> missing;  // case ids without a prediction
  bool with_nsd = false;

  std::string to_csv() const;
};

inline std::string EvalReport::to_csv() const {
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  std::string csv = "case,mean";
  for (const auto& n : class_names) csv += "," + n;
  if (with_nsd) {
    csv += ",nsd_mean";
    for (const auto& n : class_names) csv += ",nsd_" + n;
  }
  csv += "\n";
  auto row = [&](const std::string& id, const CaseResult& r) {
    csv += id + "," + fmt(r.dsc_mean);
    for (double v : r.dsc_per_class) csv += "," + fmt(v);
    if (with_nsd) {
      csv += "," + fmt(r.nsd_mean);
      for (double v : r.nsd_per_class) csv += "," + fmt(v);
    }
    csv += "\n";
  };
  for (const auto& r : cases) row(r.case_id, r);
  row("mean", aggregate);
  for (const auto& m : missing) csv += "# missing_prediction," + m + "\n";
  return csv;
}

/// Per-case DSC (and NSD when nsd_tolerance_mm >= 0) over matching case stems
/// in two directories of label volumes; cases without a prediction land in
/// the report's errors section and are excluded from the aggregate row.
inline EvalReport evaluate_dataset(const std::filesystem::path& pred_dir,
                                   const std::filesystem::path& gt_dir,
                                   std::vector<std::string> class_names = {},
                                   double nsd_tolerance_mm = -1.0) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(gt_dir)) throw IoError("evaluate: gt dir missing: " + gt_dir.string());
  if (!fs::is_directory(pred_dir)) throw IoError("evaluate: pred dir missing: " + pred_dir.string());

  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(gt_dir))
    if (e.path().extension() == ".json") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());

  EvalReport rep;
  rep.with_nsd = nsd_tolerance_mm >= 0;
  int num_classes = 0;
  for (const auto& id : ids) {
    const auto gt = load_label_volume(gt_dir / id);
    num_classes = gt.num_classes;
    if (!fs::exists(pred_dir / (id + ".json"))) {
      rep.missing.push_back(id);
      continue;
    }
    const auto pred = load_label_volume(pred_dir / id);
    CaseResult r;
    r.case_id = id;
    for (int cls = 1; cls < gt.num_classes; ++cls) {
      r.dsc_per_class.push_back(dsc(pred, gt, cls));
      r.dsc_mean += r.dsc_per_class.back();
      if (rep.with_nsd) {
        r.nsd_per_class.push_back(nsd(pred, gt, cls, nsd_tolerance_mm));
        r.nsd_mean += r.nsd_per_class.back();
      }
    }
    r.dsc_mean /= double(gt.num_classes - 1);
    if (rep.with_nsd) r.nsd_mean /= double(gt.num_classes - 1);
    rep.cases.push_back(std::move(r));
  }
  if (ids.empty()) throw IoError("evaluate: no label volumes in " + gt_dir.string());

  rep.class_names = std::move(class_names);
  while (int(rep.class_names.size()) < num_classes - 1)
    rep.class_names.push_back("class_" + std::to_string(int(rep.class_names.size()) + 1));
  rep.class_names.resize(num_classes - 1);

  rep.aggregate.case_id = "mean";
  rep.aggregate.dsc_per_class.assign(num_classes - 1, 0.0);
  rep.aggregate.nsd_per_class.assign(rep.with_nsd ? num_classes - 1 : 0, 0.0);
  for (const auto& r : rep.cases) {
    rep.aggregate.dsc_mean += r.dsc_mean / double(rep.cases.size());
    for (std::size_t c = 0; c < r.dsc_per_class.size(); ++c)
      rep.aggregate.dsc_per_class[c] += r.dsc_per_class[c] / double(rep.cases.size());
    if (rep.with_nsd) {
      rep.aggregate.nsd_mean += r.nsd_mean / double(rep.cases.size());
      for (std::size_t c = 0; c < r.nsd_per_class.size(); ++c)
        rep.aggregate.nsd_per_class[c] += r.nsd_per_class[c] / double(rep.cases.size());
    }
  }
  return rep;
}

}  // namespace voxseg
