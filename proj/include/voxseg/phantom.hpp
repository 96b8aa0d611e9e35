#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "voxseg/base.hpp"
#include "voxseg/errors.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

/// Synthetic phantom generation parameters. Each foreground class is one
/// axis-aligned ellipsoid with semi-axes drawn in [8%, 30%] of the matching
/// dimension; the image is the class intensity mean plus Gaussian noise.
struct PhantomConfig {
  std::uint64_t seed = 0;
  Shape3 shape{64, 64, 64};
  Spacing3 spacing{1.0, 1.0, 1.0};
  int num_classes = 4;
  double noise_sigma = 0.0;
  int min_voxels_per_class = 1;
  std::vector<double> intensity_means;  // size num_classes, background first

  void validate() const {
    if (num_classes < 2) throw ConfigError("phantom num_classes must be >= 2");
    if (noise_sigma < 0) throw ConfigError("phantom noise_sigma must be >= 0");
    if (min_voxels_per_class < 1) throw ConfigError("phantom min_voxels_per_class must be >= 1");
    if (int(intensity_means.size()) != num_classes)
      throw ConfigError("phantom intensity_means must have num_classes entries");
    for (std::size_t i = 0; i < intensity_means.size(); ++i)
      for (std::size_t j = i + 1; j < intensity_means.size(); ++j)
        if (intensity_means[i] == intensity_means[j])
          throw ConfigError("phantom intensity_means must be pairwise distinct");
    if (std::int64_t(min_voxels_per_class) * (num_classes - 1) >= shape.vox())
      throw ConfigError("phantom min_voxels_per_class * (num_classes-1) must be < total voxels");
  }
};

namespace detail {

struct Ellipsoid {
  double cz, cy, cx;
  double az, ay, ax;
};

inline void paint_ellipsoid(LabelVolume& lab, const Ellipsoid& e, std::uint8_t cls) {
  const int z0 = std::max(0, int(std::floor(e.cz - e.az))),
            z1 = std::min(lab.shape.d - 1, int(std::ceil(e.cz + e.az)));
  const int y0 = std::max(0, int(std::floor(e.cy - e.ay))),
            y1 = std::min(lab.shape.w - 1, int(std::ceil(e.cy + e.ay)));
  const int x0 = std::max(0, int(std::floor(e.cx - e.ax))),
            x1 = std::min(lab.shape.h - 1, int(std::ceil(e.cx + e.ax)));
  for (int z = z0; z <= z1; ++z) {
    const double qz = (z - e.cz) / e.az;
    for (int y = y0; y <= y1; ++y) {
      const double qy = (y - e.cy) / e.ay;
      for (int x = x0; x <= x1; ++x) {
        const double qx = (x - e.cx) / e.ax;
        if (qz * qz + qy * qy + qx * qx <= 1.0) lab.at(z, y, x) = cls;
      }
    }
  }
}

}  // namespace detail

/// Deterministic in (cfg.seed, case_seed). Later classes overwrite earlier
/// ones where ellipsoids overlap; placement retries until every foreground
/// class keeps at least min_voxels_per_class voxels.
inline std::pair<Volume, LabelVolume> generate_case(const PhantomConfig& cfg,
                                                    std::uint64_t case_seed) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, case_seed));

  LabelVolume lab(cfg.shape, cfg.spacing, cfg.num_classes);
  constexpr int kMaxRetries = 100;
  bool placed = false;
  for (int attempt = 0; attempt < kMaxRetries && !placed; ++attempt) {
    std::fill(lab.classes.begin(), lab.classes.end(), 0);
    for (int cls = 1; cls < cfg.num_classes; ++cls) {
      detail::Ellipsoid e{};
      auto axis = [&](int dim) {
        return std::max(1.0, std::uniform_real_distribution<double>(0.08, 0.30)(rng) * dim);
      };
      e.az = axis(cfg.shape.d);
      e.ay = axis(cfg.shape.w);
      e.ax = axis(cfg.shape.h);
      auto center = [&](double a, int dim) {
        const double lo = a, hi = double(dim - 1) - a;
        if (lo >= hi) return double(dim - 1) / 2.0;
        return std::uniform_real_distribution<double>(lo, hi)(rng);
      };
      e.cz = center(e.az, cfg.shape.d);
      e.cy = center(e.ay, cfg.shape.w);
      e.cx = center(e.ax, cfg.shape.h);
      detail::paint_ellipsoid(lab, e, std::uint8_t(cls));
    }
    std::vector<std::int64_t> counts(cfg.num_classes, 0);
    for (std::uint8_t c : lab.classes) ++counts[c];
    placed = true;
    for (int cls = 1; cls < cfg.num_classes; ++cls)
      if (counts[cls] < cfg.min_voxels_per_class) placed = false;
  }
  if (!placed)
    throw GenerationError("phantom placement failed after " + std::to_string(kMaxRetries) +
                          " retries; config infeasible for shape " + cfg.shape.str());

  Volume img(cfg.shape, cfg.spacing);
  if (cfg.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (std::size_t i = 0; i < img.voxels.size(); ++i)
      img.voxels[i] = float(cfg.intensity_means[lab.classes[i]] + noise(rng));
  } else {
    for (std::size_t i = 0; i < img.voxels.size(); ++i)
      img.voxels[i] = float(cfg.intensity_means[lab.classes[i]]);
  }
  return {std::move(img), std::move(lab)};
}

/// Labeled/unlabeled split of one generated dataset. Paths are stems relative
/// to the manifest's directory; each stem names a .raw/.json volume pair.
struct DatasetManifest {
  std::uint64_t seed = 0;
  int n_labeled = 0;
  int n_unlabeled = 0;
  int num_classes = 2;
  std::vector<std::pair<std::string, std::string>> labeled_cases;  // (image, label)
  std::vector<std::string> unlabeled_cases;
  std::filesystem::path root;  // directory the relative paths resolve against
};

namespace detail {

inline std::string case_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04d", id);
  return buf;
}

}  // namespace detail

/// Writes n_labeled image/label pairs plus n_unlabeled images. Labels of
/// unlabeled cases are generated too but withheld under hidden/ — they exist
/// for post-hoc pseudo-label evaluation and are never read by the trainer.
inline DatasetManifest generate_dataset(const PhantomConfig& cfg, int n_labeled, int n_unlabeled,
                                        const std::filesystem::path& out_dir) {
  cfg.validate();
  if (n_labeled < 1) throw ConfigError("generate_dataset: n_labeled must be >= 1");
  if (n_unlabeled < 0) throw ConfigError("generate_dataset: n_unlabeled must be >= 0");

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "labels", ec);
  fs::create_directories(out_dir / "unlabeled", ec);
  fs::create_directories(out_dir / "hidden", ec);
  if (!fs::is_directory(out_dir)) throw IoError("cannot create dataset dir " + out_dir.string());

  DatasetManifest man;
  man.seed = cfg.seed;
  man.n_labeled = n_labeled;
  man.n_unlabeled = n_unlabeled;
  man.num_classes = cfg.num_classes;
  man.root = out_dir;

  for (int i = 0; i < n_labeled; ++i) {
    const auto name = detail::case_name(i);
    auto [img, lab] = generate_case(cfg, std::uint64_t(i));
    save_volume(img, out_dir / "images" / name);
    save_volume(lab, out_dir / "labels" / name);
    man.labeled_cases.emplace_back("images/" + name, "labels/" + name);
  }
  for (int i = 0; i < n_unlabeled; ++i) {
    const int id = n_labeled + i;
    const auto name = detail::case_name(id);
    auto [img, lab] = generate_case(cfg, std::uint64_t(id));
    save_volume(img, out_dir / "unlabeled" / name);
    save_volume(lab, out_dir / "hidden" / name);
    man.unlabeled_cases.push_back("unlabeled/" + name);
  }

  nlohmann::json j;
  j["seed"] = man.seed;
  j["n_labeled"] = man.n_labeled;
  j["n_unlabeled"] = man.n_unlabeled;
  j["num_classes"] = man.num_classes;
  auto& jl = j["labeled"] = nlohmann::json::array();
  for (const auto& [img, lab] : man.labeled_cases) jl.push_back({{"image", img}, {"label", lab}});
  auto& ju = j["unlabeled"] = nlohmann::json::array();
  for (const auto& u : man.unlabeled_cases) ju.push_back(u);
  detail::atomic_write_text(out_dir / "manifest.json", j.dump(2) + "\n");
  return man;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  fs::path mp = path;
  if (fs::is_directory(mp)) mp /= "manifest.json";
  std::ifstream in(mp);
  if (!in) throw IoError("cannot open manifest " + mp.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("unparseable manifest " + mp.string() + ": " + e.what());
  }
  DatasetManifest man;
  man.root = mp.parent_path();
  try {
    man.seed = j.at("seed").get<std::uint64_t>();
    man.n_labeled = j.at("n_labeled").get<int>();
    man.n_unlabeled = j.at("n_unlabeled").get<int>();
    man.num_classes = j.at("num_classes").get<int>();
    for (const auto& e : j.at("labeled"))
      man.labeled_cases.emplace_back(e.at("image").get<std::string>(),
                                     e.at("label").get<std::string>());
    for (const auto& e : j.at("unlabeled")) man.unlabeled_cases.push_back(e.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + mp.string() + " missing field: " + e.what());
  }
  if (int(man.labeled_cases.size()) != man.n_labeled ||
      int(man.unlabeled_cases.size()) != man.n_unlabeled)
    throw CorruptionError("manifest " + mp.string() + " case counts disagree with n_labeled/n_unlabeled");
  return man;
}

}  // namespace voxseg
