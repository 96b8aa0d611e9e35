#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "voxseg/base.hpp"
#include "voxseg/cutmix.hpp"
#include "voxseg/errors.hpp"
#include "voxseg/losses.hpp"
#include "voxseg/net.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

/// lr = base_lr * 0.5^floor(epoch / halving_period). Halving by ldexp keeps
/// the values exact.
inline double lr_schedule(int epoch, double base_lr, int halving_period) {
  if (epoch < 0) throw InvalidArgument("lr_schedule: epoch must be >= 0");
  if (halving_period < 1) throw InvalidArgument("lr_schedule: halving period must be >= 1");
  return base_lr * std::ldexp(1.0, -(epoch / halving_period));
}

/// Patch centered on a uniformly chosen voxel of target_class, clamped fully
/// in-bounds (the chosen voxel always stays inside). Falls back to a uniform
/// random crop when the class is absent.
inline PatchSpec sample_patch_balanced(const std::vector<std::uint8_t>& labels, Shape3 shape,
                                       int target_class, Shape3 patch, Rng& rng) {
  std::vector<std::int64_t> hits;
  for (std::int64_t i = 0; i < std::int64_t(labels.size()); ++i)
    if (labels[i] == target_class) hits.push_back(i);

  PatchSpec spec;
  spec.size = patch;
  auto clamp_origin = [](int center, int psize, int dim) {
    if (dim < psize) return (dim - psize) / 2;  // padded patch, centered
    return std::clamp(center - psize / 2, 0, dim - psize);
  };
  if (hits.empty()) {
    for (int a = 0; a < 3; ++a)
      spec.origin[a] = shape[a] >= patch[a]
                           ? std::uniform_int_distribution<int>(0, shape[a] - patch[a])(rng)
                           : (shape[a] - patch[a]) / 2;
    return spec;
  }
  const std::int64_t pick =
      hits[std::uniform_int_distribution<std::int64_t>(0, std::int64_t(hits.size()) - 1)(rng)];
  const int z = int(pick / (std::int64_t(shape.w) * shape.h));
  const int y = int(pick / shape.h % shape.w);
  const int x = int(pick % shape.h);
  spec.origin = {clamp_origin(z, patch.d, shape.d), clamp_origin(y, patch.w, shape.w),
                 clamp_origin(x, patch.h, shape.h)};
  return spec;
}

enum class TrainMode { supervised, ssl };

struct TrainConfig {
  NetworkSpec net = NetworkSpec::toy_default();
  TrainMode mode = TrainMode::ssl;
  Shape3 patch_size{16, 16, 16};
  int batch_size = 1;
  int total_epochs = 60;
  int iterations_per_epoch = 50;
  double base_lr = 0.01;
  double momentum = 0.99;
  bool nesterov = true;
  int lr_halving_period = 200;
  double consistency_weight = 1.0;
  int consistency_ramp_epochs = -1;  // -1: 10% of total_epochs; 0: constant weight
  LossKind loss = LossKind::rs;
  LossParams<float> loss_params{};
  double cutmix_r_min = 0.25, cutmix_r_max = 0.75;
  int unlabeled_pairs_per_iter = 1;
  std::uint64_t seed = 0;
  int checkpoint_period = 0;  // epochs; 0 = final checkpoint only
  int crop_pseudo_warmup_epochs = 20;
  int crop_pseudo_refresh_epochs = 50;
  bool literal_eq3 = false;  // reproduce the printed pseudo-label assignment
  bool deploy_net_b = false;
  double clip_lo_pct = 0.5, clip_hi_pct = 99.5;

  int ramp_epochs() const {
    return consistency_ramp_epochs < 0 ? (total_epochs + 9) / 10 : consistency_ramp_epochs;
  }
  double lambda_at(int epoch) const {
    const int r = ramp_epochs();
    if (r == 0) return consistency_weight;
    return consistency_weight * std::min(1.0, double(epoch) / double(r));
  }

  void validate() const {
    net.validate();
    try {
      net.check_patch_shape(patch_size);
    } catch (const ShapeError& e) {
      throw ConfigError(std::string("train: ") + e.what());
    }
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (total_epochs < 1) throw ConfigError("train: total_epochs must be >= 1");
    if (iterations_per_epoch < 1) throw ConfigError("train: iterations_per_epoch must be >= 1");
    if (!(base_lr > 0)) throw ConfigError("train: base_lr must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train: momentum must be in [0, 1)");
    if (lr_halving_period < 1) throw ConfigError("train: lr_halving_period must be >= 1");
    if (consistency_weight < 0) throw ConfigError("train: consistency_weight must be >= 0");
    if (!(0 < cutmix_r_min && cutmix_r_min <= cutmix_r_max && cutmix_r_max < 1))
      throw ConfigError("train: cutmix ratio range must satisfy 0 < r_min <= r_max < 1");
    if (unlabeled_pairs_per_iter < 0)
      throw ConfigError("train: unlabeled_pairs_per_iter must be >= 0");
    if (loss != LossKind::rs && loss != LossKind::dice_ce)
      throw ConfigError("train: loss must be rs or dice_ce");
  }
};

namespace detail {

// Weighted multi-output loss (main head plus any deep-supervision heads,
// weighted 2^-level and normalized). Returns the weighted value; when
// grad_scale > 0 the scaled gradients are pushed through the network.
inline double loss_forward_backward(Network& net, const Field<float>& x,
                                    const std::vector<std::uint8_t>& labels, LossKind kind,
                                    const LossParams<float>& params, float grad_scale) {
  const bool train = grad_scale > 0;
  auto out = net.forward_logits(x, train);

  std::vector<double> weights{1.0};
  double wsum = 1.0;
  for (std::size_t a = 0; a < out.aux_logits.size(); ++a) {
    weights.push_back(std::ldexp(1.0, -int(a + 1)));
    wsum += weights.back();
  }
  for (auto& w : weights) w /= wsum;

  Field<float> mu = softmax_channels(out.logits);
  Field<float> gmu(mu.c, mu.s);
  LossInput<float> in{&mu, labels.data(), params};
  double total = weights[0] * double(train ? loss_value_grad(kind, in, gmu, float(weights[0]) * grad_scale)
                                           : loss_value(kind, in));
  std::vector<Field<float>> gaux;
  for (std::size_t a = 0; a < out.aux_logits.size(); ++a) {
    Field<float> amu = softmax_channels(out.aux_logits[a]);
    // nearest-voxel label subsampling onto the aux grid
    std::vector<std::uint8_t> alab(amu.plane());
    const int fz = x.s.d / amu.s.d, fy = x.s.w / amu.s.w, fx = x.s.h / amu.s.h;
    for (int z = 0; z < amu.s.d; ++z)
      for (int y = 0; y < amu.s.w; ++y)
        for (int xx = 0; xx < amu.s.h; ++xx)
          alab[flat_index(amu.s, z, y, xx)] = labels[flat_index(
              x.s, std::min(x.s.d - 1, z * fz + fz / 2), std::min(x.s.w - 1, y * fy + fy / 2),
              std::min(x.s.h - 1, xx * fx + fx / 2))];
    LossInput<float> ain{&amu, alab.data(), params};
    if (train) {
      Field<float> agmu(amu.c, amu.s);
      total += weights[a + 1] * double(loss_value_grad(kind, ain, agmu, float(weights[a + 1]) * grad_scale));
      gaux.push_back(softmax_backward(amu, agmu));
    } else {
      total += weights[a + 1] * double(loss_value(kind, ain));
    }
  }
  if (train) net.backward(softmax_backward(mu, gmu), gaux);
  return total;
}

/// Single full-volume evaluation forward (padded to stride divisibility),
/// then per-voxel argmax. Used for cropping pseudo-labels and quick
/// validation, not for final inference.
inline std::vector<std::uint8_t> full_volume_argmax(Network& net, const Volume& vol) {
  const int p = net.spec.stride_product();
  Shape3 padded{(vol.shape.d + p - 1) / p * p, (vol.shape.w + p - 1) / p * p,
                (vol.shape.h + p - 1) / p * p};
  Field<float> x(1, padded);
  for (int z = 0; z < vol.shape.d; ++z)
    for (int y = 0; y < vol.shape.w; ++y) {
      const float* src = &vol.voxels[flat_index(vol.shape, z, y, 0)];
      std::copy(src, src + vol.shape.h, &x.v[flat_index(padded, z, y, 0)]);
    }
  auto lab = argmax_labels(softmax_channels(net.forward_logits(x, false).logits));
  if (padded == vol.shape) return lab;
  std::vector<std::uint8_t> out(vol.shape.vox());
  for (int z = 0; z < vol.shape.d; ++z)
    for (int y = 0; y < vol.shape.w; ++y) {
      const auto* src = &lab[flat_index(padded, z, y, 0)];
      std::copy(src, src + vol.shape.h, &out[flat_index(vol.shape, z, y, 0)]);
    }
  return out;
}

}  // namespace detail

/// theta_A, theta_B, and per-network SGD velocity buffers. Both networks share
/// one spec; their init seeds always differ.
struct DualTrainer {
  TrainConfig cfg;
  Network net_a, net_b;
  std::vector<std::vector<float>> vel_a, vel_b;
  Rng rng_labeled, rng_unlabeled, rng_mask;
  int epoch = 0;

  explicit DualTrainer(const TrainConfig& c)
      : cfg(c),
        net_a(build_network(c.net, mix_seed(c.seed, 10))),
        net_b(build_network(c.net, mix_seed(c.seed, 11))),
        rng_labeled(mix_seed(c.seed, 1)),
        rng_unlabeled(mix_seed(c.seed, 2)),
        rng_mask(mix_seed(c.seed, 3)) {
    cfg.validate();
    auto init_vel = [](Network& n, std::vector<std::vector<float>>& v) {
      n.for_each_param([&](ParamTensor<float>& p) { v.emplace_back(p.w.size(), 0.0f); });
    };
    init_vel(net_a, vel_a);
    init_vel(net_b, vel_b);
  }

  void zero_grads() {
    net_a.zero_grad();
    net_b.zero_grad();
  }

  /// Both networks learn from the same labeled patch independently; gradients
  /// accumulate, apply_updates() performs the actual parameter step.
  std::pair<double, double> supervised_step(const Field<float>& x,
                                            const std::vector<std::uint8_t>& labels,
                                            float grad_scale = 1.0f) {
    const double la =
        detail::loss_forward_backward(net_a, x, labels, cfg.loss, cfg.loss_params, grad_scale);
    const double lb =
        detail::loss_forward_backward(net_b, x, labels, cfg.loss, cfg.loss_params, grad_scale);
    return {la, lb};
  }

  /// Cross pseudo supervision on a CutMix-mixed pair of unlabeled patches:
  /// each network's prediction on the mixed input is penalized against the
  /// other network's mixed pseudo-labels. One shared mask drives the image
  /// and both pseudo-label mixes. Pseudo-labels are extracted in evaluation
  /// mode and treated as constants.
  std::pair<double, double> consistency_step(const Field<float>& x_ui, const Field<float>& x_uj,
                                             float lambda) {
    auto y_a_ui = pseudo_label(net_a, x_ui);
    auto y_a_uj = pseudo_label(net_a, x_uj);
    auto y_b_ui = cfg.literal_eq3 ? pseudo_label(net_a, x_ui) : pseudo_label(net_b, x_ui);
    auto y_b_uj = pseudo_label(net_b, x_uj);

    CutMixMask h = make_cutmix_mask(x_ui.s, cfg.cutmix_r_min, cfg.cutmix_r_max, rng_mask);
    Field<float> x_uij(1, x_ui.s);
    x_uij.v = mix(x_ui.v, x_uj.v, h);
    const auto y_a_uij = mix(y_a_ui, y_a_uj, h);
    const auto y_b_uij = mix(y_b_ui, y_b_uj, h);

    const double ca = detail::loss_forward_backward(net_a, x_uij, y_b_uij, cfg.loss,
                                                    cfg.loss_params, lambda);
    const double cb = detail::loss_forward_backward(net_b, x_uij, y_a_uij, cfg.loss,
                                                    cfg.loss_params, lambda);
    return {ca, cb};
  }

  /// SGD with (optionally nesterov) momentum over the accumulated gradients.
  void apply_updates(double lr) {
    auto apply = [&](Network& n, std::vector<std::vector<float>>& vel) {
      std::size_t i = 0;
      n.for_each_param([&](ParamTensor<float>& p) {
        auto& v = vel[i++];
        const float m = float(cfg.momentum), step = float(lr);
        for (std::size_t k = 0; k < p.w.size(); ++k) {
          v[k] = m * v[k] + p.g[k];
          p.w[k] -= step * (cfg.nesterov ? p.g[k] + m * v[k] : v[k]);
        }
      });
    };
    apply(net_a, vel_a);
    apply(net_b, vel_b);
  }
};

struct EpochLog {
  int epoch = 0;
  double lr = 0, sup_a = 0, sup_b = 0, cons_a = 0, cons_b = 0;
  double val_dsc = std::nan("");
};

struct TrainResult {
  std::filesystem::path csv_path;
  std::filesystem::path ckpt_a, ckpt_b;  // final checkpoints
  std::vector<EpochLog> log;
};

namespace detail {

struct LoadedCase {
  Volume image;
  LabelVolume label;  // empty classes for unlabeled
};

inline std::string format_csv(const std::vector<EpochLog>& log) {
  std::string csv = "epoch,lr,sup_a,sup_b,cons_a,cons_b,val_dsc\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g,%.10g", e.epoch, e.lr, e.sup_a,
                  e.sup_b, e.cons_a, e.cons_b);
    csv += buf;
    if (std::isnan(e.val_dsc))
      csv += ",\n";
    else {
      std::snprintf(buf, sizeof buf, ",%.10g\n", e.val_dsc);
      csv += buf;
    }
  }
  return csv;
}

}  // namespace detail

/// Runs the full training loop against a dataset manifest. Writes the
/// per-epoch CSV log and ckpt/epoch_<n>/net_{a,b} checkpoints under out_dir.
/// With mode=supervised (or consistency weight 0, or no unlabeled data) the
/// loop degrades to the plain supervised baseline.
inline TrainResult train(const DatasetManifest& manifest, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir,
                         const DatasetManifest* val_manifest = nullptr) {
  cfg.validate();
  if (manifest.labeled_cases.empty()) throw ConfigError("train: manifest has no labeled cases");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  // all volumes are intensity-normalized once, up front
  std::vector<detail::LoadedCase> labeled;
  for (const auto& [img, lab] : manifest.labeled_cases)
    labeled.push_back({normalize_intensity(load_volume(manifest.root / img), cfg.clip_lo_pct,
                                           cfg.clip_hi_pct),
                       load_label_volume(manifest.root / lab)});
  std::vector<Volume> unlabeled;
  if (cfg.mode == TrainMode::ssl)
    for (const auto& u : manifest.unlabeled_cases)
      unlabeled.push_back(
          normalize_intensity(load_volume(manifest.root / u), cfg.clip_lo_pct, cfg.clip_hi_pct));

  std::vector<detail::LoadedCase> val;
  if (val_manifest)
    for (const auto& [img, lab] : val_manifest->labeled_cases)
      val.push_back({normalize_intensity(load_volume(val_manifest->root / img), cfg.clip_lo_pct,
                                         cfg.clip_hi_pct),
                     load_label_volume(val_manifest->root / lab)});

  const int num_classes = cfg.net.num_classes;
  for (const auto& c : labeled)
    if (c.label.num_classes != num_classes)
      throw ConfigError("train: label num_classes disagrees with network spec");

  DualTrainer dual(cfg);
  const bool use_ssl = cfg.mode == TrainMode::ssl && unlabeled.size() >= 2 &&
                       cfg.unlabeled_pairs_per_iter > 0;

  // cropping pseudo-labels for category-balanced unlabeled sampling,
  // refreshed from net_a after the warm-up
  std::vector<std::vector<std::uint8_t>> crop_labels(unlabeled.size());
  bool have_crop_labels = false;

  int rr_labeled = 0, rr_unlabeled = 0;  // round-robin foreground class cursors
  auto next_class = [&](int& cursor) {
    const int cls = 1 + cursor;
    cursor = (cursor + 1) % (num_classes - 1);
    return cls;
  };

  std::vector<EpochLog> log;
  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    dual.epoch = epoch;
    const double lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_halving_period);
    const double lambda = use_ssl ? cfg.lambda_at(epoch) : 0.0;

    if (use_ssl && epoch >= cfg.crop_pseudo_warmup_epochs &&
        (epoch - cfg.crop_pseudo_warmup_epochs) % std::max(1, cfg.crop_pseudo_refresh_epochs) == 0) {
      for (std::size_t u = 0; u < unlabeled.size(); ++u)
        crop_labels[u] = detail::full_volume_argmax(dual.net_a, unlabeled[u]);
      have_crop_labels = true;
    }

    EpochLog el;
    el.epoch = epoch;
    el.lr = lr;
    for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
      dual.zero_grads();

      double sup_a = 0, sup_b = 0;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const int ci = std::uniform_int_distribution<int>(0, int(labeled.size()) - 1)(
            dual.rng_labeled);
        const auto& cs = labeled[ci];
        const PatchSpec spec =
            sample_patch_balanced(cs.label.classes, cs.label.shape, next_class(rr_labeled),
                                  cfg.patch_size, dual.rng_labeled);
        Field<float> x(1, cfg.patch_size);
        x.v = detail::extract_grid(cs.image.voxels, cs.image.shape, spec, 0.0f);
        const auto ylab = detail::extract_grid(cs.label.classes, cs.label.shape, spec,
                                               std::uint8_t(0));
        const auto [la, lb] = dual.supervised_step(x, ylab, 1.0f / float(cfg.batch_size));
        sup_a += la / cfg.batch_size;
        sup_b += lb / cfg.batch_size;
      }

      double cons_a = 0, cons_b = 0;
      if (use_ssl) {
        for (int p = 0; p < cfg.unlabeled_pairs_per_iter; ++p) {
          const int ui = std::uniform_int_distribution<int>(0, int(unlabeled.size()) - 1)(
              dual.rng_unlabeled);
          int uj = std::uniform_int_distribution<int>(0, int(unlabeled.size()) - 2)(
              dual.rng_unlabeled);
          if (uj >= ui) ++uj;  // two distinct unlabeled cases

          auto crop = [&](int u) {
            const int cls = next_class(rr_unlabeled);
            if (have_crop_labels)
              return sample_patch_balanced(crop_labels[u], unlabeled[u].shape, cls, cfg.patch_size,
                                           dual.rng_unlabeled);
            return sample_patch_balanced({}, unlabeled[u].shape, cls, cfg.patch_size,
                                         dual.rng_unlabeled);
          };
          const PatchSpec si = crop(ui), sj = crop(uj);
          Field<float> x_ui(1, cfg.patch_size), x_uj(1, cfg.patch_size);
          x_ui.v = detail::extract_grid(unlabeled[ui].voxels, unlabeled[ui].shape, si, 0.0f);
          x_uj.v = detail::extract_grid(unlabeled[uj].voxels, unlabeled[uj].shape, sj, 0.0f);
          const float scale = float(lambda) / float(cfg.unlabeled_pairs_per_iter);
          const auto [ca, cb] = dual.consistency_step(x_ui, x_uj, scale);
          cons_a += ca / cfg.unlabeled_pairs_per_iter;
          cons_b += cb / cfg.unlabeled_pairs_per_iter;
        }
      }
      dual.apply_updates(lr);

      el.sup_a += sup_a / cfg.iterations_per_epoch;
      el.sup_b += sup_b / cfg.iterations_per_epoch;
      el.cons_a += cons_a / cfg.iterations_per_epoch;
      el.cons_b += cons_b / cfg.iterations_per_epoch;
    }

    if (!val.empty()) {
      Network& deploy = cfg.deploy_net_b ? dual.net_b : dual.net_a;
      double dsum = 0;
      std::int64_t dn = 0;
      for (const auto& vc : val) {
        const auto pred = detail::full_volume_argmax(deploy, vc.image);
        for (int cls = 1; cls < num_classes; ++cls) {
          std::int64_t tp = 0, np = 0, ng = 0;
          for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred[i] == cls, g = vc.label.classes[i] == cls;
            tp += p && g;
            np += p;
            ng += g;
          }
          dsum += (np + ng) == 0 ? 1.0 : 2.0 * double(tp) / double(np + ng);
          ++dn;
        }
      }
      el.val_dsc = dsum / double(dn);
    }
    log.push_back(el);

    const bool last = epoch + 1 == cfg.total_epochs;
    if (last || (cfg.checkpoint_period > 0 && (epoch + 1) % cfg.checkpoint_period == 0)) {
      const auto dir = out_dir / "ckpt" / ("epoch_" + std::to_string(epoch + 1));
      save_network(dual.net_a, dir / "net_a");
      save_network(dual.net_b, dir / "net_b");
    }
  }

  TrainResult res;
  res.log = std::move(log);
  res.csv_path = out_dir / "train_log.csv";
  detail::atomic_write_text(res.csv_path, detail::format_csv(res.log));
  const auto final_dir = out_dir / "ckpt" / ("epoch_" + std::to_string(cfg.total_epochs));
  res.ckpt_a = final_dir / "net_a";
  res.ckpt_b = final_dir / "net_b";
  return res;
}

}  // namespace voxseg
