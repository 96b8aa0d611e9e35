#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxseg/base.hpp"
#include "voxseg/errors.hpp"

namespace voxseg {

enum class Reduction { mean_over_voxels, sum_over_voxels };
enum class ClassSet { foreground_only, all_classes };

/// Aggregation of the noise-robust dice ratio: one ratio per class averaged
/// (the default), or a single global ratio over all selected class planes.
enum class NrdScope { per_class, global };

enum class LossKind { nrd, tce, dice, ce, rs, dice_ce };

inline const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::nrd: return "nrd";
    case LossKind::tce: return "tce";
    case LossKind::dice: return "dice";
    case LossKind::ce: return "ce";
    case LossKind::rs: return "rs";
    case LossKind::dice_ce: return "dice_ce";
  }
  return "?";
}

template <class T>
struct LossParams {
  T gamma = T(1.5);
  T epsilon = T(1e-5);
  Reduction reduction = Reduction::mean_over_voxels;
  ClassSet class_set = ClassSet::foreground_only;
  NrdScope nrd_scope = NrdScope::per_class;
};

/// mu is the softmax output (C planes); labels is the per-voxel true class,
/// from which the one-hot ground truth is derived implicitly.
template <class T>
struct LossInput {
  const Field<T>* mu = nullptr;
  const std::uint8_t* labels = nullptr;
  LossParams<T> params{};
};

template <class T>
struct LossValue {
  T total{};
  T nrd{}, tce{};  // filled by rs_loss
  T dice{}, ce{};  // filled by dice_ce_loss
};

namespace detail {

template <class T>
inline void check_loss_input(const LossInput<T>& in) {
  if (!in.mu || !in.labels) throw InvalidArgument("loss input missing mu or labels");
  if (in.mu->c < 2) throw InvalidArgument("loss input needs >= 2 classes");
}

template <class T>
inline void check_nrd_params(const LossParams<T>& p) {
  if (!(p.gamma > 0)) throw InvalidArgument("nrd: gamma must be > 0");
  if (!(p.epsilon > 0)) throw InvalidArgument("nrd: epsilon must be > 0");
}

inline int first_class(ClassSet cs) { return cs == ClassSet::foreground_only ? 1 : 0; }

// |d|^g and its derivative g*sign(d)*|d|^(g-1); the kink at d == 0 is
// defined to have zero derivative.
template <class T>
inline T pow_abs(T d, T g) {
  if (d == 0) return T(0);
  if (g == T(2)) return d * d;
  return std::pow(std::abs(d), g);
}

template <class T>
inline T pow_abs_deriv(T d, T g) {
  if (d == 0) return T(0);
  if (g == T(2)) return 2 * d;
  const T s = d > 0 ? T(1) : T(-1);
  return g * s * std::pow(std::abs(d), g - 1);
}

}  // namespace detail

// ---- noise robust dice ------------------------------------------------------
//
// Per class c: sum_n |mu - upsilon|^gamma / (sum_n mu^2 + sum_n upsilon^2 + eps),
// averaged over the selected classes (or one global ratio in global scope).

template <class T>
inline T nrd_loss_grad(const LossInput<T>& in, Field<T>* gmu, T scale) {
  detail::check_loss_input(in);
  detail::check_nrd_params(in.params);
  const auto& mu = *in.mu;
  const std::int64_t n = mu.plane();
  const int c0 = detail::first_class(in.params.class_set);
  const int nc = mu.c;

  std::vector<T> num(nc, T(0)), den(nc, T(0));
  for (int c = c0; c < nc; ++c) {
    const T* m = mu.ch(c);
    T a = 0, b = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const T u = in.labels[i] == c ? T(1) : T(0);
      a += detail::pow_abs(m[i] - u, in.params.gamma);
      b += m[i] * m[i] + u;
    }
    num[c] = a;
    den[c] = b;
  }

  if (in.params.nrd_scope == NrdScope::global) {
    T a = 0, b = in.params.epsilon;
    for (int c = c0; c < nc; ++c) {
      a += num[c];
      b += den[c];
    }
    if (gmu) {
      for (int c = c0; c < nc; ++c) {
        const T* m = mu.ch(c);
        T* g = gmu->ch(c);
        for (std::int64_t i = 0; i < n; ++i) {
          const T u = in.labels[i] == c ? T(1) : T(0);
          g[i] += scale * (detail::pow_abs_deriv(m[i] - u, in.params.gamma) * b - a * 2 * m[i]) / (b * b);
        }
      }
    }
    return a / b;
  }

  const T class_scale = in.params.reduction == Reduction::mean_over_voxels ? T(1) / T(nc - c0) : T(1);
  T total = 0;
  for (int c = c0; c < nc; ++c) {
    const T a = num[c], b = den[c] + in.params.epsilon;
    total += class_scale * a / b;
    if (gmu) {
      const T* m = mu.ch(c);
      T* g = gmu->ch(c);
      for (std::int64_t i = 0; i < n; ++i) {
        const T u = in.labels[i] == c ? T(1) : T(0);
        g[i] += scale * class_scale *
                (detail::pow_abs_deriv(m[i] - u, in.params.gamma) * b - a * 2 * m[i]) / (b * b);
      }
    }
  }
  return total;
}

template <class T>
inline T nrd_loss(const LossInput<T>& in) {
  return nrd_loss_grad<T>(in, nullptr, T(0));
}

// ---- taylor cross entropy ---------------------------------------------------
//
// Second-order expansion of -ln(mu_true) around 1:
// (1 - mu_true) + (1 - mu_true)^2 / 2, reduced over voxels.

template <class T>
inline T tce_loss_grad(const LossInput<T>& in, Field<T>* gmu, T scale) {
  detail::check_loss_input(in);
  const auto& mu = *in.mu;
  const std::int64_t n = mu.plane();
  const T r = in.params.reduction == Reduction::mean_over_voxels ? T(1) / T(n) : T(1);
  T total = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T m = mu.ch(in.labels[i])[i];
    const T q = T(1) - m;
    total += q + q * q / 2;
    if (gmu) gmu->ch(in.labels[i])[i] += scale * r * (-T(1) - q);
  }
  return total * r;
}

template <class T>
inline T tce_loss(const LossInput<T>& in) {
  return tce_loss_grad<T>(in, nullptr, T(0));
}

// ---- soft dice + cross entropy ----------------------------------------------

template <class T>
inline T dice_loss_grad(const LossInput<T>& in, Field<T>* gmu, T scale) {
  detail::check_loss_input(in);
  if (!(in.params.epsilon > 0)) throw InvalidArgument("dice: epsilon must be > 0");
  const auto& mu = *in.mu;
  const std::int64_t n = mu.plane();
  const int c0 = detail::first_class(in.params.class_set);
  const int nc = mu.c;
  const T class_scale = in.params.reduction == Reduction::mean_over_voxels ? T(1) / T(nc - c0) : T(1);

  T total = 0;
  for (int c = c0; c < nc; ++c) {
    const T* m = mu.ch(c);
    T inter = 0, b = in.params.epsilon;
    for (std::int64_t i = 0; i < n; ++i) {
      const T u = in.labels[i] == c ? T(1) : T(0);
      inter += m[i] * u;
      b += m[i] * m[i] + u;
    }
    total += class_scale * (T(1) - 2 * inter / b);
    if (gmu) {
      T* g = gmu->ch(c);
      for (std::int64_t i = 0; i < n; ++i) {
        const T u = in.labels[i] == c ? T(1) : T(0);
        g[i] += scale * class_scale * (-2 * u * b + 4 * inter * m[i]) / (b * b);
      }
    }
  }
  return total;
}

template <class T>
inline T ce_loss_grad(const LossInput<T>& in, Field<T>* gmu, T scale) {
  detail::check_loss_input(in);
  const auto& mu = *in.mu;
  const std::int64_t n = mu.plane();
  const T r = in.params.reduction == Reduction::mean_over_voxels ? T(1) / T(n) : T(1);
  constexpr T kClampLo = T(1e-7);
  T total = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T m = mu.ch(in.labels[i])[i];
    const T mc = std::min(T(1), std::max(kClampLo, m));
    total += -std::log(mc);
    // clamped voxels contribute no gradient
    if (gmu && m > kClampLo && m <= T(1)) gmu->ch(in.labels[i])[i] += scale * r * (-T(1) / mc);
  }
  return total * r;
}

// ---- composites ---------------------------------------------------------------

template <class T>
inline LossValue<T> rs_loss_grad(const LossInput<T>& in, Field<T>* gmu, T scale) {
  LossValue<T> v;
  v.nrd = nrd_loss_grad(in, gmu, scale);
  v.tce = tce_loss_grad(in, gmu, scale);
  v.total = v.nrd + v.tce;
  return v;
}

template <class T>
inline LossValue<T> rs_loss(const LossInput<T>& in) {
  return rs_loss_grad<T>(in, nullptr, T(0));
}

template <class T>
inline LossValue<T> dice_ce_loss_grad(const LossInput<T>& in, Field<T>* gmu, T scale) {
  LossValue<T> v;
  v.dice = dice_loss_grad(in, gmu, scale);
  v.ce = ce_loss_grad(in, gmu, scale);
  v.total = v.dice + v.ce;
  return v;
}

template <class T>
inline LossValue<T> dice_ce_loss(const LossInput<T>& in) {
  return dice_ce_loss_grad<T>(in, nullptr, T(0));
}

/// Value of any loss kind (composites return their total).
template <class T>
inline T loss_value(LossKind kind, const LossInput<T>& in) {
  switch (kind) {
    case LossKind::nrd: return nrd_loss(in);
    case LossKind::tce: return tce_loss(in);
    case LossKind::dice: return dice_loss_grad<T>(in, nullptr, T(0));
    case LossKind::ce: return ce_loss_grad<T>(in, nullptr, T(0));
    case LossKind::rs: return rs_loss(in).total;
    case LossKind::dice_ce: return dice_ce_loss(in).total;
  }
  throw InvalidArgument("unknown loss kind");
}

/// Value plus scale * d(loss)/d(mu) accumulated into gmu.
template <class T>
inline T loss_value_grad(LossKind kind, const LossInput<T>& in, Field<T>& gmu, T scale) {
  switch (kind) {
    case LossKind::nrd: return nrd_loss_grad(in, &gmu, scale);
    case LossKind::tce: return tce_loss_grad(in, &gmu, scale);
    case LossKind::dice: return dice_loss_grad(in, &gmu, scale);
    case LossKind::ce: return ce_loss_grad(in, &gmu, scale);
    case LossKind::rs: return rs_loss_grad(in, &gmu, scale).total;
    case LossKind::dice_ce: return dice_ce_loss_grad(in, &gmu, scale).total;
  }
  throw InvalidArgument("unknown loss kind");
}

// ---- finite-difference check ---------------------------------------------------

/// Compares the analytic d(loss)/d(mu) against central finite differences,
/// perturbing raw mu entries directly (no renormalization). Returns the
/// maximum relative error over all entries. Run in double precision.
inline double gradient_check(LossKind kind, const Field<double>& mu,
                             const std::vector<std::uint8_t>& labels,
                             const LossParams<double>& params, double step) {
  LossInput<double> in{&mu, labels.data(), params};
  Field<double> analytic(mu.c, mu.s);
  loss_value_grad(kind, in, analytic, 1.0);

  Field<double> work = mu;
  LossInput<double> win{&work, labels.data(), params};
  double max_rel = 0.0;
  for (std::int64_t i = 0; i < mu.size(); ++i) {
    const double save = work.v[i];
    work.v[i] = save + step;
    const double lp = loss_value(kind, win);
    work.v[i] = save - step;
    const double lm = loss_value(kind, win);
    work.v[i] = save;
    const double fd = (lp - lm) / (2 * step);
    const double a = analytic.v[i];
    const double denom = std::max(std::abs(a), std::abs(fd));
    const double err = denom < 1e-12 ? std::abs(a - fd) : std::abs(a - fd) / denom;
    max_rel = std::max(max_rel, err);
  }
  return max_rel;
}

}  // namespace voxseg
