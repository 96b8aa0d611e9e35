#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxseg/base.hpp"
#include "voxseg/errors.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

enum class ConvMode { separable, regular };

/// Declarative encoder-decoder description. Stage s runs at 1/prod(strides[0..s])
/// of the input resolution with min(base_channels * multiplier^s, max_channels)
/// channels. kernel_size is fixed at 3; normalization is per-channel instance
/// norm; the nonlinearity is leaky-rectified with the given slope.
struct NetworkSpec {
  int in_channels = 1;
  int num_classes = 4;
  int num_stages = 4;
  int base_channels = 16;
  int channel_multiplier = 2;
  int max_channels = 128;
  int kernel_size = 3;
  std::vector<int> downsample_strides;  // per stage; entry 0 must be 1
  ConvMode conv_mode = ConvMode::separable;
  bool use_residual = true;
  bool deep_supervision = false;
  float leaky_slope = 0.01f;

  static NetworkSpec toy_default() {
    NetworkSpec s;
    s.downsample_strides = {1, 2, 2, 2};
    return s;
  }

  int stage_channels(int stage) const {
    std::int64_t ch = base_channels;
    for (int i = 0; i < stage; ++i) ch = std::min<std::int64_t>(ch * channel_multiplier, max_channels);
    return int(ch);
  }

  int stride_product() const {
    int p = 1;
    for (int s : downsample_strides) p *= s;
    return p;
  }

  void validate() const {
    if (in_channels < 1) throw ConfigError("network spec: in_channels must be >= 1");
    if (num_classes < 2 || num_classes > 255)
      throw ConfigError("network spec: num_classes must be in [2, 255]");
    if (num_stages < 2) throw ConfigError("network spec: num_stages must be >= 2");
    if (base_channels < 1) throw ConfigError("network spec: base_channels must be >= 1");
    if (channel_multiplier < 1) throw ConfigError("network spec: channel_multiplier must be >= 1");
    if (max_channels < base_channels)
      throw ConfigError("network spec: max_channels must be >= base_channels");
    if (kernel_size != 3) throw ConfigError("network spec: kernel_size must be 3");
    if (int(downsample_strides.size()) != num_stages)
      throw ConfigError("network spec: downsample_strides must have num_stages entries");
    if (downsample_strides[0] != 1)
      throw ConfigError("network spec: downsample_strides[0] must be 1");
    for (int s : downsample_strides)
      if (s != 1 && s != 2) throw ConfigError("network spec: downsample strides must be 1 or 2");
    if (!(leaky_slope > 0)) throw ConfigError("network spec: leaky_slope must be > 0");
  }

  /// Input shapes must be divisible by the total downsampling factor.
  void check_patch_shape(Shape3 s) const {
    const int p = stride_product();
    if (s.d % p || s.w % p || s.h % p)
      throw ShapeError("patch shape " + s.str() + " not divisible by total stride " +
                       std::to_string(p));
  }
};

inline nlohmann::json spec_to_json(const NetworkSpec& s) {
  nlohmann::json j;
  j["in_channels"] = s.in_channels;
  j["num_classes"] = s.num_classes;
  j["num_stages"] = s.num_stages;
  j["base_channels"] = s.base_channels;
  j["channel_multiplier"] = s.channel_multiplier;
  j["max_channels"] = s.max_channels;
  j["kernel_size"] = s.kernel_size;
  j["downsample_strides"] = s.downsample_strides;
  j["conv_mode"] = s.conv_mode == ConvMode::separable ? "separable" : "regular";
  j["use_residual"] = s.use_residual;
  j["deep_supervision"] = s.deep_supervision;
  j["leaky_slope"] = s.leaky_slope;
  return j;
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  try {
    s.in_channels = j.at("in_channels").get<int>();
    s.num_classes = j.at("num_classes").get<int>();
    s.num_stages = j.at("num_stages").get<int>();
    s.base_channels = j.at("base_channels").get<int>();
    s.channel_multiplier = j.at("channel_multiplier").get<int>();
    s.max_channels = j.at("max_channels").get<int>();
    s.kernel_size = j.at("kernel_size").get<int>();
    s.downsample_strides = j.at("downsample_strides").get<std::vector<int>>();
    const std::string cm = j.at("conv_mode").get<std::string>();
    if (cm != "separable" && cm != "regular")
      throw FormatError("network spec field 'conv_mode' must be separable|regular");
    s.conv_mode = cm == "separable" ? ConvMode::separable : ConvMode::regular;
    s.use_residual = j.at("use_residual").get<bool>();
    s.deep_supervision = j.at("deep_supervision").get<bool>();
    s.leaky_slope = j.at("leaky_slope").get<float>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("network spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ---- architecture plan --------------------------------------------------------
//
// The plan is the single source of truth for what layers exist; both the exact
// parameter counter and the builder walk it, so the two cannot disagree.

enum class LayerKind { conv3, sep_conv3, conv1, upconv2, norm };

struct LayerPlan {
  std::string name;
  LayerKind kind;
  int cin = 0, cout = 0, stride = 1;
};

inline std::int64_t layer_param_count(const LayerPlan& l) {
  switch (l.kind) {
    case LayerKind::conv3: return std::int64_t(27) * l.cin * l.cout + l.cout;
    case LayerKind::sep_conv3:
      // depthwise weights + biases, then pointwise weights + biases
      return std::int64_t(27) * l.cin + l.cin + std::int64_t(l.cin) * l.cout + l.cout;
    case LayerKind::conv1: return std::int64_t(l.cin) * l.cout + l.cout;
    case LayerKind::upconv2: return std::int64_t(8) * l.cin * l.cout + l.cout;
    case LayerKind::norm: return 2 * std::int64_t(l.cout);
  }
  return 0;
}

namespace detail {

inline void plan_block(std::vector<LayerPlan>& plan, const NetworkSpec& spec,
                       const std::string& prefix, int cin, int cout, int stride,
                       bool first_unit_regular) {
  const LayerKind unit_kind =
      spec.conv_mode == ConvMode::separable ? LayerKind::sep_conv3 : LayerKind::conv3;
  plan.push_back({prefix + ".u1.conv", first_unit_regular ? LayerKind::conv3 : unit_kind, cin, cout,
                  stride});
  plan.push_back({prefix + ".u1.norm", LayerKind::norm, cout, cout, 1});
  plan.push_back({prefix + ".u2.conv", unit_kind, cout, cout, 1});
  plan.push_back({prefix + ".u2.norm", LayerKind::norm, cout, cout, 1});
  if (spec.use_residual && (cin != cout || stride != 1))
    plan.push_back({prefix + ".proj", LayerKind::conv1, cin, cout, stride});
}

}  // namespace detail

inline std::vector<LayerPlan> plan_layers(const NetworkSpec& spec) {
  spec.validate();
  std::vector<LayerPlan> plan;
  const int S = spec.num_stages;
  for (int s = 0; s < S; ++s) {
    const int cin = s == 0 ? spec.in_channels : spec.stage_channels(s - 1);
    // the stem (in -> base) stays a regular conv even in separable mode
    detail::plan_block(plan, spec, "enc" + std::to_string(s), cin, spec.stage_channels(s),
                       spec.downsample_strides[s], s == 0);
  }
  for (int s = S - 2; s >= 0; --s) {
    const int ch = spec.stage_channels(s);
    plan.push_back({"dec" + std::to_string(s) + ".up", LayerKind::upconv2, spec.stage_channels(s + 1),
                    ch, 2});
    detail::plan_block(plan, spec, "dec" + std::to_string(s), 2 * ch, ch, 1, false);
  }
  plan.push_back({"head", LayerKind::conv1, spec.stage_channels(0), spec.num_classes, 1});
  if (spec.deep_supervision)
    for (int s = 1; s <= S - 2; ++s)
      plan.push_back({"aux" + std::to_string(s), LayerKind::conv1, spec.stage_channels(s),
                      spec.num_classes, 1});
  return plan;
}

/// Exact closed-form trainable parameter count for a spec.
inline std::int64_t count_parameters(const NetworkSpec& spec) {
  std::int64_t n = 0;
  for (const auto& l : plan_layers(spec)) n += layer_param_count(l);
  return n;
}

// ---- parameters -----------------------------------------------------------------

enum class InitKind { he_normal, zeros, ones };

template <class T>
struct ParamTensor {
  std::string name;
  std::vector<int> dims;
  InitKind init = InitKind::zeros;
  std::int64_t fan_in = 1;  // used by he_normal
  std::vector<T> w, g;

  void alloc() {
    std::int64_t n = 1;
    for (int d : dims) n *= d;
    w.assign(n, T(0));
    g.assign(n, T(0));
  }
  std::int64_t size() const { return std::int64_t(w.size()); }
};

// ---- conv kernels -----------------------------------------------------------------
//
// All kernels accumulate each output element in a fixed sequential order and
// parallel workers write disjoint planes, so results are bit-identical for any
// thread count.

namespace nn {

inline int down_dim(int n, int stride) { return stride == 1 ? n : (n - 1) / 2 + 1; }

inline Shape3 down_shape(Shape3 s, int stride) {
  return {down_dim(s.d, stride), down_dim(s.w, stride), down_dim(s.h, stride)};
}

// dst[z,y,x] += wv * src[z+dz, y+dy, x+dx] over the in-bounds intersection.
template <class T>
inline void axpy_shift(T* dst, const T* src, T wv, Shape3 s, int dz, int dy, int dx) {
  const int D = s.d, W = s.w, H = s.h;
  const int z0 = std::max(0, -dz), z1 = D - std::max(0, dz);
  const int y0 = std::max(0, -dy), y1 = W - std::max(0, dy);
  const int x0 = std::max(0, -dx), x1 = H - std::max(0, dx);
  for (int z = z0; z < z1; ++z)
    for (int y = y0; y < y1; ++y) {
      const T* sr = src + (std::int64_t(z + dz) * W + (y + dy)) * H + dx;
      T* dr = dst + (std::int64_t(z) * W + y) * H;
      for (int x = x0; x < x1; ++x) dr[x] += wv * sr[x];
    }
}

// sum over in-bounds of a[z,y,x] * b[z+dz, y+dy, x+dx]
template <class T>
inline T dot_shift(const T* a, const T* b, Shape3 s, int dz, int dy, int dx) {
  const int D = s.d, W = s.w, H = s.h;
  const int z0 = std::max(0, -dz), z1 = D - std::max(0, dz);
  const int y0 = std::max(0, -dy), y1 = W - std::max(0, dy);
  const int x0 = std::max(0, -dx), x1 = H - std::max(0, dx);
  T acc = 0;
  for (int z = z0; z < z1; ++z)
    for (int y = y0; y < y1; ++y) {
      const T* ar = a + (std::int64_t(z) * W + y) * H;
      const T* br = b + (std::int64_t(z + dz) * W + (y + dy)) * H + dx;
      for (int x = x0; x < x1; ++x) acc += ar[x] * br[x];
    }
  return acc;
}

// regular 3x3x3 conv, pad 1, stride 1
template <class T>
inline void conv3_s1_fwd(const T* x, int cin, Shape3 s, const T* w, const T* b, T* y, int cout) {
  const std::int64_t pl = s.vox();
#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    T* yc = y + co * pl;
    std::fill(yc, yc + pl, b[co]);
    for (int ci = 0; ci < cin; ++ci) {
      const T* xc = x + std::int64_t(ci) * pl;
      const T* wc = w + (std::int64_t(co) * cin + ci) * 27;
      for (int t = 0; t < 27; ++t)
        axpy_shift(yc, xc, wc[t], s, t / 9 - 1, t / 3 % 3 - 1, t % 3 - 1);
    }
  }
}

template <class T>
inline void conv3_s1_bwd_data(T* gx, int cin, Shape3 s, const T* w, const T* gy, int cout) {
  const std::int64_t pl = s.vox();
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < cin; ++ci) {
    T* gc = gx + std::int64_t(ci) * pl;
    for (int co = 0; co < cout; ++co) {
      const T* gyc = gy + std::int64_t(co) * pl;
      const T* wc = w + (std::int64_t(co) * cin + ci) * 27;
      for (int t = 0; t < 27; ++t)
        axpy_shift(gc, gyc, wc[t], s, -(t / 9 - 1), -(t / 3 % 3 - 1), -(t % 3 - 1));
    }
  }
}

template <class T>
inline void conv3_s1_bwd_weights(const T* x, int cin, Shape3 s, const T* gy, int cout, T* gw,
                                 T* gb) {
  const std::int64_t pl = s.vox();
#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    const T* gyc = gy + std::int64_t(co) * pl;
    T acc = 0;
    for (std::int64_t i = 0; i < pl; ++i) acc += gyc[i];
    gb[co] += acc;
    for (int ci = 0; ci < cin; ++ci) {
      const T* xc = x + std::int64_t(ci) * pl;
      T* gwc = gw + (std::int64_t(co) * cin + ci) * 27;
      for (int t = 0; t < 27; ++t)
        gwc[t] += dot_shift(gyc, xc, s, t / 9 - 1, t / 3 % 3 - 1, t % 3 - 1);
    }
  }
}

// regular 3x3x3 conv, pad 1, stride 2
template <class T>
inline void conv3_s2_fwd(const T* x, int cin, Shape3 s, const T* w, const T* b, T* y, int cout) {
  const Shape3 os = down_shape(s, 2);
  const std::int64_t pl = s.vox(), opl = os.vox();
#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    T* yc = y + co * opl;
    for (int zo = 0; zo < os.d; ++zo)
      for (int yo = 0; yo < os.w; ++yo)
        for (int xo = 0; xo < os.h; ++xo) {
          T acc = b[co];
          for (int ci = 0; ci < cin; ++ci) {
            const T* xc = x + std::int64_t(ci) * pl;
            const T* wc = w + (std::int64_t(co) * cin + ci) * 27;
            for (int kz = 0; kz < 3; ++kz) {
              const int zi = 2 * zo + kz - 1;
              if (zi < 0 || zi >= s.d) continue;
              for (int ky = 0; ky < 3; ++ky) {
                const int yi = 2 * yo + ky - 1;
                if (yi < 0 || yi >= s.w) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int xi = 2 * xo + kx - 1;
                  if (xi < 0 || xi >= s.h) continue;
                  acc += wc[kz * 9 + ky * 3 + kx] * xc[(std::int64_t(zi) * s.w + yi) * s.h + xi];
                }
              }
            }
          }
          yc[(std::int64_t(zo) * os.w + yo) * os.h + xo] = acc;
        }
  }
}

template <class T>
inline void conv3_s2_bwd_data(T* gx, int cin, Shape3 s, const T* w, const T* gy, int cout) {
  const Shape3 os = down_shape(s, 2);
  const std::int64_t pl = s.vox(), opl = os.vox();
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < cin; ++ci) {
    T* gc = gx + std::int64_t(ci) * pl;
    for (int zi = 0; zi < s.d; ++zi)
      for (int yi = 0; yi < s.w; ++yi)
        for (int xi = 0; xi < s.h; ++xi) {
          T acc = 0;
          for (int co = 0; co < cout; ++co) {
            const T* gyc = gy + std::int64_t(co) * opl;
            const T* wc = w + (std::int64_t(co) * cin + ci) * 27;
            for (int kz = 0; kz < 3; ++kz) {
              const int t = zi + 1 - kz;
              if (t < 0 || t % 2) continue;
              const int zo = t / 2;
              if (zo >= os.d) continue;
              for (int ky = 0; ky < 3; ++ky) {
                const int u = yi + 1 - ky;
                if (u < 0 || u % 2) continue;
                const int yo = u / 2;
                if (yo >= os.w) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int v = xi + 1 - kx;
                  if (v < 0 || v % 2) continue;
                  const int xo = v / 2;
                  if (xo >= os.h) continue;
                  acc += wc[kz * 9 + ky * 3 + kx] * gyc[(std::int64_t(zo) * os.w + yo) * os.h + xo];
                }
              }
            }
          }
          gc[(std::int64_t(zi) * s.w + yi) * s.h + xi] += acc;
        }
  }
}

template <class T>
inline void conv3_s2_bwd_weights(const T* x, int cin, Shape3 s, const T* gy, int cout, T* gw,
                                 T* gb) {
  const Shape3 os = down_shape(s, 2);
  const std::int64_t pl = s.vox(), opl = os.vox();
#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    const T* gyc = gy + std::int64_t(co) * opl;
    T acc = 0;
    for (std::int64_t i = 0; i < opl; ++i) acc += gyc[i];
    gb[co] += acc;
    for (int ci = 0; ci < cin; ++ci) {
      const T* xc = x + std::int64_t(ci) * pl;
      T* gwc = gw + (std::int64_t(co) * cin + ci) * 27;
      for (int kz = 0; kz < 3; ++kz)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            T a = 0;
            for (int zo = 0; zo < os.d; ++zo) {
              const int zi = 2 * zo + kz - 1;
              if (zi < 0 || zi >= s.d) continue;
              for (int yo = 0; yo < os.w; ++yo) {
                const int yi = 2 * yo + ky - 1;
                if (yi < 0 || yi >= s.w) continue;
                for (int xo = 0; xo < os.h; ++xo) {
                  const int xi = 2 * xo + kx - 1;
                  if (xi < 0 || xi >= s.h) continue;
                  a += gyc[(std::int64_t(zo) * os.w + yo) * os.h + xo] *
                       xc[(std::int64_t(zi) * s.w + yi) * s.h + xi];
                }
              }
            }
            gwc[kz * 9 + ky * 3 + kx] += a;
          }
    }
  }
}

// depthwise 3x3x3, pad 1, stride 1 or 2
template <class T>
inline void dw3_fwd(const T* x, int c, Shape3 s, int stride, const T* w, const T* b, T* y) {
  const Shape3 os = down_shape(s, stride);
  const std::int64_t pl = s.vox(), opl = os.vox();
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < c; ++ci) {
    const T* xc = x + std::int64_t(ci) * pl;
    const T* wc = w + std::int64_t(ci) * 27;
    T* yc = y + std::int64_t(ci) * opl;
    if (stride == 1) {
      std::fill(yc, yc + opl, b[ci]);
      for (int t = 0; t < 27; ++t)
        axpy_shift(yc, xc, wc[t], s, t / 9 - 1, t / 3 % 3 - 1, t % 3 - 1);
    } else {
      for (int zo = 0; zo < os.d; ++zo)
        for (int yo = 0; yo < os.w; ++yo)
          for (int xo = 0; xo < os.h; ++xo) {
            T acc = b[ci];
            for (int kz = 0; kz < 3; ++kz) {
              const int zi = 2 * zo + kz - 1;
              if (zi < 0 || zi >= s.d) continue;
              for (int ky = 0; ky < 3; ++ky) {
                const int yi = 2 * yo + ky - 1;
                if (yi < 0 || yi >= s.w) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int xi = 2 * xo + kx - 1;
                  if (xi < 0 || xi >= s.h) continue;
                  acc += wc[kz * 9 + ky * 3 + kx] * xc[(std::int64_t(zi) * s.w + yi) * s.h + xi];
                }
              }
            }
            yc[(std::int64_t(zo) * os.w + yo) * os.h + xo] = acc;
          }
    }
  }
}

template <class T>
inline void dw3_bwd(const T* x, int c, Shape3 s, int stride, const T* w, const T* gy, T* gx, T* gw,
                    T* gb) {
  const Shape3 os = down_shape(s, stride);
  const std::int64_t pl = s.vox(), opl = os.vox();
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < c; ++ci) {
    const T* xc = x + std::int64_t(ci) * pl;
    const T* wc = w + std::int64_t(ci) * 27;
    const T* gyc = gy + std::int64_t(ci) * opl;
    T* gxc = gx + std::int64_t(ci) * pl;
    T* gwc = gw + std::int64_t(ci) * 27;
    T acc = 0;
    for (std::int64_t i = 0; i < opl; ++i) acc += gyc[i];
    gb[ci] += acc;
    if (stride == 1) {
      for (int t = 0; t < 27; ++t) {
        const int dz = t / 9 - 1, dy = t / 3 % 3 - 1, dx = t % 3 - 1;
        axpy_shift(gxc, gyc, wc[t], s, -dz, -dy, -dx);
        gwc[t] += dot_shift(gyc, xc, s, dz, dy, dx);
      }
    } else {
      for (int kz = 0; kz < 3; ++kz)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const T wv = wc[kz * 9 + ky * 3 + kx];
            T gwacc = 0;
            for (int zo = 0; zo < os.d; ++zo) {
              const int zi = 2 * zo + kz - 1;
              if (zi < 0 || zi >= s.d) continue;
              for (int yo = 0; yo < os.w; ++yo) {
                const int yi = 2 * yo + ky - 1;
                if (yi < 0 || yi >= s.w) continue;
                for (int xo = 0; xo < os.h; ++xo) {
                  const int xi = 2 * xo + kx - 1;
                  if (xi < 0 || xi >= s.h) continue;
                  const T g = gyc[(std::int64_t(zo) * os.w + yo) * os.h + xo];
                  gxc[(std::int64_t(zi) * s.w + yi) * s.h + xi] += wv * g;
                  gwacc += g * xc[(std::int64_t(zi) * s.w + yi) * s.h + xi];
                }
              }
            }
            gwc[kz * 9 + ky * 3 + kx] += gwacc;
          }
    }
  }
}

// pointwise 1x1x1, stride 1 or 2
template <class T>
inline void conv1_fwd(const T* x, int cin, Shape3 s, int stride, const T* w, const T* b, T* y,
                      int cout) {
  const Shape3 os = down_shape(s, stride);
  const std::int64_t pl = s.vox(), opl = os.vox();
#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    T* yc = y + std::int64_t(co) * opl;
    std::fill(yc, yc + opl, b[co]);
    for (int ci = 0; ci < cin; ++ci) {
      const T wv = w[std::int64_t(co) * cin + ci];
      const T* xc = x + std::int64_t(ci) * pl;
      if (stride == 1) {
        for (std::int64_t i = 0; i < pl; ++i) yc[i] += wv * xc[i];
      } else {
        for (int zo = 0; zo < os.d; ++zo)
          for (int yo = 0; yo < os.w; ++yo) {
            const T* xr = xc + (std::int64_t(2 * zo) * s.w + 2 * yo) * s.h;
            T* yr = yc + (std::int64_t(zo) * os.w + yo) * os.h;
            for (int xo = 0; xo < os.h; ++xo) yr[xo] += wv * xr[2 * xo];
          }
      }
    }
  }
}

template <class T>
inline void conv1_bwd(const T* x, int cin, Shape3 s, int stride, const T* w, const T* gy, int cout,
                      T* gx, T* gw, T* gb) {
  const Shape3 os = down_shape(s, stride);
  const std::int64_t pl = s.vox(), opl = os.vox();
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < cin; ++ci) {
    T* gxc = gx + std::int64_t(ci) * pl;
    for (int co = 0; co < cout; ++co) {
      const T wv = w[std::int64_t(co) * cin + ci];
      const T* gyc = gy + std::int64_t(co) * opl;
      if (stride == 1) {
        for (std::int64_t i = 0; i < pl; ++i) gxc[i] += wv * gyc[i];
      } else {
        for (int zo = 0; zo < os.d; ++zo)
          for (int yo = 0; yo < os.w; ++yo) {
            T* gxr = gxc + (std::int64_t(2 * zo) * s.w + 2 * yo) * s.h;
            const T* gyr = gyc + (std::int64_t(zo) * os.w + yo) * os.h;
            for (int xo = 0; xo < os.h; ++xo) gxr[2 * xo] += wv * gyr[xo];
          }
      }
    }
  }
#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    const T* gyc = gy + std::int64_t(co) * opl;
    T acc = 0;
    for (std::int64_t i = 0; i < opl; ++i) acc += gyc[i];
    gb[co] += acc;
    for (int ci = 0; ci < cin; ++ci) {
      const T* xc = x + std::int64_t(ci) * pl;
      T a = 0;
      if (stride == 1) {
        for (std::int64_t i = 0; i < pl; ++i) a += gyc[i] * xc[i];
      } else {
        for (int zo = 0; zo < os.d; ++zo)
          for (int yo = 0; yo < os.w; ++yo) {
            const T* xr = xc + (std::int64_t(2 * zo) * s.w + 2 * yo) * s.h;
            const T* gyr = gyc + (std::int64_t(zo) * os.w + yo) * os.h;
            for (int xo = 0; xo < os.h; ++xo) a += gyr[xo] * xr[2 * xo];
          }
      }
      gw[std::int64_t(co) * cin + ci] += a;
    }
  }
}

// transposed conv, kernel 2, stride 2 (output dims are exactly doubled);
// each output voxel receives exactly one kernel tap per input channel
template <class T>
inline void upconv2_fwd(const T* x, int cin, Shape3 s, const T* w, const T* b, T* y, int cout) {
  const Shape3 os{2 * s.d, 2 * s.w, 2 * s.h};
  const std::int64_t pl = s.vox(), opl = os.vox();
#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    T* yc = y + std::int64_t(co) * opl;
    for (int Z = 0; Z < os.d; ++Z) {
      const int zi = Z / 2, dz = Z & 1;
      for (int Y = 0; Y < os.w; ++Y) {
        const int yi = Y / 2, dy = Y & 1;
        for (int X = 0; X < os.h; ++X) {
          const int xi = X / 2, dx = X & 1;
          T acc = b[co];
          for (int ci = 0; ci < cin; ++ci)
            acc += x[std::int64_t(ci) * pl + (std::int64_t(zi) * s.w + yi) * s.h + xi] *
                   w[(std::int64_t(ci) * cout + co) * 8 + dz * 4 + dy * 2 + dx];
          yc[(std::int64_t(Z) * os.w + Y) * os.h + X] = acc;
        }
      }
    }
  }
}

template <class T>
inline void upconv2_bwd(const T* x, int cin, Shape3 s, const T* w, const T* gy, int cout, T* gx,
                        T* gw, T* gb) {
  const Shape3 os{2 * s.d, 2 * s.w, 2 * s.h};
  const std::int64_t pl = s.vox(), opl = os.vox();
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < cin; ++ci) {
    T* gxc = gx + std::int64_t(ci) * pl;
    T* gwc = gw + std::int64_t(ci) * cout * 8;
    for (int z = 0; z < s.d; ++z)
      for (int y = 0; y < s.w; ++y)
        for (int x_ = 0; x_ < s.h; ++x_) {
          const T xv = x[std::int64_t(ci) * pl + (std::int64_t(z) * s.w + y) * s.h + x_];
          T acc = 0;
          for (int co = 0; co < cout; ++co) {
            const T* gyc = gy + std::int64_t(co) * opl;
            for (int t = 0; t < 8; ++t) {
              const int Z = 2 * z + (t >> 2), Y = 2 * y + ((t >> 1) & 1), X = 2 * x_ + (t & 1);
              const T g = gyc[(std::int64_t(Z) * os.w + Y) * os.h + X];
              acc += g * w[(std::int64_t(ci) * cout + co) * 8 + t];
              gwc[std::int64_t(co) * 8 + t] += g * xv;
            }
          }
          gxc[(std::int64_t(z) * s.w + y) * s.h + x_] += acc;
        }
  }
#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    const T* gyc = gy + std::int64_t(co) * opl;
    T acc = 0;
    for (std::int64_t i = 0; i < opl; ++i) acc += gyc[i];
    gb[co] += acc;
  }
}

}  // namespace nn

// ---- softmax --------------------------------------------------------------------

template <class T>
inline Field<T> softmax_channels(const Field<T>& logits) {
  Field<T> out(logits.c, logits.s);
  const std::int64_t n = logits.plane();
  const int C = logits.c;
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    T mx = logits.v[i];
    for (int c = 1; c < C; ++c) mx = std::max(mx, logits.v[std::size_t(c) * n + i]);
    T sum = 0;
    for (int c = 0; c < C; ++c) {
      const T e = std::exp(logits.v[std::size_t(c) * n + i] - mx);
      out.v[std::size_t(c) * n + i] = e;
      sum += e;
    }
    for (int c = 0; c < C; ++c) out.v[std::size_t(c) * n + i] /= sum;
  }
  return out;
}

/// d(loss)/d(logits) from d(loss)/d(mu) and mu = softmax(logits).
template <class T>
inline Field<T> softmax_backward(const Field<T>& mu, const Field<T>& gmu) {
  Field<T> gx(mu.c, mu.s);
  const std::int64_t n = mu.plane();
  const int C = mu.c;
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    T dot = 0;
    for (int c = 0; c < C; ++c) dot += gmu.v[std::size_t(c) * n + i] * mu.v[std::size_t(c) * n + i];
    for (int c = 0; c < C; ++c)
      gx.v[std::size_t(c) * n + i] =
          mu.v[std::size_t(c) * n + i] * (gmu.v[std::size_t(c) * n + i] - dot);
  }
  return gx;
}

/// Per-voxel argmax; ties resolve to the lowest class index.
template <class T>
inline std::vector<std::uint8_t> argmax_labels(const Field<T>& probs) {
  const std::int64_t n = probs.plane();
  std::vector<std::uint8_t> out(n);
  for (std::int64_t i = 0; i < n; ++i) {
    int best = 0;
    T bv = probs.v[i];
    for (int c = 1; c < probs.c; ++c) {
      const T v = probs.v[std::size_t(c) * n + i];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    out[i] = std::uint8_t(best);
  }
  return out;
}

// ---- layers ----------------------------------------------------------------------

namespace detail {

template <class T>
struct ConvAny {  // conv3 / sep_conv3 / conv1 / upconv2 per LayerPlan
  LayerPlan plan{};
  ParamTensor<T> w, b;        // conv3/conv1/upconv2, or depthwise part of sep
  ParamTensor<T> pw, pb;      // pointwise part of sep_conv3
  Field<T> cache_x, cache_mid;

  void build(const LayerPlan& p) {
    plan = p;
    const auto nm = [&](const char* suffix) { return p.name + suffix; };
    switch (p.kind) {
      case LayerKind::conv3:
        w = {nm(".w"), {p.cout, p.cin, 3, 3, 3}, InitKind::he_normal, std::int64_t(27) * p.cin};
        b = {nm(".b"), {p.cout}, InitKind::zeros, 1};
        break;
      case LayerKind::sep_conv3:
        w = {nm(".dw.w"), {p.cin, 3, 3, 3}, InitKind::he_normal, 27};
        b = {nm(".dw.b"), {p.cin}, InitKind::zeros, 1};
        pw = {nm(".pw.w"), {p.cout, p.cin, 1, 1, 1}, InitKind::he_normal, p.cin};
        pb = {nm(".pw.b"), {p.cout}, InitKind::zeros, 1};
        break;
      case LayerKind::conv1:
        w = {nm(".w"), {p.cout, p.cin, 1, 1, 1}, InitKind::he_normal, p.cin};
        b = {nm(".b"), {p.cout}, InitKind::zeros, 1};
        break;
      case LayerKind::upconv2:
        w = {nm(".w"), {p.cin, p.cout, 2, 2, 2}, InitKind::he_normal, p.cin};
        b = {nm(".b"), {p.cout}, InitKind::zeros, 1};
        break;
      case LayerKind::norm:
        throw Error("ConvAny cannot build a norm layer");
    }
    w.alloc();
    b.alloc();
    if (plan.kind == LayerKind::sep_conv3) {
      pw.alloc();
      pb.alloc();
    }
  }

  Shape3 out_shape(Shape3 in) const {
    if (plan.kind == LayerKind::upconv2) return {2 * in.d, 2 * in.w, 2 * in.h};
    return nn::down_shape(in, plan.stride);
  }

  Field<T> forward(const Field<T>& x, bool train) {
    if (x.c != plan.cin)
      throw ShapeError(plan.name + ": expected " + std::to_string(plan.cin) + " channels, got " +
                       std::to_string(x.c));
    if (train) cache_x = x;
    switch (plan.kind) {
      case LayerKind::conv3: {
        Field<T> y(plan.cout, out_shape(x.s));
        if (plan.stride == 1)
          nn::conv3_s1_fwd(x.v.data(), plan.cin, x.s, w.w.data(), b.w.data(), y.v.data(), plan.cout);
        else
          nn::conv3_s2_fwd(x.v.data(), plan.cin, x.s, w.w.data(), b.w.data(), y.v.data(), plan.cout);
        return y;
      }
      case LayerKind::sep_conv3: {
        Field<T> mid(plan.cin, out_shape(x.s));
        nn::dw3_fwd(x.v.data(), plan.cin, x.s, plan.stride, w.w.data(), b.w.data(), mid.v.data());
        Field<T> y(plan.cout, mid.s);
        nn::conv1_fwd(mid.v.data(), plan.cin, mid.s, 1, pw.w.data(), pb.w.data(), y.v.data(),
                      plan.cout);
        if (train) cache_mid = std::move(mid);
        return y;
      }
      case LayerKind::conv1: {
        Field<T> y(plan.cout, out_shape(x.s));
        nn::conv1_fwd(x.v.data(), plan.cin, x.s, plan.stride, w.w.data(), b.w.data(), y.v.data(),
                      plan.cout);
        return y;
      }
      case LayerKind::upconv2: {
        Field<T> y(plan.cout, out_shape(x.s));
        nn::upconv2_fwd(x.v.data(), plan.cin, x.s, w.w.data(), b.w.data(), y.v.data(), plan.cout);
        return y;
      }
      case LayerKind::norm: break;
    }
    throw Error("unreachable");
  }

  Field<T> backward(const Field<T>& gy) {
    Field<T> gx(plan.cin, cache_x.s);
    switch (plan.kind) {
      case LayerKind::conv3:
        if (plan.stride == 1) {
          nn::conv3_s1_bwd_data(gx.v.data(), plan.cin, cache_x.s, w.w.data(), gy.v.data(), plan.cout);
          nn::conv3_s1_bwd_weights(cache_x.v.data(), plan.cin, cache_x.s, gy.v.data(), plan.cout,
                                   w.g.data(), b.g.data());
        } else {
          nn::conv3_s2_bwd_data(gx.v.data(), plan.cin, cache_x.s, w.w.data(), gy.v.data(), plan.cout);
          nn::conv3_s2_bwd_weights(cache_x.v.data(), plan.cin, cache_x.s, gy.v.data(), plan.cout,
                                   w.g.data(), b.g.data());
        }
        return gx;
      case LayerKind::sep_conv3: {
        Field<T> gmid(plan.cin, cache_mid.s);
        nn::conv1_bwd(cache_mid.v.data(), plan.cin, cache_mid.s, 1, pw.w.data(), gy.v.data(),
                      plan.cout, gmid.v.data(), pw.g.data(), pb.g.data());
        nn::dw3_bwd(cache_x.v.data(), plan.cin, cache_x.s, plan.stride, w.w.data(), gmid.v.data(),
                    gx.v.data(), w.g.data(), b.g.data());
        return gx;
      }
      case LayerKind::conv1:
        nn::conv1_bwd(cache_x.v.data(), plan.cin, cache_x.s, plan.stride, w.w.data(), gy.v.data(),
                      plan.cout, gx.v.data(), w.g.data(), b.g.data());
        return gx;
      case LayerKind::upconv2:
        nn::upconv2_bwd(cache_x.v.data(), plan.cin, cache_x.s, w.w.data(), gy.v.data(), plan.cout,
                        gx.v.data(), w.g.data(), b.g.data());
        return gx;
      case LayerKind::norm: break;
    }
    throw Error("unreachable");
  }

  void visit(const std::function<void(ParamTensor<T>&)>& fn) {
    fn(w);
    fn(b);
    if (plan.kind == LayerKind::sep_conv3) {
      fn(pw);
      fn(pb);
    }
  }
};

template <class T>
struct InstanceNorm {
  static constexpr T kEps = T(1e-5);
  int channels = 0;
  ParamTensor<T> gamma, beta;
  Field<T> cache_xhat;
  std::vector<T> cache_inv_std;

  void build(const std::string& name, int c) {
    channels = c;
    gamma = {name + ".g", {c}, InitKind::ones, 1};
    beta = {name + ".b", {c}, InitKind::zeros, 1};
    gamma.alloc();
    beta.alloc();
  }

  Field<T> forward(const Field<T>& x, bool train) {
    Field<T> y(x.c, x.s);
    Field<T> xhat(x.c, x.s);
    std::vector<T> inv(x.c);
    const std::int64_t n = x.plane();
#pragma omp parallel for schedule(static)
    for (int c = 0; c < x.c; ++c) {
      const T* xc = x.ch(c);
      double sum = 0;
      for (std::int64_t i = 0; i < n; ++i) sum += double(xc[i]);
      const double mean = sum / double(n);
      double ss = 0;
      for (std::int64_t i = 0; i < n; ++i) ss += (double(xc[i]) - mean) * (double(xc[i]) - mean);
      const T inv_std = T(1.0 / std::sqrt(ss / double(n) + double(kEps)));
      inv[c] = inv_std;
      T* hc = xhat.ch(c);
      T* yc = y.ch(c);
      for (std::int64_t i = 0; i < n; ++i) {
        hc[i] = (xc[i] - T(mean)) * inv_std;
        yc[i] = gamma.w[c] * hc[i] + beta.w[c];
      }
    }
    if (train) {
      cache_xhat = std::move(xhat);
      cache_inv_std = std::move(inv);
    }
    return y;
  }

  Field<T> backward(const Field<T>& gy) {
    Field<T> gx(gy.c, gy.s);
    const std::int64_t n = gy.plane();
#pragma omp parallel for schedule(static)
    for (int c = 0; c < gy.c; ++c) {
      const T* gyc = gy.ch(c);
      const T* hc = cache_xhat.ch(c);
      double sg = 0, sgh = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        sg += double(gyc[i]);
        sgh += double(gyc[i]) * double(hc[i]);
      }
      gamma.g[c] += T(sgh);
      beta.g[c] += T(sg);
      const T m1 = T(sg / double(n)) * gamma.w[c];
      const T m2 = T(sgh / double(n)) * gamma.w[c];
      T* gxc = gx.ch(c);
      for (std::int64_t i = 0; i < n; ++i)
        gxc[i] = cache_inv_std[c] * (gamma.w[c] * gyc[i] - m1 - hc[i] * m2);
    }
    return gx;
  }

  void visit(const std::function<void(ParamTensor<T>&)>& fn) {
    fn(gamma);
    fn(beta);
  }
};

template <class T>
struct LeakyReLU {
  T slope = T(0.01);
  Field<T> cache_x;

  Field<T> forward(const Field<T>& x, bool train) {
    if (train) cache_x = x;
    Field<T> y(x.c, x.s);
    for (std::int64_t i = 0; i < x.size(); ++i) y.v[i] = x.v[i] >= 0 ? x.v[i] : slope * x.v[i];
    return y;
  }

  Field<T> backward(const Field<T>& gy) {
    Field<T> gx(gy.c, gy.s);
    for (std::int64_t i = 0; i < gy.size(); ++i)
      gx.v[i] = cache_x.v[i] >= 0 ? gy.v[i] : slope * gy.v[i];
    return gx;
  }
};

/// Two conv->norm->act units; with use_residual the block input is added to
/// the second unit's normalized output before the final activation, through a
/// 1x1x1 projection whenever channels or stride differ.
template <class T>
struct ResBlock {
  ConvAny<T> conv1, conv2;
  InstanceNorm<T> norm1, norm2;
  LeakyReLU<T> act1, act2;
  bool residual = false;
  bool has_proj = false;
  ConvAny<T> proj;

  void build(const NetworkSpec& spec, const std::vector<LayerPlan>& plan, std::size_t& idx) {
    conv1.build(plan[idx++]);
    norm1.build(plan[idx].name, plan[idx].cout);
    ++idx;
    conv2.build(plan[idx++]);
    norm2.build(plan[idx].name, plan[idx].cout);
    ++idx;
    act1.slope = act2.slope = T(spec.leaky_slope);
    residual = spec.use_residual;
    has_proj = residual && idx < plan.size() && plan[idx].name.ends_with(".proj");
    if (has_proj) proj.build(plan[idx++]);
  }

  Field<T> forward(const Field<T>& x, bool train) {
    Field<T> h = act1.forward(norm1.forward(conv1.forward(x, train), train), train);
    Field<T> h2 = norm2.forward(conv2.forward(h, train), train);
    if (residual) {
      if (has_proj) {
        Field<T> sk = proj.forward(x, train);
        for (std::int64_t i = 0; i < h2.size(); ++i) h2.v[i] += sk.v[i];
      } else {
        for (std::int64_t i = 0; i < h2.size(); ++i) h2.v[i] += x.v[i];
      }
    }
    return act2.forward(h2, train);
  }

  Field<T> backward(const Field<T>& gy) {
    Field<T> g2 = act2.backward(gy);
    Field<T> gx = conv1.backward(norm1.backward(act1.backward(conv2.backward(norm2.backward(g2)))));
    if (residual) {
      if (has_proj) {
        Field<T> gp = proj.backward(g2);
        for (std::int64_t i = 0; i < gx.size(); ++i) gx.v[i] += gp.v[i];
      } else {
        for (std::int64_t i = 0; i < gx.size(); ++i) gx.v[i] += g2.v[i];
      }
    }
    return gx;
  }

  void visit(const std::function<void(ParamTensor<T>&)>& fn) {
    conv1.visit(fn);
    norm1.visit(fn);
    conv2.visit(fn);
    norm2.visit(fn);
    if (has_proj) proj.visit(fn);
  }
};

}  // namespace detail

// ---- the network -----------------------------------------------------------------

template <class T>
struct NetworkT {
  NetworkSpec spec;
  std::uint64_t init_seed = 0;

  std::vector<detail::ResBlock<T>> enc;
  std::vector<detail::ConvAny<T>> ups;          // decoder level s -> upconv into stage s
  std::vector<detail::ResBlock<T>> dec;         // decoder level s block
  detail::ConvAny<T> head;
  std::vector<detail::ConvAny<T>> aux_heads;    // deep supervision, level 1..S-2

  struct TrainOut {
    Field<T> logits;
    std::vector<Field<T>> aux_logits;  // ordered by decoder level ascending (1, 2, ...)
  };

  void build(const NetworkSpec& s, std::uint64_t seed) {
    s.validate();
    spec = s;
    init_seed = seed;
    const auto plan = plan_layers(s);
    std::size_t idx = 0;
    const int S = s.num_stages;
    enc.resize(S);
    for (int i = 0; i < S; ++i) enc[i].build(s, plan, idx);
    ups.resize(S - 1);
    dec.resize(S - 1);
    for (int i = S - 2; i >= 0; --i) {
      ups[i].build(plan[idx++]);
      dec[i].build(s, plan, idx);
    }
    head.build(plan[idx++]);
    if (s.deep_supervision) {
      aux_heads.resize(std::max(0, S - 2));
      for (int i = 1; i <= S - 2; ++i) aux_heads[i - 1].build(plan[idx++]);
    }
    if (idx != plan.size()) throw Error("internal: plan walk mismatch");
    init_params();
  }

  void init_params() {
    Rng rng(init_seed);
    for_each_param([&](ParamTensor<T>& p) {
      switch (p.init) {
        case InitKind::zeros: std::fill(p.w.begin(), p.w.end(), T(0)); break;
        case InitKind::ones: std::fill(p.w.begin(), p.w.end(), T(1)); break;
        case InitKind::he_normal: {
          std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(p.fan_in)));
          for (auto& v : p.w) v = T(dist(rng));
          break;
        }
      }
    });
  }

  void for_each_param(const std::function<void(ParamTensor<T>&)>& fn) {
    for (auto& e : enc) e.visit(fn);
    for (int i = int(dec.size()) - 1; i >= 0; --i) {
      ups[i].visit(fn);
      dec[i].visit(fn);
    }
    head.visit(fn);
    for (auto& a : aux_heads) a.visit(fn);
  }

  void zero_grad() {
    for_each_param([](ParamTensor<T>& p) { std::fill(p.g.begin(), p.g.end(), T(0)); });
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    for_each_param([&](ParamTensor<T>& p) { n += p.size(); });
    return n;
  }

  /// Pre-softmax forward. train=true keeps activations for backward().
  TrainOut forward_logits(const Field<T>& x, bool train) {
    if (x.c != spec.in_channels) throw ShapeError("network input channel mismatch");
    spec.check_patch_shape(x.s);
    const int S = spec.num_stages;
    std::vector<Field<T>> e(S);
    e[0] = enc[0].forward(x, train);
    for (int s = 1; s < S; ++s) e[s] = enc[s].forward(e[s - 1], train);

    TrainOut out;
    if (spec.deep_supervision) out.aux_logits.resize(aux_heads.size());

    Field<T> d = e[S - 1];
    for (int s = S - 2; s >= 0; --s) {
      Field<T> u = ups[s].forward(d, train);
      // concat channels: [up, skip]
      Field<T> cat(u.c + e[s].c, u.s);
      std::copy(u.v.begin(), u.v.end(), cat.v.begin());
      std::copy(e[s].v.begin(), e[s].v.end(), cat.v.begin() + u.size());
      d = dec[s].forward(cat, train);
      if (spec.deep_supervision && s >= 1) out.aux_logits[s - 1] = aux_heads[s - 1].forward(d, train);
    }
    out.logits = head.forward(d, train);
    return out;
  }

  /// Accumulates parameter gradients. g_aux may be empty when deep
  /// supervision is off or unused.
  void backward(const Field<T>& g_logits, const std::vector<Field<T>>& g_aux = {}) {
    const int S = spec.num_stages;
    Field<T> gd = head.backward(g_logits);
    std::vector<Field<T>> gskip(S - 1);
    for (int s = 0; s <= S - 2; ++s) {
      if (spec.deep_supervision && s >= 1 && s - 1 < int(g_aux.size()) && g_aux[s - 1].size() > 0) {
        Field<T> ga = aux_heads[s - 1].backward(g_aux[s - 1]);
        for (std::int64_t i = 0; i < gd.size(); ++i) gd.v[i] += ga.v[i];
      }
      Field<T> gcat = dec[s].backward(gd);
      // split: first ups[s].cout channels to the upconv, rest to the skip
      Field<T> gu(ups[s].plan.cout, gcat.s);
      std::copy(gcat.v.begin(), gcat.v.begin() + gu.size(), gu.v.begin());
      gskip[s] = Field<T>(gcat.c - gu.c, gcat.s);
      std::copy(gcat.v.begin() + gu.size(), gcat.v.end(), gskip[s].v.begin());
      gd = ups[s].backward(gu);
    }
    Field<T> ge = std::move(gd);  // gradient into enc output S-1
    for (int s = S - 1; s >= 1; --s) {
      Field<T> gprev = enc[s].backward(ge);
      ge = std::move(gprev);
      for (std::int64_t i = 0; i < ge.size(); ++i) ge.v[i] += gskip[s - 1].v[i];
    }
    enc[0].backward(ge);
  }
};

using Network = NetworkT<float>;

/// Builds a network with fan-in-scaled normal ("he") initialization of all
/// convolution weights, seeded by init_seed. Same seed, same parameters.
inline Network build_network(const NetworkSpec& spec, std::uint64_t init_seed) {
  Network net;
  net.build(spec, init_seed);
  return net;
}

/// Softmax probabilities for a batch of patches (evaluation mode).
template <class T>
inline std::vector<Field<T>> forward(NetworkT<T>& net, const std::vector<Field<T>>& batch) {
  std::vector<Field<T>> out;
  out.reserve(batch.size());
  for (const auto& x : batch) out.push_back(softmax_channels(net.forward_logits(x, false).logits));
  return out;
}

// ---- checkpoints -------------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "VXSEGNET1\n";

inline void save_network(Network& net, const std::filesystem::path& path) {
  nlohmann::json meta;
  meta["spec"] = spec_to_json(net.spec);
  meta["init_seed"] = net.init_seed;
  auto& tens = meta["tensors"] = nlohmann::json::array();
  std::vector<const std::vector<float>*> payloads;
  net.for_each_param([&](ParamTensor<float>& p) {
    tens.push_back({{"name", p.name}, {"dims", p.dims}});
    payloads.push_back(&p.w);
  });
  const std::string header = meta.dump();

  std::string buf;
  buf.append(kCheckpointMagic);
  std::uint64_t hlen = header.size();
  buf.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  buf.append(header);
  for (const auto* w : payloads)
    buf.append(reinterpret_cast<const char*>(w->data()), w->size() * sizeof(float));

  std::filesystem::create_directories(path.parent_path());
  detail::atomic_write_text(path, buf);
}

inline Network load_network(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string magic(sizeof(kCheckpointMagic) - 1, '\0');
  in.read(magic.data(), std::streamsize(magic.size()));
  if (magic != kCheckpointMagic) throw FormatError("checkpoint magic mismatch in " + path.string());
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  if (!in || hlen > (1ull << 30)) throw FormatError("checkpoint header length invalid");
  std::string header(hlen, '\0');
  in.read(header.data(), std::streamsize(hlen));
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header unparseable: ") + e.what());
  }
  const NetworkSpec spec = spec_from_json(meta.at("spec"));
  Network net = build_network(spec, meta.at("init_seed").get<std::uint64_t>());

  // loading validates the exact parameter count implied by the spec
  std::int64_t expect = 0;
  for (const auto& t : meta.at("tensors")) {
    std::int64_t n = 1;
    for (int d : t.at("dims").get<std::vector<int>>()) n *= d;
    expect += n;
  }
  if (expect != count_parameters(spec))
    throw CorruptionError("checkpoint tensor sizes disagree with count_parameters(spec)");

  std::size_t ti = 0;
  const auto& tens = meta.at("tensors");
  bool ok = true;
  net.for_each_param([&](ParamTensor<float>& p) {
    if (ti >= tens.size() || tens[ti].at("name").get<std::string>() != p.name ||
        tens[ti].at("dims").get<std::vector<int>>() != p.dims) {
      ok = false;
      ++ti;
      return;
    }
    in.read(reinterpret_cast<char*>(p.w.data()), std::streamsize(p.w.size() * sizeof(float)));
    ++ti;
  });
  if (!ok || ti != tens.size() || !in)
    throw CorruptionError("checkpoint " + path.string() + " does not match its network spec");
  return net;
}

}  // namespace voxseg
