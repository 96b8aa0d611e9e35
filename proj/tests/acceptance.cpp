// Acceptance suite: runs every toolkit-level criterion end to end and prints
// one pass/fail line each. Exits nonzero if any criterion fails.
//
//   acceptance --work <scratch dir> [--cli <voxseg binary>] [--only <n>]
//
// The long criterion (the SSL-vs-supervised ablation) trains 3 seeds x 2
// modes at 60 epochs x 50 iterations; expect roughly half an hour on two
// cores.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "voxseg/cutmix.hpp"
#include "voxseg/inference.hpp"
#include "voxseg/losses.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/net.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/trainer.hpp"
#include "voxseg/volume.hpp"

using namespace voxseg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

fs::path g_work;
std::string g_cli;
int g_only = 0;
int g_failures = 0;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(int criterion, bool pass, const std::string& what, const std::string& detail) {
  std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", criterion, what.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "<missing:" + p.string() + ">";
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct RandomField {
  Field<double> mu;
  std::vector<std::uint8_t> labels;
};

RandomField random_field(int classes, Shape3 s, std::uint64_t seed) {
  RandomField f;
  f.mu = Field<double>(classes, s);
  f.labels.resize(s.vox());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::int64_t n = s.vox();
  for (std::int64_t i = 0; i < n; ++i) {
    double sum = 0;
    for (int c = 0; c < classes; ++c) {
      const double v = std::clamp(u(rng), 0.05, 0.95);
      f.mu.v[std::size_t(c) * n + i] = v;
      sum += v;
    }
    for (int c = 0; c < classes; ++c) f.mu.v[std::size_t(c) * n + i] /= sum;
    f.labels[i] = std::uint8_t(std::uniform_int_distribution<int>(0, classes - 1)(rng));
  }
  return f;
}

// ---- criterion 1: loss gradient checks ------------------------------------

void criterion_1() {
  const auto t0 = Clock::now();
  struct Case {
    LossKind kind;
    double gamma;
  };
  const std::vector<Case> cases{{LossKind::dice_ce, 1.5},
                                {LossKind::nrd, 1.5},
                                {LossKind::nrd, 2.0},
                                {LossKind::tce, 1.5},
                                {LossKind::rs, 1.5}};
  double worst = 0;
  for (const auto& c : cases)
    for (int trial = 0; trial < 20; ++trial) {
      const auto f = random_field(3, {4, 4, 4}, 1000 + trial);
      LossParams<double> p;
      p.gamma = c.gamma;
      worst = std::max(worst, gradient_check(c.kind, f.mu, f.labels, p, 1e-5));
    }
  const double secs = seconds_since(t0);
  char buf[128];
  std::snprintf(buf, sizeof buf, "max relative error %.3e, %.1fs", worst, secs);
  report(1, worst < 1e-4 && secs < 60.0, "loss gradients match finite differences", buf);
}

// ---- criterion 2: NRD gamma=2 soft-dice identity ---------------------------

void criterion_2() {
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto f = random_field(3, {4, 4, 4}, 2000 + trial);
    LossParams<double> p;
    p.gamma = 2.0;
    p.class_set = ClassSet::all_classes;
    const double nrd = nrd_loss(LossInput<double>{&f.mu, f.labels.data(), p});
    const std::int64_t n = f.mu.plane();
    double expect = 0;
    for (int c = 0; c < 3; ++c) {
      double inter = 0, denom = p.epsilon;
      for (std::int64_t i = 0; i < n; ++i) {
        const double m = f.mu.v[std::size_t(c) * n + i];
        const double u = f.labels[i] == c ? 1.0 : 0.0;
        inter += m * u;
        denom += m * m + u;
      }
      expect += (1.0 - 2.0 * inter / denom) - p.epsilon / denom;
    }
    worst = std::max(worst, std::abs(nrd - expect / 3.0));
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "max |nrd - (1 - soft_dice) + eps/denom| = %.3e", worst);
  report(2, worst < 1e-9, "NRD at gamma=2 equals the soft-dice complement", buf);
}

// ---- criterion 3: TCE lower-bounds CE with Taylor remainder ----------------

void criterion_3() {
  bool ok = true;
  double worst_slack = 0;
  for (int i = 0; i < 1000; ++i) {
    const double x = 0.5 + 0.5 * double(i) / 999.0;
    const double gap = -std::log(x) - ((1 - x) + (1 - x) * (1 - x) / 2);
    const double bound = (1 - x) * (1 - x) * (1 - x) / (3 * x);
    ok = ok && gap >= -1e-15 && gap <= bound + 1e-15;
    worst_slack = std::max(worst_slack, gap - bound);
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "max (gap - bound) = %.3e", worst_slack);
  report(3, ok, "0 <= CE - TCE <= (1-x)^3/(3x) on the [0.5, 1] grid", buf);
}

// ---- criterion 4: CutMix identities ----------------------------------------

void criterion_4() {
  bool ok = true;
  std::string detail = "ok";
  Rng rng(4242);

  double frac_sum = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto m = make_cutmix_mask({32, 32, 32}, 0.25, 0.75, rng);
    const double f = m.fraction();
    if (f < 0.20 || f > 0.80) {
      ok = false;
      detail = "mask fraction out of bounds";
    }
    frac_sum += f;
  }
  const double mean = frac_sum / 1000.0;
  if (std::abs(mean - 0.5) > 0.05) {
    ok = false;
    detail = "mask fraction mean off";
  }

  std::mt19937_64 vals(1);
  std::uniform_real_distribution<float> d(-2.0f, 2.0f);
  for (int trial = 0; trial < 20 && ok; ++trial) {
    const Shape3 s{8, 8, 8};
    std::vector<float> a(s.vox()), b(s.vox());
    for (auto& v : a) v = d(vals);
    for (auto& v : b) v = d(vals);
    const auto m = make_cutmix_mask(s, 0.2, 0.8, rng);
    if (mix(a, a, m) != a) {
      ok = false;
      detail = "mix(a,a,m) != a";
      break;
    }
    const auto out = mix(a, b, m);
    for (int z = 0; z < s.d && ok; ++z)
      for (int y = 0; y < s.w && ok; ++y)
        for (int x = 0; x < s.h && ok; ++x) {
          const auto i = flat_index(s, z, y, x);
          const bool inside = z >= m.box.origin[0] && z < m.box.origin[0] + m.box.size.d &&
                              y >= m.box.origin[1] && y < m.box.origin[1] + m.box.size.w &&
                              x >= m.box.origin[2] && x < m.box.origin[2] + m.box.size.h;
          if (out[i] != (inside ? a[i] : b[i])) {
            ok = false;
            detail = "reconstruction mismatch";
          }
        }
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s; 1000-draw fraction mean %.3f", detail.c_str(), mean);
  report(4, ok, "CutMix identity, fraction bounds, exact reconstruction", buf);
}

// ---- criterion 5: fusion oracle + tile coverage -----------------------------

void criterion_5() {
  bool ok = true;
  std::string detail = "ok";

  NetworkSpec spec;
  spec.num_classes = 4;
  spec.num_stages = 3;
  spec.base_channels = 8;
  spec.max_channels = 32;
  spec.downsample_strides = {1, 2, 2};
  Network net = build_network(spec, 555);

  PhantomConfig pc;
  pc.seed = 77;
  pc.shape = {32, 32, 32};
  pc.num_classes = 4;
  pc.noise_sigma = 0.5;
  pc.min_voxels_per_class = 20;
  pc.intensity_means = {0, 1, 2, 3};
  InferenceConfig cfg;
  cfg.patch_size = {16, 16, 16};
  cfg.overlap = 0.0;
  cfg.gaussian_sigma_scale = 0.0;  // uniform weights
  for (std::uint64_t cs = 0; cs < 10 && ok; ++cs) {
    const auto [img, lab] = generate_case(pc, cs);
    cfg.accumulation = Accumulation::full_prob;
    const auto full = predict_volume(NetPredictor{&net}, img, cfg);
    cfg.accumulation = Accumulation::label_only;
    const auto label_only = predict_volume(NetPredictor{&net}, img, cfg);
    if (full.classes != label_only.classes) {
      ok = false;
      detail = "fusion modes disagree on case " + std::to_string(cs);
    }
  }

  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20 && ok; ++trial) {
    std::uniform_int_distribution<int> dim(5, 48), pd(2, 6);
    const Shape3 shape{dim(rng), dim(rng), dim(rng)};
    const Shape3 patch{std::min(shape.d, pd(rng) * 3), std::min(shape.w, pd(rng) * 3),
                       std::min(shape.h, pd(rng) * 3)};
    const double overlap = std::uniform_real_distribution<double>(0.0, 0.9)(rng);
    std::vector<int> cover(shape.vox(), 0);
    for (const auto& t : tile_positions(shape, patch, overlap))
      for (int z = 0; z < t.size.d; ++z)
        for (int y = 0; y < t.size.w; ++y)
          for (int x = 0; x < t.size.h; ++x)
            ++cover[flat_index(shape, z + t.origin[0], y + t.origin[1], x + t.origin[2])];
    for (int c : cover)
      if (c < 1) {
        ok = false;
        detail = "tile coverage hole";
      }
  }
  report(5, ok, "label_only == full_prob at zero overlap; tiles cover every voxel", detail);
}

// ---- criterion 6: separable parameter reduction ------------------------------

void criterion_6() {
  bool ok = true;
  std::string detail = "ok";

  const LayerPlan sep{"x", LayerKind::sep_conv3, 32, 32, 1};
  const LayerPlan reg{"x", LayerKind::conv3, 32, 32, 1};
  if (layer_param_count(sep) != 1952 || layer_param_count(reg) != 27680) {
    ok = false;
    detail = "closed-form layer counts wrong";
  }

  auto sep_spec = NetworkSpec::toy_default();
  auto reg_spec = sep_spec;
  reg_spec.conv_mode = ConvMode::regular;
  const auto sp = plan_layers(sep_spec);
  const auto rp = plan_layers(reg_spec);
  int compared = 0;
  for (std::size_t i = 0; i < sp.size() && ok; ++i) {
    if (sp[i].kind != LayerKind::sep_conv3 || sp[i].cin < 32 || sp[i].cout < 32) continue;
    ++compared;
    if (double(layer_param_count(sp[i])) >= 0.25 * double(layer_param_count(rp[i]))) {
      ok = false;
      detail = "layer " + sp[i].name + " not under 0.25x";
    }
  }
  if (compared < 4 && ok) {
    ok = false;
    detail = "too few wide layers compared";
  }

  Network built = build_network(sep_spec, 1);
  if (built.parameter_count() != count_parameters(sep_spec)) {
    ok = false;
    detail = "built parameter count disagrees with closed form";
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s; toy spec totals: separable %lld vs regular %lld",
                detail.c_str(), (long long)count_parameters(sep_spec),
                (long long)count_parameters(reg_spec));
  report(6, ok, "separable < 0.25x regular per wide layer; counts exact", buf);
}

// ---- criterion 7: learning-rate schedule --------------------------------------

void criterion_7() {
  const bool ok = lr_schedule(0, 0.01, 200) == 0.01 && lr_schedule(199, 0.01, 200) == 0.01 &&
                  lr_schedule(200, 0.01, 200) == 0.005 && lr_schedule(399, 0.01, 200) == 0.005 &&
                  lr_schedule(400, 0.01, 200) == 0.0025 && lr_schedule(450, 0.01, 200) == 0.0025;
  report(7, ok, "lr halves exactly every 200 epochs from 0.01", ok ? "all six probes exact" : "mismatch");
}

// ---- criteria 8 and 9: the desk-scale ablation --------------------------------

// ablation protocol (fixed here, not tuned after the fact)
constexpr int kAblN = 4, kAblM = 40, kAblTest = 10;
constexpr int kAblEpochs = 60, kAblIters = 50;
const std::uint64_t kAblSeeds[3] = {7, 8, 9};

PhantomConfig ablation_phantom(std::uint64_t seed) {
  PhantomConfig pc;
  pc.seed = seed;
  pc.shape = {64, 64, 64};
  pc.num_classes = 4;
  pc.noise_sigma = 0.8;
  pc.min_voxels_per_class = 200;
  pc.intensity_means = {0, 1, 2, 3};
  return pc;
}

TrainConfig ablation_train(std::uint64_t seed, TrainMode mode, LossKind loss) {
  TrainConfig cfg;
  cfg.net.num_classes = 4;
  cfg.net.base_channels = 8;
  cfg.net.max_channels = 64;
  cfg.mode = mode;
  cfg.loss = loss;
  cfg.patch_size = {16, 16, 16};
  cfg.total_epochs = kAblEpochs;
  cfg.iterations_per_epoch = kAblIters;
  cfg.base_lr = 0.01;
  cfg.lr_halving_period = 10;
  cfg.seed = seed;
  cfg.crop_pseudo_warmup_epochs = 20;
  cfg.crop_pseudo_refresh_epochs = 20;
  return cfg;
}

struct AblationRun {
  double dsc = 0;
  fs::path pred_dir;
};

AblationRun run_ablation(const fs::path& work, const DatasetManifest& train_man,
                         const fs::path& test_dir, std::uint64_t seed, TrainMode mode,
                         LossKind loss, const std::string& tag) {
  const TrainConfig cfg = ablation_train(seed, mode, loss);
  const auto out = work / tag;
  const TrainResult res = train(train_man, cfg, out);
  Network net = load_network(res.ckpt_a);

  InferenceConfig icfg;
  icfg.patch_size = cfg.patch_size;
  icfg.overlap = 0.25;
  AblationRun run;
  run.pred_dir = out / "preds";
  fs::create_directories(run.pred_dir);
  const auto test_man = load_manifest(test_dir);
  for (const auto& [img, lab] : test_man.labeled_cases) {
    const Volume vol = load_volume(test_man.root / img);
    const LabelVolume pred = predict_volume(NetPredictor{&net}, vol, icfg);
    save_volume(pred, run.pred_dir / fs::path(img).stem());
  }
  const auto rep = evaluate_dataset(run.pred_dir, test_dir / "labels");
  run.dsc = rep.aggregate.dsc_mean;
  return run;
}

void criteria_8_and_9() {
  const auto t0 = Clock::now();
  const auto work = g_work / "ablation";
  fs::create_directories(work);

  struct SeedResult {
    std::uint64_t seed;
    double ssl, sup, gap;
  };
  std::vector<SeedResult> results;
  for (const std::uint64_t seed : kAblSeeds) {
    const auto ds = work / ("ds_" + std::to_string(seed));
    const auto test_ds = work / ("test_" + std::to_string(seed));
    generate_dataset(ablation_phantom(seed), kAblN, kAblM, ds);
    generate_dataset(ablation_phantom(seed + 1000), kAblTest, 0, test_ds);
    const auto man = load_manifest(ds);

    const auto ssl = run_ablation(work, man, test_ds, seed, TrainMode::ssl, LossKind::dice_ce,
                                  "ssl_" + std::to_string(seed));
    const auto sup = run_ablation(work, man, test_ds, seed, TrainMode::supervised,
                                  LossKind::dice_ce, "sup_" + std::to_string(seed));
    results.push_back({seed, ssl.dsc, sup.dsc, ssl.dsc - sup.dsc});
    std::printf("    seed %llu: ssl %.4f  supervised %.4f  gap %+.4f\n",
                (unsigned long long)seed, ssl.dsc, sup.dsc, ssl.dsc - sup.dsc);
    std::fflush(stdout);
  }
  std::sort(results.begin(), results.end(),
            [](const SeedResult& a, const SeedResult& b) { return a.gap < b.gap; });
  const SeedResult med = results[1];
  const double secs = seconds_since(t0);
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "median seed %llu: ssl %.4f vs supervised %.4f (gap %+.4f), %.0fs elapsed",
                (unsigned long long)med.seed, med.ssl, med.sup, med.gap, secs);
  report(8, med.gap >= 0.01 && med.ssl >= 0.70 && med.sup >= 0.70 && secs <= 3600.0,
         "SSL beats supervised-only on the median seed", buf);

  // criterion 9: loss-comparison harness (dice_ce vs rs) on the median seed's
  // phantom setup; asserts well-formed output, no numeric superiority
  const std::uint64_t seed = med.seed;
  const auto ds = work / ("ds_" + std::to_string(seed));
  const auto test_ds = work / ("test_" + std::to_string(seed));
  const auto man = load_manifest(ds);
  const auto rs_run = run_ablation(work, man, test_ds, seed, TrainMode::ssl, LossKind::rs,
                                   "rs_" + std::to_string(seed));

  std::string csv = "loss,mean_dsc\n";
  {
    char row[64];
    std::snprintf(row, sizeof row, "dice_ce,%.6f\nrs,%.6f\n", med.ssl, rs_run.dsc);
    csv += row;
  }
  const auto csv_path = work / "loss_comparison.csv";
  detail::atomic_write_text(csv_path, csv);

  // parse back and sanity-check
  std::ifstream in(csv_path);
  std::string line;
  std::getline(in, line);
  bool ok = line == "loss,mean_dsc";
  int rows = 0;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      ok = false;
      break;
    }
    const double v = std::atof(line.substr(comma + 1).c_str());
    ok = ok && v >= 0.0 && v <= 1.0;
    ++rows;
  }
  ok = ok && rows == 2;
  char buf9[128];
  std::snprintf(buf9, sizeof buf9, "dice_ce %.4f, rs %.4f -> %s", med.ssl, rs_run.dsc,
                csv_path.c_str());
  report(9, ok, "loss-comparison harness emits a well-formed two-row CSV", buf9);
}

// ---- criterion 10: metric closed forms ------------------------------------------

void criterion_10() {
  bool ok = true;
  std::string detail = "ok";
  auto blank = [](Shape3 s) { return LabelVolume(s, {1, 1, 1}, 2); };
  auto box = [](LabelVolume& l, std::array<int, 3> lo, std::array<int, 3> hi) {
    for (int z = lo[0]; z < hi[0]; ++z)
      for (int y = lo[1]; y < hi[1]; ++y)
        for (int x = lo[2]; x < hi[2]; ++x) l.at(z, y, x) = 1;
  };

  auto gt = blank({8, 8, 8});
  box(gt, {2, 2, 2}, {4, 4, 4});
  if (dsc(gt, gt, 1) != 1.0) ok = false, detail = "identity DSC != 1";

  auto far = blank({8, 8, 8});
  box(far, {5, 5, 5}, {7, 7, 7});
  if (dsc(far, gt, 1) != 0.0) ok = false, detail = "disjoint DSC != 0";

  auto p2 = blank({8, 8, 8}), g2 = blank({8, 8, 8});
  box(g2, {0, 0, 0}, {1, 1, 4});
  box(p2, {0, 0, 2}, {1, 1, 6});
  if (dsc(p2, g2, 1) != 0.5) ok = false, detail = "|P|=4,|G|=4,inter=2 DSC != 0.5";

  auto a = blank({12, 12, 12}), b = blank({12, 12, 12});
  box(a, {1, 2, 2}, {9, 10, 10});
  box(b, {2, 2, 2}, {10, 10, 10});
  for (auto mode : {SurfaceDistanceMode::brute_force, SurfaceDistanceMode::distance_transform}) {
    if (nsd(a, b, 1, 1.0, mode) != 1.0) ok = false, detail = "shifted cube NSD(1mm) != 1";
    if (nsd(a, b, 1, 0.0, mode) >= 1.0) ok = false, detail = "shifted cube NSD(0mm) not < 1";
  }
  // dual routes agree on irregular shapes
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5 && ok; ++trial) {
    LabelVolume r1(Shape3{10, 9, 8}, Spacing3{1.0, 0.5, 2.0}, 3);
    LabelVolume r2 = r1;
    std::uniform_int_distribution<int> cls(0, 2);
    for (auto& v : r1.classes) v = std::uint8_t(cls(rng));
    for (auto& v : r2.classes) v = std::uint8_t(cls(rng));
    for (double tol : {0.3, 1.3})
      if (std::abs(nsd(r1, r2, 1, tol, SurfaceDistanceMode::brute_force) -
                   nsd(r1, r2, 1, tol, SurfaceDistanceMode::distance_transform)) > 1e-12)
        ok = false, detail = "EDT route disagrees with brute force";
  }
  report(10, ok, "DSC/NSD closed-form examples and dual-route agreement", detail);
}

// ---- criterion 11: byte-identical reruns through the CLI --------------------------

int run_cli(const std::string& args) {
  const std::string cmd = g_cli + " " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

void criterion_11() {
  if (g_cli.empty()) {
    report(11, false, "CLI determinism", "--cli not supplied");
    return;
  }
  const auto work = g_work / "determinism";
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string tiny =
      " --set phantom_shape=16,16,16 --set num_classes=3 --set intensity_means=0,1,2"
      " --set min_voxels_per_class=8 --set noise_sigma=0.4 --set num_stages=3"
      " --set downsample_strides=1,2,2 --set base_channels=4 --set max_channels=16"
      " --set patch_size=8,8,8 --set total_epochs=2 --set iterations_per_epoch=4"
      " --set crop_pseudo_warmup_epochs=1 --set crop_pseudo_refresh_epochs=1"
      " --set n_labeled=2 --set n_unlabeled=4";

  bool ok = true;
  std::string detail = "ok";
  const auto ds = work / "ds";
  if (run_cli("gen-data --out " + ds.string() + " --seed 12" + tiny) != 0)
    ok = false, detail = "gen-data failed";

  for (int r = 1; r <= 2 && ok; ++r)
    if (run_cli("train --data " + ds.string() + " --out " + (work / ("t" + std::to_string(r))).string() +
                " --seed 12" + tiny) != 0)
      ok = false, detail = "train failed";
  if (ok) {
    for (const char* f : {"train_log.csv", "config_resolved.txt", "ckpt/epoch_2/net_a",
                          "ckpt/epoch_2/net_b"})
      if (slurp(work / "t1" / f) != slurp(work / "t2" / f))
        ok = false, detail = std::string("train outputs differ: ") + f;
  }

  for (int r = 1; r <= 2 && ok; ++r)
    if (run_cli("infer --model " + (work / "t1" / "ckpt" / "epoch_2" / "net_a").string() +
                " --input " + ds.string() + " --out " + (work / ("i" + std::to_string(r))).string() +
                tiny) != 0)
      ok = false, detail = "infer failed";
  if (ok) {
    for (const auto& e : fs::directory_iterator(work / "i1")) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), work / "i1");
      if (slurp(e.path()) != slurp(work / "i2" / rel))
        ok = false, detail = "infer outputs differ: " + rel.string();
    }
  }

  for (int r = 1; r <= 2 && ok; ++r)
    if (run_cli("evaluate --pred " + (work / "i1").string() + " --gt " + (ds / "labels").string() +
                " --out " + (work / ("e" + std::to_string(r) + ".csv")).string()) != 0)
      ok = false, detail = "evaluate failed";
  if (ok && slurp(work / "e1.csv") != slurp(work / "e2.csv"))
    ok = false, detail = "evaluate outputs differ";

  report(11, ok, "train/infer/evaluate byte-identical across reruns", detail);
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) g_work = argv[++i];
    if (a == "--cli" && i + 1 < argc) g_cli = argv[++i];
    if (a == "--only" && i + 1 < argc) g_only = std::atoi(argv[++i]);
  }
  if (g_work.empty()) g_work = fs::temp_directory_path() / "voxseg_acceptance";
  fs::create_directories(g_work);

  const auto t0 = Clock::now();
  auto want = [&](int n) { return g_only == 0 || g_only == n; };
  if (want(1)) criterion_1();
  if (want(2)) criterion_2();
  if (want(3)) criterion_3();
  if (want(4)) criterion_4();
  if (want(5)) criterion_5();
  if (want(6)) criterion_6();
  if (want(7)) criterion_7();
  if (want(8) || want(9)) criteria_8_and_9();
  if (want(10)) criterion_10();
  if (want(11)) criterion_11();

  std::printf("%s: %d failure(s), %.0fs total\n", g_failures == 0 ? "ACCEPTANCE PASSED" : "ACCEPTANCE FAILED",
              g_failures, seconds_since(t0));
  return g_failures == 0 ? 0 : 1;
}
