// voxseg command-line entrypoint: phantom data generation, dual-network
// semi-supervised training, sliding-window inference, and evaluation, all
// driven by one flat key = value config.

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "voxseg/config.hpp"
#include "voxseg/cutmix.hpp"
#include "voxseg/inference.hpp"
#include "voxseg/losses.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/net.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/trainer.hpp"
#include "voxseg/volume.hpp"

namespace fs = std::filesystem;
using namespace voxseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;  // key=value overrides
  long long seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& c) {
  cmd->add_option("--config", c.config_path, "flat key = value config file");
  cmd->add_option("--set", c.sets, "override a config key (key=value), repeatable");
  cmd->add_option("--seed", c.seed, "override the seed config key");
}

RunConfig resolve(const CommonArgs& c) {
  RunConfig rc;
  if (!c.config_path.empty()) rc.load_file(c.config_path);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    rc.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed >= 0) rc.set("seed", std::to_string(c.seed));
  set_num_threads(int(rc.get_int("threads")));
  configure_threads();
  return rc;
}

void write_resolved(const RunConfig& rc, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  detail::atomic_write_text(out_dir / "config_resolved.txt", rc.resolved_text());
}

int cmd_gen_data(const CommonArgs& common, const std::string& out) {
  RunConfig rc = resolve(common);
  const auto man = generate_dataset(rc.phantom(), int(rc.get_int("n_labeled")),
                                    int(rc.get_int("n_unlabeled")), out);
  write_resolved(rc, out);
  std::printf("wrote %d labeled + %d unlabeled cases to %s\n", man.n_labeled, man.n_unlabeled,
              out.c_str());
  return kExitOk;
}

int cmd_train(const CommonArgs& common, const std::string& data, const std::string& out) {
  RunConfig rc = resolve(common);
  const auto man = load_manifest(data);
  const TrainConfig cfg = rc.train();

  DatasetManifest val_man;
  const DatasetManifest* val = nullptr;
  if (!rc.raw("val_dir").empty()) {
    val_man = load_manifest(rc.raw("val_dir"));
    val = &val_man;
  }
  write_resolved(rc, out);
  const TrainResult res = train(man, cfg, out, val);
  const auto& last = res.log.back();
  std::printf("trained %d epochs: sup_a=%.4f sup_b=%.4f cons_a=%.4f cons_b=%.4f\n", cfg.total_epochs,
              last.sup_a, last.sup_b, last.cons_a, last.cons_b);
  std::printf("checkpoints: %s, %s\nlog: %s\n", res.ckpt_a.c_str(), res.ckpt_b.c_str(),
              res.csv_path.c_str());
  return kExitOk;
}

int cmd_infer(const CommonArgs& common, const std::string& model, const std::string& input,
              const std::string& out) {
  RunConfig rc = resolve(common);
  Network net = load_network(model);
  InferenceConfig icfg = rc.inference();
  try {
    net.spec.check_patch_shape(icfg.patch_size);
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("infer: ") + e.what());
  }

  // input: a dataset directory/manifest, or a directory of image volumes
  std::vector<fs::path> images;
  if (fs::exists(fs::path(input) / "manifest.json") ||
      fs::path(input).filename() == "manifest.json") {
    const auto man = load_manifest(input);
    for (const auto& [img, lab] : man.labeled_cases) images.push_back(man.root / img);
    for (const auto& u : man.unlabeled_cases) images.push_back(man.root / u);
  } else if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.path().extension() == ".json") images.push_back(e.path());
    std::sort(images.begin(), images.end());
  } else {
    throw IoError("infer: input is neither a dataset nor a volume directory: " + input);
  }
  if (images.empty()) throw IoError("infer: no input volumes found in " + input);

  fs::create_directories(out);
  write_resolved(rc, out);
  for (const auto& img : images) {
    const Volume vol = load_volume(img);
    const LabelVolume pred = predict_volume(NetPredictor{&net}, vol, icfg);
    const auto stem = fs::path(img).stem().string();
    save_volume(pred, fs::path(out) / stem);
    std::printf("predicted %s\n", stem.c_str());
  }
  return kExitOk;
}

int cmd_evaluate(const CommonArgs& common, const std::string& pred, const std::string& gt,
                 const std::string& out_csv) {
  RunConfig rc = resolve(common);
  const auto rep = evaluate_dataset(pred, gt, rc.class_names(), rc.get_double("nsd_tolerance"));
  const fs::path csv_path(out_csv);
  if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
  detail::atomic_write_text(csv_path, rep.to_csv());
  if (csv_path.has_parent_path()) write_resolved(rc, csv_path.parent_path());
  std::printf("evaluated %zu cases (%zu missing): mean foreground DSC %.4f\n", rep.cases.size(),
              rep.missing.size(), rep.aggregate.dsc_mean);
  return kExitOk;
}

int cmd_grad_check(const CommonArgs& common) {
  RunConfig rc = resolve(common);
  std::mt19937_64 rng(rc.get_int("seed") + 12345);
  struct Case {
    LossKind kind;
    double gamma;
  };
  const std::vector<Case> cases{{LossKind::dice_ce, 1.5},
                                {LossKind::nrd, 1.5},
                                {LossKind::nrd, 2.0},
                                {LossKind::tce, 1.5},
                                {LossKind::rs, 1.5}};
  bool ok = true;
  for (const auto& c : cases) {
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
      const Shape3 s{4, 4, 4};
      Field<double> mu(3, s);
      std::vector<std::uint8_t> labels(s.vox());
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (std::int64_t i = 0; i < s.vox(); ++i) {
        double sum = 0;
        for (int cc = 0; cc < 3; ++cc) {
          const double v = std::clamp(u(rng), 0.05, 0.95);
          mu.v[std::size_t(cc) * s.vox() + i] = v;
          sum += v;
        }
        for (int cc = 0; cc < 3; ++cc) mu.v[std::size_t(cc) * s.vox() + i] /= sum;
        labels[i] = std::uint8_t(std::uniform_int_distribution<int>(0, 2)(rng));
      }
      LossParams<double> p;
      p.gamma = c.gamma;
      worst = std::max(worst, gradient_check(c.kind, mu, labels, p, 1e-5));
    }
    const bool pass = worst < 1e-4;
    ok = ok && pass;
    std::printf("%-7s gamma=%.1f  max relative error %.3e  [%s]\n", loss_kind_name(c.kind), c.gamma,
                worst, pass ? "ok" : "FAIL");
  }
  return ok ? kExitOk : kExitRuntime;
}

int cmd_count_params(const CommonArgs& common) {
  RunConfig rc = resolve(common);
  const NetworkSpec spec = rc.network();
  std::int64_t total = 0;
  for (const auto& l : plan_layers(spec)) {
    const char* kind = l.kind == LayerKind::conv3       ? "conv3"
                       : l.kind == LayerKind::sep_conv3 ? "sep_conv3"
                       : l.kind == LayerKind::conv1     ? "conv1"
                       : l.kind == LayerKind::upconv2   ? "upconv2"
                                                        : "norm";
    std::printf("%-14s %-10s %4d -> %-4d stride %d  %8lld\n", l.name.c_str(), kind, l.cin, l.cout,
                l.stride, (long long)layer_param_count(l));
    total += layer_param_count(l);
  }
  std::printf("total trainable parameters: %lld\n", (long long)total);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale semi-supervised volumetric segmentation toolkit"};
  app.require_subcommand(1);

  CommonArgs cg, ct, ci, ce, cgc, ccp;
  std::string out, data, model, input, pred, gt, out_csv;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
  add_common(gen, cg);
  gen->add_option("--out", out, "output dataset directory")->required();

  auto* tr = app.add_subcommand("train", "train the dual network on a dataset");
  add_common(tr, ct);
  tr->add_option("--data", data, "dataset directory (with manifest.json)")->required();
  tr->add_option("--out", out, "output directory for checkpoints and logs")->required();
  std::string mode, loss, arch;
  tr->add_option("--mode", mode, "ssl|supervised (overrides config)");
  tr->add_option("--loss", loss, "rs|dice_ce (overrides config)");
  tr->add_option("--arch", arch, "separable|regular (overrides config)");

  auto* inf = app.add_subcommand("infer", "predict label volumes with a trained checkpoint");
  add_common(inf, ci);
  inf->add_option("--model", model, "checkpoint file (e.g. ckpt/epoch_60/net_a)")->required();
  inf->add_option("--input", input, "dataset directory or directory of image volumes")->required();
  inf->add_option("--out", out, "output directory for predicted labels")->required();
  std::string tta, fusion;
  inf->add_option("--tta", tta, "none|flips3 (overrides config)");
  inf->add_option("--fusion", fusion, "full_prob|label_only (overrides config)");

  auto* ev = app.add_subcommand("evaluate", "DSC/NSD report for predictions vs ground truth");
  add_common(ev, ce);
  ev->add_option("--pred", pred, "directory of predicted label volumes")->required();
  ev->add_option("--gt", gt, "directory of ground-truth label volumes")->required();
  ev->add_option("--out", out_csv, "output CSV path")->required();
  double nsd_tol = -2.0;
  std::string classes;
  ev->add_option("--nsd-tolerance", nsd_tol, "surface tolerance in mm; enables NSD columns");
  ev->add_option("--classes", classes, "comma-separated foreground class names");

  auto* gc = app.add_subcommand("grad-check", "finite-difference checks of all loss gradients");
  add_common(gc, cgc);

  auto* cp = app.add_subcommand("count-params", "exact parameter count for the configured network");
  add_common(cp, ccp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(cg, out);
    if (tr->parsed()) {
      if (!mode.empty()) ct.sets.push_back("mode=" + mode);
      if (!loss.empty()) ct.sets.push_back("loss=" + loss);
      if (!arch.empty()) ct.sets.push_back("conv_mode=" + arch);
      return cmd_train(ct, data, out);
    }
    if (inf->parsed()) {
      if (!tta.empty()) ci.sets.push_back("tta=" + tta);
      if (!fusion.empty()) ci.sets.push_back("fusion=" + fusion);
      return cmd_infer(ci, model, input, out);
    }
    if (ev->parsed()) {
      if (nsd_tol > -2.0) ce.sets.push_back("nsd_tolerance=" + std::to_string(nsd_tol));
      if (!classes.empty()) ce.sets.push_back("class_names=" + classes);
      return cmd_evaluate(ce, pred, gt, out_csv);
    }
    if (gc->parsed()) return cmd_grad_check(cgc);
    if (cp->parsed()) return cmd_count_params(ccp);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kExitConfig;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitConfig;
}
