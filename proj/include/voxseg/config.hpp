#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "voxseg/base.hpp"
#include "voxseg/errors.hpp"
#include "voxseg/inference.hpp"
#include "voxseg/losses.hpp"
#include "voxseg/net.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/trainer.hpp"

namespace voxseg {

/// All run parameters flow through one flat key = value map: defaults,
/// overridden by the config file, overridden by command-line flags. Unknown
/// keys are rejected with a nearest-match suggestion, and every run writes
/// the fully resolved map next to its outputs.
class RunConfig {
 public:
  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        // phantom data
        {"phantom_shape", "64,64,64"},
        {"phantom_spacing", "1,1,1"},
        {"num_classes", "4"},
        {"noise_sigma", "0.8"},
        {"min_voxels_per_class", "200"},
        {"intensity_means", "0,1,2,3"},
        {"n_labeled", "4"},
        {"n_unlabeled", "40"},
        // network
        {"in_channels", "1"},
        {"num_stages", "4"},
        {"base_channels", "16"},
        {"channel_multiplier", "2"},
        {"max_channels", "128"},
        {"downsample_strides", "1,2,2,2"},
        {"conv_mode", "separable"},
        {"use_residual", "true"},
        {"deep_supervision", "false"},
        // training
        {"mode", "ssl"},
        {"patch_size", "16,16,16"},
        {"batch_size", "1"},
        {"total_epochs", "60"},
        {"iterations_per_epoch", "50"},
        {"base_lr", "0.01"},
        {"momentum", "0.99"},
        {"nesterov", "true"},
        {"lr_halving_period", "200"},
        {"consistency_weight", "1"},
        {"consistency_ramp_epochs", "-1"},
        {"loss", "rs"},
        {"gamma", "1.5"},
        {"epsilon", "1e-5"},
        {"loss_reduction", "mean"},
        {"class_set", "foreground_only"},
        {"nrd_scope", "per_class"},
        {"cutmix_ratio_min", "0.25"},
        {"cutmix_ratio_max", "0.75"},
        {"unlabeled_pairs_per_iter", "1"},
        {"seed", "0"},
        {"checkpoint_period", "0"},
        {"crop_pseudo_warmup_epochs", "20"},
        {"crop_pseudo_refresh_epochs", "50"},
        {"literal_eq3", "false"},
        {"deploy_net", "a"},
        {"clip_lo_pct", "0.5"},
        {"clip_hi_pct", "99.5"},
        {"threads", "0"},
        {"val_dir", ""},
        // inference
        {"overlap", "0.5"},
        {"sigma_scale", "0.125"},
        {"tta", "none"},
        {"fusion", "full_prob"},
        {"target_spacing", "0,0,0"},
        {"resample_back", "true"},
        {"prob_voxel_budget", "536870912"},
        // evaluation
        {"nsd_tolerance", "-1"},
        {"class_names", ""},
    };
    return d;
  }

  RunConfig() : values_(defaults()) {}

  static std::string suggest(const std::string& key) {
    auto edit_distance = [](const std::string& a, const std::string& b) {
      std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
      for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
      for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
          cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
        std::swap(prev, cur);
      }
      return prev[b.size()];
    };
    std::string best;
    std::size_t best_d = std::string::npos;
    for (const auto& [k, v] : defaults()) {
      const std::size_t d = edit_distance(key, k);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    return best;
  }

  void set(const std::string& key, const std::string& value) {
    if (!defaults().count(key))
      throw ConfigError("unknown config key '" + key + "'; did you mean '" + suggest(key) + "'?");
    values_[key] = value;
  }

  /// Parses flat `key = value` text; '#' starts a comment, blank lines are
  /// skipped.
  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
      };
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                          ": expected 'key = value'");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  std::string resolved_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::int64_t get_int(const std::string& key) const {
    try {
      std::size_t pos = 0;
      const auto v = std::stoll(raw(key), &pos);
      if (pos != raw(key).size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected integer, got '" + raw(key) + "'");
    }
  }

  double get_double(const std::string& key) const {
    try {
      std::size_t pos = 0;
      const auto v = std::stod(raw(key), &pos);
      if (pos != raw(key).size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected number, got '" + raw(key) + "'");
    }
  }

  bool get_bool(const std::string& key) const {
    const auto& v = raw(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
  }

  std::vector<double> get_list(const std::string& key) const {
    std::vector<double> out;
    std::stringstream ss(raw(key));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        out.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected comma-separated numbers, got '" +
                          raw(key) + "'");
      }
    }
    return out;
  }

  Shape3 get_shape(const std::string& key) const {
    const auto l = get_list(key);
    if (l.size() != 3) throw ConfigError("config key '" + key + "': expected 3 entries");
    return {int(l[0]), int(l[1]), int(l[2])};
  }

  Spacing3 get_spacing(const std::string& key) const {
    const auto l = get_list(key);
    if (l.size() != 3) throw ConfigError("config key '" + key + "': expected 3 entries");
    return {l[0], l[1], l[2]};
  }

  // ---- typed views over the map ----

  PhantomConfig phantom() const {
    PhantomConfig p;
    p.seed = std::uint64_t(get_int("seed"));
    p.shape = get_shape("phantom_shape");
    p.spacing = get_spacing("phantom_spacing");
    p.num_classes = int(get_int("num_classes"));
    p.noise_sigma = get_double("noise_sigma");
    p.min_voxels_per_class = int(get_int("min_voxels_per_class"));
    p.intensity_means = get_list("intensity_means");
    return p;
  }

  NetworkSpec network() const {
    NetworkSpec s;
    s.in_channels = int(get_int("in_channels"));
    s.num_classes = int(get_int("num_classes"));
    s.num_stages = int(get_int("num_stages"));
    s.base_channels = int(get_int("base_channels"));
    s.channel_multiplier = int(get_int("channel_multiplier"));
    s.max_channels = int(get_int("max_channels"));
    const auto strides = get_list("downsample_strides");
    s.downsample_strides.assign(strides.size(), 1);
    for (std::size_t i = 0; i < strides.size(); ++i) s.downsample_strides[i] = int(strides[i]);
    const auto& cm = raw("conv_mode");
    if (cm != "separable" && cm != "regular")
      throw ConfigError("config key 'conv_mode': expected separable|regular, got '" + cm + "'");
    s.conv_mode = cm == "separable" ? ConvMode::separable : ConvMode::regular;
    s.use_residual = get_bool("use_residual");
    s.deep_supervision = get_bool("deep_supervision");
    return s;
  }

  LossParams<float> loss_params() const {
    LossParams<float> p;
    p.gamma = float(get_double("gamma"));
    p.epsilon = float(get_double("epsilon"));
    const auto& red = raw("loss_reduction");
    if (red == "mean")
      p.reduction = Reduction::mean_over_voxels;
    else if (red == "sum")
      p.reduction = Reduction::sum_over_voxels;
    else
      throw ConfigError("config key 'loss_reduction': expected mean|sum, got '" + red + "'");
    const auto& cs = raw("class_set");
    if (cs == "foreground_only")
      p.class_set = ClassSet::foreground_only;
    else if (cs == "all_classes")
      p.class_set = ClassSet::all_classes;
    else
      throw ConfigError("config key 'class_set': expected foreground_only|all_classes");
    const auto& sc = raw("nrd_scope");
    if (sc == "per_class")
      p.nrd_scope = NrdScope::per_class;
    else if (sc == "global")
      p.nrd_scope = NrdScope::global;
    else
      throw ConfigError("config key 'nrd_scope': expected per_class|global");
    return p;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.net = network();
    const auto& m = raw("mode");
    if (m == "ssl")
      t.mode = TrainMode::ssl;
    else if (m == "supervised")
      t.mode = TrainMode::supervised;
    else
      throw ConfigError("config key 'mode': expected ssl|supervised, got '" + m + "'");
    t.patch_size = get_shape("patch_size");
    t.batch_size = int(get_int("batch_size"));
    t.total_epochs = int(get_int("total_epochs"));
    t.iterations_per_epoch = int(get_int("iterations_per_epoch"));
    t.base_lr = get_double("base_lr");
    t.momentum = get_double("momentum");
    t.nesterov = get_bool("nesterov");
    t.lr_halving_period = int(get_int("lr_halving_period"));
    t.consistency_weight = get_double("consistency_weight");
    t.consistency_ramp_epochs = int(get_int("consistency_ramp_epochs"));
    const auto& l = raw("loss");
    if (l == "rs")
      t.loss = LossKind::rs;
    else if (l == "dice_ce")
      t.loss = LossKind::dice_ce;
    else
      throw ConfigError("config key 'loss': expected rs|dice_ce, got '" + l + "'");
    t.loss_params = loss_params();
    t.cutmix_r_min = get_double("cutmix_ratio_min");
    t.cutmix_r_max = get_double("cutmix_ratio_max");
    t.unlabeled_pairs_per_iter = int(get_int("unlabeled_pairs_per_iter"));
    t.seed = std::uint64_t(get_int("seed"));
    t.checkpoint_period = int(get_int("checkpoint_period"));
    t.crop_pseudo_warmup_epochs = int(get_int("crop_pseudo_warmup_epochs"));
    t.crop_pseudo_refresh_epochs = int(get_int("crop_pseudo_refresh_epochs"));
    t.literal_eq3 = get_bool("literal_eq3");
    const auto& dn = raw("deploy_net");
    if (dn != "a" && dn != "b") throw ConfigError("config key 'deploy_net': expected a|b");
    t.deploy_net_b = dn == "b";
    t.clip_lo_pct = get_double("clip_lo_pct");
    t.clip_hi_pct = get_double("clip_hi_pct");
    return t;
  }

  InferenceConfig inference() const {
    InferenceConfig c;
    c.patch_size = get_shape("patch_size");
    c.overlap = get_double("overlap");
    c.gaussian_sigma_scale = get_double("sigma_scale");
    const auto& t = raw("tta");
    if (t == "none")
      c.tta = TtaMode::none;
    else if (t == "flips3")
      c.tta = TtaMode::flips3;
    else
      throw ConfigError("config key 'tta': expected none|flips3, got '" + t + "'");
    const auto& f = raw("fusion");
    if (f == "full_prob")
      c.accumulation = Accumulation::full_prob;
    else if (f == "label_only")
      c.accumulation = Accumulation::label_only;
    else
      throw ConfigError("config key 'fusion': expected full_prob|label_only, got '" + f + "'");
    c.target_spacing = get_spacing("target_spacing");
    c.resample_back = get_bool("resample_back");
    c.clip_lo_pct = get_double("clip_lo_pct");
    c.clip_hi_pct = get_double("clip_hi_pct");
    c.prob_voxel_budget = get_int("prob_voxel_budget");
    return c;
  }

  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    std::stringstream ss(raw("class_names"));
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) out.push_back(tok);
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace voxseg
