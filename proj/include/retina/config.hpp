#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "retina/core.hpp"
#include "retina/data.hpp"
#include "retina/geometry.hpp"
#include "retina/image.hpp"
#include "retina/keypoints.hpp"
#include "retina/nn/model.hpp"
#include "retina/registration.hpp"
#include "retina/training.hpp"

namespace retina {

enum class ValueType { Double, Int, Bool, String };

struct KeyInfo {
  ValueType type;
  const char* help;
};

/// Every key accepted in a config file or via --set.
inline const std::map<std::string, KeyInfo>& config_registry() {
  static const std::map<std::string, KeyInfo> reg = {
      {"seed", {ValueType::Int, "global seed"}},
      // preprocessing
      {"clahe_clip_limit", {ValueType::Double, "CLAHE clip limit"}},
      {"clahe_tile_rows", {ValueType::Int, "CLAHE tile grid rows"}},
      {"clahe_tile_cols", {ValueType::Int, "CLAHE tile grid columns"}},
      {"gamma", {ValueType::Double, "gamma exponent"}},
      // keypoints and matching
      {"detection_threshold", {ValueType::Double, "heatmap threshold for NMS"}},
      {"nms_window", {ValueType::Double, "NMS suppression radius, pixels"}},
      {"max_keypoints", {ValueType::Int, "keypoint cap per image"}},
      {"subpixel", {ValueType::Bool, "quadratic subpixel refinement"}},
      {"ratio_threshold", {ValueType::Double, "nearest/second-nearest ratio"}},
      {"mutual", {ValueType::Bool, "require mutual nearest neighbours"}},
      // estimation and evaluation
      {"inlier_threshold", {ValueType::Double, "RANSAC inlier threshold, pixels"}},
      {"ransac_iterations", {ValueType::Int, "RANSAC iteration cap"}},
      {"auc_t_max", {ValueType::Double, "upper end of the AUC threshold sweep, pixels"}},
      // model
      {"base_channels", {ValueType::Int, "teacher/decoder base channel count"}},
      {"descriptor_dim", {ValueType::Int, "descriptor length d"}},
      {"lk_block", {ValueType::Bool, "multi-kernel encoder convolutions"}},
      {"embed_dim", {ValueType::Int, "student token width"}},
      {"window_size", {ValueType::Int, "student attention window, tokens"}},
      {"heads", {ValueType::Int, "student attention heads"}},
      {"depth", {ValueType::Int, "student blocks per stage"}},
      {"input_size", {ValueType::Int, "square model input size"}},
      // losses
      {"sigma", {ValueType::Double, "label smoothing sigma, pixels"}},
      {"margin_m", {ValueType::Double, "triplet margin"}},
      {"dice_epsilon", {ValueType::Double, "dice smoothing"}},
      {"loss_weights.clf", {ValueType::Double, "weight of l_clf"}},
      {"loss_weights.clf_rkd", {ValueType::Double, "weight of l_clf_rkd"}},
      {"loss_weights.geo", {ValueType::Double, "weight of l_geo"}},
      {"loss_weights.des", {ValueType::Double, "weight of l_des"}},
      {"loss_weights.des_rkd", {ValueType::Double, "weight of l_des_rkd"}},
      // training
      {"epochs", {ValueType::Int, "training epochs"}},
      {"max_steps", {ValueType::Int, "optimizer step cap, 0 for none"}},
      {"batch_size", {ValueType::Int, "samples per optimizer step"}},
      {"learning_rate", {ValueType::Double, "step size"}},
      {"optimizer", {ValueType::String, "adam or sgd"}},
      {"momentum", {ValueType::Double, "SGD momentum"}},
      {"beta1", {ValueType::Double, "Adam beta1"}},
      {"beta2", {ValueType::Double, "Adam beta2"}},
      {"adam_epsilon", {ValueType::Double, "Adam epsilon"}},
      {"dropout_rate", {ValueType::Double, "student dropout"}},
      {"checkpoint_every", {ValueType::Int, "epochs between checkpoints, 0 for none"}},
      {"log_wall_time", {ValueType::Bool, "add wall time to log records"}},
      {"desc_window", {ValueType::Double, "NMS radius for descriptor-loss keypoints"}},
      {"desc_max_keypoints", {ValueType::Int, "cap on descriptor-loss keypoints"}},
      {"augment.max_rotation", {ValueType::Double, "degrees"}},
      {"augment.max_translation", {ValueType::Double, "fraction of image size"}},
      {"augment.scale_min", {ValueType::Double, "lower scale bound"}},
      {"augment.scale_max", {ValueType::Double, "upper scale bound"}},
      {"augment.max_perspective", {ValueType::Double, "perspective jitter"}},
      // synthetic data
      {"synth.image_size", {ValueType::Int, "square synthetic image size"}},
      {"synth.n_images", {ValueType::Int, "number of images"}},
      {"synth.n_vessels", {ValueType::Int, "trunk vessels per image"}},
      {"synth.vessel_width_min", {ValueType::Double, "pixels"}},
      {"synth.vessel_width_max", {ValueType::Double, "pixels"}},
      {"synth.noise", {ValueType::Double, "background noise sigma"}},
      {"synth.n_pairs", {ValueType::Int, "registration pairs"}},
      {"synth.val_fraction", {ValueType::Double, "share of images in the val split"}},
      {"synth.max_rotation", {ValueType::Double, "pair warp, degrees"}},
      {"synth.max_translation", {ValueType::Double, "pair warp, fraction of size"}},
      {"synth.scale_min", {ValueType::Double, "pair warp lower scale"}},
      {"synth.scale_max", {ValueType::Double, "pair warp upper scale"}},
      {"synth.max_perspective", {ValueType::Double, "pair warp perspective jitter"}},
  };
  return reg;
}

/// Validated key/value settings, merged from a config file and overrides.
class GlobalConfig {
 public:
  void set(const std::string& key, const std::string& value, const std::string& where = "") {
    const auto& reg = config_registry();
    auto it = reg.find(key);
    const std::string prefix = where.empty() ? "" : where + ": ";
    if (it == reg.end()) fail(ErrorKind::Schema, prefix + "unknown config key '" + key + "'");
    check_value(key, it->second.type, value, prefix);
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::optional<double> get_double(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return std::stod(it->second);
  }
  std::optional<long long> get_int(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return std::stoll(it->second);
  }
  std::optional<bool> get_bool(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second == "true" || it->second == "1" || it->second == "yes" || it->second == "on";
  }
  std::optional<std::string> get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  template <typename T>
  void apply(const std::string& key, T& target) const {
    if constexpr (std::is_same_v<T, bool>) {
      if (auto v = get_bool(key)) target = *v;
    } else if constexpr (std::is_integral_v<T>) {
      if (auto v = get_int(key)) target = static_cast<T>(*v);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (auto v = get_double(key)) target = static_cast<T>(*v);
    } else {
      if (auto v = get_string(key)) target = *v;
    }
  }

 private:
  static void check_value(const std::string& key, ValueType type, const std::string& v, const std::string& prefix) {
    auto bad = [&](const char* what) {
      fail(ErrorKind::Schema, prefix + "config key '" + key + "' expects " + what + ", got '" + v + "'");
    };
    switch (type) {
      case ValueType::Double: {
        try {
          std::size_t used = 0;
          const double d = std::stod(v, &used);
          if (used != v.size() || !std::isfinite(d)) bad("a finite number");
        } catch (const std::exception&) {
          bad("a number");
        }
        break;
      }
      case ValueType::Int: {
        long long x = 0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
        if (ec != std::errc() || p != v.data() + v.size()) bad("an integer");
        break;
      }
      case ValueType::Bool:
        if (v != "true" && v != "false" && v != "1" && v != "0" && v != "yes" && v != "no" && v != "on" &&
            v != "off")
          bad("a boolean");
        break;
      case ValueType::String:
        if (v.empty()) bad("a non-empty string");
        break;
    }
  }

  std::map<std::string, std::string> values_;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Parses `key = value` lines; blank lines and '#' comments are skipped.
inline void parse_config_text(GlobalConfig& cfg, const std::string& text, const std::string& name) {
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = name + ":" + std::to_string(n);
    if (eq == std::string::npos) fail(ErrorKind::Format, where + ": expected 'key = value'");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
  }
}

inline GlobalConfig load_config(const std::filesystem::path& path) {
  GlobalConfig cfg;
  parse_config_text(cfg, data::read_text(path), path.string());
  return cfg;
}

/// Applies `key=value` overrides on top of the file settings.
inline void apply_overrides(GlobalConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(ErrorKind::InvalidArgument, "--set expects key=value, got '" + s + "'");
    cfg.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)), "--set");
  }
}

// ---------------------------------------------------------------------------
// Typed views

inline PreprocessConfig preprocess_config(const GlobalConfig& g) {
  PreprocessConfig p;
  g.apply("clahe_clip_limit", p.clahe_clip_limit);
  g.apply("clahe_tile_rows", p.clahe_tile_rows);
  g.apply("clahe_tile_cols", p.clahe_tile_cols);
  g.apply("gamma", p.gamma);
  p.validate();
  return p;
}

inline KeypointConfig keypoint_config(const GlobalConfig& g) {
  KeypointConfig k;
  g.apply("detection_threshold", k.threshold);
  g.apply("nms_window", k.nms_window);
  g.apply("max_keypoints", k.max_keypoints);
  g.apply("subpixel", k.subpixel);
  g.apply("ratio_threshold", k.ratio);
  g.apply("mutual", k.mutual);
  return k;
}

inline RegisterConfig register_config(const GlobalConfig& g) {
  RegisterConfig r;
  r.preprocess = preprocess_config(g);
  r.keypoints = keypoint_config(g);
  g.apply("inlier_threshold", r.ransac.inlier_threshold);
  g.apply("ransac_iterations", r.ransac.iterations);
  g.apply("auc_t_max", r.auc_t_max);
  g.apply("seed", r.seed);
  return r;
}

inline nn::ModelSpec model_spec(const GlobalConfig& g, nn::ModelKind kind) {
  nn::ModelSpec s = kind == nn::ModelKind::Teacher ? nn::ModelSpec::teacher() : nn::ModelSpec::student();
  g.apply("base_channels", s.base_channels);
  g.apply("descriptor_dim", s.descriptor_dim);
  g.apply("lk_block", s.lk_block);
  g.apply("embed_dim", s.embed_dim);
  g.apply("window_size", s.window_size);
  g.apply("heads", s.heads);
  g.apply("depth", s.depth);
  if (kind == nn::ModelKind::Student) g.apply("dropout_rate", s.dropout_rate);
  g.apply("input_size", s.input_height);
  g.apply("input_size", s.input_width);
  s.validate();
  return s;
}

inline TrainConfig train_config(const GlobalConfig& g) {
  TrainConfig t;
  g.apply("epochs", t.epochs);
  g.apply("max_steps", t.max_steps);
  g.apply("batch_size", t.batch_size);
  g.apply("learning_rate", t.learning_rate);
  if (auto o = g.get_string("optimizer")) {
    if (*o == "adam") t.optimizer = OptimizerKind::Adam;
    else if (*o == "sgd") t.optimizer = OptimizerKind::Sgd;
    else fail(ErrorKind::Schema, "config key 'optimizer' expects adam or sgd, got '" + *o + "'");
  }
  g.apply("momentum", t.momentum);
  g.apply("beta1", t.beta1);
  g.apply("beta2", t.beta2);
  g.apply("adam_epsilon", t.adam_epsilon);
  g.apply("seed", t.seed);
  g.apply("sigma", t.sigma);
  g.apply("margin_m", t.margin);
  g.apply("dice_epsilon", t.dice_epsilon);
  if (auto d = g.get_double("dropout_rate")) t.dropout_rate = *d;
  g.apply("augment.max_rotation", t.augment.max_rotation);
  g.apply("augment.max_translation", t.augment.max_translation);
  g.apply("augment.scale_min", t.augment.scale_min);
  g.apply("augment.scale_max", t.augment.scale_max);
  g.apply("augment.max_perspective", t.augment.max_perspective);
  g.apply("loss_weights.clf", t.weights.clf);
  g.apply("loss_weights.clf_rkd", t.weights.clf_rkd);
  g.apply("loss_weights.geo", t.weights.geo);
  g.apply("loss_weights.des", t.weights.des);
  g.apply("loss_weights.des_rkd", t.weights.des_rkd);
  g.apply("checkpoint_every", t.checkpoint_every);
  g.apply("log_wall_time", t.log_wall_time);
  g.apply("desc_window", t.desc_window);
  g.apply("desc_max_keypoints", t.desc_max_keypoints);
  t.validate();
  return t;
}

inline data::SynthConfig synth_config(const GlobalConfig& g) {
  data::SynthConfig s;
  g.apply("seed", s.seed);
  g.apply("synth.image_size", s.image_size);
  g.apply("synth.n_images", s.n_images);
  g.apply("synth.n_vessels", s.n_vessels);
  g.apply("synth.vessel_width_min", s.vessel_width_min);
  g.apply("synth.vessel_width_max", s.vessel_width_max);
  g.apply("synth.noise", s.noise);
  g.apply("synth.n_pairs", s.n_pairs);
  g.apply("synth.val_fraction", s.val_fraction);
  g.apply("synth.max_rotation", s.pair_augment.max_rotation);
  g.apply("synth.max_translation", s.pair_augment.max_translation);
  g.apply("synth.scale_min", s.pair_augment.scale_min);
  g.apply("synth.scale_max", s.pair_augment.scale_max);
  g.apply("synth.max_perspective", s.pair_augment.max_perspective);
  s.validate();
  return s;
}

}  // namespace retina
