#pragma once

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "retina/checkpoint.hpp"
#include "retina/core.hpp"
#include "retina/data.hpp"
#include "retina/geometry.hpp"
#include "retina/image.hpp"
#include "retina/keypoints.hpp"
#include "retina/losses.hpp"
#include "retina/nn/model.hpp"

namespace retina {

/// A preprocessed training image with its annotated keypoints.
struct AnnotatedSample {
  std::string id;
  GrayImage image;
  std::vector<Point2> keypoints;
};

/// Loads annotation files, resolves their images relative to each file, and
/// preprocesses them.
inline std::vector<AnnotatedSample> load_samples(const std::vector<fs::path>& annotation_paths,
                                                 const PreprocessConfig& pre,
                                                 std::vector<std::string>* warnings = nullptr) {
  std::vector<AnnotatedSample> out;
  for (const auto& path : annotation_paths) {
    const data::AnnotationFile a = data::load_annotations(path, warnings);
    AnnotatedSample s;
    s.id = a.image_id;
    const RawImage raw = read_image(path.parent_path() / a.image_path);
    if (raw.width != a.width || raw.height != a.height)
      fail(ErrorKind::ShapeMismatch, path.string() + ": annotation size " + std::to_string(a.width) + "x" +
                                         std::to_string(a.height) + " differs from the image");
    s.image = preprocess(raw, pre);
    s.keypoints = a.points();
    out.push_back(std::move(s));
  }
  return out;
}

enum class OptimizerKind { Adam, Sgd };

struct TrainConfig {
  int epochs = 5;
  int max_steps = 0;           // 0: no cap beyond epochs
  int batch_size = 1;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double momentum = 0.9;       // SGD
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 1;
  double sigma = 1.5;
  double margin = 1.0;
  double dice_epsilon = 1e-6;
  std::optional<double> dropout_rate;  // overrides the student spec when set
  AugmentParams augment;
  losses::LossWeights weights;
  int checkpoint_every = 0;    // epochs; 0 disables periodic checkpoints
  fs::path checkpoint_path;    // periodic and last-good checkpoints
  double desc_threshold = 0.3;
  double desc_window = 4.0;
  int desc_max_keypoints = 128;
  bool log_wall_time = false;

  void validate() const {
    auto bad = [](const std::string& m) { fail(ErrorKind::InvalidArgument, "train config: " + m); };
    if (epochs < 1) bad("epochs must be >= 1");
    if (max_steps < 0) bad("max_steps must be >= 0");
    if (batch_size < 1) bad("batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) bad("learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) bad("momentum must be in [0,1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) bad("betas must be in [0,1)");
    if (!(adam_epsilon > 0.0)) bad("adam_epsilon must be > 0");
    if (!(sigma > 0.0)) bad("sigma must be > 0");
    if (!(margin >= 0.0)) bad("margin_m must be >= 0");
    if (!(dice_epsilon > 0.0)) bad("dice_epsilon must be > 0");
    if (dropout_rate && !(*dropout_rate >= 0.0 && *dropout_rate < 1.0)) bad("dropout_rate must be in [0,1)");
    if (checkpoint_every < 0) bad("checkpoint_every must be >= 0");
    if (desc_max_keypoints < 2) bad("desc_max_keypoints must be >= 2");
    augment.validate();
  }

  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "epochs=" << epochs << ";max_steps=" << max_steps << ";batch=" << batch_size
       << ";lr=" << learning_rate << ";opt=" << (optimizer == OptimizerKind::Adam ? "adam" : "sgd")
       << ";mom=" << momentum << ";b1=" << beta1 << ";b2=" << beta2 << ";aeps=" << adam_epsilon
       << ";seed=" << seed << ";sigma=" << sigma << ";m=" << margin << ";deps=" << dice_epsilon
       << ";drop=" << (dropout_rate ? *dropout_rate : -1.0) << ";rot=" << augment.max_rotation
       << ";tr=" << augment.max_translation << ";s=" << augment.scale_min << "," << augment.scale_max
       << ";persp=" << augment.max_perspective << ";w=" << weights.clf << "," << weights.clf_rkd << ","
       << weights.geo << "," << weights.des << "," << weights.des_rkd << ";dk=" << desc_threshold << ","
       << desc_window << "," << desc_max_keypoints;
    return os.str();
  }

  std::string hash() const { return hex64(fnv1a(canonical())); }
};

struct TrainRecord {
  int step = 0;
  int epoch = 0;
  std::string split = "train";
  losses::LossBreakdown losses;
  std::optional<double> wall_time;  // seconds since the run started
};

/// JSON-lines training log; every record carries the config hash.
struct TrainLog {
  std::string config_hash;
  std::vector<TrainRecord> records;

  static nlohmann::json record_json(const TrainRecord& r, const std::string& config_hash) {
    nlohmann::json j{{"step", r.step},
                     {"epoch", r.epoch},
                     {"split", r.split},
                     {"config_hash", config_hash},
                     {"l_clf", r.losses.l_clf},
                     {"l_clf_rkd", r.losses.l_clf_rkd},
                     {"l_geo", r.losses.l_geo},
                     {"l_det", r.losses.l_det},
                     {"l_des", r.losses.l_des},
                     {"l_des_rkd", r.losses.l_des_rkd},
                     {"l_Des", r.losses.l_Des},
                     {"total", r.losses.total}};
    if (r.wall_time) j["wall_time"] = *r.wall_time;
    return j;
  }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records) out += record_json(r, config_hash).dump() + "\n";
    return out;
  }

  std::vector<const TrainRecord*> split(const std::string& name) const {
    std::vector<const TrainRecord*> out;
    for (const auto& r : records)
      if (r.split == name) out.push_back(&r);
    return out;
  }
};

struct TrainResult {
  nn::ModelParams params;
  TrainLog log;
};

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  /// Updates params in place. Values stay representable in float32 so
  /// checkpoints round-trip exactly.
  void step(nn::ModelParams& params, const std::map<std::string, nn::Tensor>& grads) {
    ++t_;
    for (auto& [name, p] : params.tensors) {
      auto g = grads.find(name);
      if (g == grads.end()) continue;
      auto& m = m_[name];
      if (m.empty()) m.assign(p.size(), 0.0);
      if (cfg_.optimizer == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = cfg_.momentum * m[i] + g->second.data[i];
          p.data[i] = static_cast<float>(p.data[i] - cfg_.learning_rate * m[i]);
        }
        continue;
      }
      auto& v = v_[name];
      if (v.empty()) v.assign(p.size(), 0.0);
      const double c1 = 1.0 - std::pow(cfg_.beta1, t_), c2 = 1.0 - std::pow(cfg_.beta2, t_);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g->second.data[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double upd = cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_epsilon);
        p.data[i] = static_cast<float>(p.data[i] - upd);
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop

/// A frozen model whose outputs serve as distillation targets.
struct TeacherRef {
  const nn::ModelSpec* spec = nullptr;
  const nn::ModelParams* params = nullptr;
};

namespace detail {

inline void accumulate(std::map<std::string, nn::Tensor>& into, const std::map<std::string, nn::Tensor>& g) {
  for (const auto& [name, t] : g) {
    auto it = into.find(name);
    if (it == into.end()) {
      into.emplace(name, t);
      continue;
    }
    for (std::size_t i = 0; i < t.size(); ++i) it->second.data[i] += t.data[i];
  }
}

inline bool grads_finite(const std::map<std::string, nn::Tensor>& g) {
  for (const auto& [_, t] : g)
    if (!t.all_finite()) return false;
  return true;
}

/// Keypoints for the descriptor losses: NMS over the smoothed labels, which
/// recovers the annotated points at pixel resolution.
inline std::vector<Point2> descriptor_keypoints(const nn::Tensor& labels, const TrainConfig& cfg) {
  return nms_extract(labels, cfg.desc_threshold, cfg.desc_window, cfg.desc_max_keypoints, false).locations();
}

}  // namespace detail

/// Loss breakdown and parameter gradients for one sample.
struct StepResult {
  losses::LossBreakdown losses;
  std::map<std::string, nn::Tensor> grads;
};

/// One training sample: forward I and its augmented copy I' = warp(I, H),
/// then l_clf + l_geo + l_des, plus l_clf^RKD + l_des^RKD against `teacher`
/// when given.
inline StepResult sample_step(const nn::ModelSpec& spec, const nn::ModelParams& params,
                              const AnnotatedSample& sample, const TrainConfig& cfg,
                              const TeacherRef* teacher, std::uint64_t seed, bool need_grad = true) {
  const int h = spec.input_height, w = spec.input_width;
  if (sample.image.width != w || sample.image.height != h)
    fail(ErrorKind::ShapeMismatch, "sample " + sample.id + " is " + std::to_string(sample.image.width) + "x" +
                                       std::to_string(sample.image.height) + ", model expects " +
                                       std::to_string(w) + "x" + std::to_string(h));
  const Homography hom = sample_homography(cfg.augment, w, h, derive_seed(seed, "augment"));
  const GrayImage augmented = warp_image(sample.image, hom);

  nn::ForwardTape f0 = nn::forward(spec, params, nn::image_tensor(sample.image), true,
                                   derive_seed(seed, "drop0"), need_grad);
  nn::ForwardTape f1 = nn::forward(spec, params, nn::image_tensor(augmented), true,
                                   derive_seed(seed, "drop1"), need_grad);
  const nn::ModelOutput o0 = nn::output_of(f0), o1 = nn::output_of(f1);
  const nn::Tensor labels = losses::smooth_labels(sample.keypoints, h, w, cfg.sigma);

  nn::Tensor gp0(o0.heatmap.shape), gp1(o1.heatmap.shape);
  nn::Tensor gd0(o0.descriptors.shape), gd1(o1.descriptors.shape);
  nn::Tensor* gp0p = need_grad ? &gp0 : nullptr;
  nn::Tensor* gp1p = need_grad ? &gp1 : nullptr;
  nn::Tensor* gd0p = need_grad ? &gd0 : nullptr;
  nn::Tensor* gd1p = need_grad ? &gd1 : nullptr;
  const auto& wts = cfg.weights;

  StepResult r;
  auto& b = r.losses;
  b.l_clf = losses::l_clf(o0.heatmap, labels, cfg.dice_epsilon, gp0p, wts.clf);
  b.l_geo = losses::l_geo(o0.heatmap, o1.heatmap, hom, cfg.dice_epsilon, gp0p, gp1p, wts.geo).value;

  const std::vector<Point2> kps = detail::descriptor_keypoints(labels, cfg);
  const std::uint64_t tseed = derive_seed(seed, "triplet");
  try {
    b.l_des = losses::triplet_descriptor_loss(o0.descriptors, o1.descriptors, kps, hom, cfg.margin, tseed,
                                              gd0p, gd1p, wts.des)
                  .value;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::DegenerateInput) throw;
  }

  if (teacher) {
    const nn::ModelOutput t = nn::infer(*teacher->spec, *teacher->params, sample.image);
    b.l_clf_rkd = losses::l_clf_rkd(o0.heatmap, t.heatmap, cfg.dice_epsilon, gp0p, wts.clf_rkd);
    try {
      b.l_des_rkd = losses::l_des_rkd(o0.descriptors, t.descriptors, kps, cfg.margin, tseed, gd0p, wts.des_rkd)
                        .value;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateInput) throw;
    }
  }
  b.finalize(wts);

  if (need_grad) {
    r.grads = nn::backward(f0, gp0, gd0);
    detail::accumulate(r.grads, nn::backward(f1, gp1, gd1));
  }
  return r;
}

/// Validation losses: eval-mode l_clf against the labels and, with a
/// teacher, l_clf^RKD. Averaged over the samples.
inline losses::LossBreakdown validate_model(const nn::ModelSpec& spec, const nn::ModelParams& params,
                                            const std::vector<AnnotatedSample>& samples,
                                            const TrainConfig& cfg, const TeacherRef* teacher) {
  losses::LossBreakdown mean;
  if (samples.empty()) return mean;
  for (const auto& s : samples) {
    const nn::ModelOutput o = nn::infer(spec, params, s.image);
    const nn::Tensor labels = losses::smooth_labels(s.keypoints, spec.input_height, spec.input_width, cfg.sigma);
    mean.l_clf += losses::l_clf(o.heatmap, labels, cfg.dice_epsilon);
    if (teacher) {
      const nn::ModelOutput t = nn::infer(*teacher->spec, *teacher->params, s.image);
      mean.l_clf_rkd += losses::l_clf_rkd(o.heatmap, t.heatmap, cfg.dice_epsilon);
    }
  }
  mean.l_clf /= static_cast<double>(samples.size());
  mean.l_clf_rkd /= static_cast<double>(samples.size());
  mean.finalize(cfg.weights);
  return mean;
}

/// Generic loop shared by teacher and student training. Samples are visited
/// in a seed-determined shuffled order each epoch; gradients are averaged
/// over `batch_size` samples per optimizer step. A non-finite loss or
/// gradient aborts with ErrorKind::Divergence after writing the last good
/// parameters to cfg.checkpoint_path (when set).
inline TrainResult train_model(const nn::ModelSpec& spec, nn::ModelParams params,
                               const std::vector<AnnotatedSample>& train,
                               const std::vector<AnnotatedSample>& val, const TrainConfig& cfg,
                               const TeacherRef* teacher = nullptr,
                               const std::function<void(const TrainRecord&, const TrainLog&)>& on_record = {}) {
  cfg.validate();
  spec.validate();
  nn::check_params(spec, params);
  require(!train.empty(), ErrorKind::InvalidArgument, "training needs at least one sample");

  TrainResult res;
  res.log.config_hash = cfg.hash();
  Optimizer opt(cfg);
  const auto start = std::chrono::steady_clock::now();
  auto emit = [&](TrainRecord rec) {
    if (cfg.log_wall_time)
      rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.log.records.push_back(rec);
    if (on_record) on_record(res.log.records.back(), res.log);
  };

  int step = 0;
  bool done = false;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, "epoch" + std::to_string(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    for (std::size_t at = 0; at < order.size() && !done; at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
      std::map<std::string, nn::Tensor> grads;
      losses::LossBreakdown mean;
      for (std::size_t k = at; k < end; ++k) {
        const std::uint64_t s = derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(step)), k - at);
        StepResult sr = sample_step(spec, params, train[order[k]], cfg, teacher, s);
        detail::accumulate(grads, sr.grads);
        mean.l_clf += sr.losses.l_clf;
        mean.l_clf_rkd += sr.losses.l_clf_rkd;
        mean.l_geo += sr.losses.l_geo;
        mean.l_des += sr.losses.l_des;
        mean.l_des_rkd += sr.losses.l_des_rkd;
      }
      const double inv = 1.0 / static_cast<double>(end - at);
      mean.l_clf *= inv;
      mean.l_clf_rkd *= inv;
      mean.l_geo *= inv;
      mean.l_des *= inv;
      mean.l_des_rkd *= inv;
      mean.finalize(cfg.weights);
      for (auto& [_, g] : grads)
        for (double& v : g.data) v *= inv;

      if (!std::isfinite(mean.total) || !detail::grads_finite(grads)) {
        std::string where;
        if (!cfg.checkpoint_path.empty()) {
          save_checkpoint(spec, params, cfg.checkpoint_path);
          where = ", last good parameters saved to " + cfg.checkpoint_path.string();
        }
        fail(ErrorKind::Divergence, "non-finite loss at step " + std::to_string(step) + where);
      }
      opt.step(params, grads);
      emit({step, epoch, "train", mean, std::nullopt});
      ++step;
      if (cfg.max_steps > 0 && step >= cfg.max_steps) done = true;
    }
    if (!val.empty()) emit({step, epoch, "val", validate_model(spec, params, val, cfg, teacher), std::nullopt});
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() && (epoch + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(spec, params, cfg.checkpoint_path);
  }
  res.params = std::move(params);
  return res;
}

/// Supervised teacher training: l_clf + l_geo + l_des.
inline TrainResult train_teacher(const std::vector<AnnotatedSample>& train, const nn::ModelSpec& spec,
                                 const TrainConfig& cfg, const std::vector<AnnotatedSample>& val = {},
                                 const std::function<void(const TrainRecord&, const TrainLog&)>& on_record = {}) {
  require(spec.kind == nn::ModelKind::Teacher, ErrorKind::InvalidArgument, "train_teacher needs a teacher spec");
  return train_model(spec, nn::init_params(spec, derive_seed(cfg.seed, "init")), train, val, cfg, nullptr,
                     on_record);
}

inline nn::ModelSpec with_dropout(nn::ModelSpec spec, const TrainConfig& cfg) {
  if (cfg.dropout_rate) spec.dropout_rate = *cfg.dropout_rate;
  return spec;
}

/// Student training without a teacher: the same objective as the teacher.
inline TrainResult train_student_scratch(const std::vector<AnnotatedSample>& train, const nn::ModelSpec& student_spec,
                                         const TrainConfig& cfg, const std::vector<AnnotatedSample>& val = {},
                                         const std::function<void(const TrainRecord&, const TrainLog&)>& on_record = {}) {
  require(student_spec.kind == nn::ModelKind::Student, ErrorKind::InvalidArgument,
          "student training needs a student spec");
  const nn::ModelSpec spec = with_dropout(student_spec, cfg);
  return train_model(spec, nn::init_params(spec, derive_seed(cfg.seed, "init")), train, val, cfg, nullptr,
                     on_record);
}

/// Reverse knowledge distillation: the student additionally matches the
/// frozen teacher's heatmap (l_clf^RKD) and descriptors (l_des^RKD). The
/// teacher runs in eval mode and is never modified.
inline TrainResult distill(const std::vector<AnnotatedSample>& train, const nn::ModelSpec& teacher_spec,
                           const nn::ModelParams& teacher_params, const nn::ModelSpec& student_spec,
                           nn::ModelParams student_init, const TrainConfig& cfg,
                           const std::vector<AnnotatedSample>& val = {},
                           const std::function<void(const TrainRecord&, const TrainLog&)>& on_record = {}) {
  nn::check_params(teacher_spec, teacher_params);
  if (teacher_spec.input_height != student_spec.input_height || teacher_spec.input_width != student_spec.input_width)
    fail(ErrorKind::ShapeMismatch, "teacher and student input sizes differ");
  const TeacherRef t{&teacher_spec, &teacher_params};
  return train_model(student_spec, std::move(student_init), train, val, cfg, &t, on_record);
}

inline TrainResult train_student_rkd(const std::vector<AnnotatedSample>& train, const nn::ModelSpec& teacher_spec,
                                     const nn::ModelParams& teacher_params, const nn::ModelSpec& student_spec,
                                     const TrainConfig& cfg, const std::vector<AnnotatedSample>& val = {},
                                     const std::function<void(const TrainRecord&, const TrainLog&)>& on_record = {}) {
  require(teacher_spec.kind == nn::ModelKind::Teacher, ErrorKind::InvalidArgument,
          "distillation needs a teacher checkpoint");
  require(student_spec.kind == nn::ModelKind::Student, ErrorKind::InvalidArgument,
          "distillation needs a student spec");
  const nn::ModelSpec spec = with_dropout(student_spec, cfg);
  return distill(train, teacher_spec, teacher_params, spec, nn::init_params(spec, derive_seed(cfg.seed, "init")),
                 cfg, val, on_record);
}

}  // namespace retina
