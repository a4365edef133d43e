#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "retina/checkpoint.hpp"
#include "retina/config.hpp"
#include "retina/core.hpp"
#include "retina/data.hpp"
#include "retina/image.hpp"
#include "retina/plot.hpp"
#include "retina/registration.hpp"
#include "retina/training.hpp"

namespace retina::cmd {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Options shared by every command: config file, overrides, seed.
struct Common {
  std::optional<fs::path> config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  GlobalConfig resolve() const {
    GlobalConfig g = config_path ? load_config(*config_path) : GlobalConfig{};
    apply_overrides(g, sets);
    if (seed) g.set("seed", std::to_string(*seed), "--seed");
    return g;
  }
};

// ---------------------------------------------------------------------------
// preprocess

struct PreprocessResult {
  std::size_t written = 0;
};

/// Preprocesses every PNG/PGM in `in_dir` into `out_dir/<stem>.png`.
inline PreprocessResult preprocess_dir(const fs::path& in_dir, const fs::path& out_dir, const Common& c) {
  const PreprocessConfig pre = preprocess_config(c.resolve());
  if (!fs::is_directory(in_dir)) fail(ErrorKind::Io, in_dir.string() + ": not a directory");
  std::vector<fs::path> inputs;
  for (const auto& e : fs::directory_iterator(in_dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".png" || ext == ".pgm")) inputs.push_back(e.path());
  }
  std::sort(inputs.begin(), inputs.end());
  fs::create_directories(out_dir);
  PreprocessResult r;
  for (const auto& p : inputs) {
    GrayImage g;
    try {
      g = preprocess(read_image(p), pre);
    } catch (const Error& e) {
      fail(e.kind(), p.string() + ": " + e.what());
    }
    write_png(g, out_dir / (p.stem().string() + ".png"));
    ++r.written;
  }
  return r;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  nn::ModelKind kind = nn::ModelKind::Teacher;
  fs::path manifest;
  fs::path out;
  std::optional<fs::path> teacher;  // student with distillation
  bool scratch = false;             // student without a teacher
  std::optional<fs::path> log;
};

inline TrainResult train(const TrainOptions& o, const Common& c) {
  const GlobalConfig g = c.resolve();
  TrainConfig cfg = train_config(g);
  if (o.kind == nn::ModelKind::Student && !o.scratch && !o.teacher)
    fail(ErrorKind::InvalidArgument, "student training needs --teacher <checkpoint> (or --scratch)");
  std::optional<Checkpoint> teacher;
  if (o.kind == nn::ModelKind::Student && o.teacher) {
    if (!fs::exists(*o.teacher)) fail(ErrorKind::Io, "teacher checkpoint " + o.teacher->string() + " not found");
    teacher = load_checkpoint(*o.teacher);
  }

  const data::TrainManifest m = data::load_train_manifest(o.manifest);
  const PreprocessConfig pre = preprocess_config(g);
  std::vector<std::string> warnings;
  const auto train_set = load_samples(m.train, pre, &warnings);
  const auto val_set = load_samples(m.val, pre, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  require(!train_set.empty(), ErrorKind::InvalidArgument, "manifest has no training samples");

  GlobalConfig sized = g;
  if (!g.has("input_size")) {
    require(train_set.front().image.width == train_set.front().image.height, ErrorKind::InvalidArgument,
            "non-square images need an explicit input_size");
    sized.set("input_size", std::to_string(train_set.front().image.width));
  }
  const nn::ModelSpec spec = model_spec(sized, o.kind);

  std::ofstream log;
  fs::path log_tmp;
  if (o.log) {
    log_tmp = *o.log;
    log_tmp += ".tmp";
    log.open(log_tmp, std::ios::binary | std::ios::trunc);
    if (!log) fail(ErrorKind::Io, "cannot write " + o.log->string());
  }
  auto on_record = [&](const TrainRecord& r, const TrainLog& l) {
    if (log) log << TrainLog::record_json(r, l.config_hash).dump() << "\n" << std::flush;
  };
  cfg.checkpoint_path = o.out;

  TrainResult res;
  if (o.kind == nn::ModelKind::Teacher) {
    res = train_teacher(train_set, spec, cfg, val_set, on_record);
  } else if (teacher) {
    res = train_student_rkd(train_set, teacher->spec, teacher->params, spec, cfg, val_set, on_record);
  } else {
    res = train_student_scratch(train_set, spec, cfg, val_set, on_record);
  }
  save_checkpoint(with_dropout(spec, cfg), res.params, o.out);
  if (o.log) {
    log.close();
    fs::rename(log_tmp, *o.log);
  }
  return res;
}

// ---------------------------------------------------------------------------
// detect / register / evaluate

inline json detect(const fs::path& checkpoint, const fs::path& image, const Common& c) {
  const GlobalConfig g = c.resolve();
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Detector det = model_detector(ck.spec, ck.params, keypoint_config(g));
  const Detection d = det(preprocess(read_image(image), preprocess_config(g)));
  return data::keypoints_to_json(d.keypoints, &d.descriptors);
}

struct RegisterOptions {
  fs::path checkpoint;
  fs::path query;
  fs::path reference;
  std::optional<fs::path> controls;
  std::optional<char> category;
  std::string id;
};

/// Registers one pair. Without a controls file the outcome carries the
/// homography but no error scores.
inline json register_one(const RegisterOptions& o, const Common& c) {
  const GlobalConfig g = c.resolve();
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Detector det = model_detector(ck.spec, ck.params, keypoint_config(g));
  data::PairRecord p;
  p.query_image_path = o.query;
  p.ref_image_path = o.reference;
  p.category = o.category;
  p.id = o.id.empty() ? o.query.stem().string() + "_" + o.reference.stem().string() : o.id;
  if (o.controls) p.control_points = read_correspondences(*o.controls);
  const PairRegistration pr = register_pair_detailed(det, p, register_config(g));
  json matches = json::array();
  for (std::size_t i = 0; i < pr.matches.matches.size(); ++i) {
    const auto& m = pr.matches.matches[i];
    matches.push_back({{"query", m.query},
                       {"reference", m.reference},
                       {"distance", m.distance},
                       {"inlier", i < pr.inliers.size() && pr.inliers[i]}});
  }
  return {{"pair_id", p.id},
          {"query_keypoints", data::keypoints_to_json(pr.matches.query_keypoints)},
          {"reference_keypoints", data::keypoints_to_json(pr.matches.reference_keypoints)},
          {"matches", matches},
          {"registration", to_json(pr.outcome)}};
}

inline EvalReport evaluate(const fs::path& checkpoint, const fs::path& manifest, const Common& c) {
  const GlobalConfig g = c.resolve();
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Detector det = model_detector(ck.spec, ck.params, keypoint_config(g));
  return evaluate_dataset(det, data::load_pair_manifest(manifest), register_config(g));
}

// ---------------------------------------------------------------------------
// plot

inline std::vector<data::AnnotationFile> annotations_from_inputs(const std::vector<fs::path>& inputs) {
  std::vector<data::AnnotationFile> out;
  for (const auto& p : inputs) {
    const json j = data::parse_json(data::read_text(p), p.string());
    if (j.is_object() && j.contains("train")) {
      const auto m = data::load_train_manifest(p);
      for (const auto& a : m.train) out.push_back(data::load_annotations(a));
      for (const auto& a : m.val) out.push_back(data::load_annotations(a));
    } else {
      out.push_back(data::annotation_from_json(j));
    }
  }
  return out;
}

/// Keypoint-count histogram: writes `<out>.svg` and `<out>.csv`.
inline data::KeypointStats plot_distribution(const std::vector<fs::path>& inputs, const fs::path& out,
                                             int bin_width) {
  const auto annotations = annotations_from_inputs(inputs);
  require(!annotations.empty(), ErrorKind::InvalidArgument, "no annotations to plot");
  const auto stats = data::keypoint_stats(annotations, bin_width);
  fs::path svg = out, csv = out;
  data::write_text_atomic(svg.replace_extension(".svg"), plot::keypoint_histogram_svg(stats));
  data::write_text_atomic(csv.replace_extension(".csv"), plot::keypoint_counts_csv(annotations));
  return stats;
}

/// Side-by-side match drawing from a `register` output.
inline void plot_matches(const fs::path& matches_json, const fs::path& query, const fs::path& reference,
                         const fs::path& out) {
  const json j = data::parse_json(data::read_text(matches_json), matches_json.string());
  MatchSet m;
  m.query_keypoints = data::keypoints_from_json(j.at("query_keypoints"));
  m.reference_keypoints = data::keypoints_from_json(j.at("reference_keypoints"));
  std::vector<bool> inliers;
  for (const auto& e : j.at("matches")) {
    const Match mm{e.at("query").get<std::size_t>(), e.at("reference").get<std::size_t>(),
                   e.at("distance").get<double>()};
    if (mm.query >= m.query_keypoints.size() || mm.reference >= m.reference_keypoints.size())
      fail(ErrorKind::Schema, matches_json.string() + ": match index out of range");
    m.matches.push_back(mm);
    inliers.push_back(e.value("inlier", false));
  }
  const RawImage q = read_image(query);
  fs::path svg = out, csv = out;
  data::write_text_atomic(svg.replace_extension(".svg"),
                          plot::matches_svg(m, q.width, q.height, fs::absolute(query).string(),
                                            fs::absolute(reference).string(), inliers));
  data::write_text_atomic(csv.replace_extension(".csv"), plot::matches_csv(m, inliers));
}

// ---------------------------------------------------------------------------
// synth

inline data::SynthDataset synth(const fs::path& out_dir, const Common& c) {
  const data::SynthConfig cfg = synth_config(c.resolve());
  data::SynthDataset ds = data::generate_synthetic(cfg);
  data::write_synthetic(ds, cfg, out_dir);
  return ds;
}

}  // namespace retina::cmd
