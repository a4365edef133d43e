#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
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

namespace retina {

enum class Verdict { Acceptable, Inaccurate };
enum class RegistrationStatus { Failed, Evaluated };

inline std::string to_string(Verdict v) { return v == Verdict::Acceptable ? "acceptable" : "inaccurate"; }
inline std::string to_string(RegistrationStatus s) {
  return s == RegistrationStatus::Failed ? "failed" : "evaluated";
}

inline constexpr double kAcceptMee = 20.0;
inline constexpr double kAcceptMae = 50.0;
inline constexpr std::size_t kMinMatches = 4;

struct RegistrationOutcome {
  std::string pair_id;
  std::optional<char> category;
  RegistrationStatus status = RegistrationStatus::Failed;
  std::size_t n_matches = 0;
  std::size_t n_inliers = 0;
  std::optional<Homography> homography;
  double mee = std::numeric_limits<double>::infinity();
  double mae = std::numeric_limits<double>::infinity();
  Verdict verdict = Verdict::Inaccurate;
  bool scored = false;  // false when no control points were available
  std::string reason;   // why a Failed pair failed
};

/// Median and maximum control-point error of `h`. The median of an even
/// count is the midpoint of the two central errors.
inline std::pair<double, double> mee_mae(const Homography& h, std::span<const Correspondence> controls) {
  require(!controls.empty(), ErrorKind::InvalidArgument, "mee_mae needs at least one control point");
  std::vector<double> e;
  e.reserve(controls.size());
  for (const auto& c : controls) e.push_back(distance(apply(h, c.query), c.reference));
  std::sort(e.begin(), e.end());
  const std::size_t n = e.size();
  const double median = n % 2 ? e[n / 2] : 0.5 * (e[n / 2 - 1] + e[n / 2]);
  return {median, e.back()};
}

inline Verdict classify(double mee, double mae) {
  return mee < kAcceptMee && mae < kAcceptMae ? Verdict::Acceptable : Verdict::Inaccurate;
}

/// Outcome bookkeeping once matching has run. `h` is empty when estimation
/// failed.
inline RegistrationOutcome make_outcome(std::string pair_id, std::optional<char> category,
                                        std::size_t n_matches, std::optional<Homography> h,
                                        std::span<const Correspondence> controls,
                                        std::size_t n_inliers = 0) {
  RegistrationOutcome o;
  o.pair_id = std::move(pair_id);
  o.category = category;
  o.n_matches = n_matches;
  o.n_inliers = n_inliers;
  if (n_matches < kMinMatches) {
    o.reason = "fewer than 4 matches";
    return o;
  }
  if (!h) {
    o.reason = "homography estimation failed";
    return o;
  }
  o.status = RegistrationStatus::Evaluated;
  o.homography = h;
  if (controls.empty()) return o;
  o.scored = true;
  std::tie(o.mee, o.mae) = mee_mae(*h, controls);
  o.verdict = classify(o.mee, o.mae);
  return o;
}

/// Area under the acceptance-rate curve: rate(t) = fraction of pairs with
/// MEE <= t, sampled on t = 0, step, ..., t_max, trapezoid-integrated and
/// divided by t_max. Failed pairs enter as MEE = +inf.
inline double acceptance_auc(std::span<const double> mee, double t_max = 25.0, double step = 1.0) {
  require(!mee.empty(), ErrorKind::InvalidArgument, "acceptance_auc needs at least one pair");
  require(t_max > 0 && step > 0, ErrorKind::InvalidArgument, "acceptance_auc needs positive t_max and step");
  const auto steps = static_cast<long>(std::llround(t_max / step));
  auto rate = [&](double t) {
    std::size_t k = 0;
    for (double m : mee)
      if (m <= t) ++k;
    return static_cast<double>(k) / static_cast<double>(mee.size());
  };
  double area = 0.0;
  double prev = rate(0.0);
  for (long i = 1; i <= steps; ++i) {
    const double cur = rate(static_cast<double>(i) * step);
    area += 0.5 * (prev + cur) * step;
    prev = cur;
  }
  return area / (static_cast<double>(steps) * step);
}

/// Summary in the column order Failed, Inaccurate, Acceptable, AUC-Easy,
/// AUC-Mod, AUC-Hard, mAUC.
struct EvalReport {
  std::size_t n_pairs = 0;
  std::size_t n_failed = 0;
  std::size_t n_inaccurate = 0;
  std::size_t n_acceptable = 0;
  double pct_failed = 0.0;
  double pct_inaccurate = 0.0;
  double pct_acceptable = 0.0;
  std::optional<double> auc_easy;
  std::optional<double> auc_mod;
  std::optional<double> auc_hard;
  std::optional<double> mauc;
  std::vector<RegistrationOutcome> outcomes;
  std::vector<std::string> warnings;
  std::vector<std::string> errors;  // per-pair problems, e.g. missing category
};

/// Aggregates outcomes; S, A and P feed AUC-Easy, -Mod and -Hard. Pairs
/// without a category count in the percentages but in no AUC.
inline EvalReport summarize(std::vector<RegistrationOutcome> outcomes, double t_max = 25.0) {
  require(!outcomes.empty(), ErrorKind::InvalidArgument, "evaluation needs at least one pair");
  EvalReport r;
  r.n_pairs = outcomes.size();
  std::vector<double> by_cat[3];
  for (const auto& o : outcomes) {
    if (o.status == RegistrationStatus::Failed) ++r.n_failed;
    else if (o.verdict == Verdict::Acceptable) ++r.n_acceptable;
    else ++r.n_inaccurate;
    const double m = o.status == RegistrationStatus::Failed ? std::numeric_limits<double>::infinity() : o.mee;
    if (!o.category) {
      r.errors.push_back(o.pair_id + ": missing category, excluded from AUC");
      continue;
    }
    switch (*o.category) {
      case 'S': by_cat[0].push_back(m); break;
      case 'A': by_cat[1].push_back(m); break;
      case 'P': by_cat[2].push_back(m); break;
      default: r.errors.push_back(o.pair_id + ": unknown category, excluded from AUC");
    }
  }
  const double n = static_cast<double>(r.n_pairs);
  r.pct_failed = 100.0 * static_cast<double>(r.n_failed) / n;
  r.pct_inaccurate = 100.0 * static_cast<double>(r.n_inaccurate) / n;
  r.pct_acceptable = 100.0 * static_cast<double>(r.n_acceptable) / n;

  std::optional<double>* slots[3] = {&r.auc_easy, &r.auc_mod, &r.auc_hard};
  static constexpr const char* names[3] = {"Easy (S)", "Mod (A)", "Hard (P)"};
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < 3; ++c) {
    if (by_cat[c].empty()) {
      r.warnings.push_back(std::string("no pairs in category ") + names[c] + ", AUC absent");
      continue;
    }
    *slots[c] = acceptance_auc(by_cat[c], t_max);
    sum += **slots[c];
    ++present;
  }
  if (present > 0) r.mauc = sum / present;
  if (present > 0 && present < 3) r.warnings.push_back("mAUC averaged over present categories only");
  r.outcomes = std::move(outcomes);
  return r;
}

// ---------------------------------------------------------------------------
// Pipeline

/// Keypoints with row-aligned unit descriptors for one image.
struct Detection {
  KeypointSet keypoints;
  DescriptorMatrix descriptors;
};

using Detector = std::function<Detection(const GrayImage&)>;

inline Detector model_detector(const nn::ModelSpec& spec, const nn::ModelParams& params,
                               const KeypointConfig& kp = {}) {
  nn::check_params(spec, params);
  return [spec, &params, kp](const GrayImage& img) {
    const nn::ModelOutput out = nn::infer(spec, params, img);
    Detection d;
    d.keypoints = nms_extract(out.heatmap, kp.threshold, kp.nms_window, kp.max_keypoints, kp.subpixel);
    d.descriptors = sample_descriptors(out.descriptors, d.keypoints);
    return d;
  };
}

struct RegisterConfig {
  PreprocessConfig preprocess;
  KeypointConfig keypoints;
  RansacConfig ransac;
  std::uint64_t seed = 0;
  double auc_t_max = 25.0;
};

/// Everything the review UI needs to draw one registered pair.
struct PairRegistration {
  RegistrationOutcome outcome;
  MatchSet matches;
  std::vector<bool> inliers;  // per match, from RANSAC
};

/// Detect, match and estimate on two preprocessed images, then score against
/// the control points.
inline PairRegistration register_images(const Detector& detect, const GrayImage& query,
                                        const GrayImage& reference,
                                        std::span<const Correspondence> controls,
                                        const RegisterConfig& cfg, const std::string& pair_id = "",
                                        std::optional<char> category = std::nullopt) {
  const Detection dq = detect(query);
  const Detection dr = detect(reference);
  PairRegistration pr;
  pr.matches = match_keypoints(dq.keypoints, dq.descriptors, dr.keypoints, dr.descriptors, cfg.keypoints);
  std::vector<Correspondence> corr;
  for (const auto& m : pr.matches.matches)
    corr.push_back({dq.keypoints.points[m.query].pt, dr.keypoints.points[m.reference].pt});
  std::optional<Homography> h;
  std::size_t inliers = 0;
  if (corr.size() >= kMinMatches) {
    if (auto r = ransac_homography(corr, cfg.ransac, derive_seed(cfg.seed, pair_id))) {
      h = r->h;
      inliers = r->inlier_count;
      pr.inliers = r->inliers;
    }
  }
  if (pr.inliers.empty()) pr.inliers.assign(corr.size(), false);
  pr.outcome = make_outcome(pair_id, category, corr.size(), h, controls, inliers);
  return pr;
}

/// Loads and preprocesses both images of a pair, then registers them. I/O
/// and decoding problems propagate as errors rather than Failed outcomes.
inline PairRegistration register_pair_detailed(const Detector& detect, const data::PairRecord& pair,
                                               const RegisterConfig& cfg) {
  const GrayImage q = preprocess(read_image(pair.query_image_path), cfg.preprocess);
  const GrayImage r = preprocess(read_image(pair.ref_image_path), cfg.preprocess);
  return register_images(detect, q, r, pair.control_points, cfg, pair.id, pair.category);
}

inline RegistrationOutcome register_pair(const Detector& detect, const data::PairRecord& pair,
                                         const RegisterConfig& cfg) {
  return register_pair_detailed(detect, pair, cfg).outcome;
}

inline EvalReport evaluate_dataset(const Detector& detect, const std::vector<data::PairRecord>& pairs,
                                   const RegisterConfig& cfg) {
  require(!pairs.empty(), ErrorKind::InvalidArgument, "evaluation needs at least one pair");
  std::vector<RegistrationOutcome> outcomes;
  for (const auto& p : pairs) {
    if (p.control_points.empty()) fail(ErrorKind::InvalidArgument, "pair " + p.id + " has no control points");
    outcomes.push_back(register_pair(detect, p, cfg));
  }
  return summarize(std::move(outcomes), cfg.auc_t_max);
}

// ---------------------------------------------------------------------------
// Report output

inline nlohmann::json homography_json(const Homography& h) {
  nlohmann::json m = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) m.push_back({h.matrix()(r, 0), h.matrix()(r, 1), h.matrix()(r, 2)});
  return m;
}

inline nlohmann::json to_json(const RegistrationOutcome& o) {
  nlohmann::json j{{"id", o.pair_id},
                   {"category", o.category ? nlohmann::json(std::string(1, *o.category)) : nlohmann::json()},
                   {"status", to_string(o.status)},
                   {"n_matches", o.n_matches},
                   {"n_inliers", o.n_inliers}};
  if (o.status == RegistrationStatus::Evaluated) {
    if (o.scored) {
      j["mee"] = o.mee;
      j["mae"] = o.mae;
      j["verdict"] = to_string(o.verdict);
    }
    j["homography"] = homography_json(*o.homography);
  } else {
    j["reason"] = o.reason;
  }
  return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& o : r.outcomes) pairs.push_back(to_json(o));
  return {{"n_pairs", r.n_pairs},
          {"pct_failed", r.pct_failed},
          {"pct_inaccurate", r.pct_inaccurate},
          {"pct_acceptable", r.pct_acceptable},
          {"auc_easy", opt(r.auc_easy)},
          {"auc_mod", opt(r.auc_mod)},
          {"auc_hard", opt(r.auc_hard)},
          {"mauc", opt(r.mauc)},
          {"pairs", pairs},
          {"warnings", r.warnings},
          {"errors", r.errors}};
}

inline std::string format_table(const EvalReport& r) {
  auto cell = [](const std::optional<double>& v) {
    char buf[32];
    if (!v) return std::string("-");
    std::snprintf(buf, sizeof buf, "%.3f", *v);
    return std::string(buf);
  };
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  const std::vector<std::string> head = {"Failed", "Inaccurate", "Acceptable", "AUC-Easy",
                                         "AUC-Mod", "AUC-Hard",  "mAUC"};
  const std::vector<std::string> row = {pct(r.pct_failed), pct(r.pct_inaccurate), pct(r.pct_acceptable),
                                        cell(r.auc_easy),  cell(r.auc_mod),        cell(r.auc_hard),
                                        cell(r.mauc)};
  std::ostringstream os;
  for (std::size_t i = 0; i < head.size(); ++i) {
    const std::size_t w = std::max(head[i].size(), row[i].size());
    os << (i ? "  " : "") << std::string(w - head[i].size(), ' ') << head[i];
  }
  os << "\n";
  for (std::size_t i = 0; i < row.size(); ++i) {
    const std::size_t w = std::max(head[i].size(), row[i].size());
    os << (i ? "  " : "") << std::string(w - row[i].size(), ' ') << row[i];
  }
  os << "\n";
  return os.str();
}

}  // namespace retina
