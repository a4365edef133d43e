#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "retina/core.hpp"
#include "retina/geometry.hpp"
#include "retina/image.hpp"
#include "retina/keypoints.hpp"

namespace retina::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class KeypointKind { Bifurcation, Crossover, Intersection };

inline std::string to_string(KeypointKind k) {
  switch (k) {
    case KeypointKind::Bifurcation: return "bifurcation";
    case KeypointKind::Crossover: return "crossover";
    case KeypointKind::Intersection: return "intersection";
  }
  return "bifurcation";
}

inline std::optional<KeypointKind> parse_kind(const std::string& s) {
  if (s == "bifurcation") return KeypointKind::Bifurcation;
  if (s == "crossover") return KeypointKind::Crossover;
  if (s == "intersection") return KeypointKind::Intersection;
  return std::nullopt;
}

struct AnnotatedPoint {
  double x = 0.0;
  double y = 0.0;
  KeypointKind kind = KeypointKind::Bifurcation;
};

/// One image's human (or synthetic) keypoint annotations.
struct AnnotationFile {
  std::string image_id;
  std::string image_path;  // relative to the annotation file's directory
  int width = 0;
  int height = 0;
  std::vector<AnnotatedPoint> keypoints;
  std::string annotator;
  int version = 0;

  std::vector<Point2> points() const {
    std::vector<Point2> out;
    for (const auto& k : keypoints) out.push_back({k.x, k.y});
    return out;
  }
};

// ---------------------------------------------------------------------------
// Filesystem helpers

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Writes through a sibling temp file and renames it into place.
inline void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + tmp.string());
    out << text;
    if (!out) fail(ErrorKind::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename into " + path.string() + ": " + ec.message());
}

inline json parse_json(const std::string& text, const std::string& name) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Format, name + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Annotation schema

namespace detail {

template <typename T>
T field(const json& j, const std::string& key, const std::string& path) {
  if (!j.contains(key)) fail(ErrorKind::Schema, path + key + ": missing");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::Schema, path + key + ": wrong type");
  }
}

}  // namespace detail

/// Validates and converts JSON to an AnnotationFile. Problems raise
/// ErrorKind::Schema with the offending field path; tolerated omissions are
/// appended to `warnings`.
inline AnnotationFile annotation_from_json(const json& j, std::vector<std::string>* warnings = nullptr) {
  if (!j.is_object()) fail(ErrorKind::Schema, "annotation: expected an object");
  AnnotationFile a;
  a.image_id = detail::field<std::string>(j, "image_id", "");
  a.image_path = detail::field<std::string>(j, "image_path", "");
  a.width = detail::field<int>(j, "width", "");
  a.height = detail::field<int>(j, "height", "");
  if (a.width <= 0) fail(ErrorKind::Schema, "width: must be positive");
  if (a.height <= 0) fail(ErrorKind::Schema, "height: must be positive");
  a.annotator = j.contains("annotator") ? detail::field<std::string>(j, "annotator", "") : "";
  a.version = j.contains("version") ? detail::field<int>(j, "version", "") : 0;
  if (a.version < 0) fail(ErrorKind::Schema, "version: must be non-negative");
  if (!j.contains("keypoints") || !j.at("keypoints").is_array())
    fail(ErrorKind::Schema, "keypoints: expected an array");
  const auto& arr = j.at("keypoints");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string path = "keypoints[" + std::to_string(i) + "].";
    const json& k = arr[i];
    if (!k.is_object()) fail(ErrorKind::Schema, path.substr(0, path.size() - 1) + ": expected an object");
    AnnotatedPoint p;
    if (!k.contains("x") || !k.at("x").is_number()) fail(ErrorKind::Schema, path + "x: expected a number");
    if (!k.contains("y") || !k.at("y").is_number()) fail(ErrorKind::Schema, path + "y: expected a number");
    p.x = k.at("x").get<double>();
    p.y = k.at("y").get<double>();
    if (!std::isfinite(p.x) || p.x < 0.0 || p.x > a.width - 1)
      fail(ErrorKind::Schema, path + "x: out of bounds");
    if (!std::isfinite(p.y) || p.y < 0.0 || p.y > a.height - 1)
      fail(ErrorKind::Schema, path + "y: out of bounds");
    if (k.contains("kind")) {
      if (!k.at("kind").is_string()) fail(ErrorKind::Schema, path + "kind: expected a string");
      auto kind = parse_kind(k.at("kind").get<std::string>());
      if (!kind) fail(ErrorKind::Schema, path + "kind: unknown kind '" + k.at("kind").get<std::string>() + "'");
      p.kind = *kind;
    } else if (warnings) {
      warnings->push_back(path + "kind: missing, defaulting to bifurcation");
    }
    a.keypoints.push_back(p);
  }
  return a;
}

inline json to_json(const AnnotationFile& a) {
  json kps = json::array();
  for (const auto& k : a.keypoints) kps.push_back({{"x", k.x}, {"y", k.y}, {"kind", to_string(k.kind)}});
  return json{{"image_id", a.image_id}, {"image_path", a.image_path}, {"width", a.width},
              {"height", a.height},     {"keypoints", kps},          {"annotator", a.annotator},
              {"version", a.version}};
}

inline AnnotationFile load_annotations(const fs::path& path,
                                       std::vector<std::string>* warnings = nullptr) {
  return annotation_from_json(parse_json(read_text(path), path.string()), warnings);
}

/// Validates, bumps the version, and writes atomically. Returns what was written.
inline AnnotationFile save_annotations(AnnotationFile a, const fs::path& path) {
  annotation_from_json(to_json(a));
  a.version += 1;
  write_text_atomic(path, to_json(a).dump(2) + "\n");
  return a;
}

// ---------------------------------------------------------------------------
// Keypoint statistics

struct KeypointStats {
  std::size_t images = 0;
  int min = 0;
  int max = 0;
  double mean = 0.0;
  double stddev = 0.0;  // population
  int bin_width = 1;
  int first_bin = 0;     // lower edge of the first histogram bin
  std::vector<int> histogram;
  std::vector<int> counts;  // per-image, input order
};

inline KeypointStats keypoint_stats_from_counts(const std::vector<int>& counts, int bin_width = 5) {
  require(!counts.empty(), ErrorKind::InvalidArgument, "keypoint statistics need at least one image");
  require(bin_width >= 1, ErrorKind::InvalidArgument, "histogram bin width must be >= 1");
  KeypointStats s;
  s.images = counts.size();
  s.counts = counts;
  s.min = *std::min_element(counts.begin(), counts.end());
  s.max = *std::max_element(counts.begin(), counts.end());
  double sum = 0.0;
  for (int c : counts) sum += c;
  s.mean = sum / static_cast<double>(counts.size());
  double var = 0.0;
  for (int c : counts) var += (c - s.mean) * (c - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(counts.size()));
  s.bin_width = bin_width;
  s.first_bin = (s.min / bin_width) * bin_width;
  s.histogram.assign(static_cast<std::size_t>((s.max - s.first_bin) / bin_width + 1), 0);
  for (int c : counts) ++s.histogram[static_cast<std::size_t>((c - s.first_bin) / bin_width)];
  return s;
}

inline KeypointStats keypoint_stats(const std::vector<AnnotationFile>& annotations, int bin_width = 5) {
  require(!annotations.empty(), ErrorKind::InvalidArgument, "keypoint statistics need at least one annotation");
  std::vector<int> counts;
  for (const auto& a : annotations) counts.push_back(static_cast<int>(a.keypoints.size()));
  return keypoint_stats_from_counts(counts, bin_width);
}

// ---------------------------------------------------------------------------
// Manifests

/// One registration pair; category is 'S', 'A' or 'P' when known.
struct PairRecord {
  std::string id;
  fs::path query_image_path;
  fs::path ref_image_path;
  std::vector<Correspondence> control_points;
  std::optional<char> category;
};

inline std::optional<char> parse_category(const std::string& s) {
  if (s == "S" || s == "A" || s == "P") return s[0];
  return std::nullopt;
}

/// Dataset manifest: a JSON list of {id?, query, ref, controls_path, category?}
/// with paths relative to the manifest.
inline std::vector<PairRecord> load_pair_manifest(const fs::path& path) {
  const json j = parse_json(read_text(path), path.string());
  if (!j.is_array()) fail(ErrorKind::Schema, path.string() + ": expected a JSON list of pairs");
  const fs::path base = path.parent_path();
  std::vector<PairRecord> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string where = "[" + std::to_string(i) + "].";
    const json& e = j[i];
    PairRecord p;
    p.query_image_path = base / detail::field<std::string>(e, "query", where);
    p.ref_image_path = base / detail::field<std::string>(e, "ref", where);
    p.control_points = read_correspondences(base / detail::field<std::string>(e, "controls_path", where));
    if (e.contains("category") && e.at("category").is_string())
      p.category = parse_category(e.at("category").get<std::string>());
    p.id = e.contains("id") ? e.at("id").get<std::string>()
                            : p.query_image_path.stem().string() + "_" + p.ref_image_path.stem().string();
    out.push_back(std::move(p));
  }
  return out;
}

/// Training manifest: {"train": [annotation paths], "val": [...]}.
struct TrainManifest {
  std::vector<fs::path> train;
  std::vector<fs::path> val;
};

inline TrainManifest load_train_manifest(const fs::path& path) {
  const json j = parse_json(read_text(path), path.string());
  if (!j.is_object() || !j.contains("train"))
    fail(ErrorKind::Schema, path.string() + ": expected {\"train\": [...], \"val\": [...]}");
  TrainManifest m;
  const fs::path base = path.parent_path();
  for (const auto& e : j.at("train")) m.train.push_back(base / e.get<std::string>());
  if (j.contains("val"))
    for (const auto& e : j.at("val")) m.val.push_back(base / e.get<std::string>());
  return m;
}

// ---------------------------------------------------------------------------
// Keypoint / descriptor dump: {"points": [[x, y, score], ...], "descriptor_dim": d,
// "descriptors": base64 little-endian float32, row per point}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    const std::uint32_t b0 = bytes[i];
    const std::uint32_t b1 = i + 1 < bytes.size() ? bytes[i + 1] : 0;
    const std::uint32_t b2 = i + 2 < bytes.size() ? bytes[i + 2] : 0;
    const std::uint32_t v = (b0 << 16) | (b1 << 8) | b2;
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? tbl[(v >> 6) & 63] : '=';
    out += i + 2 < bytes.size() ? tbl[v & 63] : '=';
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : s) {
    if (c == '=') break;
    const int v = val(c);
    if (v < 0) fail(ErrorKind::Format, "invalid base64 character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

inline json keypoints_to_json(const KeypointSet& kps, const DescriptorMatrix* desc = nullptr) {
  json pts = json::array();
  for (const auto& k : kps.points) pts.push_back({k.pt.x, k.pt.y, k.score});
  json j{{"points", pts}};
  if (desc) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(static_cast<std::size_t>(desc->size()) * 4);
    for (Eigen::Index r = 0; r < desc->rows(); ++r)
      for (Eigen::Index c = 0; c < desc->cols(); ++c) {
        const float f = static_cast<float>((*desc)(r, c));
        std::uint8_t b[4];
        std::memcpy(b, &f, 4);  // little-endian host
        bytes.insert(bytes.end(), b, b + 4);
      }
    j["descriptor_dim"] = desc->cols();
    j["descriptors"] = base64_encode(bytes);
  }
  return j;
}

inline KeypointSet keypoints_from_json(const json& j, DescriptorMatrix* desc = nullptr) {
  if (!j.is_object() || !j.contains("points") || !j.at("points").is_array())
    fail(ErrorKind::Schema, "keypoint dump: expected {\"points\": [...]}");
  KeypointSet kps;
  for (const auto& p : j.at("points")) {
    if (!p.is_array() || p.size() != 3) fail(ErrorKind::Schema, "keypoint dump: points entries are [x, y, score]");
    kps.points.push_back({{p[0].get<double>(), p[1].get<double>()}, p[2].get<double>()});
  }
  if (desc && j.contains("descriptors")) {
    const int d = j.at("descriptor_dim").get<int>();
    const auto bytes = base64_decode(j.at("descriptors").get<std::string>());
    if (bytes.size() != kps.size() * static_cast<std::size_t>(d) * 4)
      fail(ErrorKind::Format, "keypoint dump: descriptor block has the wrong length");
    desc->resize(static_cast<Eigen::Index>(kps.size()), d);
    for (std::size_t i = 0; i < kps.size() * static_cast<std::size_t>(d); ++i) {
      float f;
      std::memcpy(&f, bytes.data() + 4 * i, 4);
      (*desc)(static_cast<Eigen::Index>(i / static_cast<std::size_t>(d)),
              static_cast<Eigen::Index>(i % static_cast<std::size_t>(d))) = f;
    }
  }
  return kps;
}

// ---------------------------------------------------------------------------
// Synthetic retina-like data

struct SynthConfig {
  std::uint64_t seed = 1;
  int image_size = 128;
  int n_images = 32;
  int n_vessels = 6;
  double vessel_width_min = 1.5;
  double vessel_width_max = 3.0;
  double noise = 0.02;
  int n_pairs = 12;
  AugmentParams pair_augment{8.0, 0.04, 0.95, 1.05, 0.01};
  double val_fraction = 0.2;

  void validate() const {
    require(image_size >= 32 && image_size % 16 == 0, ErrorKind::InvalidArgument,
            "synth image_size must be a multiple of 16 and >= 32");
    require(n_images >= 1 && n_vessels >= 1 && n_pairs >= 0, ErrorKind::InvalidArgument,
            "synth counts must be positive");
    require(vessel_width_min > 0 && vessel_width_min <= vessel_width_max, ErrorKind::InvalidArgument,
            "synth vessel width range invalid");
    require(noise >= 0, ErrorKind::InvalidArgument, "synth noise must be >= 0");
    pair_augment.validate();
  }
};

struct SynthImage {
  RawImage image;            // RGB, vessel signal in the green channel
  std::vector<AnnotatedPoint> keypoints;
  double background_level = 0.0;  // green-channel fundus background, [0,1]
};

struct SynthPair {
  std::size_t query_index = 0;
  RawImage reference;
  Homography h;              // query -> reference
  std::vector<Correspondence> controls;
  char category = 'S';
};

struct SynthDataset {
  std::vector<SynthImage> images;
  std::vector<SynthPair> pairs;
};

namespace detail {

struct Curve {
  Point2 p0, p1, p2;
  double width;
  std::vector<Point2> poly;
};

inline Point2 bezier(const Curve& c, double t) {
  const double u = 1 - t;
  return {u * u * c.p0.x + 2 * u * t * c.p1.x + t * t * c.p2.x,
          u * u * c.p0.y + 2 * u * t * c.p1.y + t * t * c.p2.y};
}

inline void tessellate(Curve& c, int steps = 64) {
  c.poly.clear();
  for (int i = 0; i <= steps; ++i) c.poly.push_back(bezier(c, static_cast<double>(i) / steps));
}

inline std::optional<Point2> segment_intersection(const Point2& a, const Point2& b, const Point2& c,
                                                  const Point2& d) {
  const double rx = b.x - a.x, ry = b.y - a.y, sx = d.x - c.x, sy = d.y - c.y;
  const double den = rx * sy - ry * sx;
  if (std::abs(den) < 1e-12) return std::nullopt;
  const double t = ((c.x - a.x) * sy - (c.y - a.y) * sx) / den;
  const double u = ((c.x - a.x) * ry - (c.y - a.y) * rx) / den;
  if (t < 0 || t > 1 || u < 0 || u > 1) return std::nullopt;
  return Point2{a.x + t * rx, a.y + t * ry};
}

inline RawImage warp_raw(const RawImage& img, const Homography& h) {
  RawImage out = img;
  std::vector<float> plane(static_cast<std::size_t>(img.width) * img.height);
  for (int c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < plane.size(); ++i)
      plane[i] = img.data[i * static_cast<std::size_t>(img.channels) + static_cast<std::size_t>(c)];
    const auto w = warp_plane<float>(plane, img.width, img.height, h);
    for (std::size_t i = 0; i < plane.size(); ++i)
      out.data[i * static_cast<std::size_t>(img.channels) + static_cast<std::size_t>(c)] =
          static_cast<std::uint8_t>(std::clamp(std::lround(w[i]), 0L, 255L));
  }
  return out;
}

}  // namespace detail

/// Renders one fundus-like image: a dark disc with bright quadratic Bezier
/// vessels. Branch points are recorded exactly where a child vessel leaves
/// its parent; crossings between unrelated vessels come from polyline
/// intersection.
inline SynthImage generate_synthetic_image(const SynthConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const int s = cfg.image_size;
  const double cx = 0.5 * (s - 1), cy = 0.5 * (s - 1), radius = 0.47 * s;
  std::vector<detail::Curve> curves;
  std::vector<int> parent;
  std::vector<AnnotatedPoint> kps;

  auto random_in_disc = [&](double frac) {
    const double r = radius * frac * std::sqrt(uniform01(rng));
    const double a = uniform(rng, 0, 2 * M_PI);
    return Point2{cx + r * std::cos(a), cy + r * std::sin(a)};
  };

  for (int v = 0; v < cfg.n_vessels; ++v) {
    detail::Curve c;
    const double a0 = uniform(rng, 0, 2 * M_PI);
    c.p0 = {cx + 0.95 * radius * std::cos(a0), cy + 0.95 * radius * std::sin(a0)};
    c.p2 = {cx - 0.95 * radius * std::cos(a0 + uniform(rng, -1.2, 1.2)),
            cy - 0.95 * radius * std::sin(a0 + uniform(rng, -1.2, 1.2))};
    c.p1 = random_in_disc(0.6);
    c.width = uniform(rng, cfg.vessel_width_min, cfg.vessel_width_max);
    detail::tessellate(c);
    curves.push_back(c);
    parent.push_back(-1);
    const int trunk = static_cast<int>(curves.size()) - 1;
    // Branches leave the trunk at an exact, recorded parameter.
    const int n_branch = 1 + static_cast<int>(uniform_index(rng, 2));
    for (int b = 0; b < n_branch; ++b) {
      const double t = uniform(rng, 0.25, 0.75);
      const Point2 origin = detail::bezier(c, t);
      const double dx = 2 * (1 - t) * (c.p1.x - c.p0.x) + 2 * t * (c.p2.x - c.p1.x);
      const double dy = 2 * (1 - t) * (c.p1.y - c.p0.y) + 2 * t * (c.p2.y - c.p1.y);
      const double heading = std::atan2(dy, dx) + (uniform01(rng) < 0.5 ? -1 : 1) * uniform(rng, 0.5, 1.1);
      const double len = uniform(rng, 0.35, 0.7) * radius;
      detail::Curve br;
      br.p0 = origin;
      br.p2 = {origin.x + len * std::cos(heading), origin.y + len * std::sin(heading)};
      const double bend = uniform(rng, -0.4, 0.4);
      br.p1 = {origin.x + 0.5 * len * std::cos(heading + bend), origin.y + 0.5 * len * std::sin(heading + bend)};
      br.width = std::max(cfg.vessel_width_min, c.width * uniform(rng, 0.6, 0.9));
      detail::tessellate(br);
      curves.push_back(br);
      parent.push_back(trunk);
      kps.push_back({origin.x, origin.y, KeypointKind::Bifurcation});
    }
  }

  // Crossings between curves that are not parent/child.
  for (std::size_t i = 0; i < curves.size(); ++i)
    for (std::size_t j = i + 1; j < curves.size(); ++j) {
      const bool related = parent[j] == static_cast<int>(i) || parent[i] == static_cast<int>(j) ||
                           (parent[i] >= 0 && parent[i] == parent[j]);
      for (std::size_t a = 0; a + 1 < curves[i].poly.size(); ++a)
        for (std::size_t b = 0; b + 1 < curves[j].poly.size(); ++b) {
          auto p = detail::segment_intersection(curves[i].poly[a], curves[i].poly[a + 1],
                                                curves[j].poly[b], curves[j].poly[b + 1]);
          if (!p) continue;
          // Siblings and parent/child meet at their shared branch point already.
          if (related) {
            bool near_branch = false;
            for (const auto& k : kps)
              if (std::hypot(k.x - p->x, k.y - p->y) < 4.0) near_branch = true;
            if (near_branch) continue;
          }
          kps.push_back({p->x, p->y, related ? KeypointKind::Intersection : KeypointKind::Crossover});
        }
    }

  // Rasterize: background disc with a soft illumination gradient, vessels on top.
  const double bg = 0.25;
  std::vector<double> green(static_cast<std::size_t>(s) * s, 0.0);
  std::vector<double> inside(green.size(), 0.0);
  const double gx = uniform(rng, -0.05, 0.05), gy = uniform(rng, -0.05, 0.05);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double r = std::hypot(x - cx, y - cy);
      const double in = std::clamp(radius - r + 0.5, 0.0, 1.0);
      inside[static_cast<std::size_t>(y) * s + x] = in;
      green[static_cast<std::size_t>(y) * s + x] =
          in * (bg + gx * (x - cx) / radius + gy * (y - cy) / radius) + (1 - in) * 0.02;
    }
  std::vector<double> vessel(green.size(), 0.0);
  for (const auto& c : curves) {
    const double half = 0.5 * c.width;
    for (std::size_t k = 0; k + 1 < c.poly.size(); ++k) {
      const Point2 a = c.poly[k], b = c.poly[k + 1];
      const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - half - 1)));
      const int x1 = std::min(s - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + half + 1)));
      const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - half - 1)));
      const int y1 = std::min(s - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + half + 1)));
      const double vx = b.x - a.x, vy = b.y - a.y, len2 = vx * vx + vy * vy;
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double t = len2 > 0 ? std::clamp(((x - a.x) * vx + (y - a.y) * vy) / len2, 0.0, 1.0) : 0.0;
          const double d = std::hypot(x - (a.x + t * vx), y - (a.y + t * vy));
          const double profile = std::clamp(half + 0.5 - d, 0.0, 1.0);
          double& v = vessel[static_cast<std::size_t>(y) * s + x];
          v = std::max(v, profile);
        }
    }
  }
  SynthImage out;
  out.background_level = bg;
  out.image.width = s;
  out.image.height = s;
  out.image.channels = 3;
  out.image.data.resize(static_cast<std::size_t>(s) * s * 3);
  for (std::size_t i = 0; i < green.size(); ++i) {
    const double g = std::clamp(green[i] + inside[i] * (0.5 * vessel[i] + cfg.noise * normal(rng)), 0.0, 1.0);
    const double r = std::clamp(inside[i] * (0.55 + 0.3 * g), 0.0, 1.0);
    const double b = std::clamp(0.3 * g, 0.0, 1.0);
    out.image.data[3 * i] = static_cast<std::uint8_t>(std::lround(255 * r));
    out.image.data[3 * i + 1] = static_cast<std::uint8_t>(std::lround(255 * g));
    out.image.data[3 * i + 2] = static_cast<std::uint8_t>(std::lround(255 * b));
  }

  // Keep keypoints well inside the disc, drop near-duplicates.
  for (const auto& k : kps) {
    if (std::hypot(k.x - cx, k.y - cy) > radius - 4.0) continue;
    if (k.x < 2 || k.y < 2 || k.x > s - 3 || k.y > s - 3) continue;
    bool dup = false;
    for (const auto& o : out.keypoints)
      if (std::hypot(o.x - k.x, o.y - k.y) < 3.0) dup = true;
    if (!dup) out.keypoints.push_back(k);
  }
  return out;
}

/// Images plus registration pairs. Pair categories cycle S, A, P with the
/// warp magnitude growing by category. Fully determined by cfg.seed.
inline SynthDataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset ds;
  for (int i = 0; i < cfg.n_images; ++i)
    ds.images.push_back(generate_synthetic_image(cfg, derive_seed(cfg.seed, "image" + std::to_string(i))));
  static constexpr char categories[3] = {'S', 'A', 'P'};
  static constexpr double magnitude[3] = {0.5, 1.0, 1.5};
  for (int p = 0; p < cfg.n_pairs; ++p) {
    SynthPair pair;
    pair.query_index = static_cast<std::size_t>(p % cfg.n_images);
    pair.category = categories[p % 3];
    AugmentParams a = cfg.pair_augment;
    const double m = magnitude[p % 3];
    a.max_rotation *= m;
    a.max_translation *= m;
    a.max_perspective *= m;
    a.scale_min = 1.0 - (1.0 - a.scale_min) * m;
    a.scale_max = 1.0 + (a.scale_max - 1.0) * m;
    const int s = cfg.image_size;
    pair.h = sample_homography(a, s, s, derive_seed(cfg.seed, "pair" + std::to_string(p)));
    const SynthImage& q = ds.images[pair.query_index];
    pair.reference = detail::warp_raw(q.image, pair.h);
    for (const auto& k : q.keypoints) {
      const Point2 r = apply(pair.h, {k.x, k.y});
      if (r.x < 0 || r.y < 0 || r.x > s - 1 || r.y > s - 1) continue;
      pair.controls.push_back({{k.x, k.y}, r});
    }
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

/// Writes images, sibling annotation files, pair images and controls, plus
/// `train.json` (training manifest) and `pairs.json` (registration manifest).
inline void write_synthetic(const SynthDataset& ds, const SynthConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "pairs");
  json train = json::array(), val = json::array();
  const std::size_t n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * ds.images.size()));
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%03zu", i);
    write_png(ds.images[i].image, dir / "images" / (std::string(name) + ".png"));
    AnnotationFile a;
    a.image_id = name;
    a.image_path = std::string(name) + ".png";
    a.width = ds.images[i].image.width;
    a.height = ds.images[i].image.height;
    a.keypoints = ds.images[i].keypoints;
    a.annotator = "synthetic";
    a.version = 0;
    save_annotations(a, dir / "images" / (std::string(name) + ".json"));
    const std::string rel = "images/" + std::string(name) + ".json";
    (i + n_val < ds.images.size() ? train : val).push_back(rel);
  }
  write_text_atomic(dir / "train.json", json{{"train", train}, {"val", val}}.dump(2) + "\n");

  json pairs = json::array();
  for (std::size_t p = 0; p < ds.pairs.size(); ++p) {
    char name[32];
    std::snprintf(name, sizeof name, "pair_%03zu", p);
    const auto& pr = ds.pairs[p];
    write_png(pr.reference, dir / "pairs" / (std::string(name) + "_ref.png"));
    write_correspondences(pr.controls, dir / "pairs" / (std::string(name) + ".txt"));
    char qname[32];
    std::snprintf(qname, sizeof qname, "img_%03zu", pr.query_index);
    pairs.push_back({{"id", name},
                     {"query", "images/" + std::string(qname) + ".png"},
                     {"ref", "pairs/" + std::string(name) + "_ref.png"},
                     {"controls_path", "pairs/" + std::string(name) + ".txt"},
                     {"category", std::string(1, pr.category)}});
  }
  write_text_atomic(dir / "pairs.json", pairs.dump(2) + "\n");
}

}  // namespace retina::data
