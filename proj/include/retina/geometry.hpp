#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "retina/core.hpp"
#include "retina/image.hpp"

namespace retina {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

inline double distance(const Point2& a, const Point2& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

struct Correspondence {
  Point2 query;
  Point2 reference;
};

using Mat3 = Eigen::Matrix3d;

/// 3x3 projective transform, kept normalized with m(2,2) = 1 (or unit
/// Frobenius norm when m(2,2) is near zero).
class Homography {
 public:
  Homography() : m_(Mat3::Identity()) {}
  explicit Homography(const Mat3& m) : m_(normalized(m)) {}

  static Homography identity() { return Homography(); }
  static Homography translation(double tx, double ty) {
    Mat3 m = Mat3::Identity();
    m(0, 2) = tx;
    m(1, 2) = ty;
    return Homography(m);
  }

  const Mat3& matrix() const { return m_; }
  double operator()(int r, int c) const { return m_(r, c); }

 private:
  static Mat3 normalized(const Mat3& m) {
    require(m.allFinite(), ErrorKind::InvalidArgument, "homography has non-finite entries");
    const double scale = std::abs(m(2, 2)) > 1e-12 ? m(2, 2) : m.norm();
    require(scale != 0.0, ErrorKind::DegenerateInput, "zero homography");
    return m / scale;
  }

  Mat3 m_;
};

inline Point2 apply(const Homography& h, const Point2& p) {
  const Mat3& m = h.matrix();
  const double w = m(2, 0) * p.x + m(2, 1) * p.y + m(2, 2);
  if (std::abs(w) < 1e-12) fail(ErrorKind::DegenerateInput, "point maps to infinity");
  return {(m(0, 0) * p.x + m(0, 1) * p.y + m(0, 2)) / w,
          (m(1, 0) * p.x + m(1, 1) * p.y + m(1, 2)) / w};
}

inline Homography invert(const Homography& h) {
  const double det = h.matrix().determinant();
  const double scale = h.matrix().cwiseAbs().maxCoeff();
  if (!(std::abs(det) > 1e-14 * scale * scale * scale))
    fail(ErrorKind::DegenerateInput, "singular homography");
  return Homography(h.matrix().inverse());
}

/// compose(a, b) applies b first, then a.
inline Homography compose(const Homography& a, const Homography& b) {
  return Homography(a.matrix() * b.matrix());
}

// ---------------------------------------------------------------------------
// Estimation

namespace detail {

// Similarity that moves the centroid to the origin and the mean distance to sqrt(2).
inline Mat3 hartley_normalizer(std::span<const Point2> pts) {
  double cx = 0, cy = 0;
  for (const auto& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double mean_dist = 0;
  for (const auto& p : pts) mean_dist += std::hypot(p.x - cx, p.y - cy);
  mean_dist /= static_cast<double>(pts.size());
  if (!(mean_dist > 0)) fail(ErrorKind::DegenerateInput, "coincident points");
  const double s = std::sqrt(2.0) / mean_dist;
  Mat3 t;
  t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return t;
}

inline bool collinear(const Point2& a, const Point2& b, const Point2& c, double scale) {
  const double cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
  return std::abs(cross) <= 1e-10 * scale * scale;
}

}  // namespace detail

/// Normalized DLT: least-squares homography mapping query -> reference.
inline Homography estimate_dlt(std::span<const Correspondence> corrs) {
  const std::size_t n = corrs.size();
  if (n < 4) fail(ErrorKind::DegenerateInput, "homography needs at least 4 correspondences");
  std::vector<Point2> q(n), r(n);
  for (std::size_t i = 0; i < n; ++i) {
    q[i] = corrs[i].query;
    r[i] = corrs[i].reference;
  }
  const Mat3 tq = detail::hartley_normalizer(q);
  const Mat3 tr = detail::hartley_normalizer(r);
  if (n == 4) {
    // Minimal sets must be in general position on both sides.
    for (const auto* pts : {&q, &r})
      for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = a + 1; b < 4; ++b)
          for (std::size_t c = b + 1; c < 4; ++c) {
            const double scale = std::max({std::abs((*pts)[a].x), std::abs((*pts)[a].y), 1.0});
            if (detail::collinear((*pts)[a], (*pts)[b], (*pts)[c], scale))
              fail(ErrorKind::DegenerateInput, "three collinear points in a minimal set");
          }
  }

  Eigen::MatrixXd a(2 * n, 9);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d p = tq * Eigen::Vector3d(q[i].x, q[i].y, 1.0);
    const Eigen::Vector3d s = tr * Eigen::Vector3d(r[i].x, r[i].y, 1.0);
    const double x = p.x(), y = p.y(), u = s.x(), v = s.y();
    const auto row = static_cast<Eigen::Index>(2 * i);
    a.row(row) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(row + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // Rank below 8 means the null space is not unique.
  if (sv.size() >= 8 && sv(7) <= 1e-10 * sv(0))
    fail(ErrorKind::DegenerateInput, "degenerate correspondence configuration");
  const Eigen::VectorXd hv = svd.matrixV().col(8);
  Mat3 hn;
  hn << hv(0), hv(1), hv(2), hv(3), hv(4), hv(5), hv(6), hv(7), hv(8);
  const Mat3 m = tr.inverse() * hn * tq;
  if (!m.allFinite() || std::abs(m.determinant()) < 1e-14 * std::pow(m.norm(), 3))
    fail(ErrorKind::DegenerateInput, "degenerate homography estimate");
  return Homography(m);
}

inline double reprojection_error(const Homography& h, const Correspondence& c) {
  const Mat3& m = h.matrix();
  const double w = m(2, 0) * c.query.x + m(2, 1) * c.query.y + m(2, 2);
  if (std::abs(w) < 1e-12) return std::numeric_limits<double>::infinity();
  const double x = (m(0, 0) * c.query.x + m(0, 1) * c.query.y + m(0, 2)) / w;
  const double y = (m(1, 0) * c.query.x + m(1, 1) * c.query.y + m(1, 2)) / w;
  return std::hypot(x - c.reference.x, y - c.reference.y);
}

struct RansacResult {
  Homography h;
  std::vector<bool> inliers;
  std::size_t inlier_count = 0;
};

struct RansacConfig {
  double inlier_threshold = 3.0;
  int iterations = 2000;
  double confidence = 0.999;
};

/// RANSAC over minimal 4-point samples with a DLT refit on the consensus set.
/// Returns nullopt when no model gathers at least 4 inliers.
inline std::optional<RansacResult> ransac_homography(std::span<const Correspondence> corrs,
                                                     const RansacConfig& cfg,
                                                     std::uint64_t seed) {
  const std::size_t n = corrs.size();
  if (n < 4) return std::nullopt;
  Rng rng(derive_seed(seed, "ransac"));

  auto consensus = [&](const Homography& h, std::vector<bool>& mask, double& cost) {
    std::size_t count = 0;
    cost = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = reprojection_error(h, corrs[i]);
      mask[i] = e < cfg.inlier_threshold;
      if (mask[i]) {
        ++count;
        cost += e;
      }
    }
    return count;
  };

  std::optional<Homography> best;
  std::vector<bool> best_mask(n, false), mask(n, false);
  std::size_t best_count = 0;
  double best_cost = 0.0;
  int budget = cfg.iterations;
  std::array<Correspondence, 4> sample;
  for (int it = 0; it < budget; ++it) {
    std::array<std::size_t, 4> idx{};
    for (std::size_t k = 0; k < 4; ++k) {
      bool fresh;
      do {
        idx[k] = uniform_index(rng, n);
        fresh = std::find(idx.begin(), idx.begin() + static_cast<long>(k), idx[k]) ==
                idx.begin() + static_cast<long>(k);
      } while (!fresh);
      sample[k] = corrs[idx[k]];
    }
    Homography h;
    try {
      h = estimate_dlt(sample);
    } catch (const Error&) {
      continue;
    }
    double cost;
    const std::size_t count = consensus(h, mask, cost);
    if (count > best_count || (count == best_count && count > 0 && cost < best_cost)) {
      best = h;
      best_count = count;
      best_cost = cost;
      best_mask = mask;
      // Adaptive stopping keeps the result a pure function of the seed.
      const double ratio = static_cast<double>(count) / static_cast<double>(n);
      const double p_good = std::pow(ratio, 4);
      if (p_good >= 1.0) {
        budget = std::min(budget, it + 1);
      } else if (p_good > 0.0) {
        const double needed = std::log(1.0 - cfg.confidence) / std::log(1.0 - p_good);
        if (needed < budget) budget = std::max(it + 1, static_cast<int>(std::ceil(needed)));
      }
    }
  }
  if (!best || best_count < 4) return std::nullopt;

  // Refit on the consensus set; iterate while the set keeps growing.
  RansacResult result{*best, best_mask, best_count};
  for (int round = 0; round < 3; ++round) {
    std::vector<Correspondence> in;
    for (std::size_t i = 0; i < n; ++i)
      if (result.inliers[i]) in.push_back(corrs[i]);
    Homography refit;
    try {
      refit = estimate_dlt(in);
    } catch (const Error&) {
      break;
    }
    double cost;
    const std::size_t count = consensus(refit, mask, cost);
    if (count < result.inlier_count) break;
    const bool same = mask == result.inliers;
    result = {refit, mask, count};
    if (same) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Warping

/// Bilinear sample with zero outside the grid; `valid` reports whether the
/// location lies inside [0, w-1] x [0, h-1].
template <typename T>
inline double bilinear(std::span<const T> plane, int w, int h, double x, double y,
                       bool* valid = nullptr) {
  const bool inside = x >= 0.0 && y >= 0.0 && x <= w - 1 && y <= h - 1;
  if (valid) *valid = inside;
  if (!inside) return 0.0;
  const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1);
  const int y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0, fy = y - y0;
  auto at = [&](int xx, int yy) {
    return static_cast<double>(plane[static_cast<std::size_t>(yy) * w + xx]);
  };
  return (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x1, y0)) +
         fy * ((1 - fx) * at(x0, y1) + fx * at(x1, y1));
}

/// Bilinear taps for one location: up to four (index, weight) pairs.
struct BilinearTaps {
  std::array<std::size_t, 4> index{};
  std::array<double, 4> weight{};
  int count = 0;
};

inline BilinearTaps bilinear_taps(int w, int h, double x, double y) {
  BilinearTaps taps;
  if (!(x >= 0.0 && y >= 0.0 && x <= w - 1 && y <= h - 1)) return taps;
  const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1);
  const int y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0, fy = y - y0;
  auto add = [&](int xx, int yy, double wt) {
    taps.index[static_cast<std::size_t>(taps.count)] = static_cast<std::size_t>(yy) * w + xx;
    taps.weight[static_cast<std::size_t>(taps.count)] = wt;
    ++taps.count;
  };
  add(x0, y0, (1 - fx) * (1 - fy));
  add(x1, y0, fx * (1 - fy));
  add(x0, y1, (1 - fx) * fy);
  add(x1, y1, fx * fy);
  return taps;
}

/// Backward-mapping warp of a single plane: out(p) = in(h^-1 p), zero outside.
/// `mask`, when given, receives 1 where the source location was in bounds.
template <typename T>
inline std::vector<T> warp_plane(std::span<const T> plane, int w, int h, const Homography& hm,
                                 std::vector<T>* mask = nullptr) {
  const Homography inv = invert(hm);
  const Mat3& m = inv.matrix();
  std::vector<T> out(plane.size(), T(0));
  if (mask) mask->assign(plane.size(), T(0));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double den = m(2, 0) * x + m(2, 1) * y + m(2, 2);
      if (std::abs(den) < 1e-12) continue;
      const double sx = (m(0, 0) * x + m(0, 1) * y + m(0, 2)) / den;
      const double sy = (m(1, 0) * x + m(1, 1) * y + m(1, 2)) / den;
      bool valid = false;
      const double v = bilinear(plane, w, h, sx, sy, &valid);
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      out[i] = static_cast<T>(v);
      if (mask && valid) (*mask)[i] = T(1);
    }
  }
  return out;
}

inline GrayImage warp_image(const GrayImage& img, const Homography& h) {
  GrayImage out(img.width, img.height);
  out.data = warp_plane<float>(img.data, img.width, img.height, h);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation sampling

struct AugmentParams {
  double max_rotation = 10.0;      // degrees
  double max_translation = 0.05;   // fraction of image size
  double scale_min = 0.95;
  double scale_max = 1.05;
  double max_perspective = 0.02;   // corner denominator deviation

  void validate() const {
    require(max_rotation >= 0 && max_translation >= 0 && max_perspective >= 0,
            ErrorKind::InvalidArgument, "augmentation ranges must be non-negative");
    require(scale_min > 0 && scale_min <= scale_max, ErrorKind::InvalidArgument,
            "augmentation scale range must satisfy 0 < min <= max");
  }
};

struct SampledHomography {
  double rotation_deg = 0, scale = 1, tx = 0, ty = 0, px = 0, py = 0;
  Homography h;
};

/// Rotation, scale and perspective about the image centre, then translation.
/// Each component is uniform within its range and a pure function of the seed.
inline SampledHomography sample_homography_parts(const AugmentParams& params, int width,
                                                 int height, std::uint64_t seed) {
  params.validate();
  Rng rng(derive_seed(seed, "homography"));
  SampledHomography s;
  s.rotation_deg = uniform(rng, -params.max_rotation, params.max_rotation);
  s.scale = uniform(rng, params.scale_min, params.scale_max);
  s.tx = uniform(rng, -params.max_translation, params.max_translation) * width;
  s.ty = uniform(rng, -params.max_translation, params.max_translation) * height;
  s.px = uniform(rng, -params.max_perspective, params.max_perspective) / (0.5 * width);
  s.py = uniform(rng, -params.max_perspective, params.max_perspective) / (0.5 * height);

  const double cx = 0.5 * (width - 1), cy = 0.5 * (height - 1);
  const double th = s.rotation_deg * M_PI / 180.0;
  Mat3 center, uncenter, rot, persp, trans;
  center << 1, 0, -cx, 0, 1, -cy, 0, 0, 1;
  uncenter << 1, 0, cx, 0, 1, cy, 0, 0, 1;
  rot << s.scale * std::cos(th), -s.scale * std::sin(th), 0, s.scale * std::sin(th),
      s.scale * std::cos(th), 0, 0, 0, 1;
  persp << 1, 0, 0, 0, 1, 0, s.px, s.py, 1;
  trans << 1, 0, s.tx, 0, 1, s.ty, 0, 0, 1;
  s.h = Homography(trans * uncenter * rot * persp * center);
  return s;
}

inline Homography sample_homography(const AugmentParams& params, int width, int height,
                                    std::uint64_t seed) {
  return sample_homography_parts(params, width, height, seed).h;
}

// ---------------------------------------------------------------------------
// Correspondence text format: "x_query y_query x_ref y_ref" per line.

inline std::vector<Correspondence> parse_correspondences(std::istream& in,
                                                         const std::string& name = "<stream>") {
  std::vector<Correspondence> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    Correspondence c;
    std::string extra;
    if (!(ls >> c.query.x >> c.query.y >> c.reference.x >> c.reference.y) || (ls >> extra))
      fail(ErrorKind::Format, name + ":" + std::to_string(lineno) +
                                  ": expected 'x_query y_query x_ref y_ref'");
    if (!std::isfinite(c.query.x) || !std::isfinite(c.query.y) ||
        !std::isfinite(c.reference.x) || !std::isfinite(c.reference.y))
      fail(ErrorKind::Format, name + ":" + std::to_string(lineno) + ": non-finite coordinate");
    out.push_back(c);
  }
  return out;
}

inline std::vector<Correspondence> read_correspondences(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  return parse_correspondences(in, path.string());
}

inline std::string format_correspondences(std::span<const Correspondence> corrs) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& c : corrs)
    os << c.query.x << ' ' << c.query.y << ' ' << c.reference.x << ' ' << c.reference.y << '\n';
  return os.str();
}

inline void write_correspondences(std::span<const Correspondence> corrs,
                                  const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << format_correspondences(corrs);
}

}  // namespace retina
