#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "retina/core.hpp"
#include "retina/geometry.hpp"
#include "retina/nn/tape.hpp"

namespace retina {

struct Keypoint {
  Point2 pt;
  double score = 0.0;
};

/// NMS output: scores descending, ties by (y, x) ascending.
struct KeypointSet {
  std::vector<Keypoint> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  std::vector<Point2> locations() const {
    std::vector<Point2> out;
    out.reserve(points.size());
    for (const auto& k : points) out.push_back(k.pt);
    return out;
  }
};

struct KeypointConfig {
  double threshold = 0.3;
  double nms_window = 10.0;
  int max_keypoints = 1024;
  bool subpixel = true;
  double ratio = 0.9;
  bool mutual = true;
};

/// Greedy non-maximum suppression on a 1 x H x W (or H x W) heatmap.
///
/// Candidates are 3x3 local maxima at or above `threshold`. They are taken in
/// score order and a candidate is dropped when an accepted keypoint lies
/// closer than `window` pixels. Accepted peaks are refined by a separable
/// quadratic fit over their 3x3 neighbourhood (offsets clamped to half a
/// pixel).
inline KeypointSet nms_extract(const nn::Tensor& heatmap, double threshold, double window,
                               int max_keypoints, bool subpixel = true) {
  require(heatmap.rank() == 2 || (heatmap.rank() == 3 && heatmap.dim(0) == 1),
          ErrorKind::ShapeMismatch, "nms_extract expects a single-channel heatmap");
  const int h = heatmap.dim(heatmap.rank() - 2), w = heatmap.dim(heatmap.rank() - 1);
  auto at = [&](int x, int y) { return heatmap.data[static_cast<std::size_t>(y) * w + x]; };

  struct Cand {
    int x, y;
    double s;
  };
  std::vector<Cand> cands;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = at(x, y);
      if (!(v >= threshold)) continue;
      bool peak = true;
      for (int dy = -1; dy <= 1 && peak; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (!dx && !dy) continue;
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
          if (at(xx, yy) > v) {
            peak = false;
            break;
          }
        }
      if (peak) cands.push_back({x, y, v});
    }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.s != b.s) return a.s > b.s;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });

  KeypointSet out;
  const double w2 = window * window;
  // Accepted integer peaks bucketed on a coarse grid for the distance test.
  const int cell = std::max(1, static_cast<int>(std::ceil(window)));
  const int gw = (w + cell - 1) / cell, gh = (h + cell - 1) / cell;
  std::vector<std::vector<std::pair<int, int>>> grid(static_cast<std::size_t>(gw) * gh);
  for (const Cand& c : cands) {
    if (max_keypoints >= 0 && static_cast<int>(out.points.size()) >= max_keypoints) break;
    const int cx = c.x / cell, cy = c.y / cell;
    bool suppressed = false;
    for (int gy = std::max(0, cy - 1); gy <= std::min(gh - 1, cy + 1) && !suppressed; ++gy)
      for (int gx = std::max(0, cx - 1); gx <= std::min(gw - 1, cx + 1) && !suppressed; ++gx)
        for (const auto& [ax, ay] : grid[static_cast<std::size_t>(gy) * gw + gx]) {
          const double d2 = static_cast<double>((ax - c.x) * (ax - c.x) + (ay - c.y) * (ay - c.y));
          if (d2 < w2) {
            suppressed = true;
            break;
          }
        }
    if (suppressed) continue;
    grid[static_cast<std::size_t>(cy) * gw + cx].push_back({c.x, c.y});

    Point2 p{static_cast<double>(c.x), static_cast<double>(c.y)};
    if (subpixel) {
      auto offset = [](double l, double m, double r) {
        const double den = l - 2.0 * m + r;
        if (!(std::abs(den) > 1e-12)) return 0.0;
        return std::clamp(0.5 * (l - r) / den, -0.5, 0.5);
      };
      if (c.x > 0 && c.x < w - 1) p.x += offset(at(c.x - 1, c.y), c.s, at(c.x + 1, c.y));
      if (c.y > 0 && c.y < h - 1) p.y += offset(at(c.x, c.y - 1), c.s, at(c.x, c.y + 1));
    }
    out.points.push_back({p, c.s});
  }
  return out;
}

/// Row-per-keypoint unit descriptors.
using DescriptorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Bilinear read of a d x H x W descriptor field at each keypoint, then
/// renormalized to unit length.
inline DescriptorMatrix sample_descriptors(const nn::Tensor& field, const KeypointSet& kps) {
  require(field.rank() == 3, ErrorKind::ShapeMismatch, "descriptor field must be d x H x W");
  const int d = field.dim(0), h = field.dim(1), w = field.dim(2);
  DescriptorMatrix out(static_cast<Eigen::Index>(kps.size()), d);
  for (std::size_t i = 0; i < kps.size(); ++i) {
    const Point2& p = kps.points[i].pt;
    if (!(p.x >= 0 && p.y >= 0 && p.x <= w - 1 && p.y <= h - 1))
      fail(ErrorKind::InvalidArgument, "keypoint (" + std::to_string(p.x) + ", " +
                                           std::to_string(p.y) + ") outside the descriptor field");
    const BilinearTaps taps = bilinear_taps(w, h, p.x, p.y);
    for (int c = 0; c < d; ++c) {
      double v = 0.0;
      for (int k = 0; k < taps.count; ++k)
        v += taps.weight[static_cast<std::size_t>(k)] *
             field.data[static_cast<std::size_t>(c) * h * w + taps.index[static_cast<std::size_t>(k)]];
      out(static_cast<Eigen::Index>(i), c) = v;
    }
    const double n = out.row(static_cast<Eigen::Index>(i)).norm();
    if (n > 1e-12) out.row(static_cast<Eigen::Index>(i)) /= n;
  }
  return out;
}

struct Match {
  std::size_t query = 0;
  std::size_t reference = 0;
  double distance = 0.0;
};

struct MatchSet {
  std::vector<Match> matches;
  KeypointSet query_keypoints;
  KeypointSet reference_keypoints;

  std::size_t size() const { return matches.size(); }
};

namespace detail {
inline DescriptorMatrix pairwise_distances(const DescriptorMatrix& a, const DescriptorMatrix& b) {
  DescriptorMatrix d = -2.0 * (a * b.transpose());
  d.colwise() += a.rowwise().squaredNorm();
  d.rowwise() += b.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0).cwiseSqrt();
}
}  // namespace detail

/// Nearest-neighbour matching in L2 with Lowe's ratio test and an optional
/// mutual-nearest check. With a single reference descriptor the ratio test
/// is undefined and only the mutual check applies.
inline std::vector<Match> match_descriptors(const DescriptorMatrix& a, const DescriptorMatrix& b,
                                            double ratio, bool mutual) {
  std::vector<Match> out;
  if (a.rows() == 0 || b.rows() == 0) return out;
  require(a.cols() == b.cols(), ErrorKind::ShapeMismatch, "descriptor dimensions differ");
  const DescriptorMatrix dist = detail::pairwise_distances(a, b);

  std::vector<Eigen::Index> best_for_b(static_cast<std::size_t>(b.rows()));
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    Eigen::Index best = 0;
    dist.col(j).minCoeff(&best);
    best_for_b[static_cast<std::size_t>(j)] = best;
  }
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    Eigen::Index j1 = 0;
    const double d1 = dist.row(i).minCoeff(&j1);
    const bool reciprocal = best_for_b[static_cast<std::size_t>(j1)] == i;
    if (b.rows() >= 2) {
      double d2 = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < b.rows(); ++j)
        if (j != j1) d2 = std::min(d2, dist(i, j));
      const bool pass_ratio = d2 > 0.0 ? d1 / d2 < ratio : false;
      if (!pass_ratio) continue;
      if (mutual && !reciprocal) continue;
    } else if (!reciprocal) {
      continue;
    }
    out.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j1), d1});
  }
  return out;
}

inline MatchSet match_keypoints(const KeypointSet& qk, const DescriptorMatrix& qd,
                                const KeypointSet& rk, const DescriptorMatrix& rd,
                                const KeypointConfig& cfg) {
  MatchSet m;
  m.matches = match_descriptors(qd, rd, cfg.ratio, cfg.mutual);
  m.query_keypoints = qk;
  m.reference_keypoints = rk;
  return m;
}

}  // namespace retina
