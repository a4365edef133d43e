#pragma once

// Brute-force reference implementations used to pin library results.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "retina/core.hpp"
#include "retina/geometry.hpp"
#include "retina/losses.hpp"
#include "retina/nn/tape.hpp"

namespace retina::test {

/// Per-anchor pieces of the triplet loss, computed naively.
struct TripletTerm {
  double pos = 0.0;
  double hard = 0.0;
  double second_hard = 0.0;  // next-closest negative; equals hard on ties
  double rand = 0.0;
  double term = 0.0;         // before the hinge
};

struct TripletOracle {
  double value = 0.0;
  std::vector<TripletTerm> terms;
};

// Plain bilinear read with clamping at the last row/column, then L2 normalized.
inline std::vector<double> oracle_sample(const nn::Tensor& f, double x, double y) {
  const int d = f.dim(0), h = f.dim(1), w = f.dim(2);
  const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1), y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double ax = x - x0, ay = y - y0;
  std::vector<double> v(static_cast<std::size_t>(d));
  double n = 0.0;
  for (int c = 0; c < d; ++c) {
    auto at = [&](int yy, int xx) { return f.data[(static_cast<std::size_t>(c) * h + yy) * w + xx]; };
    v[c] = (1 - ax) * (1 - ay) * at(y0, x0) + ax * (1 - ay) * at(y0, x1) + (1 - ax) * ay * at(y1, x0) + ax * ay * at(y1, x1);
    n += v[c] * v[c];
  }
  n = std::sqrt(n);
  for (double& e : v) e /= n;
  return v;
}

inline double oracle_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// All keypoints are assumed to register inside both fields. The random
/// negative index is taken from the library's hash so the two agree.
inline TripletOracle triplet_oracle(const nn::Tensor& d, const nn::Tensor& dprime, const std::vector<Point2>& kps,
                                    const Homography& h, double margin, std::uint64_t seed) {
  const std::size_t n = kps.size();
  std::vector<std::vector<double>> a, p;
  for (const Point2& k : kps) {
    const Eigen::Vector3d q = h.matrix() * Eigen::Vector3d(k.x, k.y, 1.0);
    a.push_back(oracle_sample(d, k.x, k.y));
    p.push_back(oracle_sample(dprime, q.x() / q.z(), q.y() / q.z()));
  }
  TripletOracle out;
  for (std::size_t i = 0; i < n; ++i) {
    TripletTerm t;
    t.pos = oracle_dist(a[i], p[i]);
    std::vector<double> neg;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) neg.push_back(oracle_dist(a[i], p[j]));
    std::sort(neg.begin(), neg.end());
    t.hard = neg[0];
    t.second_hard = neg.size() > 1 ? neg[1] : std::numeric_limits<double>::infinity();
    t.rand = oracle_dist(a[i], p[losses::random_negative(kps, i, seed)]);
    t.term = margin + t.pos - 0.5 * (t.rand + t.hard);
    out.value += std::max(0.0, t.term);
    out.terms.push_back(t);
  }
  return out;
}

/// A random triplet instance whose loss is differentiable with room to
/// spare: no hinge within 1e-4 of zero and no near-tie for the hardest
/// negative. Hinge kinks are first moved by perturbing the margin; ties
/// force a fresh draw.
struct TripletInstance {
  nn::Tensor d, dprime;
  std::vector<Point2> keypoints;
  Homography h;
  double margin = 1.0;
  std::uint64_t seed = 0;
};

inline bool triplet_smooth(const TripletOracle& o) {
  for (const auto& t : o.terms)
    if (std::abs(t.term) < 1e-4 || t.second_hard - t.hard < 1e-4) return false;
  return true;
}

inline TripletInstance smooth_triplet_instance(std::uint64_t seed, int dim, int h, int w, int n_kps,
                                               bool identity = false) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, attempt));
    TripletInstance ti;
    ti.seed = derive_seed(seed, "negatives");
    ti.d = nn::Tensor({dim, h, w});
    ti.dprime = nn::Tensor({dim, h, w});
    for (double& v : ti.d.data) v = uniform(rng, -1, 1);
    for (double& v : ti.dprime.data) v = uniform(rng, -1, 1);
    ti.h = identity ? Homography::identity()
                    : Homography(Eigen::Matrix3d{{1.0, 0.05, 0.4}, {-0.03, 0.98, 0.3}, {0.0, 0.0, 1.0}});
    while (static_cast<int>(ti.keypoints.size()) < n_kps) {
      const Point2 k{uniform(rng, 1.0, w - 3.0), uniform(rng, 1.0, h - 3.0)};
      ti.keypoints.push_back(k);
    }
    for (double m : {1.0, 1.013, 0.987, 1.031, 0.969}) {
      ti.margin = m;
      if (triplet_smooth(triplet_oracle(ti.d, ti.dprime, ti.keypoints, ti.h, m, ti.seed))) return ti;
    }
  }
}

/// Dice loss by its defining formula.
inline double dice_oracle(const std::vector<double>& a, const std::vector<double>& b, double eps) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return 1.0 - (2.0 * ab + eps) / (aa + bb + eps);
}

}  // namespace retina::test
