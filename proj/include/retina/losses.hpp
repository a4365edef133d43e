#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "retina/core.hpp"
#include "retina/geometry.hpp"
#include "retina/nn/tape.hpp"

namespace retina::losses {

using nn::Tensor;

struct LossConfig {
  double sigma = 1.5;         // label smoothing, pixels
  double margin = 1.0;        // triplet margin m
  double dice_epsilon = 1e-6;
};

/// Per-term weights for the training objective; the loss identities below
/// always use the unweighted terms.
struct LossWeights {
  double clf = 1.0;
  double clf_rkd = 1.0;
  double geo = 1.0;
  double des = 1.0;
  double des_rkd = 1.0;
};

struct LossBreakdown {
  double l_clf = 0.0;
  double l_clf_rkd = 0.0;
  double l_geo = 0.0;
  double l_det = 0.0;
  double l_des = 0.0;
  double l_des_rkd = 0.0;
  double l_Des = 0.0;
  double total = 0.0;

  void finalize(const LossWeights& w = {}) {
    l_det = l_clf + l_clf_rkd + l_geo;
    l_Des = l_des + l_des_rkd;
    total = w.clf * l_clf + w.clf_rkd * l_clf_rkd + w.geo * l_geo + w.des * l_des +
            w.des_rkd * l_des_rkd;
  }
};

// ---------------------------------------------------------------------------
// Labels

/// Gaussian label map: each keypoint (rounded to its pixel) contributes
/// exp(-r^2 / 2 sigma^2); overlapping keypoints combine by max so every peak
/// stays exactly 1. Contributions are truncated beyond 6 sigma.
inline Tensor smooth_labels(std::span<const Point2> keypoints, int height, int width,
                            double sigma) {
  require(sigma > 0.0, ErrorKind::InvalidArgument, "sigma must be > 0");
  Tensor y({1, height, width}, 0.0);
  const int radius = static_cast<int>(std::ceil(6.0 * sigma));
  for (const Point2& k : keypoints) {
    if (!(k.x >= 0.0 && k.y >= 0.0 && k.x <= width - 1 && k.y <= height - 1))
      fail(ErrorKind::InvalidArgument, "keypoint (" + std::to_string(k.x) + ", " +
                                           std::to_string(k.y) + ") outside the label map");
    const int cx = static_cast<int>(std::lround(k.x));
    const int cy = static_cast<int>(std::lround(k.y));
    for (int yy = std::max(0, cy - radius); yy <= std::min(height - 1, cy + radius); ++yy)
      for (int xx = std::max(0, cx - radius); xx <= std::min(width - 1, cx + radius); ++xx) {
        const double r2 = static_cast<double>((xx - cx) * (xx - cx) + (yy - cy) * (yy - cy));
        if (r2 > 36.0 * sigma * sigma) continue;
        double& v = y.data[static_cast<std::size_t>(yy) * width + xx];
        v = std::max(v, std::exp(-r2 / (2.0 * sigma * sigma)));
      }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dice

/// 1 - (2 sum(a*b) + eps) / (sum(a*a) + sum(b*b) + eps). Gradients are
/// accumulated into grad_a / grad_b when given (same size as the inputs).
inline double dice_loss(std::span<const double> a, std::span<const double> b, double eps,
                        std::span<double> grad_a = {}, std::span<double> grad_b = {},
                        double scale = 1.0) {
  if (a.size() != b.size())
    fail(ErrorKind::ShapeMismatch, "dice_loss: inputs differ in size");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double num = 2.0 * ab + eps;
  const double den = aa + bb + eps;
  const double inv2 = scale / (den * den);
  if (!grad_a.empty())
    for (std::size_t i = 0; i < a.size(); ++i) grad_a[i] -= (2.0 * b[i] * den - num * 2.0 * a[i]) * inv2;
  if (!grad_b.empty())
    for (std::size_t i = 0; i < b.size(); ++i) grad_b[i] -= (2.0 * a[i] * den - num * 2.0 * b[i]) * inv2;
  return 1.0 - num / den;
}

inline double dice_loss(const Tensor& a, const Tensor& b, double eps = 1e-6) {
  nn::require_shape(b, a.shape, "dice_loss");
  return dice_loss(a.data, b.data, eps);
}

/// l_clf: dice between the predicted heatmap and the smoothed labels.
inline double l_clf(const Tensor& heatmap, const Tensor& labels, double eps,
                    Tensor* grad_heatmap = nullptr, double scale = 1.0) {
  nn::require_shape(labels, heatmap.shape, "l_clf");
  return dice_loss(heatmap.data, labels.data, eps,
                   grad_heatmap ? std::span<double>(grad_heatmap->data) : std::span<double>{}, {},
                   scale);
}

/// l_clf^RKD: dice between student and teacher heatmaps. The teacher map is
/// a constant; no gradient is ever produced for it.
inline double l_clf_rkd(const Tensor& student, const Tensor& teacher, double eps,
                        Tensor* grad_student = nullptr, double scale = 1.0) {
  nn::require_shape(teacher, student.shape, "l_clf_rkd");
  return dice_loss(student.data, teacher.data, eps,
                   grad_student ? std::span<double>(grad_student->data) : std::span<double>{}, {},
                   scale);
}

struct GeoResult {
  double value = 0.0;
  bool empty_support = false;
};

/// Geometric consistency: dice between P(I) and P(I') pulled back through h
/// (I' = warp(I, h)), restricted to pixels whose image under h lands inside
/// I'. Gradients flow to both heatmaps through the bilinear pull-back.
inline GeoResult l_geo(const Tensor& p_image, const Tensor& p_augmented, const Homography& h,
                       double eps, Tensor* grad_image = nullptr, Tensor* grad_augmented = nullptr,
                       double scale = 1.0) {
  nn::require_shape(p_augmented, p_image.shape, "l_geo");
  const int height = p_image.dim(1), width = p_image.dim(2);
  const Mat3& m = h.matrix();
  (void)invert(h);  // rejects singular h

  const std::size_t n = p_image.size();
  std::vector<BilinearTaps> taps(n);
  std::vector<double> a(n, 0.0), b(n, 0.0);
  std::size_t support = 0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      const double den = m(2, 0) * x + m(2, 1) * y + m(2, 2);
      if (std::abs(den) < 1e-12) continue;
      const double sx = (m(0, 0) * x + m(0, 1) * y + m(0, 2)) / den;
      const double sy = (m(1, 0) * x + m(1, 1) * y + m(1, 2)) / den;
      taps[i] = bilinear_taps(width, height, sx, sy);
      if (taps[i].count == 0) continue;
      ++support;
      a[i] = p_image.data[i];
      for (int k = 0; k < taps[i].count; ++k)
        b[i] += taps[i].weight[static_cast<std::size_t>(k)] *
                p_augmented.data[taps[i].index[static_cast<std::size_t>(k)]];
    }
  if (support == 0) return {0.0, true};

  std::vector<double> ga(grad_image ? n : 0, 0.0), gb(grad_augmented ? n : 0, 0.0);
  GeoResult r;
  r.value = dice_loss(a, b, eps, ga, gb, scale);
  for (std::size_t i = 0; i < n; ++i) {
    if (taps[i].count == 0) continue;
    if (grad_image) grad_image->data[i] += ga[i];
    if (grad_augmented)
      for (int k = 0; k < taps[i].count; ++k)
        grad_augmented->data[taps[i].index[static_cast<std::size_t>(k)]] +=
            taps[i].weight[static_cast<std::size_t>(k)] * gb[i];
  }
  return r;
}

// ---------------------------------------------------------------------------
// Descriptor triplet loss

namespace detail {

inline std::uint64_t point_key(std::uint64_t h, const Point2& p) {
  h = fnv1a(std::string_view(reinterpret_cast<const char*>(&p.x), sizeof(double)), h);
  return fnv1a(std::string_view(reinterpret_cast<const char*>(&p.y), sizeof(double)), h);
}

// Bilinear read of a d-vector at (x, y) from a d x H x W field, renormalized.
struct SampledVector {
  std::vector<double> v;     // unit vector
  double norm = 0.0;         // norm before renormalization
  BilinearTaps taps;
};

inline SampledVector sample_unit(const Tensor& field, const Point2& p) {
  const int d = field.dim(0), h = field.dim(1), w = field.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  SampledVector s;
  s.taps = bilinear_taps(w, h, p.x, p.y);
  s.v.assign(static_cast<std::size_t>(d), 0.0);
  for (int c = 0; c < d; ++c)
    for (int k = 0; k < s.taps.count; ++k)
      s.v[static_cast<std::size_t>(c)] += s.taps.weight[static_cast<std::size_t>(k)] *
                                          field.data[c * hw + s.taps.index[static_cast<std::size_t>(k)]];
  double n2 = 0.0;
  for (double x : s.v) n2 += x * x;
  s.norm = std::max(std::sqrt(n2), 1e-12);
  for (double& x : s.v) x /= s.norm;
  return s;
}

// Pushes dL/dv (v the unit sample) back into the field gradient.
inline void scatter_unit_grad(const SampledVector& s, const std::vector<double>& gv, Tensor& grad) {
  const int d = grad.dim(0);
  const std::size_t hw = static_cast<std::size_t>(grad.dim(1)) * grad.dim(2);
  double dot = 0.0;
  for (int c = 0; c < d; ++c) dot += s.v[static_cast<std::size_t>(c)] * gv[static_cast<std::size_t>(c)];
  for (int c = 0; c < d; ++c) {
    const double gs = (gv[static_cast<std::size_t>(c)] - s.v[static_cast<std::size_t>(c)] * dot) / s.norm;
    for (int k = 0; k < s.taps.count; ++k)
      grad.data[c * hw + s.taps.index[static_cast<std::size_t>(k)]] +=
          s.taps.weight[static_cast<std::size_t>(k)] * gs;
  }
}

inline double l2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

/// Index of the random negative for anchor `i`: among the other registered
/// keypoints, the one with the smallest hash of (seed, anchor, candidate)
/// coordinates. Independent of enumeration order.
inline std::size_t random_negative(std::span<const Point2> anchors, std::size_t i,
                                   std::uint64_t seed) {
  std::size_t best = i;
  std::uint64_t best_key = std::numeric_limits<std::uint64_t>::max();
  const std::uint64_t base = detail::point_key(splitmix64(seed), anchors[i]);
  for (std::size_t j = 0; j < anchors.size(); ++j) {
    if (j == i) continue;
    const std::uint64_t key = splitmix64(detail::point_key(base, anchors[j]));
    if (key < best_key || (key == best_key && j < best)) {
      best_key = key;
      best = j;
    }
  }
  return best;
}

struct TripletResult {
  double value = 0.0;
  std::size_t used = 0;  // keypoints whose registered location is in bounds
};

/// Triplet margin loss over keypoints: for each keypoint k with anchor
/// descriptor D(k) and positive D'(h k), the negatives are the descriptors of
/// D' at the other registered keypoints; the loss adds
/// max(0, m + d_pos - (d_rand + d_hard) / 2) with d_hard the closest negative
/// and d_rand a seed-chosen one. Keypoints outside either field are dropped.
/// Gradients accumulate into grad_d / grad_dprime when given.
inline TripletResult triplet_descriptor_loss(const Tensor& d, const Tensor& dprime,
                                             std::span<const Point2> keypoints,
                                             const Homography& h, double margin,
                                             std::uint64_t seed, Tensor* grad_d = nullptr,
                                             Tensor* grad_dprime = nullptr, double scale = 1.0) {
  require(d.rank() == 3 && dprime.rank() == 3 && d.dim(0) == dprime.dim(0),
          ErrorKind::ShapeMismatch, "descriptor fields must be d x H x W with equal d");
  const int h0 = d.dim(1), w0 = d.dim(2), h1 = dprime.dim(1), w1 = dprime.dim(2);
  std::vector<Point2> anchors, registered;
  for (const Point2& k : keypoints) {
    if (!(k.x >= 0 && k.y >= 0 && k.x <= w0 - 1 && k.y <= h0 - 1)) continue;
    Point2 q;
    try {
      q = apply(h, k);
    } catch (const Error&) {
      continue;
    }
    if (!(q.x >= 0 && q.y >= 0 && q.x <= w1 - 1 && q.y <= h1 - 1)) continue;
    anchors.push_back(k);
    registered.push_back(q);
  }
  const std::size_t n = anchors.size();
  if (n < 2)
    fail(ErrorKind::DegenerateInput, "triplet loss needs at least 2 registered keypoints");

  std::vector<detail::SampledVector> a(n), p(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = detail::sample_unit(d, anchors[i]);
    p[i] = detail::sample_unit(dprime, registered[i]);
  }
  const std::size_t dim = static_cast<std::size_t>(d.dim(0));
  std::vector<std::vector<double>> ga(n, std::vector<double>(dim, 0.0)), gp = ga;

  TripletResult result;
  result.used = n;
  auto pull = [&](std::size_t i, std::size_t j, double coeff) {
    // coeff * d/d(a_i, p_j) of ||a_i - p_j||
    const double dist = detail::l2(a[i].v, p[j].v);
    if (dist <= 0.0) return;
    for (std::size_t c = 0; c < dim; ++c) {
      const double g = coeff * (a[i].v[c] - p[j].v[c]) / dist;
      ga[i][c] += g;
      gp[j][c] -= g;
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = detail::l2(a[i].v, p[i].v);
    double hard = std::numeric_limits<double>::infinity();
    std::size_t hard_j = i;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dist = detail::l2(a[i].v, p[j].v);
      if (dist < hard) {
        hard = dist;
        hard_j = j;
      }
    }
    const std::size_t rand_j = random_negative(anchors, i, seed);
    const double rnd = detail::l2(a[i].v, p[rand_j].v);
    const double term = margin + pos - 0.5 * (rnd + hard);
    if (term <= 0.0) continue;
    result.value += term;
    pull(i, i, scale);
    pull(i, rand_j, -0.5 * scale);
    pull(i, hard_j, -0.5 * scale);
  }
  if (grad_d)
    for (std::size_t i = 0; i < n; ++i) detail::scatter_unit_grad(a[i], ga[i], *grad_d);
  if (grad_dprime)
    for (std::size_t i = 0; i < n; ++i) detail::scatter_unit_grad(p[i], gp[i], *grad_dprime);
  return result;
}

/// l_des^RKD: the same triplet construction between the student's and the
/// teacher's descriptors of one image (identity registration). Only the
/// student receives gradients.
inline TripletResult l_des_rkd(const Tensor& d_student, const Tensor& d_teacher,
                               std::span<const Point2> keypoints, double margin,
                               std::uint64_t seed, Tensor* grad_student = nullptr,
                               double scale = 1.0) {
  return triplet_descriptor_loss(d_student, d_teacher, keypoints, Homography::identity(), margin,
                                 seed, grad_student, nullptr, scale);
}

/// Inputs for the optional terms of the detector loss.
struct GeoInputs {
  const Tensor* p_augmented = nullptr;
  Homography h;
};

/// l_det = l_clf + [l_clf^RKD] + [l_geo]; absent terms contribute zero.
/// Only the detector fields of the breakdown are filled.
inline LossBreakdown detector_loss(const Tensor& p_student, const Tensor& labels,
                                   const Tensor* p_teacher, const GeoInputs* geo,
                                   const LossConfig& cfg = {}) {
  LossBreakdown b;
  b.l_clf = l_clf(p_student, labels, cfg.dice_epsilon);
  if (p_teacher) b.l_clf_rkd = l_clf_rkd(p_student, *p_teacher, cfg.dice_epsilon);
  if (geo && geo->p_augmented) b.l_geo = l_geo(p_student, *geo->p_augmented, geo->h, cfg.dice_epsilon).value;
  b.l_det = b.l_clf + b.l_clf_rkd + b.l_geo;
  b.total = b.l_det;
  return b;
}

/// l_Des = l_des + l_des^RKD.
inline double descriptor_loss_total(double l_des, double l_des_rkd) { return l_des + l_des_rkd; }

}  // namespace retina::losses
