#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "retina/core.hpp"
#include "retina/nn/tape.hpp"

namespace retina::nn {

using Id = Tape::Id;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

namespace detail {

inline bool any_grad(const Tape& t, std::initializer_list<Id> ids) {
  for (Id id : ids)
    if (t.requires_grad(id)) return true;
  return false;
}

inline void check_chw(const Tensor& x, const char* what) {
  if (x.rank() != 3)
    fail(ErrorKind::ShapeMismatch, std::string(what) + ": expected C x H x W, got " +
                                       shape_string(x.shape));
}

// Unfolds a C x H x W map into (C*k*k) x (H*W) patch columns, zero padded.
inline RowMat im2col(const Tensor& x, int k, int pad) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  RowMat cols(static_cast<Eigen::Index>(c) * k * k, static_cast<Eigen::Index>(h) * w);
  for (int ci = 0; ci < c; ++ci) {
    const double* src = x.ptr() + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = cols.data() + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * h * w;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          double* row = dst + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(row, row + w, 0.0);
            continue;
          }
          const double* srow = src + static_cast<std::size_t>(sy) * w;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            row[xx] = (sx >= 0 && sx < w) ? srow[sx] : 0.0;
          }
        }
      }
    }
  }
  return cols;
}

inline void col2im_add(const RowMat& cols, Tensor& dx, int k, int pad) {
  const int c = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  for (int ci = 0; ci < c; ++ci) {
    double* dst = dx.ptr() + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src =
            cols.data() + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * h * w;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const double* row = src + static_cast<std::size_t>(y) * w;
          double* drow = dst + static_cast<std::size_t>(sy) * w;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            if (sx >= 0 && sx < w) drow[sx] += row[xx];
          }
        }
      }
    }
  }
}

inline void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolutions

/// Same-padded stride-1 convolution. x: Ci x H x W, w: Co x Ci x k x k (k odd),
/// bias: Co or none (pass `no_bias`).
inline constexpr Id no_bias = static_cast<Id>(-1);

inline Id conv2d(Tape& t, Id x, Id w, Id b = no_bias) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  detail::check_chw(xv, "conv2d input");
  if (wv.rank() != 4 || wv.dim(1) != xv.dim(0) || wv.dim(2) != wv.dim(3) || wv.dim(2) % 2 == 0)
    fail(ErrorKind::ShapeMismatch, "conv2d weight " + shape_string(wv.shape) +
                                       " incompatible with input " + shape_string(xv.shape));
  const int ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int co = wv.dim(0), k = wv.dim(2), pad = k / 2;
  if (b != no_bias) require_shape(t.value(b), {co}, "conv2d bias");
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * wd;

  Tensor out({co, h, wd});
  {
    const RowMat cols = detail::im2col(xv, k, pad);
    ConstMapMat wm(wv.ptr(), co, static_cast<Eigen::Index>(ci) * k * k);
    MapMat om(out.ptr(), co, hw);
    om.noalias() = wm * cols;
    if (b != no_bias) {
      const Tensor& bv = t.value(b);
      for (int o = 0; o < co; ++o) om.row(o).array() += bv[static_cast<std::size_t>(o)];
    }
  }
  const bool rg = detail::any_grad(t, {x, w}) || (b != no_bias && t.requires_grad(b));
  return t.record(std::move(out), rg, [x, w, b, k, pad, co, ci, hw](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    ConstMapMat gm(g.ptr(), co, hw);
    const Tensor& xv = t.value(x);
    if (t.requires_grad(w)) {
      const RowMat cols = detail::im2col(xv, k, pad);
      MapMat gw(t.grad(w).ptr(), co, static_cast<Eigen::Index>(ci) * k * k);
      gw.noalias() += gm * cols.transpose();
    }
    if (b != no_bias && t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (int o = 0; o < co; ++o) gb[static_cast<std::size_t>(o)] += gm.row(o).sum();
    }
    if (t.requires_grad(x)) {
      ConstMapMat wm(t.value(w).ptr(), co, static_cast<Eigen::Index>(ci) * k * k);
      const RowMat dcols = wm.transpose() * gm;
      detail::col2im_add(dcols, t.grad(x), k, pad);
    }
  });
}

/// Transposed convolution with kernel 4, stride 2 and padding 1 (2x
/// upsampling where neighbouring input cells overlap). Input cell (y, x)
/// writes tap (ky, kx) to output (2y - 1 + ky, 2x - 1 + kx).
/// x: Ci x H x W, w: Co x 4 x 4 x Ci, bias: Co.
inline Id conv_transpose4x4(Tape& t, Id x, Id w, Id b) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  detail::check_chw(xv, "conv_transpose input");
  const int ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  if (wv.rank() != 4 || wv.dim(1) != 4 || wv.dim(2) != 4 || wv.dim(3) != ci)
    fail(ErrorKind::ShapeMismatch, "conv_transpose weight " + shape_string(wv.shape));
  const int co = wv.dim(0);
  require_shape(t.value(b), {co}, "conv_transpose bias");
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * wd;
  const int oh = 2 * h, ow = 2 * wd;

  // Visits every (tap row of r, input cell, output cell) triple inside the image.
  auto for_taps = [co, h, wd, hw, oh, ow](auto&& fn) {
    for (int o = 0; o < co; ++o)
      for (int k = 0; k < 16; ++k) {
        const int ky = k / 4, kx = k % 4;
        const std::size_t row = (static_cast<std::size_t>(o) * 16 + k) * static_cast<std::size_t>(hw);
        const std::size_t plane = static_cast<std::size_t>(o) * oh * ow;
        for (int y = 0; y < h; ++y) {
          const int oy = 2 * y - 1 + ky;
          if (oy < 0 || oy >= oh) continue;
          for (int xx = 0; xx < wd; ++xx) {
            const int ox = 2 * xx - 1 + kx;
            if (ox < 0 || ox >= ow) continue;
            fn(row + static_cast<std::size_t>(y) * wd + xx, plane + static_cast<std::size_t>(oy) * ow + ox);
          }
        }
      }
  };

  Tensor out({co, oh, ow});
  {
    ConstMapMat wm(wv.ptr(), static_cast<Eigen::Index>(co) * 16, ci);
    ConstMapMat xm(xv.ptr(), ci, hw);
    const RowMat r = wm * xm;
    for_taps([&](std::size_t src, std::size_t dst) { out.ptr()[dst] += r.data()[src]; });
    const Tensor& bv = t.value(b);
    for (int o = 0; o < co; ++o) {
      double* dst = out.ptr() + static_cast<std::size_t>(o) * oh * ow;
      for (int i = 0; i < oh * ow; ++i) dst[i] += bv[static_cast<std::size_t>(o)];
    }
  }
  const bool rg = detail::any_grad(t, {x, w, b});
  return t.record(std::move(out), rg, [x, w, b, ci, co, hw, oh, ow, for_taps](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (int o = 0; o < co; ++o) {
        const double* src = g.ptr() + static_cast<std::size_t>(o) * oh * ow;
        double s = 0.0;
        for (int i = 0; i < oh * ow; ++i) s += src[i];
        gb[static_cast<std::size_t>(o)] += s;
      }
    }
    // Gather the output gradient back into (Co*16) x (H*W) tap rows.
    RowMat gr = RowMat::Zero(static_cast<Eigen::Index>(co) * 16, hw);
    for_taps([&](std::size_t dst, std::size_t src) { gr.data()[dst] = g.ptr()[src]; });
    if (t.requires_grad(w)) {
      ConstMapMat xm(t.value(x).ptr(), ci, hw);
      MapMat gw(t.grad(w).ptr(), static_cast<Eigen::Index>(co) * 16, ci);
      gw.noalias() += gr * xm.transpose();
    }
    if (t.requires_grad(x)) {
      ConstMapMat wm(t.value(w).ptr(), static_cast<Eigen::Index>(co) * 16, ci);
      MapMat gx(t.grad(x).ptr(), ci, hw);
      gx.noalias() += wm.transpose() * gr;
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Id add(Tape& t, Id a, Id b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_shape(bv, av.shape, "add");
  Tensor out = av;
  detail::add_into(out, bv);
  return t.record(std::move(out), detail::any_grad(t, {a, b}), [a, b](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) detail::add_into(t.grad(a), g);
    if (t.requires_grad(b)) detail::add_into(t.grad(b), g);
  });
}

inline Id relu(Tape& t, Id x) {
  const Tensor& xv = t.value(x);
  Tensor out = xv;
  std::uint64_t sig = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out.data[i] <= 0.0) {
      out.data[i] = 0.0;
      if (t.tracking_pattern()) sig = splitmix64(sig ^ i);
    }
  }
  if (t.tracking_pattern()) t.mix_pattern(sig);
  return t.record(std::move(out), t.requires_grad(x), [x](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv.data[i] > 0.0) gx.data[i] += g.data[i];
  });
}

inline Id sigmoid(Tape& t, Id x) {
  Tensor out = t.value(x);
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return t.record(std::move(out), t.requires_grad(x), [x](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
  });
}

/// tanh-approximated GELU.
inline Id gelu(Tape& t, Id x) {
  constexpr double k0 = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k1 = 0.044715;
  Tensor out = t.value(x);
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::tanh(k0 * (v + k1 * v * v * v)));
  return t.record(std::move(out), t.requires_grad(x), [x](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv.data[i];
      const double u = k0 * (v + k1 * v * v * v);
      const double th = std::tanh(u);
      const double du = k0 * (1.0 + 3.0 * k1 * v * v);
      gx.data[i] += g.data[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
  });
}

/// Inverted dropout. The mask is a pure function of `seed`; inactive dropout
/// returns `x` unchanged.
inline Id dropout(Tape& t, Id x, double rate, bool active, std::uint64_t seed) {
  if (!active || rate <= 0.0) return x;
  require(rate < 1.0, ErrorKind::InvalidArgument, "dropout rate must be < 1");
  const Tensor& xv = t.value(x);
  Rng rng(seed);
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(xv.size());
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = uniform01(rng) < keep ? 1.0 / keep : 0.0;
    out.data[i] *= (*mask)[i];
  }
  return t.record(std::move(out), t.requires_grad(x), [x, mask](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------------------
// Spatial

inline Id maxpool2(Tape& t, Id x) {
  const Tensor& xv = t.value(x);
  detail::check_chw(xv, "maxpool2");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  require(h % 2 == 0 && w % 2 == 0, ErrorKind::ShapeMismatch, "maxpool2 needs even extents");
  const int oh = h / 2, ow = w / 2;
  Tensor out({c, oh, ow});
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  std::uint64_t sig = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        std::size_t best = (static_cast<std::size_t>(ch) * h + 2 * y) * w + 2 * xx;
        for (int d = 1; d < 4; ++d) {
          const std::size_t i = (static_cast<std::size_t>(ch) * h + 2 * y + d / 2) * w + 2 * xx + d % 2;
          if (xv.data[i] > xv.data[best]) best = i;
        }
        const std::size_t o = (static_cast<std::size_t>(ch) * oh + y) * ow + xx;
        out.data[o] = xv.data[best];
        (*arg)[o] = best;
        if (t.tracking_pattern()) sig = splitmix64(sig ^ (best * 4 + o));
      }
  if (t.tracking_pattern()) t.mix_pattern(sig);
  return t.record(std::move(out), t.requires_grad(x), [x, arg](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (std::size_t o = 0; o < g.size(); ++o) gx.data[(*arg)[o]] += g.data[o];
  });
}

namespace detail {
struct Lerp {
  int i0, i1;
  double f;
};
// Half-pixel-centred source coordinates for 2x upsampling.
inline std::vector<Lerp> upsample_taps(int n) {
  std::vector<Lerp> taps(static_cast<std::size_t>(2 * n));
  for (int o = 0; o < 2 * n; ++o) {
    const double src = std::clamp((o + 0.5) / 2.0 - 0.5, 0.0, static_cast<double>(n - 1));
    const int i0 = static_cast<int>(std::floor(src));
    taps[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, n - 1), src - i0};
  }
  return taps;
}
}  // namespace detail

/// Bilinear 2x upsampling.
inline Id upsample2(Tape& t, Id x) {
  const Tensor& xv = t.value(x);
  detail::check_chw(xv, "upsample2");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const auto ty = detail::upsample_taps(h), tx = detail::upsample_taps(w);
  Tensor out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch) {
    const double* src = xv.ptr() + static_cast<std::size_t>(ch) * h * w;
    double* dst = out.ptr() + static_cast<std::size_t>(ch) * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      for (int xx = 0; xx < 2 * w; ++xx) {
        const auto& b = tx[static_cast<std::size_t>(xx)];
        auto at = [&](int yy, int xi) { return src[static_cast<std::size_t>(yy) * w + xi]; };
        dst[static_cast<std::size_t>(y) * 2 * w + xx] =
            (1 - a.f) * ((1 - b.f) * at(a.i0, b.i0) + b.f * at(a.i0, b.i1)) +
            a.f * ((1 - b.f) * at(a.i1, b.i0) + b.f * at(a.i1, b.i1));
      }
    }
  }
  return t.record(std::move(out), t.requires_grad(x), [x, c, h, w](Tape& t, Id self) {
    const auto ty = detail::upsample_taps(h), tx = detail::upsample_taps(w);
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (int ch = 0; ch < c; ++ch) {
      double* dst = gx.ptr() + static_cast<std::size_t>(ch) * h * w;
      const double* src = g.ptr() + static_cast<std::size_t>(ch) * 4 * h * w;
      for (int y = 0; y < 2 * h; ++y) {
        const auto& a = ty[static_cast<std::size_t>(y)];
        for (int xx = 0; xx < 2 * w; ++xx) {
          const auto& b = tx[static_cast<std::size_t>(xx)];
          const double v = src[static_cast<std::size_t>(y) * 2 * w + xx];
          dst[static_cast<std::size_t>(a.i0) * w + b.i0] += v * (1 - a.f) * (1 - b.f);
          dst[static_cast<std::size_t>(a.i0) * w + b.i1] += v * (1 - a.f) * b.f;
          dst[static_cast<std::size_t>(a.i1) * w + b.i0] += v * a.f * (1 - b.f);
          dst[static_cast<std::size_t>(a.i1) * w + b.i1] += v * a.f * b.f;
        }
      }
    }
  });
}

/// Channel concatenation of two C x H x W maps.
inline Id concat(Tape& t, Id a, Id b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  detail::check_chw(av, "concat");
  detail::check_chw(bv, "concat");
  require(av.dim(1) == bv.dim(1) && av.dim(2) == bv.dim(2), ErrorKind::ShapeMismatch,
          "concat spatial mismatch " + shape_string(av.shape) + " vs " + shape_string(bv.shape));
  Tensor out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + static_cast<long>(av.size()));
  const std::size_t na = av.size();
  return t.record(std::move(out), detail::any_grad(t, {a, b}), [a, b, na](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < na; ++i) ga.data[i] += g.data[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] += g.data[na + i];
    }
  });
}

/// Per-pixel L2 normalization across channels.
inline Id l2_normalize_channels(Tape& t, Id x, double eps = 1e-12) {
  const Tensor& xv = t.value(x);
  detail::check_chw(xv, "l2_normalize");
  const int c = xv.dim(0);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  auto norms = std::make_shared<std::vector<double>>(hw);
  Tensor out = xv;
  for (std::size_t p = 0; p < hw; ++p) {
    double s = 0.0;
    for (int ch = 0; ch < c; ++ch) s += xv.data[ch * hw + p] * xv.data[ch * hw + p];
    const double n = std::max(std::sqrt(s), eps);
    (*norms)[p] = n;
    for (int ch = 0; ch < c; ++ch) out.data[ch * hw + p] /= n;
  }
  return t.record(std::move(out), t.requires_grad(x), [x, c, hw, norms](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(x);
    for (std::size_t p = 0; p < hw; ++p) {
      double dot = 0.0;
      for (int ch = 0; ch < c; ++ch) dot += y.data[ch * hw + p] * g.data[ch * hw + p];
      for (int ch = 0; ch < c; ++ch)
        gx.data[ch * hw + p] += (g.data[ch * hw + p] - y.data[ch * hw + p] * dot) / (*norms)[p];
    }
  });
}

// ---------------------------------------------------------------------------
// Token ops (N x E)

/// Non-overlapping p x p patches of a C x H x W map as tokens of length C*p*p,
/// raster order over patches.
inline Id patchify(Tape& t, Id x, int p) {
  const Tensor& xv = t.value(x);
  detail::check_chw(xv, "patchify");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  require(h % p == 0 && w % p == 0, ErrorKind::ShapeMismatch, "patchify needs divisible extents");
  const int gh = h / p, gw = w / p, e = c * p * p;
  Tensor out({gh * gw, e});
  auto index = [=](int n, int j) {
    const int ch = j / (p * p), r = (j / p) % p, s = j % p;
    const int y = (n / gw) * p + r, xx = (n % gw) * p + s;
    return (static_cast<std::size_t>(ch) * h + y) * w + xx;
  };
  for (int n = 0; n < gh * gw; ++n)
    for (int j = 0; j < e; ++j) out.data[static_cast<std::size_t>(n) * e + j] = xv.data[index(n, j)];
  return t.record(std::move(out), t.requires_grad(x), [x, index, gh, gw, e](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (int n = 0; n < gh * gw; ++n)
      for (int j = 0; j < e; ++j) gx.data[index(n, j)] += g.data[static_cast<std::size_t>(n) * e + j];
  });
}

/// N x E tokens (raster order over an h x w grid) to an E x h x w map.
inline Id tokens_to_map(Tape& t, Id x, int h, int w) {
  const Tensor& xv = t.value(x);
  require(xv.rank() == 2 && xv.dim(0) == h * w, ErrorKind::ShapeMismatch,
          "tokens_to_map: token count does not match grid");
  const int e = xv.dim(1);
  Tensor out({e, h, w});
  ConstMapMat xm(xv.ptr(), h * w, e);
  MapMat om(out.ptr(), e, h * w);
  om = xm.transpose();
  return t.record(std::move(out), t.requires_grad(x), [x, e, h, w](Tape& t, Id self) {
    ConstMapMat gm(t.grad(self).ptr(), e, h * w);
    MapMat gx(t.grad(x).ptr(), h * w, e);
    gx += gm.transpose();
  });
}

/// Token-wise affine map. x: N x Ein, w: Eout x Ein, b: Eout.
inline Id linear(Tape& t, Id x, Id w, Id b) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  if (xv.rank() != 2 || wv.rank() != 2 || wv.dim(1) != xv.dim(1))
    fail(ErrorKind::ShapeMismatch, "linear: weight " + shape_string(wv.shape) + " vs input " +
                                       shape_string(xv.shape));
  const int n = xv.dim(0), ein = xv.dim(1), eout = wv.dim(0);
  require_shape(t.value(b), {eout}, "linear bias");
  Tensor out({n, eout});
  {
    ConstMapMat xm(xv.ptr(), n, ein);
    ConstMapMat wm(wv.ptr(), eout, ein);
    MapMat om(out.ptr(), n, eout);
    om.noalias() = xm * wm.transpose();
    Eigen::Map<const Eigen::RowVectorXd> bv(t.value(b).ptr(), eout);
    om.rowwise() += bv;
  }
  return t.record(std::move(out), detail::any_grad(t, {x, w, b}),
                  [x, w, b, n, ein, eout](Tape& t, Id self) {
                    ConstMapMat gm(t.grad(self).ptr(), n, eout);
                    if (t.requires_grad(w)) {
                      ConstMapMat xm(t.value(x).ptr(), n, ein);
                      MapMat gw(t.grad(w).ptr(), eout, ein);
                      gw.noalias() += gm.transpose() * xm;
                    }
                    if (t.requires_grad(b)) {
                      Eigen::Map<Eigen::RowVectorXd> gb(t.grad(b).ptr(), eout);
                      gb += gm.colwise().sum();
                    }
                    if (t.requires_grad(x)) {
                      ConstMapMat wm(t.value(w).ptr(), eout, ein);
                      MapMat gx(t.grad(x).ptr(), n, ein);
                      gx.noalias() += gm * wm;
                    }
                  });
}

/// Layer normalization over the last axis of N x E tokens.
inline Id layer_norm(Tape& t, Id x, Id gamma, Id beta, double eps = 1e-5) {
  const Tensor& xv = t.value(x);
  require(xv.rank() == 2, ErrorKind::ShapeMismatch, "layer_norm expects N x E");
  const int n = xv.dim(0), e = xv.dim(1);
  require_shape(t.value(gamma), {e}, "layer_norm gamma");
  require_shape(t.value(beta), {e}, "layer_norm beta");
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  Tensor out({n, e});
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  for (int i = 0; i < n; ++i) {
    const double* row = xv.ptr() + static_cast<std::size_t>(i) * e;
    double mean = 0.0;
    for (int j = 0; j < e; ++j) mean += row[j];
    mean /= e;
    double var = 0.0;
    for (int j = 0; j < e; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= e;
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(i)] = r;
    for (int j = 0; j < e; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * e + j;
      (*xhat)[k] = (row[j] - mean) * r;
      out.data[k] = (*xhat)[k] * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
    }
  }
  return t.record(std::move(out), detail::any_grad(t, {x, gamma, beta}),
                  [x, gamma, beta, n, e, xhat, rstd](Tape& t, Id self) {
                    const Tensor& g = t.grad(self);
                    const Tensor& gv = t.value(gamma);
                    const bool gx_needed = t.requires_grad(x);
                    for (int i = 0; i < n; ++i) {
                      double sum_gh = 0.0, sum_ghx = 0.0;
                      for (int j = 0; j < e; ++j) {
                        const std::size_t k = static_cast<std::size_t>(i) * e + j;
                        const double gh = g.data[k] * gv[static_cast<std::size_t>(j)];
                        sum_gh += gh;
                        sum_ghx += gh * (*xhat)[k];
                        if (t.requires_grad(gamma)) t.grad(gamma)[static_cast<std::size_t>(j)] += g.data[k] * (*xhat)[k];
                        if (t.requires_grad(beta)) t.grad(beta)[static_cast<std::size_t>(j)] += g.data[k];
                      }
                      if (!gx_needed) continue;
                      Tensor& gx = t.grad(x);
                      const double r = (*rstd)[static_cast<std::size_t>(i)];
                      for (int j = 0; j < e; ++j) {
                        const std::size_t k = static_cast<std::size_t>(i) * e + j;
                        const double gh = g.data[k] * gv[static_cast<std::size_t>(j)];
                        gx.data[k] += r * (gh - sum_gh / e - (*xhat)[k] * sum_ghx / e);
                      }
                    }
                  });
}

/// Multi-head self-attention inside non-overlapping ws x ws windows.
/// qkv: N x 3E tokens (queries, keys, values side by side) on an h x w grid.
/// Returns N x E.
inline Id window_attention(Tape& t, Id qkv, int h, int w, int ws, int heads) {
  const Tensor& qv = t.value(qkv);
  require(qv.rank() == 2 && qv.dim(0) == h * w && qv.dim(1) % 3 == 0, ErrorKind::ShapeMismatch,
          "window_attention expects N x 3E tokens");
  require(h % ws == 0 && w % ws == 0, ErrorKind::ShapeMismatch,
          "window size must divide the token grid");
  const int e = qv.dim(1) / 3;
  require(e % heads == 0, ErrorKind::ShapeMismatch, "embedding not divisible by head count");
  const int dh = e / heads, tw = ws * ws;
  const int nwin = (h / ws) * (w / ws);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Token index of element j of window `win`.
  auto token = [=](int win, int j) {
    const int wy = win / (w / ws), wx = win % (w / ws);
    return (wy * ws + j / ws) * w + wx * ws + j % ws;
  };
  auto probs = std::make_shared<std::vector<RowMat>>(static_cast<std::size_t>(nwin * heads));
  Tensor out({h * w, e});
  RowMat q(tw, dh), k(tw, dh), v(tw, dh);
  for (int win = 0; win < nwin; ++win) {
    for (int hd = 0; hd < heads; ++hd) {
      for (int j = 0; j < tw; ++j) {
        const double* row = qv.ptr() + static_cast<std::size_t>(token(win, j)) * 3 * e;
        for (int d = 0; d < dh; ++d) {
          q(j, d) = row[hd * dh + d];
          k(j, d) = row[e + hd * dh + d];
          v(j, d) = row[2 * e + hd * dh + d];
        }
      }
      RowMat s = (q * k.transpose()) * scale;
      for (int r = 0; r < tw; ++r) {
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      const RowMat o = s * v;
      for (int j = 0; j < tw; ++j)
        for (int d = 0; d < dh; ++d)
          out.data[static_cast<std::size_t>(token(win, j)) * e + hd * dh + d] = o(j, d);
      (*probs)[static_cast<std::size_t>(win * heads + hd)] = std::move(s);
    }
  }
  return t.record(std::move(out), t.requires_grad(qkv),
                  [qkv, e, dh, tw, nwin, heads, scale, token, probs](Tape& t, Id self) {
                    const Tensor& g = t.grad(self);
                    const Tensor& qv = t.value(qkv);
                    Tensor& gq = t.grad(qkv);
                    RowMat q(tw, dh), k(tw, dh), v(tw, dh), go(tw, dh);
                    for (int win = 0; win < nwin; ++win) {
                      for (int hd = 0; hd < heads; ++hd) {
                        for (int j = 0; j < tw; ++j) {
                          const std::size_t tok = static_cast<std::size_t>(token(win, j));
                          const double* row = qv.ptr() + tok * 3 * e;
                          for (int d = 0; d < dh; ++d) {
                            q(j, d) = row[hd * dh + d];
                            k(j, d) = row[e + hd * dh + d];
                            v(j, d) = row[2 * e + hd * dh + d];
                            go(j, d) = g.data[tok * e + hd * dh + d];
                          }
                        }
                        const RowMat& a = (*probs)[static_cast<std::size_t>(win * heads + hd)];
                        const RowMat ga = go * v.transpose();
                        const RowMat gv = a.transpose() * go;
                        RowMat gs = a.cwiseProduct(ga);
                        for (int r = 0; r < tw; ++r) {
                          const double rs = gs.row(r).sum();
                          gs.row(r) -= a.row(r) * rs;
                        }
                        const RowMat gqm = (gs * k) * scale;
                        const RowMat gkm = (gs.transpose() * q) * scale;
                        for (int j = 0; j < tw; ++j) {
                          double* row = gq.ptr() + static_cast<std::size_t>(token(win, j)) * 3 * e;
                          for (int d = 0; d < dh; ++d) {
                            row[hd * dh + d] += gqm(j, d);
                            row[e + hd * dh + d] += gkm(j, d);
                            row[2 * e + hd * dh + d] += gv(j, d);
                          }
                        }
                      }
                    }
                  });
}

}  // namespace retina::nn
