#include <gtest/gtest.h>

#include "helpers.hpp"
#include "retina/nn/model.hpp"
#include "retina/nn/ops.hpp"

using namespace retina;
using namespace retina::test;
using namespace retina::nn;

namespace {

ModelSpec small_teacher(bool lk = false) {
  ModelSpec s = ModelSpec::teacher();
  s.base_channels = 4;
  s.descriptor_dim = 8;
  s.lk_block = lk;
  s.input_height = s.input_width = 32;
  return s;
}

ModelSpec small_student() {
  ModelSpec s = ModelSpec::student();
  s.base_channels = 4;
  s.descriptor_dim = 8;
  s.embed_dim = 8;
  s.window_size = 2;
  s.depth = 1;
  s.input_height = s.input_width = 32;
  return s;
}

Tensor random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({1, h, w});
  for (double& v : t.data) v = uniform01(rng);
  return t;
}

void expect_valid_output(const ModelOutput& o, int h, int w, int d) {
  ASSERT_EQ(o.heatmap.shape, (std::vector<int>{1, h, w}));
  ASSERT_EQ(o.descriptors.shape, (std::vector<int>{d, h, w}));
  for (double v : o.heatmap.data) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < hw; ++i) {
    double n = 0;
    for (int c = 0; c < d; ++c) n += o.descriptors.data[c * hw + i] * o.descriptors.data[c * hw + i];
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  }
}

}  // namespace

TEST(Model, OutputShapesRangeAndUnitDescriptors) {
  for (const ModelSpec& s : {small_teacher(), small_teacher(true), small_student()}) {
    const ModelParams p = init_params(s, 3);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      ForwardTape ft = forward(s, p, random_image(32, 32, seed), false, 0, false);
      expect_valid_output(output_of(ft), 32, 32, 8);
    }
  }
}

TEST(Model, DefaultSpecsRunOnDefaultInput) {
  for (const ModelSpec& s : {ModelSpec::teacher(), ModelSpec::student()}) {
    const ModelParams p = init_params(s, 1);
    const ModelOutput o = infer(s, p, random_gray(128, 128, 2));
    expect_valid_output(o, 128, 128, 32);
  }
}

TEST(Model, ZeroWeightsGiveHalfHeatmap) {
  for (const ModelSpec& s : {small_teacher(), small_student()}) {
    ModelParams p = init_params(s, 1);
    for (auto& [_, t] : p.tensors) std::fill(t.data.begin(), t.data.end(), 0.0);
    ForwardTape ft = forward(s, p, Tensor({1, 32, 32}, 0.0), false, 0, false);
    for (double v : ft.tape->value(ft.heatmap).data) EXPECT_EQ(v, 0.5);
  }
}

TEST(Model, EvalModeIgnoresSeed) {
  for (const ModelSpec& s : {small_teacher(), small_student()}) {
    const ModelParams p = init_params(s, 4);
    const Tensor img = random_image(32, 32, 9);
    ForwardTape a = forward(s, p, img, false, 1, false), b = forward(s, p, img, false, 999, false);
    EXPECT_EQ(a.tape->value(a.heatmap).data, b.tape->value(b.heatmap).data);
    EXPECT_EQ(a.tape->value(a.descriptors).data, b.tape->value(b.descriptors).data);
  }
}

TEST(Model, StudentDropoutIsSeeded) {
  const ModelSpec s = small_student();
  const ModelParams p = init_params(s, 4);
  const Tensor img = random_image(32, 32, 9);
  ForwardTape a = forward(s, p, img, true, 1, false), b = forward(s, p, img, true, 1, false),
              c = forward(s, p, img, true, 2, false);
  EXPECT_EQ(a.tape->value(a.heatmap).data, b.tape->value(b.heatmap).data);
  EXPECT_NE(a.tape->value(a.heatmap).data, c.tape->value(c.heatmap).data);
}

TEST(Model, ZeroOutputGradientsGiveZeroParameterGradients) {
  for (const ModelSpec& s : {small_teacher(true), small_student()}) {
    const ModelParams p = init_params(s, 5);
    ForwardTape ft = forward(s, p, random_image(32, 32, 1), true, 3);
    const auto g = backward(ft, Tensor({1, 32, 32}, 0.0), Tensor({8, 32, 32}, 0.0));
    EXPECT_EQ(g.size(), p.tensors.size());
    for (const auto& [name, t] : g)
      for (double v : t.data) EXPECT_EQ(v, 0.0) << name;
  }
}

TEST(Model, BackwardNeedsGradientTape) {
  const ModelSpec s = small_teacher();
  ForwardTape ft = forward(s, init_params(s, 1), random_image(32, 32, 1), false, 0, false);
  EXPECT_ERROR_KIND(backward(ft, Tensor({1, 32, 32}, 1.0), Tensor{}), ErrorKind::InvalidArgument);
}

TEST(Model, LkWithZeroSideBranchesEqualsPlainConv) {
  const ModelSpec lk = small_teacher(true), plain = small_teacher(false);
  ModelParams p_lk = init_params(lk, 8);
  ModelParams p_plain;
  p_plain.spec_hash = plain.hash();
  for (auto& [name, t] : p_lk.tensors) {
    const bool side = name.size() > 3 && (name.ends_with(".w1") || name.ends_with(".w5"));
    if (side) std::fill(t.data.begin(), t.data.end(), 0.0);
    else p_plain.tensors.emplace(name, t);
  }
  const GrayImage img = random_gray(32, 32, 3);
  const ModelOutput a = infer(lk, p_lk, img), b = infer(plain, p_plain, img);
  EXPECT_EQ(a.heatmap.data, b.heatmap.data);
  EXPECT_EQ(a.descriptors.data, b.descriptors.data);
}

TEST(Model, StudentStagesAreShiftEquivariantOnTheWindowGrid) {
  // Stage-2 windows span 2 x 2 stage-1 windows of 4 x 4 pixel patches, so a
  // 16 pixel shift maps windows onto windows at both stages.
  const ModelSpec s = small_student();
  const ModelParams p = init_params(s, 6);
  const Tensor base = random_image(48, 48, 2);
  auto crop = [&](int oy, int ox) {
    Tensor t({1, 32, 32});
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) t.data[y * 32 + x] = base.data[(y + oy) * 48 + x + ox];
    return t;
  };
  ForwardTape a = forward(s, p, crop(0, 0), false, 0, false), b = forward(s, p, crop(16, 16), false, 0, false);
  auto compare = [](const Tensor& ta, const Tensor& tb, int off) {
    const int e = ta.dim(0), h = ta.dim(1), w = ta.dim(2);
    for (int c = 0; c < e; ++c)
      for (int y = 0; y + off < h; ++y)
        for (int x = 0; x + off < w; ++x)
          EXPECT_NEAR(ta.data[(c * h + y + off) * w + x + off], tb.data[(c * h + y) * w + x], 1e-12);
  };
  compare(a.tape->value(a.stage1), b.tape->value(b.stage1), 4);
  compare(a.tape->value(a.stage2), b.tape->value(b.stage2), 2);
}

TEST(Model, RejectsBadInputsAndParams) {
  const ModelSpec s = small_teacher();
  ModelParams p = init_params(s, 1);
  EXPECT_ERROR_KIND(forward(s, p, Tensor({1, 16, 32}), false, 0, false), ErrorKind::ShapeMismatch);
  EXPECT_ERROR_KIND(forward(small_teacher(true), p, random_image(32, 32, 1), false, 0, false),
                    ErrorKind::HashMismatch);
  ModelParams missing = p;
  missing.tensors.erase("det.head.conv3.w");
  EXPECT_ERROR_KIND(check_params(s, missing), ErrorKind::ShapeMismatch);
  ModelParams bad = p;
  bad.tensors.at("enc.stem.b").data[0] = std::nan("");
  EXPECT_ERROR_KIND(check_params(s, bad), ErrorKind::InvalidArgument);
}

TEST(ModelSpec, Validation) {
  ModelSpec s = ModelSpec::teacher();
  s.input_width = 120;
  EXPECT_ERROR_KIND(s.validate(), ErrorKind::InvalidArgument);
  s = ModelSpec::teacher();
  s.descriptor_dim = 4;
  EXPECT_ERROR_KIND(s.validate(), ErrorKind::InvalidArgument);
  s = ModelSpec::student();
  s.window_size = 3;
  EXPECT_ERROR_KIND(s.validate(), ErrorKind::InvalidArgument);
  s = ModelSpec::student();
  s.dropout_rate = 1.0;
  EXPECT_ERROR_KIND(s.validate(), ErrorKind::InvalidArgument);
}

TEST(ModelSpec, HashIgnoresDropoutOnly) {
  ModelSpec a = ModelSpec::student(), b = a;
  b.dropout_rate = 0.1;
  EXPECT_EQ(a.hash(), b.hash());
  b.embed_dim = 16;
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_NE(ModelSpec::teacher().hash(), ModelSpec::student().hash());
}

TEST(Params, InitIsSeededAndOrdered) {
  const ModelSpec s = small_student();
  const ModelParams a = init_params(s, 1), b = init_params(s, 1), c = init_params(s, 2);
  EXPECT_EQ(a.tensors.at("enc.embed.w").data, b.tensors.at("enc.embed.w").data);
  EXPECT_NE(a.tensors.at("enc.embed.w").data, c.tensors.at("enc.embed.w").data);
  const auto shapes = param_shapes(s);
  EXPECT_EQ(shapes.front().first, "enc.stem.w");
  EXPECT_EQ(shapes.size(), a.tensors.size());
  std::size_t n = 0;
  for (const auto& [name, shape] : shapes) n += a.tensors.at(name).size();
  EXPECT_EQ(n, count_params(s));
  EXPECT_EQ(param_shapes(s), shapes);
}

TEST(Params, KernelVarianceMatchesFanIn) {
  ModelSpec s = ModelSpec::teacher();
  s.lk_block = true;
  const ModelParams p = init_params(s, 3);
  const Tensor& w = p.tensors.at("enc.b3.conv2.w5");  // 64 x 64 x 5 x 5
  ASSERT_GE(w.dim(1), 64);
  double m = 0, v = 0;
  for (double x : w.data) m += x;
  m /= static_cast<double>(w.size());
  for (double x : w.data) v += (x - m) * (x - m);
  v /= static_cast<double>(w.size());
  const double expected = 2.0 / (w.dim(1) * 25.0);
  EXPECT_NEAR(v / expected, 1.0, 0.2);
  for (double x : p.tensors.at("enc.b3.conv2.b").data) EXPECT_EQ(x, 0.0);
}

TEST(Params, CountOrdering) {
  EXPECT_GT(count_params(ModelSpec::student()), count_params(ModelSpec::teacher()));
  ModelSpec lk = ModelSpec::teacher();
  lk.lk_block = true;
  EXPECT_GT(count_params(lk), count_params(ModelSpec::teacher()));
}

TEST(Params, DoublingChannelsQuadruplesConvCount) {
  auto conv_count = [](const ModelSpec& s) {
    std::size_t n = 0;
    for (const auto& [name, shape] : param_shapes(s))
      if (name.rfind("enc.", 0) == 0 || name.rfind("det.", 0) == 0) n += Tensor::count(shape);
    return static_cast<double>(n);
  };
  ModelSpec a = ModelSpec::teacher(), b = a;
  b.base_channels *= 2;
  EXPECT_NEAR(conv_count(b) / conv_count(a), 4.0, 0.05);
  // Closed form for the 3x3 encoder kernels alone: stem 9c, then per block
  // (cin, cout) = (c, c) twice, (c, 2c), (2c, 2c), (2c, 4c), (4c, 4c).
  const double c = a.base_channels;
  double enc = 0;
  for (const auto& [name, shape] : param_shapes(a))
    if (name.rfind("enc.", 0) == 0 && name.ends_with(".w")) enc += static_cast<double>(Tensor::count(shape));
  EXPECT_EQ(enc, 9 * c + 9 * c * c * (1 + 1 + 2 + 4 + 8 + 16));
}

TEST(Ops, NormalizeGradientIsOrthogonalToRadialDirection) {
  Rng rng(2);
  Tape t;
  Tensor x({5, 3, 3});
  for (double& v : x.data) v = uniform(rng, -1, 1);
  const Id xi = t.parameter("x", x);
  const Id y = l2_normalize_channels(t, xi);
  const Tensor g = t.value(y);  // upstream gradient along v-hat itself
  t.backward({{y, &g}});
  const auto grads = t.parameter_grads();
  for (double v : grads.at("x").data) EXPECT_NEAR(v, 0.0, 1e-6);
}

TEST(Ops, DropoutMaskAndScale) {
  Tape t(false);
  const Id x = t.constant(Tensor({1, 100, 100}, 1.0));
  const Tensor y = t.value(dropout(t, x, 0.5, true, 11));
  const Tensor y2 = t.value(dropout(t, x, 0.5, true, 11));
  EXPECT_EQ(y.data, y2.data);
  std::size_t kept = 0;
  for (double v : y.data) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    kept += v != 0.0;
  }
  EXPECT_NEAR(static_cast<double>(kept) / 10000.0, 0.5, 0.03);
  const Tensor off = t.value(dropout(t, x, 0.5, false, 11));
  EXPECT_EQ(off.data, t.value(x).data);
}

TEST(Ops, ShapeErrors) {
  Tape t(false);
  const Id x = t.constant(Tensor({2, 5, 5}));
  EXPECT_ERROR_KIND(conv2d(t, x, t.constant(Tensor({3, 3, 3, 3}))), ErrorKind::ShapeMismatch);
  EXPECT_ERROR_KIND(patchify(t, x, 2), ErrorKind::ShapeMismatch);
  EXPECT_ERROR_KIND(concat(t, x, t.constant(Tensor({1, 4, 5}))), ErrorKind::ShapeMismatch);
  EXPECT_ERROR_KIND(window_attention(t, t.constant(Tensor({16, 12})), 4, 4, 3, 2), ErrorKind::ShapeMismatch);
}
