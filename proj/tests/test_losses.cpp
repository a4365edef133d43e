#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "helpers.hpp"
#include "oracles.hpp"
#include "retina/losses.hpp"
#include "retina/training.hpp"

using namespace retina;
using namespace retina::test;
using nn::Tensor;

namespace {

Tensor random_map(int h, int w, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t({1, h, w});
  for (double& v : t.data) v = uniform(rng, lo, hi);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Dice

TEST(Dice, SelfIsZero) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor x = random_map(9, 7, s);
    EXPECT_NEAR(losses::dice_loss(x, x), 0.0, 1e-6);
  }
  const Tensor zero({1, 4, 4}, 0.0);
  EXPECT_NEAR(losses::dice_loss(zero, zero), 0.0, 1e-6);
}

TEST(Dice, MatchesOracleAndStaysInRange) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Tensor a = random_map(6, 6, s), b = random_map(6, 6, s + 1000);
    const double v = losses::dice_loss(a, b, 1e-6);
    EXPECT_NEAR(v, dice_oracle(a.data, b.data, 1e-6), 1e-12);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0 + 1e-6);
    EXPECT_NEAR(v, losses::dice_loss(b, a, 1e-6), 1e-15);
  }
}

TEST(Dice, DisjointSupportIsOne) {
  Tensor a({1, 2, 2}, 0.0), b({1, 2, 2}, 0.0);
  a.data[0] = 1.0;
  b.data[3] = 1.0;
  EXPECT_NEAR(losses::dice_loss(a, b, 1e-6), 1.0, 1e-6);
}

TEST(Dice, ShapeMismatchRejected) {
  EXPECT_ERROR_KIND(losses::dice_loss(Tensor({1, 2, 2}), Tensor({1, 2, 3})), ErrorKind::ShapeMismatch);
}

// ---------------------------------------------------------------------------
// Labels

TEST(SmoothLabels, PeaksAreOneAndDecay) {
  const std::vector<Point2> kps{{3.2, 4.0}, {10.0, 10.0}};
  const Tensor y = losses::smooth_labels(kps, 16, 16, 1.5);
  EXPECT_DOUBLE_EQ(y.data[4 * 16 + 3], 1.0);
  EXPECT_DOUBLE_EQ(y.data[10 * 16 + 10], 1.0);
  EXPECT_NEAR(y.data[4 * 16 + 4], std::exp(-1.0 / (2 * 1.5 * 1.5)), 1e-15);
  EXPECT_DOUBLE_EQ(y.data[15 * 16 + 0], 0.0);
  for (double v : y.data) EXPECT_LE(v, 1.0);
}

TEST(SmoothLabels, OverlapCombinesByMax) {
  const std::vector<Point2> one{{5, 5}}, two{{5, 5}, {6, 5}};
  const Tensor a = losses::smooth_labels(one, 12, 12, 1.5), b = losses::smooth_labels(two, 12, 12, 1.5);
  EXPECT_DOUBLE_EQ(b.data[5 * 12 + 5], 1.0);
  EXPECT_DOUBLE_EQ(b.data[5 * 12 + 6], 1.0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_GE(b.data[i], a.data[i]);
}

TEST(SmoothLabels, OutOfBoundsKeypointRejected) {
  const std::vector<Point2> kps{{16.5, 2}};
  EXPECT_ERROR_KIND(losses::smooth_labels(kps, 16, 16, 1.5), ErrorKind::InvalidArgument);
}

// ---------------------------------------------------------------------------
// Detector loss

TEST(DetectorLoss, Additivity) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor p = random_map(16, 16, s), t = random_map(16, 16, s + 1), pa = random_map(16, 16, s + 2);
    const Tensor labels = losses::smooth_labels(std::vector<Point2>{{4, 4}, {11, 9}}, 16, 16, 1.5);
    losses::GeoInputs geo{&pa, Homography::translation(0.7, -0.4)};
    const auto full = losses::detector_loss(p, labels, &t, &geo);
    EXPECT_NEAR(full.l_det, full.l_clf + full.l_clf_rkd + full.l_geo, 1e-9);
    EXPECT_GT(full.l_clf_rkd, 0.0);
    EXPECT_GT(full.l_geo, 0.0);

    const auto teacher_mode = losses::detector_loss(p, labels, nullptr, &geo);
    EXPECT_EQ(teacher_mode.l_clf_rkd, 0.0);
    EXPECT_NEAR(teacher_mode.l_det, teacher_mode.l_clf + teacher_mode.l_geo, 1e-9);

    const auto bare = losses::detector_loss(p, labels, nullptr, nullptr);
    EXPECT_EQ(bare.l_det, bare.l_clf);
  }
}

TEST(DetectorLoss, FinalizeAdditivity) {
  losses::LossBreakdown b;
  b.l_clf = 0.31;
  b.l_clf_rkd = 0.12;
  b.l_geo = 0.07;
  b.l_des = 1.9;
  b.l_des_rkd = 0.4;
  b.finalize();
  EXPECT_NEAR(b.l_det, 0.5, 1e-9);
  EXPECT_NEAR(b.l_Des, 2.3, 1e-9);
  EXPECT_NEAR(b.total, 2.8, 1e-9);
  EXPECT_EQ(losses::descriptor_loss_total(1.9, 0.4), b.l_Des);
}

TEST(Geo, IdentityOfEqualMapsIsZero) {
  const Tensor p = random_map(12, 12, 3);
  const auto r = losses::l_geo(p, p, Homography::identity(), 1e-6);
  EXPECT_NEAR(r.value, 0.0, 1e-9);
  EXPECT_FALSE(r.empty_support);
}

TEST(Geo, EmptySupportFlagged) {
  const Tensor p = random_map(12, 12, 3);
  const auto r = losses::l_geo(p, p, Homography::translation(100, 100), 1e-6);
  EXPECT_TRUE(r.empty_support);
  EXPECT_EQ(r.value, 0.0);
}

TEST(Geo, TranslatedMapIsConsistent) {
  // P' = P shifted by (2, 1): the pull-back through the same shift recovers P
  // everywhere the shift stays in bounds.
  Tensor p({1, 12, 12}, 0.0), q({1, 12, 12}, 0.0);
  Rng rng(5);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) {
      const double v = uniform01(rng);
      p.data[y * 12 + x] = v;
      if (x + 2 < 12 && y + 1 < 12) q.data[(y + 1) * 12 + x + 2] = v;
    }
  EXPECT_NEAR(losses::l_geo(p, q, Homography::translation(2, 1), 1e-6).value, 0.0, 1e-9);
}

// ---------------------------------------------------------------------------
// Triplet descriptor loss

TEST(Triplet, MatchesBruteForceOracle) {
  for (std::uint64_t s = 0; s < 60; ++s) {
    Rng rng(s);
    const int n = 2 + static_cast<int>(s % 9);
    const int dim = 8, h = 12, w = 14;
    Tensor d({dim, h, w}), dp({dim, h, w});
    for (double& v : d.data) v = uniform(rng, -1, 1);
    for (double& v : dp.data) v = uniform(rng, -1, 1);
    std::vector<Point2> kps;
    for (int i = 0; i < n; ++i) kps.push_back({uniform(rng, 0.0, w - 3.0), uniform(rng, 0.0, h - 3.0)});
    const Homography hom(Eigen::Matrix3d{{1.02, 0.03, 0.9}, {-0.02, 0.99, 0.6}, {0.001, -0.0005, 1.0}});
    const double margin = uniform(rng, 0.2, 1.5);
    const std::uint64_t seed = rng();
    const auto lib = losses::triplet_descriptor_loss(d, dp, kps, hom, margin, seed);
    const auto ref = triplet_oracle(d, dp, kps, hom, margin, seed);
    EXPECT_NEAR(lib.value, ref.value, 1e-9) << "instance " << s;
    EXPECT_EQ(lib.used, kps.size());
    EXPECT_GE(lib.value, 0.0);
  }
}

TEST(Triplet, ZeroWhenDescriptorsSeparateByMoreThanMargin) {
  // One-hot descriptors at each keypoint: positives coincide, negatives are
  // sqrt(2) apart, so every hinge is inactive for m < sqrt(2).
  const int n = 5, h = 8, w = 8;
  Tensor d({n, h, w}, 0.0);
  std::vector<Point2> kps;
  for (int i = 0; i < n; ++i) {
    kps.push_back({static_cast<double>(i + 1), static_cast<double>(i + 2)});
    d.data[(static_cast<std::size_t>(i) * h + i + 2) * w + i + 1] = 1.0;
  }
  EXPECT_NEAR(losses::triplet_descriptor_loss(d, d, kps, Homography::identity(), 1.4, 3).value, 0.0, 1e-12);
  EXPECT_NEAR(losses::triplet_descriptor_loss(d, d, kps, Homography::identity(), 1.5, 3).value,
              n * (1.5 - std::sqrt(2.0)), 1e-12);
}

TEST(Triplet, OutOfBoundsKeypointsDropped) {
  const auto ti = smooth_triplet_instance(11, 8, 10, 10, 4);
  std::vector<Point2> kps = ti.keypoints;
  kps.push_back({9.9, 9.9});   // maps outside D'
  kps.push_back({-1.0, 3.0});  // outside D
  const auto r = losses::triplet_descriptor_loss(ti.d, ti.dprime, kps, ti.h, ti.margin, ti.seed);
  EXPECT_EQ(r.used, 4u);
  EXPECT_NEAR(r.value, triplet_oracle(ti.d, ti.dprime, ti.keypoints, ti.h, ti.margin, ti.seed).value, 1e-9);
}

TEST(Triplet, FewerThanTwoKeypointsIsDegenerate) {
  const Tensor d({8, 6, 6}, 0.5);
  EXPECT_ERROR_KIND(losses::triplet_descriptor_loss(d, d, std::vector<Point2>{{2, 2}}, Homography::identity(), 1.0, 1),
                    ErrorKind::DegenerateInput);
  EXPECT_ERROR_KIND(losses::triplet_descriptor_loss(d, d, std::vector<Point2>{}, Homography::identity(), 1.0, 1),
                    ErrorKind::DegenerateInput);
}

TEST(Triplet, RandomNegativeIsOrderFreeAndNeverSelf) {
  Rng rng(9);
  std::vector<Point2> kps;
  for (int i = 0; i < 12; ++i) kps.push_back({uniform(rng, 0, 100), uniform(rng, 0, 100)});
  std::vector<std::size_t> perm(kps.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Point2> shuffled;
  for (std::size_t i : perm) shuffled.push_back(kps[i]);
  for (std::size_t i = 0; i < kps.size(); ++i) {
    const std::size_t j = losses::random_negative(kps, i, 77);
    EXPECT_NE(j, i);
    const std::size_t si = static_cast<std::size_t>(std::find(perm.begin(), perm.end(), i) - perm.begin());
    const std::size_t sj = losses::random_negative(shuffled, si, 77);
    EXPECT_EQ(shuffled[sj].x, kps[j].x);
    EXPECT_EQ(shuffled[sj].y, kps[j].y);
  }
}

TEST(Triplet, RkdSelfDistillationWithZeroMarginIsZero) {
  const auto ti = smooth_triplet_instance(4, 8, 10, 10, 6, true);
  EXPECT_EQ(losses::l_des_rkd(ti.d, ti.d, ti.keypoints, 0.0, 1).value, 0.0);
}

// ---------------------------------------------------------------------------
// Stop-gradient to the teacher

TEST(StopGradient, TeacherTensorsUntouchedByRkdTerms) {
  const Tensor s = random_map(10, 10, 1), t = random_map(10, 10, 2);
  const Tensor t_before = t;
  Tensor gs(s.shape);
  losses::l_clf_rkd(s, t, 1e-6, &gs);
  EXPECT_EQ(t.data, t_before.data);

  const auto ti = smooth_triplet_instance(5, 8, 10, 10, 6, true);
  Tensor gd(ti.d.shape);
  losses::l_des_rkd(ti.d, ti.dprime, ti.keypoints, ti.margin, ti.seed, &gd);
  // The same call through the generic triplet with a D' gradient buffer:
  // the student part agrees and the teacher part is the only extra output.
  Tensor gd2(ti.d.shape), gt(ti.dprime.shape);
  losses::triplet_descriptor_loss(ti.d, ti.dprime, ti.keypoints, Homography::identity(), ti.margin, ti.seed, &gd2,
                                  &gt);
  EXPECT_EQ(gd.data, gd2.data);
}

TEST(StopGradient, TrainingStepGradientsCoverOnlyStudentParameters) {
  data::SynthConfig sc;
  sc.image_size = 32;
  sc.n_images = 1;
  sc.n_pairs = 0;
  const auto samples = synth_samples(data::generate_synthetic(sc), 0, 1);

  nn::ModelSpec tspec = nn::ModelSpec::teacher();
  tspec.base_channels = 2;
  tspec.descriptor_dim = 8;
  tspec.input_height = tspec.input_width = 32;
  nn::ModelSpec sspec = nn::ModelSpec::student();
  sspec.base_channels = 2;
  sspec.descriptor_dim = 8;
  sspec.embed_dim = 8;
  sspec.window_size = 2;
  sspec.depth = 1;
  sspec.input_height = sspec.input_width = 32;
  const auto tparams = nn::init_params(tspec, 1);
  const auto sparams = nn::init_params(sspec, 2);
  const TeacherRef teacher{&tspec, &tparams};

  TrainConfig cfg;
  const StepResult with = sample_step(sspec, sparams, samples[0], cfg, &teacher, 9);
  const StepResult without = sample_step(sspec, sparams, samples[0], cfg, nullptr, 9);
  ASSERT_EQ(with.grads.size(), sparams.tensors.size());
  for (const auto& [name, g] : with.grads) {
    EXPECT_TRUE(sparams.tensors.count(name)) << name;
    EXPECT_EQ(g.shape, sparams.tensors.at(name).shape);
  }
  for (const auto& [name, t] : tparams.tensors)
    if (!sparams.tensors.count(name)) EXPECT_FALSE(with.grads.count(name)) << name;
  EXPECT_GT(with.losses.l_clf_rkd, 0.0);
  EXPECT_EQ(without.losses.l_clf_rkd, 0.0);
  EXPECT_EQ(without.losses.l_des_rkd, 0.0);
  EXPECT_NEAR(with.losses.l_det, with.losses.l_clf + with.losses.l_clf_rkd + with.losses.l_geo, 1e-9);
  EXPECT_NEAR(with.losses.l_Des, with.losses.l_des + with.losses.l_des_rkd, 1e-9);
}
