#include <gtest/gtest.h>

#include <fstream>

#include "helpers.hpp"
#include "protocol_fixture.hpp"
#include "retina/data.hpp"
#include "retina/registration.hpp"

using namespace retina;
using namespace retina::test;

namespace {

// Ground-truth detector for one synthetic pair: the query keypoints, and
// their images under h in the reference, with a random unit descriptor
// shared by each corresponding pair.
Detector oracle_detector(const GrayImage& query, const std::vector<Point2>& kps, const Homography& h,
                         std::uint64_t seed) {
  Detection dq, dr;
  Rng rng(seed);
  std::normal_distribution<double> g;
  std::vector<Eigen::RowVectorXd> rows;
  for (const Point2& k : kps) {
    const Point2 r = apply(h, k);
    if (r.x < 0 || r.y < 0 || r.x > query.width - 1 || r.y > query.height - 1) continue;
    Eigen::RowVectorXd v(32);
    for (int c = 0; c < 32; ++c) v(c) = g(rng);
    rows.push_back(v.normalized());
    dq.keypoints.points.push_back({k, 1.0});
    dr.keypoints.points.push_back({r, 1.0});
  }
  dq.descriptors.resize(static_cast<Eigen::Index>(rows.size()), 32);
  for (std::size_t i = 0; i < rows.size(); ++i) dq.descriptors.row(static_cast<Eigen::Index>(i)) = rows[i];
  dr.descriptors = dq.descriptors;
  const std::vector<float> qdata = query.data;
  return [=](const GrayImage& img) { return img.data == qdata ? dq : dr; };
}

}  // namespace

TEST(MeeMae, OddAndEvenMedians) {
  const Homography id = Homography::identity();
  auto [m3, a3] = mee_mae(id, controls_with_errors({3, 1, 2}));
  EXPECT_DOUBLE_EQ(m3, 2.0);
  EXPECT_DOUBLE_EQ(a3, 3.0);
  auto [m4, a4] = mee_mae(id, controls_with_errors({4, 1, 3, 2}));
  EXPECT_DOUBLE_EQ(m4, 2.5);
  EXPECT_DOUBLE_EQ(a4, 4.0);
}

TEST(MeeMae, TrueHomographyOnExactControlsIsZero) {
  const Homography h(Mat3{{1.01, 0.02, 3.0}, {-0.01, 0.99, -2.0}, {1e-5, 2e-5, 1.0}});
  std::vector<Correspondence> c;
  for (int i = 0; i < 9; ++i) {
    const Point2 q{13.0 * i, 7.0 * (i % 4)};
    c.push_back({q, apply(h, q)});
  }
  auto [mee, mae] = mee_mae(h, c);
  EXPECT_NEAR(mee, 0.0, 1e-9);
  EXPECT_NEAR(mae, 0.0, 1e-9);
}

TEST(MeeMae, EmptyControlsRejected) {
  EXPECT_ERROR_KIND(mee_mae(Homography::identity(), std::vector<Correspondence>{}), ErrorKind::InvalidArgument);
}

TEST(Classify, Boundaries) {
  EXPECT_EQ(classify(19.99, 49.9), Verdict::Acceptable);
  EXPECT_EQ(classify(20.0, 10.0), Verdict::Inaccurate);
  EXPECT_EQ(classify(5.0, 50.0), Verdict::Inaccurate);
  EXPECT_EQ(classify(0.0, 0.0), Verdict::Acceptable);
}

TEST(Classify, MonotoneInBothErrors) {
  Rng rng(4);
  for (int i = 0; i < 2000; ++i) {
    const double mee = uniform(rng, 0, 40), mae = uniform(rng, mee, 80);
    if (classify(mee, mae) == Verdict::Acceptable) {
      EXPECT_EQ(classify(mee * uniform01(rng), mae), Verdict::Acceptable);
      EXPECT_EQ(classify(mee, mae * uniform01(rng)), Verdict::Acceptable);
    }
  }
}

TEST(Outcome, ThreeMatchesFail) {
  const auto o = make_outcome("x", 'S', 3, Homography::identity(), controls_with_errors({0}));
  EXPECT_EQ(o.status, RegistrationStatus::Failed);
  EXPECT_EQ(make_outcome("x", 'S', 4, Homography::identity(), controls_with_errors({0})).status,
            RegistrationStatus::Evaluated);
  EXPECT_EQ(make_outcome("x", 'S', 40, std::nullopt, controls_with_errors({0})).status, RegistrationStatus::Failed);
}

TEST(Auc, ClosedFormCases) {
  EXPECT_DOUBLE_EQ(acceptance_auc(std::vector<double>{0, 0, 0}), 1.0);
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_DOUBLE_EQ(acceptance_auc(std::vector<double>{inf, inf}), 0.0);
  EXPECT_NEAR(acceptance_auc(std::vector<double>{0, 12.5}), 0.75, 1e-12);
  EXPECT_ERROR_KIND(acceptance_auc(std::vector<double>{}), ErrorKind::InvalidArgument);
}

TEST(Auc, OrderInvariantAndMonotone) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> m;
    for (int i = 0; i < 12; ++i) m.push_back(uniform(rng, 0, 30));
    const double base = acceptance_auc(m);
    std::shuffle(m.begin(), m.end(), rng);
    EXPECT_DOUBLE_EQ(acceptance_auc(m), base);
    m[0] *= 0.5;
    EXPECT_GE(acceptance_auc(m), base);
    EXPECT_GE(base, 0.0);
    EXPECT_LE(base, 1.0);
  }
}

TEST(Protocol, FixtureReproducesHandTable) {
  const EvalReport r = summarize(protocol_fixture());
  const ProtocolExpectation e;
  EXPECT_EQ(r.n_failed, 2u);
  EXPECT_EQ(r.n_inaccurate, 2u);
  EXPECT_EQ(r.n_acceptable, 6u);
  EXPECT_EQ(r.pct_failed, e.pct_failed);
  EXPECT_EQ(r.pct_inaccurate, e.pct_inaccurate);
  EXPECT_EQ(r.pct_acceptable, e.pct_acceptable);
  EXPECT_NEAR(*r.auc_easy, e.auc_easy, 1e-12);
  EXPECT_NEAR(*r.auc_mod, e.auc_mod, 1e-12);
  EXPECT_NEAR(*r.auc_hard, e.auc_hard, 1e-12);
  EXPECT_NEAR(*r.mauc, e.mauc, 1e-12);
  EXPECT_NEAR(r.pct_failed + r.pct_inaccurate + r.pct_acceptable, 100.0, 1e-9);
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_NE(r.errors[0].find("x1"), std::string::npos);
}

TEST(Protocol, OutcomeOrderDoesNotMatter) {
  auto o = protocol_fixture();
  std::reverse(o.begin(), o.end());
  const EvalReport a = summarize(protocol_fixture()), b = summarize(o);
  EXPECT_EQ(*a.mauc, *b.mauc);
  EXPECT_EQ(a.pct_acceptable, b.pct_acceptable);
}

TEST(Protocol, EmptyCategoryReportedAbsent) {
  std::vector<RegistrationOutcome> o;
  for (auto& x : protocol_fixture())
    if (x.category != 'A') o.push_back(x);
  const EvalReport r = summarize(o);
  EXPECT_FALSE(r.auc_mod.has_value());
  EXPECT_NEAR(*r.mauc, (*r.auc_easy + *r.auc_hard) / 2, 1e-12);
  EXPECT_GE(r.warnings.size(), 2u);
}

TEST(Protocol, TableAndJsonColumns) {
  const EvalReport r = summarize(protocol_fixture());
  const std::string t = format_table(r);
  EXPECT_EQ(t.substr(0, t.find('\n')).find("Failed"), t.find("Failed"));
  EXPECT_LT(t.find("Failed"), t.find("Inaccurate"));
  EXPECT_LT(t.find("AUC-Hard"), t.find("mAUC"));
  EXPECT_NE(t.find("60.00"), std::string::npos);
  EXPECT_NE(t.find("0.416"), std::string::npos);
  const auto j = to_json(r);
  EXPECT_EQ(j["pairs"].size(), 10u);
  EXPECT_EQ(j["pairs"][2]["status"], "failed");
  EXPECT_EQ(j["pairs"][4]["verdict"], "inaccurate");
  EXPECT_TRUE(j["pairs"][9]["category"].is_null());
}

TEST(Pipeline, OracleDetectorRegistersSyntheticPairs) {
  data::SynthConfig sc;
  sc.image_size = 96;
  sc.n_images = 6;
  sc.n_pairs = 12;
  const auto ds = data::generate_synthetic(sc);
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const auto& p = ds.pairs[i];
    const GrayImage q = preprocess(ds.images[p.query_index].image, {});
    const GrayImage r = preprocess(p.reference, {});
    std::vector<Point2> kps;
    for (const auto& k : ds.images[p.query_index].keypoints) kps.push_back({k.x, k.y});
    const auto pr = register_images(oracle_detector(q, kps, p.h, i), q, r, p.controls, {}, "pair" + std::to_string(i),
                                    p.category);
    ASSERT_EQ(pr.outcome.status, RegistrationStatus::Evaluated) << i;
    EXPECT_LT(pr.outcome.mee, 0.5) << i;
    EXPECT_EQ(pr.outcome.verdict, Verdict::Acceptable);
    EXPECT_EQ(pr.inliers.size(), pr.matches.size());
  }
}

TEST(Pipeline, MissingImageIsAnErrorNotFailed) {
  TempDir dir("reg");
  data::PairRecord p;
  p.id = "gone";
  p.query_image_path = dir / "nope.png";
  p.ref_image_path = dir / "nope.png";
  p.control_points = controls_with_errors({0});
  const Detector det = [](const GrayImage&) { return Detection{}; };
  EXPECT_ERROR_KIND(register_pair(det, p, {}), ErrorKind::Io);
}

TEST(Pipeline, NoKeypointsMeansFailed) {
  const GrayImage img = random_gray(32, 32, 1);
  const Detector det = [](const GrayImage&) {
    Detection d;
    d.descriptors.resize(0, 8);
    return d;
  };
  const auto pr = register_images(det, img, img, controls_with_errors({0}), {}, "empty", 'S');
  EXPECT_EQ(pr.outcome.status, RegistrationStatus::Failed);
  EXPECT_EQ(pr.outcome.n_matches, 0u);
}

TEST(Pipeline, EvaluateDatasetFromManifest) {
  TempDir dir("manifest");
  data::SynthConfig sc;
  sc.image_size = 64;
  sc.n_images = 3;
  sc.n_pairs = 4;
  const auto ds = data::generate_synthetic(sc);
  data::write_synthetic(ds, sc, dir.path());
  const auto pairs = data::load_pair_manifest(dir / "pairs.json");
  ASSERT_EQ(pairs.size(), 4u);
  // A detector that finds nothing fails every pair; this covers manifest
  // loading and bookkeeping.
  const Detector det = [](const GrayImage&) { return Detection{KeypointSet{}, DescriptorMatrix(0, 8)}; };
  const EvalReport r = evaluate_dataset(det, pairs, {});
  EXPECT_EQ(r.n_pairs, 4u);
  EXPECT_EQ(r.n_failed, 4u);
  EXPECT_EQ(r.pct_failed, 100.0);
}
