#include <gtest/gtest.h>

#include <fstream>
#include <numeric>

#include "helpers.hpp"
#include "retina/config.hpp"
#include "retina/data.hpp"

using namespace retina;
using namespace retina::test;
using data::AnnotationFile;
using nlohmann::json;

namespace {

AnnotationFile random_annotation(int n, std::uint64_t seed) {
  Rng rng(seed);
  AnnotationFile a;
  a.image_id = "img";
  a.image_path = "img.png";
  a.width = 300;
  a.height = 200;
  a.annotator = "tester";
  for (int i = 0; i < n; ++i)
    a.keypoints.push_back({uniform(rng, 0, 299), uniform(rng, 0, 199),
                           static_cast<data::KeypointKind>(uniform_index(rng, 3))});
  return a;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string schema_message(const json& j) {
  try {
    data::annotation_from_json(j);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Schema);
    return e.what();
  }
  ADD_FAILURE() << "schema accepted " << j.dump();
  return "";
}

}  // namespace

// ---------------------------------------------------------------------------
// Annotations

TEST(Annotations, RoundTripIsExact) {
  TempDir dir("ann");
  const AnnotationFile a = random_annotation(50, 3);
  const AnnotationFile written = data::save_annotations(a, dir / "a.json");
  EXPECT_EQ(written.version, a.version + 1);
  const AnnotationFile b = data::load_annotations(dir / "a.json");
  ASSERT_EQ(b.keypoints.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(b.keypoints[i].x, a.keypoints[i].x);
    EXPECT_EQ(b.keypoints[i].y, a.keypoints[i].y);
    EXPECT_EQ(b.keypoints[i].kind, a.keypoints[i].kind);
  }
  EXPECT_EQ(b.version, 1);
  EXPECT_EQ(b.annotator, "tester");
  data::save_annotations(b, dir / "a.json");
  EXPECT_EQ(data::load_annotations(dir / "a.json").version, 2);
  EXPECT_FALSE(fs::exists(dir / "a.json.tmp"));
}

TEST(Annotations, OutOfBoundsAndNonFiniteRejectedWithPath) {
  json j = data::to_json(random_annotation(3, 1));
  j["keypoints"][1]["x"] = -1.0;
  j["keypoints"][1]["y"] = 5.0;
  EXPECT_NE(schema_message(j).find("keypoints[1].x"), std::string::npos);
  j = data::to_json(random_annotation(3, 1));
  j["keypoints"][2]["y"] = 199.5;
  EXPECT_NE(schema_message(j).find("keypoints[2].y"), std::string::npos);
  j = data::to_json(random_annotation(3, 1));
  j["keypoints"][0]["x"] = "12";
  EXPECT_NE(schema_message(j).find("keypoints[0].x"), std::string::npos);
  j = data::to_json(random_annotation(3, 1));
  j["keypoints"][0]["kind"] = "fork";
  EXPECT_NE(schema_message(j).find("keypoints[0].kind"), std::string::npos);
  j = data::to_json(random_annotation(3, 1));
  j.erase("width");
  EXPECT_NE(schema_message(j).find("width"), std::string::npos);
  AnnotationFile bad = random_annotation(2, 1);
  bad.keypoints[0].x = std::numeric_limits<double>::quiet_NaN();
  TempDir dir("nan");
  EXPECT_ERROR_KIND(data::save_annotations(bad, dir / "a.json"), ErrorKind::Schema);
  EXPECT_FALSE(fs::exists(dir / "a.json"));
}

TEST(Annotations, MissingKindDefaultsWithWarning) {
  json j = data::to_json(random_annotation(2, 1));
  j["keypoints"][1].erase("kind");
  std::vector<std::string> warnings;
  const AnnotationFile a = data::annotation_from_json(j, &warnings);
  EXPECT_EQ(a.keypoints[1].kind, data::KeypointKind::Bifurcation);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("keypoints[1].kind"), std::string::npos);
}

TEST(Annotations, EmptyKeypointListAllowed) {
  TempDir dir("empty");
  AnnotationFile a = random_annotation(0, 1);
  data::save_annotations(a, dir / "a.json");
  EXPECT_TRUE(data::load_annotations(dir / "a.json").keypoints.empty());
}

TEST(Annotations, MalformedJsonIsFormatError) {
  TempDir dir("bad");
  std::ofstream(dir / "a.json") << "{\"image_id\": ";
  EXPECT_ERROR_KIND(data::load_annotations(dir / "a.json"), ErrorKind::Format);
  EXPECT_ERROR_KIND(data::load_annotations(dir / "missing.json"), ErrorKind::Io);
}

// ---------------------------------------------------------------------------
// Statistics

TEST(Stats, TwoPointCounts) {
  const auto s = data::keypoint_stats_from_counts({18, 86});
  EXPECT_EQ(s.min, 18);
  EXPECT_EQ(s.max, 86);
  EXPECT_DOUBLE_EQ(s.mean, 52.0);
  EXPECT_DOUBLE_EQ(s.stddev, 34.0);
}

TEST(Stats, SingleFile) {
  std::vector<AnnotationFile> one{random_annotation(7, 2)};
  const auto s = data::keypoint_stats(one);
  EXPECT_DOUBLE_EQ(s.mean, 7.0);
  EXPECT_DOUBLE_EQ(s.stddev, 0.0);
  EXPECT_EQ(s.histogram, std::vector<int>{1});
}

TEST(Stats, ConstructedFixtureReproducesItsMoments) {
  // 25 counts in [18, 86] summing to 25 * 42.96 = 1074.
  Rng rng(42);
  std::vector<int> counts{18, 86};
  while (counts.size() < 24) counts.push_back(18 + static_cast<int>(uniform_index(rng, 50)));
  const int rest = 1074 - std::accumulate(counts.begin(), counts.end(), 0);
  ASSERT_GE(rest, 18);
  ASSERT_LE(rest, 86);
  counts.push_back(rest);
  std::shuffle(counts.begin(), counts.end(), rng);

  long long sum = 0, sq = 0;
  for (int c : counts) {
    sum += c;
    sq += static_cast<long long>(c) * c;
  }
  const double n = static_cast<double>(counts.size());
  const double mean = static_cast<double>(sum) / n;
  const double var = (static_cast<double>(sq) - static_cast<double>(sum) * static_cast<double>(sum) / n) / n;

  const auto s = data::keypoint_stats_from_counts(counts, 10);
  EXPECT_NEAR(s.mean, 42.96, 1e-12);
  EXPECT_NEAR(s.mean, mean, 1e-12);
  EXPECT_NEAR(s.stddev, std::sqrt(var), 1e-9);
  EXPECT_EQ(s.min, 18);
  EXPECT_EQ(s.max, 86);
  EXPECT_EQ(s.first_bin, 10);
  EXPECT_EQ(std::accumulate(s.histogram.begin(), s.histogram.end(), 0), 25);
  for (std::size_t b = 0; b < s.histogram.size(); ++b) {
    const int lo = s.first_bin + static_cast<int>(b) * 10;
    EXPECT_EQ(s.histogram[b], std::count_if(counts.begin(), counts.end(), [&](int c) { return c >= lo && c < lo + 10; }));
  }
}

TEST(Stats, EmptyListRejected) {
  EXPECT_ERROR_KIND(data::keypoint_stats({}), ErrorKind::InvalidArgument);
  EXPECT_ERROR_KIND(data::keypoint_stats_from_counts({}), ErrorKind::InvalidArgument);
}

// ---------------------------------------------------------------------------
// Synthetic generator

TEST(Synth, SameSeedSameBytes) {
  TempDir a("sa"), b("sb");
  data::SynthConfig sc;
  sc.image_size = 64;
  sc.n_images = 4;
  sc.n_pairs = 3;
  data::write_synthetic(data::generate_synthetic(sc), sc, a.path());
  data::write_synthetic(data::generate_synthetic(sc), sc, b.path());
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b.path() / fs::relative(e.path(), a.path()))) << e.path();
  }
  EXPECT_EQ(files, 4u * 2 + 3u * 2 + 2);
  sc.seed = 2;
  EXPECT_NE(data::generate_synthetic(sc).images[0].image.data,
            data::generate_synthetic(data::SynthConfig{}).images[0].image.data);
}

TEST(Synth, KeypointsSitOnVessels) {
  // Oracle: the green value at the pixel nearest each keypoint stands out
  // from the disc's typical background by a clear margin.
  data::SynthConfig sc;
  sc.n_images = 12;
  sc.n_pairs = 0;
  const auto ds = data::generate_synthetic(sc);
  std::size_t total = 0;
  for (const auto& im : ds.images) {
    const int s = im.image.width;
    auto green = [&](int x, int y) { return im.image.data[3 * (static_cast<std::size_t>(y) * s + x) + 1] / 255.0; };
    std::vector<double> disc;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        if (std::hypot(x - 0.5 * (s - 1), y - 0.5 * (s - 1)) < 0.4 * s) disc.push_back(green(x, y));
    std::nth_element(disc.begin(), disc.begin() + static_cast<long>(disc.size() / 2), disc.end());
    const double median = disc[disc.size() / 2];
    EXPECT_NEAR(median, im.background_level, 0.05);
    for (const auto& k : im.keypoints) {
      const double g = green(static_cast<int>(std::lround(k.x)), static_cast<int>(std::lround(k.y)));
      EXPECT_GT(g, median + 0.15) << k.x << "," << k.y;
      ++total;
    }
  }
  EXPECT_GT(total, 50u);
}

TEST(Synth, ControlsFollowTheTrueHomography) {
  data::SynthConfig sc;
  sc.n_images = 3;
  sc.n_pairs = 9;
  const auto ds = data::generate_synthetic(sc);
  std::string cats;
  for (const auto& p : ds.pairs) {
    cats += p.category;
    EXPECT_GE(p.controls.size(), 4u);
    for (const auto& c : p.controls) {
      const Point2 r = apply(p.h, c.query);
      EXPECT_LT(std::hypot(r.x - c.reference.x, r.y - c.reference.y), 1e-6);
    }
  }
  EXPECT_EQ(cats, "SAPSAPSAP");
}

TEST(Synth, CountsConfigurableIntoObservedRange) {
  data::SynthConfig sc;
  sc.image_size = 256;
  sc.n_vessels = 10;
  sc.n_images = 16;
  sc.n_pairs = 0;
  const auto ds = data::generate_synthetic(sc);
  for (const auto& im : ds.images) {
    EXPECT_GE(im.keypoints.size(), 18u);
    EXPECT_LE(im.keypoints.size(), 86u);
  }
}

TEST(Synth, ManifestsRoundTrip) {
  TempDir dir("manifest");
  data::SynthConfig sc;
  sc.image_size = 64;
  sc.n_images = 5;
  sc.n_pairs = 2;
  const auto ds = data::generate_synthetic(sc);
  data::write_synthetic(ds, sc, dir.path());
  const auto tm = data::load_train_manifest(dir / "train.json");
  EXPECT_EQ(tm.train.size(), 4u);
  EXPECT_EQ(tm.val.size(), 1u);
  const auto a = data::load_annotations(tm.val[0]);
  EXPECT_EQ(a.keypoints.size(), ds.images[4].keypoints.size());
  EXPECT_EQ(a.annotator, "synthetic");
  const auto samples = load_samples(tm.train, {});
  ASSERT_EQ(samples.size(), 4u);
  EXPECT_EQ(samples[0].image.width, 64);
  const auto pairs = data::load_pair_manifest(dir / "pairs.json");
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[1].category, 'A');
  EXPECT_EQ(pairs[1].control_points.size(), ds.pairs[1].controls.size());
  EXPECT_NEAR(pairs[1].control_points[0].reference.x, ds.pairs[1].controls[0].reference.x, 1e-6);
}

TEST(Synth, InvalidConfigRejected) {
  data::SynthConfig sc;
  sc.image_size = 40;
  EXPECT_ERROR_KIND(data::generate_synthetic(sc), ErrorKind::InvalidArgument);
  sc = {};
  sc.n_vessels = 0;
  EXPECT_ERROR_KIND(data::generate_synthetic(sc), ErrorKind::InvalidArgument);
}

// ---------------------------------------------------------------------------
// Keypoint dumps

TEST(Dump, KeypointsAndDescriptorsRoundTrip) {
  KeypointSet k;
  k.points.push_back({{1.25, 2.5}, 0.9});
  k.points.push_back({{10.0, 3.0}, 0.4});
  DescriptorMatrix d(2, 3);
  d << 0.5f, -0.25f, 1.0f, 0.0f, 0.125f, -1.0f;
  DescriptorMatrix back;
  const KeypointSet k2 = data::keypoints_from_json(data::keypoints_to_json(k, &d), &back);
  ASSERT_EQ(k2.size(), 2u);
  EXPECT_EQ(k2.points[0].pt.x, 1.25);
  EXPECT_EQ(k2.points[1].score, 0.4);
  EXPECT_EQ(back, d);
  for (std::size_t n = 0; n < 7; ++n) {
    std::vector<std::uint8_t> bytes(n);
    std::iota(bytes.begin(), bytes.end(), 250);
    EXPECT_EQ(data::base64_decode(data::base64_encode(bytes)), bytes);
  }
  EXPECT_EQ(data::base64_encode({'M', 'a'}), "TWE=");
}

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, FileThenOverridesFlagsWin) {
  TempDir dir("cfg");
  std::ofstream(dir / "c.cfg") << "# toy\nseed = 7\nlearning_rate = 0.01\n\nepochs=3  # short\n";
  GlobalConfig g = load_config(dir / "c.cfg");
  apply_overrides(g, {"learning_rate=0.5", "optimizer=sgd"});
  const TrainConfig t = train_config(g);
  EXPECT_EQ(t.seed, 7u);
  EXPECT_EQ(t.epochs, 3);
  EXPECT_EQ(t.learning_rate, 0.5);
  EXPECT_EQ(t.optimizer, OptimizerKind::Sgd);
  EXPECT_EQ(register_config(g).seed, 7u);
}

TEST(Config, UnknownKeysAndBadValuesAreErrors) {
  GlobalConfig g;
  try {
    g.set("learnign_rate", "0.1", "c.cfg:4");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Schema);
    EXPECT_NE(std::string(e.what()).find("c.cfg:4"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("learnign_rate"), std::string::npos);
  }
  EXPECT_ERROR_KIND(g.set("epochs", "2.5"), ErrorKind::Schema);
  EXPECT_ERROR_KIND(g.set("gamma", "nan"), ErrorKind::Schema);
  EXPECT_ERROR_KIND(g.set("mutual", "maybe"), ErrorKind::Schema);
  EXPECT_ERROR_KIND(apply_overrides(g, {"epochs"}), ErrorKind::InvalidArgument);
  GlobalConfig bad;
  EXPECT_ERROR_KIND(parse_config_text(bad, "seed 3\n", "x"), ErrorKind::Format);
  bad.set("optimizer", "rmsprop");
  EXPECT_ERROR_KIND(train_config(bad), ErrorKind::Schema);
  GlobalConfig neg;
  neg.set("dropout_rate", "1.5");
  EXPECT_ERROR_KIND(train_config(neg), ErrorKind::InvalidArgument);
}

TEST(Config, ModelSpecViews) {
  GlobalConfig g;
  g.set("input_size", "64");
  g.set("dropout_rate", "0.3");
  g.set("lk_block", "on");
  const auto t = model_spec(g, nn::ModelKind::Teacher);
  EXPECT_TRUE(t.lk_block);
  EXPECT_EQ(t.input_width, 64);
  EXPECT_EQ(t.dropout_rate, 0.0);
  EXPECT_EQ(model_spec(g, nn::ModelKind::Student).dropout_rate, 0.3);
  g.set("input_size", "70");
  EXPECT_ERROR_KIND(model_spec(g, nn::ModelKind::Teacher), ErrorKind::InvalidArgument);
}

TEST(Config, EveryRegisteredKeyIsConsumed) {
  // Setting every key to a plausible value must pass all typed views.
  GlobalConfig g;
  for (const auto& [key, info] : config_registry()) {
    std::string v;
    switch (info.type) {
      case ValueType::Double: v = "0.5"; break;
      case ValueType::Int: v = "2"; break;
      case ValueType::Bool: v = "true"; break;
      case ValueType::String: v = "adam"; break;
    }
    g.set(key, v);
  }
  const std::map<std::string, std::string> fixes = {
      {"input_size", "64"}, {"synth.image_size", "64"}, {"gamma", "1.2"}, {"clahe_clip_limit", "2"},
      {"augment.scale_min", "0.9"}, {"augment.scale_max", "1.1"}, {"synth.scale_min", "0.9"},
      {"synth.scale_max", "1.1"}, {"descriptor_dim", "8"}, {"embed_dim", "16"}, {"window_size", "2"},
      {"synth.vessel_width_max", "2"}, {"ratio_threshold", "0.8"}, {"augment.max_rotation", "5"},
      {"synth.max_rotation", "5"}, {"augment.max_translation", "0.05"}, {"augment.max_perspective", "0.001"},
      {"synth.max_translation", "0.05"}, {"synth.max_perspective", "0.001"}, {"synth.val_fraction", "0.2"},
      {"synth.noise", "0.01"}, {"auc_t_max", "25"}, {"inlier_threshold", "3"}, {"nms_window", "4"},
      {"detection_threshold", "0.3"}, {"momentum", "0.9"}, {"beta1", "0.9"}, {"beta2", "0.99"},
      {"adam_epsilon", "1e-8"}, {"sigma", "1.5"}, {"margin_m", "1"}, {"dice_epsilon", "1e-6"},
      {"learning_rate", "0.001"}, {"desc_window", "4"}, {"desc_max_keypoints", "64"}};
  for (const auto& [k, v] : fixes) g.set(k, v);
  EXPECT_NO_THROW(train_config(g));
  EXPECT_NO_THROW(register_config(g));
  EXPECT_NO_THROW(model_spec(g, nn::ModelKind::Student));
  EXPECT_NO_THROW(synth_config(g));
  EXPECT_EQ(synth_config(g).n_vessels, 2);
}
