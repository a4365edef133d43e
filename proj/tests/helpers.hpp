#pragma once

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "retina/core.hpp"
#include "retina/data.hpp"
#include "retina/image.hpp"
#include "retina/training.hpp"

namespace retina::test {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::random_device{}());
    path_ = fs::temp_directory_path() / ("retina_" + tag + "_" + hex64(rng()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline fs::path data_dir() { return fs::path(RETINA_TEST_DATA_DIR); }

#define EXPECT_ERROR_KIND(stmt, k)                                   \
  do {                                                               \
    try {                                                            \
      stmt;                                                          \
      ADD_FAILURE() << "expected retina::Error(" #k ")";             \
    } catch (const ::retina::Error& e) {                             \
      EXPECT_EQ(e.kind(), k) << e.what();                            \
    }                                                                \
  } while (0)

inline GrayImage random_gray(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  GrayImage g(w, h);
  for (float& v : g.data) v = static_cast<float>(uniform01(rng));
  return g;
}

/// Preprocessed training samples from a synthetic dataset.
inline std::vector<AnnotatedSample> synth_samples(const data::SynthDataset& ds, std::size_t begin, std::size_t end) {
  std::vector<AnnotatedSample> out;
  for (std::size_t i = begin; i < std::min(end, ds.images.size()); ++i) {
    AnnotatedSample s;
    s.id = "synth" + std::to_string(i);
    s.image = preprocess(ds.images[i].image, {});
    for (const auto& k : ds.images[i].keypoints) s.keypoints.push_back({k.x, k.y});
    out.push_back(std::move(s));
  }
  return out;
}

inline RawImage raw_from_gray(const GrayImage& g) { return to_raw(g); }

}  // namespace retina::test
