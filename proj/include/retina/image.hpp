#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "retina/core.hpp"

namespace retina {

/// 8-bit image as decoded from disk, row-major, channels interleaved.
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// Single-channel float image. Values are in [0,1] once preprocessed.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  GrayImage() = default;
  GrayImage(int w, int h, float fill = 0.0f)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  float& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return data.size(); }
};

struct PreprocessConfig {
  double clahe_clip_limit = 2.0;
  int clahe_tile_rows = 8;
  int clahe_tile_cols = 8;
  double gamma = 1.2;

  void validate() const {
    require(clahe_clip_limit > 0.0, ErrorKind::InvalidArgument, "clahe_clip_limit must be > 0");
    require(clahe_tile_rows >= 1 && clahe_tile_cols >= 1, ErrorKind::InvalidArgument,
            "clahe tile grid must be at least 1x1");
    require(gamma > 0.0, ErrorKind::InvalidArgument, "gamma must be > 0");
  }
};

inline void validate(const RawImage& img) {
  require(img.channels == 1 || img.channels == 3, ErrorKind::InvalidArgument,
          "unsupported channel count " + std::to_string(img.channels));
  require(img.width >= 16 && img.height >= 16, ErrorKind::InvalidArgument,
          "image must be at least 16x16");
  require(img.data.size() == static_cast<std::size_t>(img.width) * img.height * img.channels,
          ErrorKind::ShapeMismatch, "raw image data length does not match its shape");
}

// ---------------------------------------------------------------------------
// I/O

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline RawImage decode_pgm(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_ws();
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
      if (v > (1L << 24)) fail(ErrorKind::Format, name + ": PGM header value too large");
    }
    if (!any) fail(ErrorKind::Format, name + ": malformed PGM header");
    return static_cast<int>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    fail(ErrorKind::Format, name + ": not a binary PGM (P5)");
  pos = 2;
  RawImage img;
  img.width = read_int();
  img.height = read_int();
  int maxval = read_int();
  if (maxval <= 0 || maxval > 65535) fail(ErrorKind::Format, name + ": bad PGM maxval");
  ++pos;  // single whitespace before raster
  img.channels = 1;
  std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  std::size_t bpp = maxval > 255 ? 2 : 1;
  if (bytes.size() < pos + n * bpp) fail(ErrorKind::Format, name + ": truncated PGM raster");
  img.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    unsigned v = bpp == 1 ? bytes[pos + i]
                          : (static_cast<unsigned>(bytes[pos + 2 * i]) << 8) | bytes[pos + 2 * i + 1];
    img.data[i] = static_cast<std::uint8_t>(std::lround(255.0 * v / maxval));
  }
  return img;
}

inline RawImage decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    fail(ErrorKind::Format, name + ": " + image.message);
  bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  RawImage img;
  img.width = static_cast<int>(image.width);
  img.height = static_cast<int>(image.height);
  img.channels = color ? 3 : 1;
  img.data.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.data.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    fail(ErrorKind::Format, name + ": " + msg);
  }
  return img;
}

}  // namespace detail

/// Reads PNG (gray, RGB, or with alpha, which is dropped) or binary PGM.
inline RawImage read_image(const std::filesystem::path& path) {
  auto bytes = detail::read_file(path);
  const std::string name = path.string();
  static constexpr std::array<std::uint8_t, 4> png_magic{0x89, 'P', 'N', 'G'};
  RawImage img;
  if (bytes.size() >= 4 && std::equal(png_magic.begin(), png_magic.end(), bytes.begin())) {
    img = detail::decode_png(bytes, name);
  } else if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') {
    img = detail::decode_pgm(bytes, name);
  } else {
    fail(ErrorKind::Format, name + ": unsupported image format (PNG or binary PGM required)");
  }
  return img;
}

inline void write_png(const RawImage& img, const std::filesystem::path& path) {
  require(img.channels == 1 || img.channels == 3, ErrorKind::InvalidArgument,
          "write_png supports 1 or 3 channels");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  auto tmp = path;
  tmp += ".tmp";
  if (!png_image_write_to_file(&image, tmp.c_str(), 0, img.data.data(), 0, nullptr))
    fail(ErrorKind::Io, path.string() + ": " + image.message);
  std::filesystem::rename(tmp, path);
}

inline std::string encode_png(const RawImage& img) {
  require(img.channels == 1 || img.channels == 3, ErrorKind::InvalidArgument,
          "encode_png supports 1 or 3 channels");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.data.data(), 0, nullptr))
    fail(ErrorKind::Format, std::string("png encode: ") + image.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.data.data(), 0, nullptr))
    fail(ErrorKind::Format, std::string("png encode: ") + image.message);
  out.resize(size);
  return out;
}

/// Quantizes a [0,1] image to 8 bits (round half up, clamped).
inline RawImage to_raw(const GrayImage& g) {
  RawImage r;
  r.width = g.width;
  r.height = g.height;
  r.channels = 1;
  r.data.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    float v = std::clamp(g.data[i], 0.0f, 1.0f);
    r.data[i] = static_cast<std::uint8_t>(std::floor(v * 255.0f + 0.5f));
  }
  return r;
}

inline void write_png(const GrayImage& img, const std::filesystem::path& path) {
  write_png(to_raw(img), path);
}

// ---------------------------------------------------------------------------
// Preprocessing

inline GrayImage extract_green(const RawImage& img) {
  require(img.channels == 1 || img.channels == 3, ErrorKind::InvalidArgument,
          "unsupported channel count " + std::to_string(img.channels));
  GrayImage out(img.width, img.height);
  const int c = img.channels == 3 ? 1 : 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.at(x, y) = static_cast<float>(img.at(x, y, c) / 255.0);
  return out;
}

/// Per-image standardization with population standard deviation.
inline GrayImage zscore(const GrayImage& img) {
  require(img.size() > 0, ErrorKind::DegenerateInput, "zscore of an empty image");
  double mean = 0.0;
  for (float v : img.data) mean += v;
  mean /= static_cast<double>(img.size());
  double var = 0.0;
  for (float v : img.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(img.size());
  const double sd = std::sqrt(var);
  if (!(sd > 1e-12)) fail(ErrorKind::DegenerateInput, "zscore of a constant image (sigma = 0)");
  GrayImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i)
    out.data[i] = static_cast<float>((img.data[i] - mean) / sd);
  return out;
}

inline int quantize256(float v) {
  return std::clamp(static_cast<int>(std::floor(v * 255.0f + 0.5f)), 0, 255);
}

/// Histogram-equalization lookup for one tile: (cdf - cdf_min) / (n - cdf_min),
/// after clipping at `limit` and spreading the excess evenly over all bins.
/// A tile with a single occupied bin has no spread to equalize and maps to
/// itself.
inline std::array<double, 256> equalization_lut(const std::array<double, 256>& hist,
                                                double limit) {
  std::array<double, 256> lut{};
  int occupied = 0;
  double total = 0.0;
  for (double h : hist) {
    occupied += h > 0.0;
    total += h;
  }
  if (occupied <= 1) {
    for (int b = 0; b < 256; ++b) lut[b] = b / 255.0;
    return lut;
  }
  std::array<double, 256> clipped = hist;
  double excess = 0.0;
  for (double& h : clipped) {
    if (h > limit) {
      excess += h - limit;
      h = limit;
    }
  }
  const double share = excess / 256.0;
  double cdf = 0.0, cdf_min = -1.0;
  std::array<double, 256> cum{};
  for (int b = 0; b < 256; ++b) {
    clipped[b] += share;
    cdf += clipped[b];
    cum[b] = cdf;
    if (cdf_min < 0.0 && clipped[b] > 0.0) cdf_min = cdf;
  }
  const double denom = total - cdf_min;
  for (int b = 0; b < 256; ++b)
    lut[b] = denom > 0.0 ? std::clamp((cum[b] - cdf_min) / denom, 0.0, 1.0) : b / 255.0;
  return lut;
}

/// Contrast limited adaptive histogram equalization on a [0,1] image.
///
/// Each tile builds a 256-bin histogram, clipped at clip_limit times the mean
/// bin height. Per-pixel mappings are blended bilinearly between the four
/// nearest tile centres. The blended mapping is applied as an offset to the
/// 256-level quantization so that sub-level detail in the input survives:
/// out = v + lut(q) - q/255.
inline GrayImage clahe(const GrayImage& img, const PreprocessConfig& cfg) {
  cfg.validate();
  const int rows = cfg.clahe_tile_rows, cols = cfg.clahe_tile_cols;
  const int tile_h = (img.height + rows - 1) / rows;
  const int tile_w = (img.width + cols - 1) / cols;
  require(tile_h >= 1 && tile_w >= 1, ErrorKind::InvalidArgument, "tile grid larger than image");
  const double area = static_cast<double>(tile_h) * tile_w;
  const double limit = std::max(1.0, cfg.clahe_clip_limit * area / 256.0);

  std::vector<int> q(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) q[i] = quantize256(img.data[i]);

  // Edge padding: samples beyond the image replicate the border.
  std::vector<std::array<double, 256>> luts(static_cast<std::size_t>(rows) * cols);
  for (int ty = 0; ty < rows; ++ty) {
    for (int tx = 0; tx < cols; ++tx) {
      std::array<double, 256> hist{};
      for (int y = ty * tile_h; y < (ty + 1) * tile_h; ++y) {
        const int sy = std::min(y, img.height - 1);
        for (int x = tx * tile_w; x < (tx + 1) * tile_w; ++x) {
          const int sx = std::min(x, img.width - 1);
          hist[q[static_cast<std::size_t>(sy) * img.width + sx]] += 1.0;
        }
      }
      luts[static_cast<std::size_t>(ty) * cols + tx] = equalization_lut(hist, limit);
    }
  }

  GrayImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    const double fy = (y + 0.5) / tile_h - 0.5;
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, rows - 1);
    const int y1 = std::min(y0 + 1, rows - 1);
    const double wy = std::clamp(fy - y0, 0.0, 1.0);
    for (int x = 0; x < img.width; ++x) {
      const double fx = (x + 0.5) / tile_w - 0.5;
      const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, cols - 1);
      const int x1 = std::min(x0 + 1, cols - 1);
      const double wx = std::clamp(fx - x0, 0.0, 1.0);
      const std::size_t i = static_cast<std::size_t>(y) * img.width + x;
      const int b = q[i];
      auto lut = [&](int ty, int tx) { return luts[static_cast<std::size_t>(ty) * cols + tx][b]; };
      const double mapped = (1 - wy) * ((1 - wx) * lut(y0, x0) + wx * lut(y0, x1)) +
                            wy * ((1 - wx) * lut(y1, x0) + wx * lut(y1, x1));
      const double offset = mapped - b / 255.0;
      out.data[i] = static_cast<float>(std::clamp(img.data[i] + offset, 0.0, 1.0));
    }
  }
  return out;
}

inline GrayImage gamma_correct(const GrayImage& img, double gamma) {
  require(gamma > 0.0, ErrorKind::InvalidArgument, "gamma must be > 0");
  GrayImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(static_cast<double>(img.data[i]), 0.0, 1.0);
    out.data[i] = static_cast<float>(std::pow(v, gamma));
  }
  return out;
}

/// green -> z-score -> clip to +-3 sigma and map onto the 8-bit range ->
/// CLAHE -> gamma -> scale back to [0,1]. The 8-bit range is carried as
/// [0,1] floats throughout, so the final division by 255 is implicit.
inline GrayImage preprocess(const RawImage& raw, const PreprocessConfig& cfg) {
  validate(raw);
  cfg.validate();
  GrayImage z = zscore(extract_green(raw));
  for (float& v : z.data) v = static_cast<float>((std::clamp(v, -3.0f, 3.0f) + 3.0f) / 6.0f);
  GrayImage out = gamma_correct(clahe(z, cfg), cfg.gamma);
  for (float v : out.data)
    require(std::isfinite(v), ErrorKind::DegenerateInput, "preprocess produced a non-finite value");
  return out;
}

}  // namespace retina
