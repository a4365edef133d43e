#pragma once

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "retina/core.hpp"
#include "retina/data.hpp"
#include "retina/keypoints.hpp"

namespace retina::plot {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

/// One row per image: `image_id,keypoints`.
inline std::string keypoint_counts_csv(const std::vector<data::AnnotationFile>& annotations) {
  require(!annotations.empty(), ErrorKind::InvalidArgument, "no annotations to plot");
  std::string out = "image_id,keypoints\n";
  for (const auto& a : annotations) out += a.image_id + "," + std::to_string(a.keypoints.size()) + "\n";
  return out;
}

/// Bar chart of keypoints per image with the mean and spread in the title.
inline std::string keypoint_histogram_svg(const data::KeypointStats& s) {
  const double width = 640, height = 360, left = 60, right = 20, top = 40, bottom = 50;
  const double pw = width - left - right, ph = height - top - bottom;
  const int max_count = std::max(1, *std::max_element(s.histogram.begin(), s.histogram.end()));
  const double bw = pw / static_cast<double>(s.histogram.size());
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
     << xml_escape("Keypoints per image (n=" + std::to_string(s.images) + ", mean " + num(s.mean) + " ± " +
                   num(s.stddev) + ", range " + std::to_string(s.min) + "-" + std::to_string(s.max) + ")")
     << "</text>\n";
  for (std::size_t i = 0; i < s.histogram.size(); ++i) {
    const double h = ph * s.histogram[i] / max_count;
    const double x = left + bw * static_cast<double>(i);
    os << "<rect x=\"" << num(x + 1) << "\" y=\"" << num(top + ph - h) << "\" width=\"" << num(std::max(1.0, bw - 2))
       << "\" height=\"" << num(h) << "\" fill=\"#3b7dd8\"/>\n";
    const int lo = s.first_bin + static_cast<int>(i) * s.bin_width;
    os << "<text x=\"" << num(x + bw / 2) << "\" y=\"" << num(top + ph + 16)
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << lo << "</text>\n";
  }
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << left - 8 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
     << "font-size=\"10\">" << max_count << "</text>\n"
     << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">keypoints per image</text>\n"
     << "</svg>\n";
  return os.str();
}

/// Match list as `xq,yq,xr,yr,distance,inlier`.
inline std::string matches_csv(const MatchSet& m, const std::vector<bool>& inliers = {}) {
  std::ostringstream os;
  os.precision(17);
  os << "xq,yq,xr,yr,distance,inlier\n";
  for (std::size_t i = 0; i < m.matches.size(); ++i) {
    const auto& q = m.query_keypoints.points[m.matches[i].query].pt;
    const auto& r = m.reference_keypoints.points[m.matches[i].reference].pt;
    os << q.x << "," << q.y << "," << r.x << "," << r.y << "," << m.matches[i].distance << ","
       << (i < inliers.size() && inliers[i] ? 1 : 0) << "\n";
  }
  return os.str();
}

/// Query and reference side by side with one line per match; inliers green,
/// others red. Images are referenced by href.
inline std::string matches_svg(const MatchSet& m, int width, int height, const std::string& query_href,
                               const std::string& ref_href, const std::vector<bool>& inliers = {}) {
  const int gap = 10;
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\" width=\""
     << 2 * width + gap << "\" height=\"" << height << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"black\"/>\n"
     << "<image x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" xlink:href=\""
     << xml_escape(query_href) << "\"/>\n"
     << "<image x=\"" << width + gap << "\" y=\"0\" width=\"" << width << "\" height=\"" << height
     << "\" xlink:href=\"" << xml_escape(ref_href) << "\"/>\n";
  for (std::size_t i = 0; i < m.matches.size(); ++i) {
    const auto& q = m.query_keypoints.points[m.matches[i].query].pt;
    const auto& r = m.reference_keypoints.points[m.matches[i].reference].pt;
    const bool ok = i < inliers.size() ? inliers[i] : true;
    const char* colour = ok ? "#2ecc40" : "#ff4136";
    os << "<line x1=\"" << num(q.x) << "\" y1=\"" << num(q.y) << "\" x2=\"" << num(r.x + width + gap)
       << "\" y2=\"" << num(r.y) << "\" stroke=\"" << colour << "\" stroke-width=\"1\"/>\n"
       << "<circle cx=\"" << num(q.x) << "\" cy=\"" << num(q.y) << "\" r=\"2\" fill=\"" << colour << "\"/>\n"
       << "<circle cx=\"" << num(r.x + width + gap) << "\" cy=\"" << num(r.y) << "\" r=\"2\" fill=\"" << colour
       << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace retina::plot
