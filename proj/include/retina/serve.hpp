#pragma once

#include <json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "retina/core.hpp"
#include "retina/data.hpp"
#include "retina/geometry.hpp"
#include "retina/image.hpp"
#include "retina/registration.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose `_res` macro clashes with
// Eigen parameter names.
#include <httplib.h>

namespace retina::serve {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// HTTP API for the annotation and match-review UI.
///
/// Data directory layout: images (`*.png`, `*.pgm`) at the top level or in
/// `images/`, each with a sibling `<id>.json` annotation; `pairs.json`
/// (registration manifest); `matches/<pair_id>.json` (cached match dumps)
/// and `matches/<pair_id>.review.json` (accept/reject decisions).
class AnnotationServer {
 public:
  AnnotationServer(fs::path data_dir, std::optional<Detector> detector = std::nullopt,
                   RegisterConfig reg_cfg = {})
      : dir_(std::move(data_dir)), detector_(std::move(detector)), reg_cfg_(std::move(reg_cfg)) {
    if (!fs::is_directory(dir_)) fail(ErrorKind::Io, "data dir " + dir_.string() + " does not exist");
    const fs::path probe = dir_ / ".write_probe";
    try {
      data::write_text_atomic(probe, "");
      fs::remove(probe);
    } catch (const Error&) {
      fail(ErrorKind::Io, "data dir " + dir_.string() + " is not writable");
    }
    routes();
  }

  httplib::Server& server() { return svr_; }

  /// Binds and returns the port (an ephemeral one when `port` is 0).
  int bind(const std::string& host, int port) {
    if (port == 0) {
      const int p = svr_.bind_to_any_port(host);
      if (p < 0) fail(ErrorKind::Io, "cannot bind " + host);
      return p;
    }
    if (!svr_.bind_to_port(host, port)) fail(ErrorKind::Io, "port " + std::to_string(port) + " is in use");
    return port;
  }
  void run() { svr_.listen_after_bind(); }
  void stop() { svr_.stop(); }

 private:
  struct ImageEntry {
    std::string id;
    fs::path path;
  };

  static bool valid_id(const std::string& id) {
    static const std::regex re("^[A-Za-z0-9_][A-Za-z0-9_.-]*$");
    return std::regex_match(id, re) && id.find("..") == std::string::npos;
  }

  static void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(2) + "\n", "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& msg,
                         const std::string& field = "") {
    json j{{"error", msg}};
    if (!field.empty()) j["field"] = field;
    send_json(res, status, j);
  }

  std::vector<ImageEntry> images() const {
    std::vector<ImageEntry> out;
    for (const fs::path& d : {dir_, dir_ / "images"}) {
      if (!fs::is_directory(d)) continue;
      for (const auto& e : fs::directory_iterator(d)) {
        const auto ext = e.path().extension().string();
        if (!e.is_regular_file() || (ext != ".png" && ext != ".pgm")) continue;
        out.push_back({e.path().stem().string(), e.path()});
      }
    }
    std::sort(out.begin(), out.end(), [](const ImageEntry& a, const ImageEntry& b) { return a.id < b.id; });
    return out;
  }

  std::optional<ImageEntry> find_image(const std::string& id) const {
    if (!valid_id(id)) return std::nullopt;
    for (auto& e : images())
      if (e.id == id) return e;
    return std::nullopt;
  }

  static fs::path annotation_path(const ImageEntry& e) {
    fs::path p = e.path;
    return p.replace_extension(".json");
  }

  std::mutex& file_lock(const std::string& key) {
    std::lock_guard<std::mutex> g(locks_mutex_);
    auto& m = locks_[key];
    if (!m) m = std::make_unique<std::mutex>();
    return *m;
  }

  // Cross-origin writes are refused; no CORS headers are ever sent.
  static bool same_origin(const httplib::Request& req) {
    if (!req.has_header("Origin")) return true;
    const std::string origin = req.get_header_value("Origin");
    const std::string host = req.get_header_value("Host");
    const auto scheme = origin.find("://");
    return scheme != std::string::npos && origin.substr(scheme + 3) == host;
  }

  data::AnnotationFile current_annotation(const ImageEntry& e) const {
    const fs::path p = annotation_path(e);
    if (fs::exists(p)) return data::load_annotations(p);
    const RawImage raw = read_image(e.path);
    data::AnnotationFile a;
    a.image_id = e.id;
    a.image_path = e.path.filename().string();
    a.width = raw.width;
    a.height = raw.height;
    return a;
  }

  std::vector<data::PairRecord> pairs() const {
    const fs::path p = dir_ / "pairs.json";
    if (!fs::exists(p)) return {};
    return data::load_pair_manifest(p);
  }

  json pairs_json() const {
    const fs::path p = dir_ / "pairs.json";
    json out = json::array();
    if (!fs::exists(p)) return out;
    const json j = data::parse_json(data::read_text(p), p.string());
    const auto recs = pairs();
    for (std::size_t i = 0; i < recs.size(); ++i) {
      json e = j[i];
      e["id"] = recs[i].id;
      e["n_controls"] = recs[i].control_points.size();
      out.push_back(e);
    }
    return out;
  }

  fs::path matches_path(const std::string& pair_id) const { return dir_ / "matches" / (pair_id + ".json"); }
  fs::path review_path(const std::string& pair_id) const { return dir_ / "matches" / (pair_id + ".review.json"); }

  std::optional<json> match_dump(const std::string& pair_id) {
    const fs::path cached = matches_path(pair_id);
    if (fs::exists(cached)) return data::parse_json(data::read_text(cached), cached.string());
    if (!detector_) return std::nullopt;
    for (const auto& p : pairs()) {
      if (p.id != pair_id) continue;
      const PairRegistration pr = register_pair_detailed(*detector_, p, reg_cfg_);
      json matches = json::array();
      for (std::size_t i = 0; i < pr.matches.matches.size(); ++i) {
        const auto& m = pr.matches.matches[i];
        matches.push_back({{"query", m.query},
                           {"reference", m.reference},
                           {"distance", m.distance},
                           {"inlier", i < pr.inliers.size() && pr.inliers[i]}});
      }
      json dump{{"pair_id", pair_id},
                {"query_keypoints", data::keypoints_to_json(pr.matches.query_keypoints)},
                {"reference_keypoints", data::keypoints_to_json(pr.matches.reference_keypoints)},
                {"matches", matches},
                {"registration", to_json(pr.outcome)}};
      fs::create_directories(dir_ / "matches");
      std::lock_guard<std::mutex> g(file_lock("matches/" + pair_id));
      data::write_text_atomic(cached, dump.dump(2) + "\n");
      return dump;
    }
    return std::nullopt;
  }

  void routes() {
    // SO_REUSEADDR only; httplib's default SO_REUSEPORT would let a second
    // server share a port that is already in use.
    svr_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof yes);
    });
    svr_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const Error& e) {
        send_error(res, e.kind() == ErrorKind::Schema ? 422 : 500, std::string(to_string(e.kind())) + ": " + e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    });

    svr_.Get("/api/images", [this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      for (const auto& e : images()) {
        const fs::path ap = annotation_path(e);
        json item{{"id", e.id}, {"file", fs::relative(e.path, dir_).generic_string()}, {"annotated", fs::exists(ap)}};
        if (fs::exists(ap)) {
          const auto a = data::load_annotations(ap);
          item["version"] = a.version;
          item["n_keypoints"] = a.keypoints.size();
        }
        out.push_back(item);
      }
      send_json(res, 200, out);
    });

    svr_.Get(R"(/api/image/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const auto e = find_image(req.matches[1]);
      if (!e) return send_error(res, 404, "unknown image");
      res.status = 200;
      res.set_content(encode_png(read_image(e->path)), "image/png");
    });

    svr_.Get(R"(/api/annotations/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const auto e = find_image(req.matches[1]);
      if (!e) return send_error(res, 404, "unknown image");
      std::lock_guard<std::mutex> g(file_lock(e->id));
      send_json(res, 200, data::to_json(current_annotation(*e)));
    });

    svr_.Put(R"(/api/annotations/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      if (!same_origin(req)) return send_error(res, 403, "cross-origin write refused");
      const auto e = find_image(req.matches[1]);
      if (!e) return send_error(res, 404, "unknown image");
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error&) {
        return send_error(res, 400, "body is not valid JSON");
      }
      data::AnnotationFile a;
      try {
        a = data::annotation_from_json(body);
      } catch (const Error& err) {
        const std::string msg = err.what();
        return send_error(res, 422, msg, msg.substr(0, msg.find(':')));
      }
      if (a.image_id != e->id) return send_error(res, 422, "image_id does not match the URL", "image_id");
      std::lock_guard<std::mutex> g(file_lock(e->id));
      const data::AnnotationFile cur = current_annotation(*e);
      if (a.width != cur.width || a.height != cur.height)
        return send_error(res, 422, "width/height do not match the image", "width");
      if (a.version != cur.version) {
        json j{{"error", "stale version"}, {"current_version", cur.version}};
        return send_json(res, 409, j);
      }
      a.image_path = cur.image_path;
      const data::AnnotationFile saved = data::save_annotations(a, annotation_path(*e));
      send_json(res, 200, data::to_json(saved));
    });

    svr_.Get("/api/pairs", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, pairs_json());
    });

    svr_.Get(R"(/api/matches/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      if (!valid_id(id)) return send_error(res, 404, "unknown pair");
      auto dump = match_dump(id);
      if (!dump) return send_error(res, 404, "no matches for pair " + id);
      const fs::path rp = review_path(id);
      if (fs::exists(rp)) (*dump)["review"] = data::parse_json(data::read_text(rp), rp.string());
      send_json(res, 200, *dump);
    });

    svr_.Put(R"(/api/matches/([^/]+)/review)", [this](const httplib::Request& req, httplib::Response& res) {
      if (!same_origin(req)) return send_error(res, 403, "cross-origin write refused");
      const std::string id = req.matches[1];
      if (!valid_id(id)) return send_error(res, 404, "unknown pair");
      auto dump = match_dump(id);
      if (!dump) return send_error(res, 404, "no matches for pair " + id);
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error&) {
        return send_error(res, 400, "body is not valid JSON");
      }
      const json list = body.is_object() && body.contains("accepted") ? body["accepted"] : body;
      if (!list.is_array()) return send_error(res, 422, "expected a list of booleans", "accepted");
      const std::size_t n = (*dump)["matches"].size();
      if (list.size() != n)
        return send_error(res, 422, "expected " + std::to_string(n) + " decisions, got " + std::to_string(list.size()),
                          "accepted");
      for (std::size_t i = 0; i < list.size(); ++i)
        if (!list[i].is_boolean())
          return send_error(res, 422, "decisions must be booleans", "accepted[" + std::to_string(i) + "]");
      const json review{{"pair_id", id}, {"accepted", list}};
      fs::create_directories(dir_ / "matches");
      std::lock_guard<std::mutex> g(file_lock("matches/" + id));
      data::write_text_atomic(review_path(id), review.dump(2) + "\n");
      send_json(res, 200, review);
    });

    svr_.Get(R"(/api/export/controls/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      if (!valid_id(id)) return send_error(res, 404, "unknown pair");
      auto dump = match_dump(id);
      if (!dump) return send_error(res, 404, "no matches for pair " + id);
      std::vector<Correspondence> out;
      const fs::path rp = review_path(id);
      if (fs::exists(rp)) {
        const json review = data::parse_json(data::read_text(rp), rp.string());
        const KeypointSet qk = data::keypoints_from_json((*dump)["query_keypoints"]);
        const KeypointSet rk = data::keypoints_from_json((*dump)["reference_keypoints"]);
        const json& matches = (*dump)["matches"];
        for (std::size_t i = 0; i < matches.size() && i < review["accepted"].size(); ++i) {
          if (!review["accepted"][i].get<bool>()) continue;
          const std::size_t q = matches[i]["query"].get<std::size_t>();
          const std::size_t r = matches[i]["reference"].get<std::size_t>();
          out.push_back({qk.points.at(q).pt, rk.points.at(r).pt});
        }
      }
      res.status = 200;
      res.set_content(format_correspondences(out), "text/plain");
    });
  }

  fs::path dir_;
  std::optional<Detector> detector_;
  RegisterConfig reg_cfg_;
  httplib::Server svr_;
  std::mutex locks_mutex_;
  std::map<std::string, std::unique_ptr<std::mutex>> locks_;
};

}  // namespace retina::serve
