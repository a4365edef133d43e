#pragma once

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "retina/core.hpp"
#include "retina/data.hpp"
#include "retina/nn/model.hpp"

namespace retina {

namespace fs = std::filesystem;

struct Checkpoint {
  nn::ModelSpec spec;
  nn::ModelParams params;
};

inline nlohmann::json spec_to_json(const nn::ModelSpec& s) {
  return {{"kind", nn::to_string(s.kind)},   {"base_channels", s.base_channels},
          {"descriptor_dim", s.descriptor_dim}, {"lk_block", s.lk_block},
          {"embed_dim", s.embed_dim},       {"window_size", s.window_size},
          {"heads", s.heads},               {"depth", s.depth},
          {"dropout_rate", s.dropout_rate}, {"input_height", s.input_height},
          {"input_width", s.input_width}};
}

inline nn::ModelSpec spec_from_json(const nlohmann::json& j) {
  try {
    nn::ModelSpec s;
    s.kind = nn::parse_model_kind(j.at("kind").get<std::string>());
    s.base_channels = j.at("base_channels").get<int>();
    s.descriptor_dim = j.at("descriptor_dim").get<int>();
    s.lk_block = j.at("lk_block").get<bool>();
    s.embed_dim = j.at("embed_dim").get<int>();
    s.window_size = j.at("window_size").get<int>();
    s.heads = j.at("heads").get<int>();
    s.depth = j.at("depth").get<int>();
    s.dropout_rate = j.at("dropout_rate").get<double>();
    s.input_height = j.at("input_height").get<int>();
    s.input_width = j.at("input_width").get<int>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("checkpoint spec: ") + e.what());
  }
}

inline fs::path blob_path(const fs::path& manifest) {
  fs::path p = manifest;
  p += ".bin";
  return p;
}

/// Writes `path` (JSON manifest) and `path.bin` (little-endian float32
/// values, parameters in name order). Both go through temp-and-rename.
inline void save_checkpoint(const nn::ModelSpec& spec, const nn::ModelParams& params, const fs::path& path) {
  nn::check_params(spec, params);
  nlohmann::json entries = nlohmann::json::array();
  std::string blob;
  for (const auto& [name, t] : params.tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", blob.size()}});
    for (double v : t.data) {
      const float f = static_cast<float>(v);
      char b[4];
      std::memcpy(b, &f, 4);
      blob.append(b, 4);
    }
  }
  const nlohmann::json manifest{{"format", "retina-checkpoint"},
                                {"version", 1},
                                {"spec", spec_to_json(spec)},
                                {"spec_hash", spec.hash()},
                                {"dtype", "float32"},
                                {"blob", blob_path(path).filename().string()},
                                {"blob_bytes", blob.size()},
                                {"params", entries}};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  data::write_text_atomic(blob_path(path), blob);
  data::write_text_atomic(path, manifest.dump(2) + "\n");
}

/// Loads and verifies a checkpoint. When `expected` is given its hash must
/// match the stored one.
inline Checkpoint load_checkpoint(const fs::path& path, const nn::ModelSpec* expected = nullptr) {
  const nlohmann::json m = data::parse_json(data::read_text(path), path.string());
  Checkpoint ck;
  try {
    if (m.at("dtype").get<std::string>() != "float32")
      fail(ErrorKind::Format, path.string() + ": unsupported dtype");
    ck.spec = spec_from_json(m.at("spec"));
    const std::string stored = m.at("spec_hash").get<std::string>();
    if (stored != ck.spec.hash())
      fail(ErrorKind::HashMismatch, path.string() + ": manifest spec does not match its hash");
    if (expected && expected->hash() != stored)
      fail(ErrorKind::HashMismatch, path.string() + ": checkpoint spec " + stored +
                                        " does not match requested spec " + expected->hash());
    const std::string blob = data::read_text(path.parent_path() / m.at("blob").get<std::string>());
    if (blob.size() != m.at("blob_bytes").get<std::size_t>())
      fail(ErrorKind::Format, path.string() + ": blob has " + std::to_string(blob.size()) +
                                  " bytes, expected " + std::to_string(m.at("blob_bytes").get<std::size_t>()));
    nn::ModelParams p;
    p.spec_hash = stored;
    for (const auto& e : m.at("params")) {
      const std::string name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<std::vector<int>>();
      const std::size_t offset = e.at("offset").get<std::size_t>();
      nn::Tensor t(shape);
      if (offset + 4 * t.size() > blob.size())
        fail(ErrorKind::Format, path.string() + ": parameter " + name + " runs past the blob");
      for (std::size_t i = 0; i < t.size(); ++i) {
        float f;
        std::memcpy(&f, blob.data() + offset + 4 * i, 4);
        t.data[i] = f;
      }
      p.tensors.emplace(name, std::move(t));
    }
    nn::check_params(ck.spec, p);
    ck.params = std::move(p);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace retina
