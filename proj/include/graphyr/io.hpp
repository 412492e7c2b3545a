#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <system_error>

#include <json.hpp>

#include "graphyr/errors.hpp"

namespace graphyr::io {

inline constexpr const char* kToolVersion = "0.1.0";

/// Writes through a temporary sibling and renames it into place.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

/// Run record written next to an artifact as <artifact>.manifest.json.
struct RunManifest {
  std::string command;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  nlohmann::ordered_json inputs = nlohmann::ordered_json::array();
  nlohmann::ordered_json outputs = nlohmann::ordered_json::array();
  std::uint64_t seed = 0;
  double wall_clock_seconds = 0.0;

  std::string dump() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["tool_version"] = kToolVersion;
    j["seed"] = seed;
    j["config"] = config;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["wall_clock_seconds"] = wall_clock_seconds;
    return j.dump(2) + "\n";
  }
};

inline std::filesystem::path manifest_path(const std::filesystem::path& artifact) {
  auto p = artifact;
  p += ".manifest.json";
  return p;
}

inline void write_manifest(const std::filesystem::path& artifact, const RunManifest& m) {
  write_atomic(manifest_path(artifact), m.dump());
}

} // namespace graphyr::io
