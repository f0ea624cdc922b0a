#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace shike::cli {

/// Record of one command run; every artifact lives under `directory` and is
/// listed with its path relative to it.
struct RunManifest {
  std::string command;
  std::filesystem::path directory;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json dataset = nlohmann::json::object();
  std::string code_version;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> artifacts;

  explicit RunManifest(std::string cmd, std::filesystem::path dir);

  /// Path of a new artifact under the directory, recorded under `name`.
  std::filesystem::path artifact(const std::string& name, const std::string& file);
  nlohmann::json to_json() const;
  /// Writes manifest.json and returns its path.
  std::filesystem::path write() const;
};

}  // namespace shike::cli
