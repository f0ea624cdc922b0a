#include "manifest.hpp"

#include <fstream>

#include "shike/archive.hpp"
#include "shike/errors.hpp"

namespace shike::cli {

RunManifest::RunManifest(std::string cmd, std::filesystem::path dir)
    : command(std::move(cmd)), directory(std::move(dir)), code_version(SHIKE_GIT_HASH) {
  std::filesystem::create_directories(directory);
}

std::filesystem::path RunManifest::artifact(const std::string& name, const std::string& file) {
  artifacts.emplace_back(name, file);
  return directory / file;
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json files = nlohmann::json::object();
  for (const auto& [name, file] : artifacts) {
    nlohmann::json entry = {{"path", file}};
    if (std::filesystem::exists(directory / file)) entry["hash"] = file_hash(directory / file);
    files[name] = entry;
  }
  return {{"command", command},
          {"code_version", code_version},
          {"seed", seed},
          {"config", config},
          {"dataset", dataset},
          {"artifacts", files}};
}

std::filesystem::path RunManifest::write() const {
  const auto path = directory / "manifest.json";
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  os << to_json().dump(2) << '\n';
  return path;
}

}  // namespace shike::cli
