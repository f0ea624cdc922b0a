#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shike/tensor.hpp"

namespace shike {

/// Container for named double arrays plus a JSON header.
///
/// Layout (little-endian):
///   8 bytes  magic "SHKARC01"
///   u64      header length L, then L bytes of UTF-8 JSON
///   u64      array count
///   per array: u32 name length, name bytes, u32 rank, u64 dims[rank],
///              f64 values[prod(dims)]
struct ArrayArchive {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const ArrayArchive& archive);
ArrayArchive read_archive(const std::filesystem::path& path);

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

}  // namespace shike
