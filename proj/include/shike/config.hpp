#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shike/data.hpp"
#include "shike/model.hpp"
#include "shike/train.hpp"

namespace shike {

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Desk-scale synthetic benchmark, or a record archive when `archive_train`
/// is set.
struct DataConfig {
  std::size_t num_classes = 10;
  std::size_t dims = 16;
  std::size_t n_max = 500;
  double imbalance_factor = 100.0;
  double class_separation = 3.0;
  double noise_std = 1.0;
  std::size_t modes_per_class = 1;
  std::size_t test_per_class = 100;
  std::uint64_t seed = 0;
  std::string archive_train;
  std::string archive_test;
  std::size_t archive_label_bytes = 1;
  std::size_t archive_label_index = 0;
  std::vector<std::size_t> archive_shape{3, 32, 32};
};

/// Everything one CLI run needs; serialised as one flat JSON object whose
/// keys mirror the field names (e.g. "epochs_stage1", "num_experts").
struct RunConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  /// Overrides one key from a "key=value" string, value parsed as JSON when
  /// possible and as a string otherwise.
  void set(const std::string& assignment);
  /// Fills model input shape / class count from the data settings.
  void sync_model_to_data();
};

RunConfig load_run_config(const std::filesystem::path& path);

/// Builds (train, test) as described by the data settings.
std::pair<LabeledDataset, LabeledDataset> build_datasets(const DataConfig& config);

}  // namespace shike
