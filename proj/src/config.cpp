#include "shike/config.hpp"

#include <fstream>

#include "shike/errors.hpp"

namespace shike {
namespace {

template <typename T>
T field(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config field '" + std::string(key) + "': " + e.what());
  }
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
  return {{"family", family_name(c.backbone.family)},
          {"input_shape", c.backbone.input_shape},
          {"stage_widths", c.backbone.stage_widths},
          {"expert_width", c.backbone.expert_width},
          {"blocks_per_stage", c.backbone.blocks_per_stage},
          {"batch_norm", c.backbone.batch_norm},
          {"num_classes", c.num_classes},
          {"num_experts", c.num_experts},
          {"use_dkf", c.use_dkf},
          {"taps", c.taps},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.backbone.family = parse_family(field<std::string>(j, "family"));
  c.backbone.input_shape = field<Shape>(j, "input_shape");
  c.backbone.stage_widths = field<std::vector<std::size_t>>(j, "stage_widths");
  c.backbone.expert_width = field<std::size_t>(j, "expert_width");
  c.backbone.blocks_per_stage = field<std::size_t>(j, "blocks_per_stage");
  c.backbone.batch_norm = field<bool>(j, "batch_norm");
  c.num_classes = field<std::size_t>(j, "num_classes");
  c.num_experts = field<std::size_t>(j, "num_experts");
  c.use_dkf = field<bool>(j, "use_dkf");
  c.taps = field<std::vector<std::size_t>>(j, "taps");
  c.seed = field<std::uint64_t>(j, "seed");
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs_stage1", c.epochs_stage1},
          {"epochs_stage2", c.epochs_stage2},
          {"base_lr", c.base_lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"alpha", c.weights.alpha},
          {"beta", c.weights.beta},
          {"tau", c.weights.tau},
          {"ce_reduction", c.ce_reduction == ExpertReduction::sum ? "sum" : "mean"},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs_stage1 = field<std::size_t>(j, "epochs_stage1");
  c.epochs_stage2 = field<std::size_t>(j, "epochs_stage2");
  c.base_lr = field<double>(j, "base_lr");
  c.momentum = field<double>(j, "momentum");
  c.weight_decay = field<double>(j, "weight_decay");
  c.batch_size = field<std::size_t>(j, "batch_size");
  c.weights.alpha = field<double>(j, "alpha");
  c.weights.beta = field<double>(j, "beta");
  c.weights.tau = field<double>(j, "tau");
  const auto red = field<std::string>(j, "ce_reduction");
  if (red != "sum" && red != "mean") throw ConfigError("ce_reduction must be 'sum' or 'mean'");
  c.ce_reduction = red == "sum" ? ExpertReduction::sum : ExpertReduction::mean;
  c.seed = field<std::uint64_t>(j, "seed");
  return c;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = shike::to_json(train);
  const nlohmann::json m = shike::to_json(model);
  for (const char* k : {"family", "stage_widths", "expert_width", "blocks_per_stage", "batch_norm", "num_experts",
                        "use_dkf", "taps"})
    j[k] = m.at(k);
  j["num_classes"] = data.num_classes;
  j["dims"] = data.dims;
  j["n_max"] = data.n_max;
  j["imbalance_factor"] = data.imbalance_factor;
  j["class_separation"] = data.class_separation;
  j["noise_std"] = data.noise_std;
  j["modes_per_class"] = data.modes_per_class;
  j["test_per_class"] = data.test_per_class;
  j["data_seed"] = data.seed;
  j["archive_train"] = data.archive_train;
  j["archive_test"] = data.archive_test;
  j["archive_label_bytes"] = data.archive_label_bytes;
  j["archive_label_index"] = data.archive_label_index;
  j["archive_shape"] = data.archive_shape;
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig rc;
  nlohmann::json merged = rc.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!merged.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    merged[key] = value;
  }
  rc.train = train_config_from_json(merged);
  rc.model.backbone.family = parse_family(field<std::string>(merged, "family"));
  rc.model.backbone.stage_widths = field<std::vector<std::size_t>>(merged, "stage_widths");
  rc.model.backbone.expert_width = field<std::size_t>(merged, "expert_width");
  rc.model.backbone.blocks_per_stage = field<std::size_t>(merged, "blocks_per_stage");
  rc.model.backbone.batch_norm = field<bool>(merged, "batch_norm");
  rc.model.num_experts = field<std::size_t>(merged, "num_experts");
  rc.model.use_dkf = field<bool>(merged, "use_dkf");
  rc.model.taps = field<std::vector<std::size_t>>(merged, "taps");
  rc.data.num_classes = field<std::size_t>(merged, "num_classes");
  rc.data.dims = field<std::size_t>(merged, "dims");
  rc.data.n_max = field<std::size_t>(merged, "n_max");
  rc.data.imbalance_factor = field<double>(merged, "imbalance_factor");
  rc.data.class_separation = field<double>(merged, "class_separation");
  rc.data.noise_std = field<double>(merged, "noise_std");
  rc.data.modes_per_class = field<std::size_t>(merged, "modes_per_class");
  rc.data.test_per_class = field<std::size_t>(merged, "test_per_class");
  rc.data.seed = field<std::uint64_t>(merged, "data_seed");
  rc.data.archive_train = field<std::string>(merged, "archive_train");
  rc.data.archive_test = field<std::string>(merged, "archive_test");
  rc.data.archive_label_bytes = field<std::size_t>(merged, "archive_label_bytes");
  rc.data.archive_label_index = field<std::size_t>(merged, "archive_label_index");
  rc.data.archive_shape = field<std::vector<std::size_t>>(merged, "archive_shape");
  rc.sync_model_to_data();
  return rc;
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json j = to_json();
  if (!j.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  j[key] = value;
  *this = from_json(j);
}

void RunConfig::sync_model_to_data() {
  model.num_classes = data.num_classes;
  model.seed = train.seed;
  if (data.archive_train.empty())
    model.backbone.input_shape = {data.dims};
  else
    model.backbone.input_shape = data.archive_shape;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

std::pair<LabeledDataset, LabeledDataset> build_datasets(const DataConfig& c) {
  const auto counts = make_longtail_counts(c.num_classes, c.n_max, c.imbalance_factor);
  if (c.archive_train.empty()) {
    SynthOptions opts;
    opts.noise_std = c.noise_std;
    opts.modes_per_class = c.modes_per_class;
    opts.test_per_class = c.test_per_class;
    return synth_gaussian_lt(c.num_classes, c.dims, counts, c.class_separation, c.seed, opts);
  }
  ArchiveLayout layout;
  layout.label_bytes = c.archive_label_bytes;
  layout.label_index = c.archive_label_index;
  layout.sample_shape = c.archive_shape;
  const LabeledDataset source = read_record_archive(c.archive_train, layout, c.num_classes, Split::train);
  LabeledDataset train = subsample_longtail(source, counts, c.seed);
  LabeledDataset test = c.archive_test.empty() ? source
                                               : read_record_archive(c.archive_test, layout, c.num_classes, Split::test);
  test.spec = train.spec;
  test.split = Split::test;
  return {std::move(train), std::move(test)};
}

}  // namespace shike
