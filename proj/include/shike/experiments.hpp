#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shike/config.hpp"
#include "shike/eval.hpp"

namespace shike {

struct ComponentFlags {
  bool use_moe = false;
  bool use_dkf = false;
  bool use_mu = false;
  bool use_nt = false;

  /// Throws InvalidArgument when DKF or a distillation loss is set without MoE.
  void validate() const;
  std::string label() const;
  friend bool operator==(const ComponentFlags&, const ComponentFlags&) = default;
};

/// The seven component combinations of the ablation table, baseline first.
std::vector<ComponentFlags> ablation_rows();

/// Applies flags to a base run: no MoE means one expert at the deepest tap;
/// a disabled loss gets weight 0; enabled losses keep the base weights.
RunConfig apply_flags(const RunConfig& base, const ComponentFlags& flags);

/// Base run for repetition `index`: data seed and training seed offset by it.
RunConfig seeded(const RunConfig& base, std::size_t index);

struct RunResult {
  EvalReport stage1;
  EvalReport report;  // after classifier retraining
  HardestNegativeHistogram hardest;
};

/// Trains both stages and evaluates on the test set.
RunResult run_experiment(const RunConfig& config, const LabeledDataset& train, const LabeledDataset& test);
RunResult run_experiment(const RunConfig& config);

struct AblationRow {
  ComponentFlags flags;
  std::vector<double> accuracy;       // per seed
  std::vector<double> hard_negative;  // per seed: share of samples above 0.5
  double mean_accuracy() const;
  double mean_hard_negative() const;
};

AblationRow ablation_run(const RunConfig& base, const ComponentFlags& flags, std::size_t seeds);
std::vector<AblationRow> ablation_table(const RunConfig& base, std::span<const ComponentFlags> rows,
                                        std::size_t seeds);

/// "ABC" -> {1, 2, 3}; letters name depths shallow to deep.
std::vector<std::size_t> parse_arrangement(const std::string& arrangement, std::size_t stages);

struct SweepCell {
  std::string arrangement;
  std::size_t experts = 0;
  std::vector<double> accuracy;  // per seed
  double mean_accuracy() const;
};

/// One cell per (M, arrangement); every arrangement must have length M.
struct SweepSpec {
  std::size_t experts = 0;
  std::vector<std::string> arrangements;
};

std::vector<SweepSpec> default_sweep();
std::vector<SweepCell> expert_count_sweep(const RunConfig& base, std::span<const SweepSpec> sweep, std::size_t seeds);

/// Best mean accuracy among the cells with `experts` experts.
double best_mean_accuracy(std::span<const SweepCell> cells, std::size_t experts);

nlohmann::json to_json(const AblationRow& row);
nlohmann::json to_json(const SweepCell& cell);

}  // namespace shike
