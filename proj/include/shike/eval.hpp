#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "shike/data.hpp"
#include "shike/model.hpp"

namespace shike {

struct EvalReport {
  double overall = 0.0;
  /// Mean per-class accuracy over each division; empty divisions are n/a.
  std::optional<double> many;
  std::optional<double> medium;
  std::optional<double> few;
  std::vector<double> per_class;
  /// per_expert[m][c]: accuracy of expert m's logits alone on class c.
  std::vector<std::vector<double>> per_expert;
  std::size_t samples = 0;

  nlohmann::json to_json() const;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Ensemble evaluation of a trained model. `division` must come from the
/// training spec.
EvalReport evaluate(const ShikeModel& model, const LabeledDataset& test, const ClassDivision& division);

/// Same report from precomputed per-expert logits [N, C].
EvalReport evaluate_logits(std::span<const Tensor> expert_logits, std::span<const std::size_t> labels,
                           std::size_t num_classes, const ClassDivision& division);

/// Per-expert logits for a whole dataset, inference mode, in chunks.
std::vector<Tensor> predict_logits(const ShikeModel& model, const Tensor& inputs);

/// Share of each division's classes on which each expert has the highest
/// per-class accuracy; ties are split evenly. Empty division -> empty vector.
struct ExpertPreference {
  std::vector<double> many;
  std::vector<double> medium;
  std::vector<double> few;
};

ExpertPreference expert_preference(const EvalReport& report, const ClassDivision& division);

enum class NegativeSource { ensemble, expert };

struct HardestNegativeHistogram {
  std::vector<double> edges;          // bins + 1 uniform edges over [0, 1]
  std::vector<std::size_t> counts;
  std::vector<double> probabilities;  // per test sample

  std::size_t total() const;
  /// Exact share of samples whose hardest-negative probability exceeds t.
  double fraction_above(double threshold) const;
  nlohmann::json to_json() const;
};

/// For each sample: the largest non-target probability under the full-class
/// softmax of the ensemble logit sum (or of one expert's logits).
HardestNegativeHistogram hardest_negative_hist(const ShikeModel& model, const LabeledDataset& test,
                                               std::size_t bins = 20,
                                               NegativeSource source = NegativeSource::ensemble,
                                               std::size_t expert = 0);

HardestNegativeHistogram hardest_negative_hist_logits(std::span<const Tensor> expert_logits,
                                                      std::span<const std::size_t> labels, std::size_t bins = 20,
                                                      NegativeSource source = NegativeSource::ensemble,
                                                      std::size_t expert = 0);

}  // namespace shike
