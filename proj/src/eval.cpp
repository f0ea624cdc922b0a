#include "shike/eval.hpp"

#include <algorithm>

#include "shike/errors.hpp"
#include "shike/losses.hpp"

namespace shike {
namespace {

std::optional<double> division_mean(const std::vector<std::size_t>& classes, const std::vector<double>& per_class) {
  if (classes.empty()) return std::nullopt;
  double s = 0.0;
  for (auto c : classes) s += per_class.at(c);
  return s / static_cast<double>(classes.size());
}

std::vector<double> preference_ratios(const std::vector<std::size_t>& classes,
                                      const std::vector<std::vector<double>>& per_expert) {
  if (classes.empty()) return {};
  const std::size_t experts = per_expert.size();
  std::vector<double> ratios(experts, 0.0);
  for (auto c : classes) {
    double best = per_expert[0][c];
    for (std::size_t m = 1; m < experts; ++m) best = std::max(best, per_expert[m][c]);
    std::size_t ties = 0;
    for (std::size_t m = 0; m < experts; ++m) ties += per_expert[m][c] == best;
    for (std::size_t m = 0; m < experts; ++m)
      if (per_expert[m][c] == best) ratios[m] += 1.0 / static_cast<double>(ties);
  }
  for (auto& r : ratios) r /= static_cast<double>(classes.size());
  return ratios;
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

nlohmann::json EvalReport::to_json() const {
  return {{"overall", overall},
          {"many", optional_json(many)},
          {"medium", optional_json(medium)},
          {"few", optional_json(few)},
          {"per_class", per_class},
          {"per_expert", per_expert},
          {"samples", samples}};
}

std::vector<Tensor> predict_logits(const ShikeModel& model, const Tensor& inputs) {
  constexpr std::size_t kChunk = 512;
  const std::size_t n = inputs.dim(0);
  std::vector<Tensor> out(model.num_experts(), Tensor({n, model.num_classes()}));
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t end = std::min(n, start + kChunk);
    const MoEOutput o = model.infer(inputs.slice(start, end));
    for (std::size_t m = 0; m < out.size(); ++m)
      std::copy(o.logits[m].values().begin(), o.logits[m].values().end(),
                out[m].data() + start * model.num_classes());
  }
  return out;
}

EvalReport evaluate_logits(std::span<const Tensor> expert_logits, std::span<const std::size_t> labels,
                           std::size_t num_classes, const ClassDivision& division) {
  if (expert_logits.empty()) throw InvalidArgument("evaluation needs at least one expert");
  const std::size_t n = labels.size();
  for (const auto& z : expert_logits)
    if (z.rank() != 2 || z.dim(0) != n || z.dim(1) != num_classes)
      throw ShapeError("expert logits must be [" + std::to_string(n) + ", " + std::to_string(num_classes) + "]");
  std::vector<std::size_t> support(num_classes, 0), correct(num_classes, 0);
  std::vector<std::vector<std::size_t>> expert_correct(expert_logits.size(), std::vector<std::size_t>(num_classes, 0));
  std::vector<double> sum(num_classes);
  std::size_t total_correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = labels[i];
    if (y >= num_classes) throw InvalidArgument("label out of range in evaluation");
    ++support[y];
    std::fill(sum.begin(), sum.end(), 0.0);
    for (std::size_t m = 0; m < expert_logits.size(); ++m) {
      auto row = expert_logits[m].sample(i);
      for (std::size_t c = 0; c < num_classes; ++c) sum[c] += row[c];
      expert_correct[m][y] += argmax(row) == y;
    }
    const bool hit = argmax(sum) == y;
    correct[y] += hit;
    total_correct += hit;
  }
  EvalReport r;
  r.samples = n;
  r.overall = n ? static_cast<double>(total_correct) / static_cast<double>(n) : 0.0;
  r.per_class.resize(num_classes);
  r.per_expert.assign(expert_logits.size(), std::vector<double>(num_classes, 0.0));
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (support[c] == 0) throw InvalidArgument("test set has no samples of class " + std::to_string(c));
    r.per_class[c] = static_cast<double>(correct[c]) / static_cast<double>(support[c]);
    for (std::size_t m = 0; m < expert_logits.size(); ++m)
      r.per_expert[m][c] = static_cast<double>(expert_correct[m][c]) / static_cast<double>(support[c]);
  }
  r.many = division_mean(division.many, r.per_class);
  r.medium = division_mean(division.medium, r.per_class);
  r.few = division_mean(division.few, r.per_class);
  return r;
}

EvalReport evaluate(const ShikeModel& model, const LabeledDataset& test, const ClassDivision& division) {
  const auto logits = predict_logits(model, test.inputs);
  return evaluate_logits(logits, test.labels, model.num_classes(), division);
}

ExpertPreference expert_preference(const EvalReport& report, const ClassDivision& division) {
  return {preference_ratios(division.many, report.per_expert), preference_ratios(division.medium, report.per_expert),
          preference_ratios(division.few, report.per_expert)};
}

std::size_t HardestNegativeHistogram::total() const {
  std::size_t s = 0;
  for (auto c : counts) s += c;
  return s;
}

double HardestNegativeHistogram::fraction_above(double threshold) const {
  if (probabilities.empty()) return 0.0;
  const auto n = std::count_if(probabilities.begin(), probabilities.end(), [&](double p) { return p > threshold; });
  return static_cast<double>(n) / static_cast<double>(probabilities.size());
}

nlohmann::json HardestNegativeHistogram::to_json() const {
  return {{"edges", edges}, {"counts", counts}, {"samples", probabilities.size()},
          {"fraction_above_half", fraction_above(0.5)}};
}

HardestNegativeHistogram hardest_negative_hist_logits(std::span<const Tensor> expert_logits,
                                                      std::span<const std::size_t> labels, std::size_t bins,
                                                      NegativeSource source, std::size_t expert) {
  if (bins == 0) throw InvalidArgument("histogram needs at least one bin");
  if (expert_logits.empty()) throw InvalidArgument("histogram needs at least one expert");
  if (source == NegativeSource::expert && expert >= expert_logits.size())
    throw InvalidArgument("expert index out of range");
  HardestNegativeHistogram h;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = static_cast<double>(i) / static_cast<double>(bins);
  h.counts.assign(bins, 0);
  const std::size_t classes = expert_logits.front().dim(1);
  std::vector<double> z(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (source == NegativeSource::expert) {
      auto row = expert_logits[expert].sample(i);
      z.assign(row.begin(), row.end());
    } else {
      std::fill(z.begin(), z.end(), 0.0);
      for (const auto& t : expert_logits) {
        auto row = t.sample(i);
        for (std::size_t c = 0; c < classes; ++c) z[c] += row[c];
      }
    }
    const auto p = softmax(z);
    double hardest = 0.0;
    for (std::size_t c = 0; c < classes; ++c)
      if (c != labels[i]) hardest = std::max(hardest, p[c]);
    h.probabilities.push_back(hardest);
    const auto bin = std::min(bins - 1, static_cast<std::size_t>(hardest * static_cast<double>(bins)));
    ++h.counts[bin];
  }
  return h;
}

HardestNegativeHistogram hardest_negative_hist(const ShikeModel& model, const LabeledDataset& test, std::size_t bins,
                                               NegativeSource source, std::size_t expert) {
  const auto logits = predict_logits(model, test.inputs);
  return hardest_negative_hist_logits(logits, test.labels, bins, source, expert);
}

}  // namespace shike
