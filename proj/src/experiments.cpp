#include "shike/experiments.hpp"

#include <algorithm>
#include <numeric>

#include "shike/errors.hpp"

namespace shike {
namespace {

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

void ComponentFlags::validate() const {
  if (!use_moe && (use_dkf || use_mu || use_nt))
    throw InvalidArgument("inconsistent component flags " + label() + ": DKF, L_mu and L_nt require MoE");
}

std::string ComponentFlags::label() const {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += "+";
    s += name;
  };
  add(use_moe, "moe");
  add(use_dkf, "dkf");
  add(use_mu, "mu");
  add(use_nt, "nt");
  return s.empty() ? "single" : s;
}

std::vector<ComponentFlags> ablation_rows() {
  return {{false, false, false, false}, {true, false, false, false}, {true, true, false, false},
          {true, true, true, false},    {true, true, false, true},   {true, false, true, true},
          {true, true, true, true}};
}

RunConfig apply_flags(const RunConfig& base, const ComponentFlags& flags) {
  flags.validate();
  RunConfig cfg = base;
  if (!flags.use_moe) {
    cfg.model.num_experts = 1;
    cfg.model.taps.clear();
  } else if (cfg.model.num_experts < 2) {
    throw InvalidArgument("MoE rows need num_experts >= 2 in the base config");
  }
  cfg.model.use_dkf = flags.use_dkf;
  if (!flags.use_mu) cfg.train.weights.beta = 0.0;
  if (!flags.use_nt) cfg.train.weights.alpha = 0.0;
  return cfg;
}

RunConfig seeded(const RunConfig& base, std::size_t index) {
  RunConfig cfg = base;
  cfg.data.seed += index;
  cfg.train.seed += index;
  cfg.sync_model_to_data();
  return cfg;
}

RunResult run_experiment(const RunConfig& config, const LabeledDataset& train, const LabeledDataset& test) {
  RunConfig cfg = config;
  cfg.sync_model_to_data();
  const ClassDivision division = split_divisions(train.spec);
  TrainState state = train_stage1(ShikeModel(cfg.model), train, cfg.train);
  RunResult r;
  r.stage1 = evaluate(state.model, test, division);
  state = train_stage2(std::move(state), train, cfg.train);
  const auto logits = predict_logits(state.model, test.inputs);
  r.report = evaluate_logits(logits, test.labels, state.model.num_classes(), division);
  r.hardest = hardest_negative_hist_logits(logits, test.labels);
  return r;
}

RunResult run_experiment(const RunConfig& config) {
  const auto [train, test] = build_datasets(config.data);
  return run_experiment(config, train, test);
}

double AblationRow::mean_accuracy() const { return mean(accuracy); }
double AblationRow::mean_hard_negative() const { return mean(hard_negative); }
double SweepCell::mean_accuracy() const { return mean(accuracy); }

AblationRow ablation_run(const RunConfig& base, const ComponentFlags& flags, std::size_t seeds) {
  const RunConfig flagged = apply_flags(base, flags);
  AblationRow row{flags, {}, {}};
  for (std::size_t s = 0; s < seeds; ++s) {
    const RunResult r = run_experiment(seeded(flagged, s));
    row.accuracy.push_back(r.report.overall);
    row.hard_negative.push_back(r.hardest.fraction_above(0.5));
  }
  return row;
}

std::vector<AblationRow> ablation_table(const RunConfig& base, std::span<const ComponentFlags> rows,
                                        std::size_t seeds) {
  for (const auto& f : rows) f.validate();
  std::vector<AblationRow> out;
  for (const auto& f : rows) out.push_back(ablation_run(base, f, seeds));
  return out;
}

std::vector<std::size_t> parse_arrangement(const std::string& arrangement, std::size_t stages) {
  if (arrangement.empty()) throw InvalidArgument("empty depth arrangement");
  std::vector<std::size_t> taps;
  for (char ch : arrangement) {
    if (ch == ' ') continue;
    const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (up < 'A' || static_cast<std::size_t>(up - 'A') >= stages)
      throw InvalidArgument("depth letter '" + std::string(1, ch) + "' outside A.." +
                            std::string(1, static_cast<char>('A' + stages - 1)));
    taps.push_back(static_cast<std::size_t>(up - 'A') + 1);
  }
  return taps;
}

std::vector<SweepSpec> default_sweep() {
  return {{1, {"A", "B", "C"}}, {2, {"AB", "BC", "AC"}}, {3, {"ABC"}}};
}

std::vector<SweepCell> expert_count_sweep(const RunConfig& base, std::span<const SweepSpec> sweep, std::size_t seeds) {
  const std::size_t stages = base.model.backbone.stage_widths.size();
  std::vector<std::pair<SweepSpec, std::vector<std::vector<std::size_t>>>> plan;
  for (const auto& spec : sweep) {
    std::vector<std::vector<std::size_t>> taps;
    for (const auto& a : spec.arrangements) {
      auto t = parse_arrangement(a, stages);
      if (t.size() != spec.experts)
        throw InvalidArgument("arrangement '" + a + "' has length " + std::to_string(t.size()) + ", expected M=" +
                              std::to_string(spec.experts));
      taps.push_back(std::move(t));
    }
    plan.emplace_back(spec, std::move(taps));
  }
  std::vector<SweepCell> cells;
  for (const auto& [spec, taps] : plan) {
    for (std::size_t i = 0; i < taps.size(); ++i) {
      RunConfig cfg = base;
      cfg.model.num_experts = spec.experts;
      cfg.model.taps = taps[i];
      SweepCell cell{spec.arrangements[i], spec.experts, {}};
      for (std::size_t s = 0; s < seeds; ++s) cell.accuracy.push_back(run_experiment(seeded(cfg, s)).report.overall);
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

double best_mean_accuracy(std::span<const SweepCell> cells, std::size_t experts) {
  double best = -1.0;
  for (const auto& c : cells)
    if (c.experts == experts) best = std::max(best, c.mean_accuracy());
  if (best < 0.0) throw InvalidArgument("no sweep cell with M=" + std::to_string(experts));
  return best;
}

nlohmann::json to_json(const AblationRow& row) {
  return {{"moe", row.flags.use_moe}, {"dkf", row.flags.use_dkf}, {"mu", row.flags.use_mu},
          {"nt", row.flags.use_nt},   {"label", row.flags.label()}, {"accuracy", row.accuracy},
          {"mean_accuracy", row.mean_accuracy()}, {"hard_negative", row.hard_negative},
          {"mean_hard_negative", row.mean_hard_negative()}};
}

nlohmann::json to_json(const SweepCell& cell) {
  return {{"experts", cell.experts}, {"arrangement", cell.arrangement}, {"accuracy", cell.accuracy},
          {"mean_accuracy", cell.mean_accuracy()}};
}

}  // namespace shike
