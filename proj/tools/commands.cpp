#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "manifest.hpp"
#include "plot.hpp"
#include "shike/archive.hpp"
#include "shike/errors.hpp"
#include "shike/eval.hpp"
#include "shike/experiments.hpp"
#include "shike/losses.hpp"
#include "shike/train.hpp"

namespace shike::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  os << j.dump(2) << '\n';
}

std::ofstream open_text(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  os.precision(17);
  return os;
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + " is not valid JSON: " + e.what());
  }
}

struct Data {
  LabeledDataset train;
  LabeledDataset test;
  json manifest;
};

Data load_data(const RunConfig& rc, const std::string& dir) {
  Data d;
  if (dir.empty()) {
    auto [train, test] = build_datasets(rc.data);
    d.train = std::move(train);
    d.test = std::move(test);
    d.manifest = dataset_manifest(d.train.spec, rc.data.seed);
    d.manifest["source"] = "config";
    return d;
  }
  const fs::path root(dir);
  d.train = load_dataset(root / "train.ds");
  d.test = load_dataset(root / "test.ds");
  if (fs::exists(root / "dataset.json"))
    d.manifest = read_json(root / "dataset.json");
  else
    d.manifest = dataset_manifest(d.train.spec, rc.data.seed);
  d.manifest["source"] = fs::absolute(root).string();
  return d;
}

void check_input_shape(const ShikeModel& model, const LabeledDataset& ds) {
  if (model.config().backbone.input_shape != ds.sample_shape())
    throw ShapeError("checkpoint expects samples of shape " + shape_str(model.config().backbone.input_shape) +
                     ", dataset has " + shape_str(ds.sample_shape()));
}

void write_metrics_csv(const fs::path& path, const std::vector<EpochMetrics>& history) {
  auto os = open_text(path);
  os << "epoch,stage,lr,L_ce,L_nt,L_mu,total,train_accuracy\n";
  for (const auto& h : history)
    os << h.epoch << ',' << stage_name(h.stage) << ',' << h.lr << ',' << h.ce << ',' << h.nt << ',' << h.mu << ','
       << h.total << ',' << h.train_accuracy << '\n';
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

void write_report_csv(const fs::path& path, const EvalReport& r, const LongTailSpec& spec) {
  auto os = open_text(path);
  os << "class,train_count,accuracy";
  for (std::size_t m = 0; m < r.per_expert.size(); ++m) os << ",expert" << m;
  os << '\n';
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    os << c << ',' << spec.counts.at(c) << ',' << r.per_class[c];
    for (const auto& e : r.per_expert) os << ',' << e[c];
    os << '\n';
  }
}

json summary(const EvalReport& r) {
  return {{"overall", r.overall},
          {"many", opt_json(r.many)},
          {"medium", opt_json(r.medium)},
          {"few", opt_json(r.few)}};
}

void print(const json& j) { std::cout << j.dump() << std::endl; }

std::vector<std::size_t> parse_indices(const std::string& list, std::size_t limit) {
  std::vector<std::size_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != item.size() || v >= limit)
      throw InvalidArgument("row index '" + item + "' must be an integer below " + std::to_string(limit));
    out.push_back(v);
  }
  if (out.empty()) throw InvalidArgument("no rows selected");
  return out;
}

std::vector<SweepSpec> parse_grid(const std::string& grid) {
  std::vector<SweepSpec> out;
  std::string spaced = grid;
  std::replace(spaced.begin(), spaced.end(), ';', ' ');
  std::stringstream ss(spaced);
  std::string group;
  while (ss >> group) {
    const auto colon = group.find(':');
    if (colon == std::string::npos) throw InvalidArgument("sweep group '" + group + "' must look like M:ARR,ARR");
    SweepSpec s;
    try {
      s.experts = std::stoul(group.substr(0, colon));
    } catch (const std::exception&) {
      throw InvalidArgument("sweep group '" + group + "' has no expert count");
    }
    std::stringstream arr(group.substr(colon + 1));
    std::string a;
    while (std::getline(arr, a, ',')) s.arrangements.push_back(a);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw InvalidArgument("empty sweep grid");
  return out;
}

std::vector<std::vector<double>> to_rows(const json& j, const std::string& what) {
  try {
    return j.get<std::vector<std::vector<double>>>();
  } catch (const json::exception& e) {
    throw FormatError(what + " must be an array of per-expert logit arrays: " + e.what());
  }
}

}  // namespace

RunConfig ConfigSource::load() const {
  RunConfig rc = path.empty() ? RunConfig{} : load_run_config(path);
  for (const auto& o : overrides) rc.set(o);
  rc.sync_model_to_data();
  return rc;
}

void build_data(const BuildDataOptions& o) {
  const RunConfig rc = o.config.load();
  auto [train, test] = build_datasets(rc.data);
  RunManifest man("build-data", o.out);
  man.config = rc.to_json();
  man.seed = rc.data.seed;
  save_dataset(man.artifact("train", "train.ds"), train);
  save_dataset(man.artifact("test", "test.ds"), test);

  json ds = dataset_manifest(train.spec, rc.data.seed);
  const ClassDivision d = split_divisions(train.spec);
  ds["divisions"] = {{"many", d.many}, {"medium", d.medium}, {"few", d.few}};
  ds["test_size"] = test.size();
  ds["sample_shape"] = train.sample_shape();
  ds["train_hash"] = file_hash(o.out + "/train.ds");
  ds["test_hash"] = file_hash(o.out + "/test.ds");
  write_json(man.artifact("dataset", "dataset.json"), ds);
  man.dataset = ds;
  man.write();
  print({{"train", train.size()}, {"test", test.size()}, {"train_hash", ds["train_hash"]},
         {"test_hash", ds["test_hash"]}});
}

void train(const TrainOptions& o) {
  const RunConfig rc = o.config.load();
  rc.train.validate();
  Data data = load_data(rc, o.data);
  const ClassDivision division = split_divisions(data.train.spec);
  RunManifest man("train", o.out);
  man.config = rc.to_json();
  man.dataset = data.manifest;
  man.seed = rc.train.seed;

  std::optional<TrainState> stage1;
  if (o.from_stage1.empty()) {
    stage1.emplace(ShikeModel(rc.model));
    check_input_shape(stage1->model, data.train);
    run_stage1(*stage1, data.train, rc.train);
    save_checkpoint(*stage1, man.artifact("stage1_checkpoint", "stage1.ckpt"));
  } else {
    stage1.emplace(load_checkpoint(o.from_stage1, data.train.spec.num_classes));
    if (stage1->stage != TrainingStage::representation)
      throw InvalidArgument(o.from_stage1 + " is not a representation-stage checkpoint");
    check_input_shape(stage1->model, data.train);
    man.config["from_stage1"] = fs::absolute(o.from_stage1).string();
  }
  const EvalReport r1 = evaluate(stage1->model, data.test, division);

  TrainState stage2 = train_stage2(std::move(*stage1), data.train, rc.train);
  save_checkpoint(stage2, man.artifact("stage2_checkpoint", "stage2.ckpt"));
  const EvalReport r2 = evaluate(stage2.model, data.test, division);

  write_metrics_csv(man.artifact("metrics", "metrics.csv"), stage2.history);
  write_json(man.artifact("report", "report.json"), {{"stage1", r1.to_json()}, {"stage2", r2.to_json()}});
  write_report_csv(man.artifact("per_class", "per_class.csv"), r2, data.train.spec);
  man.write();
  print({{"stage1", summary(r1)}, {"stage2", summary(r2)}});
}

namespace {

struct Loaded {
  TrainState state;
  Data data;
  ClassDivision division;
};

Loaded load_for_eval(const EvalOptions& o) {
  if (o.checkpoint.empty()) throw InvalidArgument("--checkpoint is required");
  const RunConfig rc = o.config.load();
  Data data = load_data(rc, o.data);
  TrainState state = load_checkpoint(o.checkpoint, data.train.spec.num_classes);
  check_input_shape(state.model, data.test);
  const ClassDivision division = split_divisions(data.train.spec);
  return {std::move(state), std::move(data), division};
}

}  // namespace

void eval(const EvalOptions& o) {
  Loaded l = load_for_eval(o);
  const EvalReport r = evaluate(l.state.model, l.data.test, l.division);
  RunManifest man("eval", o.out);
  man.config = {{"checkpoint", fs::absolute(o.checkpoint).string()}, {"stage", stage_name(l.state.stage)}};
  man.dataset = l.data.manifest;
  man.seed = l.state.model.config().seed;
  write_json(man.artifact("report", "report.json"), r.to_json());
  write_report_csv(man.artifact("per_class", "per_class.csv"), r, l.data.train.spec);
  man.write();
  print(summary(r));
}

void diagnose(const DiagnoseOptions& o) {
  if (o.source != "ensemble" && o.source != "expert")
    throw InvalidArgument("--source must be 'ensemble' or 'expert'");
  if (o.bins == 0) throw InvalidArgument("--bins must be positive");
  Loaded l = load_for_eval(o.eval);
  const auto source = o.source == "ensemble" ? NegativeSource::ensemble : NegativeSource::expert;
  if (source == NegativeSource::expert && o.expert >= l.state.model.num_experts())
    throw InvalidArgument("--expert must be below " + std::to_string(l.state.model.num_experts()));

  const auto logits = predict_logits(l.state.model, l.data.test.inputs);
  const EvalReport r = evaluate_logits(logits, l.data.test.labels, l.state.model.num_classes(), l.division);
  const auto hist = hardest_negative_hist_logits(logits, l.data.test.labels, o.bins, source, o.expert);
  const ExpertPreference pref = expert_preference(r, l.division);

  RunManifest man("diagnose", o.eval.out);
  man.config = {{"checkpoint", fs::absolute(o.eval.checkpoint).string()},
                {"stage", stage_name(l.state.stage)},
                {"bins", o.bins},
                {"source", o.source},
                {"expert", o.expert}};
  man.dataset = l.data.manifest;
  man.seed = l.state.model.config().seed;

  json hj = hist.to_json();
  hj["fraction_above_half"] = hist.fraction_above(0.5);
  write_json(man.artifact("hardest_negative", "hardest_negative.json"), hj);
  {
    auto os = open_text(man.artifact("hardest_negative_csv", "hardest_negative.csv"));
    os << "lower,upper,count\n";
    for (std::size_t b = 0; b < hist.counts.size(); ++b)
      os << hist.edges[b] << ',' << hist.edges[b + 1] << ',' << hist.counts[b] << '\n';
  }
  std::vector<std::string> bins;
  std::vector<double> shares;
  for (std::size_t b = 0; b < hist.counts.size(); ++b) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", hist.edges[b]);
    bins.emplace_back(buf);
    shares.push_back(static_cast<double>(hist.counts[b]) / static_cast<double>(hist.total()));
  }
  write_bar_chart(man.artifact("hardest_negative_plot", "hardest_negative.svg"), "Hardest negative probability",
                  "share of test samples", bins, {{o.source, shares}});

  json pj = {{"many", pref.many}, {"medium", pref.medium}, {"few", pref.few}};
  write_json(man.artifact("expert_preference", "expert_preference.json"), pj);
  std::vector<Series> series;
  {
    auto os = open_text(man.artifact("expert_preference_csv", "expert_preference.csv"));
    os << "expert,many,medium,few\n";
    for (std::size_t m = 0; m < l.state.model.num_experts(); ++m) {
      auto at = [m](const std::vector<double>& v) { return v.empty() ? 0.0 : v[m]; };
      os << m << ',' << at(pref.many) << ',' << at(pref.medium) << ',' << at(pref.few) << '\n';
      series.push_back({"expert " + std::to_string(m), {at(pref.many), at(pref.medium), at(pref.few)}});
    }
  }
  write_bar_chart(man.artifact("expert_preference_plot", "expert_preference.svg"), "Expert preference",
                  "share of classes", {"many", "medium", "few"}, series);
  write_json(man.artifact("report", "report.json"), r.to_json());
  man.write();
  print({{"overall", r.overall}, {"fraction_above_half", hist.fraction_above(0.5)}, {"preference", pj}});
}

void ablate(const AblateOptions& o) {
  if (o.seeds == 0) throw InvalidArgument("--seeds must be positive");
  const RunConfig base = o.config.load();
  const auto all = ablation_rows();
  std::vector<ComponentFlags> rows;
  if (o.rows == "all")
    rows = all;
  else
    for (auto i : parse_indices(o.rows, all.size())) rows.push_back(all[i]);
  for (const auto& f : rows) apply_flags(base, f);

  const auto table = ablation_table(base, rows, o.seeds);
  RunManifest man("ablate", o.out);
  man.config = base.to_json();
  man.config["seeds"] = o.seeds;
  man.seed = base.train.seed;
  man.dataset = dataset_manifest(LongTailSpec::from_counts(make_longtail_counts(
                                     base.data.num_classes, base.data.n_max, base.data.imbalance_factor)),
                                 base.data.seed);

  json jt = json::array();
  for (const auto& r : table) jt.push_back(to_json(r));
  auto find = [&](const ComponentFlags& f) -> const AblationRow* {
    for (const auto& r : table)
      if (r.flags == f) return &r;
    return nullptr;
  };
  const AblationRow* single = find(all.front());
  const AblationRow* moe = find(all[1]);
  const AblationRow* full = find(all.back());
  json checks = json::object();
  if (full && moe) checks["full_over_moe"] = full->mean_accuracy() > moe->mean_accuracy();
  if (moe && single) checks["moe_over_single"] = moe->mean_accuracy() > single->mean_accuracy();
  if (full && single) checks["hard_negative_reduced"] = full->mean_hard_negative() < single->mean_hard_negative();
  write_json(man.artifact("ablation", "ablation.json"), {{"rows", jt}, {"checks", checks}});

  {
    auto os = open_text(man.artifact("ablation_csv", "ablation.csv"));
    os << "row,moe,dkf,mu,nt,mean_accuracy,mean_hard_negative";
    for (std::size_t s = 0; s < o.seeds; ++s) os << ",accuracy_seed" << s;
    os << '\n';
    for (const auto& r : table) {
      os << r.flags.label() << ',' << r.flags.use_moe << ',' << r.flags.use_dkf << ',' << r.flags.use_mu << ','
         << r.flags.use_nt << ',' << r.mean_accuracy() << ',' << r.mean_hard_negative();
      for (double a : r.accuracy) os << ',' << a;
      os << '\n';
    }
  }
  std::vector<std::string> labels;
  Series acc{"accuracy", {}}, hn{"hardest negative > 0.5", {}};
  for (const auto& r : table) {
    labels.push_back(r.flags.label());
    acc.values.push_back(r.mean_accuracy());
    hn.values.push_back(r.mean_hard_negative());
  }
  write_bar_chart(man.artifact("ablation_plot", "ablation.svg"), "Component ablation", "mean over seeds", labels,
                  {acc, hn});
  man.write();
  print({{"rows", jt}, {"checks", checks}});
}

void sweep_experts(const SweepOptions& o) {
  if (o.seeds == 0) throw InvalidArgument("--seeds must be positive");
  const RunConfig base = o.config.load();
  const auto grid = parse_grid(o.grid);
  for (const auto& g : grid)
    for (const auto& a : g.arrangements) {
      const auto taps = parse_arrangement(a, base.model.backbone.num_stages());
      if (taps.size() != g.experts)
        throw InvalidArgument("arrangement '" + a + "' does not have " + std::to_string(g.experts) + " experts");
    }
  const auto cells = expert_count_sweep(base, grid, o.seeds);

  RunManifest man("sweep-experts", o.out);
  man.config = base.to_json();
  man.config["seeds"] = o.seeds;
  man.config["grid"] = o.grid;
  man.seed = base.train.seed;

  json jc = json::array();
  for (const auto& c : cells) jc.push_back(to_json(c));
  json best = json::object();
  for (const auto& g : grid) best[std::to_string(g.experts)] = best_mean_accuracy(cells, g.experts);
  write_json(man.artifact("sweep", "sweep.json"), {{"cells", jc}, {"best", best}});
  {
    auto os = open_text(man.artifact("sweep_csv", "sweep.csv"));
    os << "experts,arrangement,mean_accuracy";
    for (std::size_t s = 0; s < o.seeds; ++s) os << ",accuracy_seed" << s;
    os << '\n';
    for (const auto& c : cells) {
      os << c.experts << ',' << c.arrangement << ',' << c.mean_accuracy();
      for (double a : c.accuracy) os << ',' << a;
      os << '\n';
    }
  }
  std::vector<std::string> labels;
  Series acc{"accuracy", {}};
  for (const auto& c : cells) {
    labels.push_back(c.arrangement);
    acc.values.push_back(c.mean_accuracy());
  }
  write_bar_chart(man.artifact("sweep_plot", "sweep.svg"), "Expert count and tap arrangement", "mean accuracy",
                  labels, {acc});
  man.write();
  print({{"cells", jc}, {"best", best}});
}

void losses(const LossesOptions& o) {
  const json in = read_json(o.logits);
  LossWeights w;
  w.alpha = in.value("alpha", 1.0);
  w.beta = in.value("beta", 1.0);
  w.tau = in.value("tau", 1.0);
  w.validate();
  std::vector<std::size_t> counts;
  if (in.contains("counts")) counts = in.at("counts").get<std::vector<std::size_t>>();

  json samples = in.contains("samples") ? in.at("samples") : json::array({in});
  json out = json::array();
  double sum_ce = 0, sum_nt = 0, sum_mu = 0, sum_total = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string where = "sample " + std::to_string(i);
    if (!s.contains("logits") || !s.contains("label")) throw FormatError(where + " needs 'logits' and 'label'");
    const ExpertLogits z = to_rows(s.at("logits"), where);
    const auto y = s.at("label").get<std::size_t>();
    if (z.empty()) throw ShapeError(where + " has no experts");
    for (const auto& row : z)
      if (row.size() != z.front().size()) throw ShapeError(where + ": experts disagree on the class count");
    if (y >= z.front().size()) throw InvalidArgument(where + ": label out of range");

    std::vector<DecoupledLogits> d;
    for (const auto& row : z) d.push_back(decouple_logits(row, y));
    const GrandTeacher t = elect_grand_teacher(d);
    const LossValue ce = loss_ce(z, y);
    const LossValue mu = loss_mutual(z, w.tau);
    const LossValue nt = loss_nt(t, d, w.tau);
    const double total = loss_total(ce.value, nt.value, mu.value, w);
    json r = {{"label", y},
              {"L_ce", ce.value},
              {"L_mu", mu.value},
              {"L_nt", nt.value},
              {"total", total},
              {"teacher",
               {{"consensus_class", t.index_map[t.consensus_index]}, {"logits", t.logits}, {"classes", t.index_map}}}};
    if (!counts.empty()) {
      if (counts.size() != z.front().size()) throw ShapeError("counts must have one entry per class");
      r["L_bsce"] = loss_bsce(z, y, counts).value;
    }
    if (o.gradients) {
      r["grad"] = {{"L_ce", ce.grad}, {"L_mu", mu.grad}, {"L_nt", nt.grad}};
      if (!counts.empty()) r["grad"]["L_bsce"] = loss_bsce(z, y, counts).grad;
    }
    sum_ce += ce.value;
    sum_nt += nt.value;
    sum_mu += mu.value;
    sum_total += total;
    out.push_back(r);
  }
  const double n = static_cast<double>(std::max<std::size_t>(samples.size(), 1));
  json result = {{"weights", {{"alpha", w.alpha}, {"beta", w.beta}, {"tau", w.tau}}},
                 {"mean", {{"L_ce", sum_ce / n}, {"L_nt", sum_nt / n}, {"L_mu", sum_mu / n}, {"total", sum_total / n}}},
                 {"samples", out}};
  if (!o.out.empty()) {
    RunManifest man("losses", o.out);
    man.config = {{"logits", fs::absolute(o.logits).string()}, {"gradients", o.gradients}};
    write_json(man.artifact("losses", "losses.json"), result);
    auto os = open_text(man.artifact("losses_csv", "losses.csv"));
    os << "sample,label,L_ce,L_nt,L_mu,total,consensus_class\n";
    for (std::size_t i = 0; i < out.size(); ++i)
      os << i << ',' << out[i]["label"] << ',' << out[i]["L_ce"].get<double>() << ','
         << out[i]["L_nt"].get<double>() << ',' << out[i]["L_mu"].get<double>() << ','
         << out[i]["total"].get<double>() << ',' << out[i]["teacher"]["consensus_class"] << '\n';
    os.close();
    man.write();
  }
  print(result);
}

}  // namespace shike::cli
