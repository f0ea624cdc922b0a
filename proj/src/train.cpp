#include "shike/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "shike/archive.hpp"
#include "shike/config.hpp"
#include "shike/errors.hpp"

namespace shike {
namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

constexpr std::uint64_t kHeadSalt = 0x4845414453ull;
constexpr std::uint64_t kAugmentSalt = 0x4155474dull;

std::vector<Tensor> zeros_like_params(ShikeModel& model) {
  std::vector<Tensor> v;
  for (auto& [name, p] : model.state().params) v.emplace_back(p->value.shape());
  return v;
}

bool all_finite(std::span<const Tensor> logits) {
  for (const auto& t : logits)
    for (std::size_t i = 0; i < t.size(); ++i)
      if (!std::isfinite(t[i])) return false;
  return true;
}

std::string logits_dump(std::span<const Tensor> logits, std::span<const std::size_t> labels) {
  nlohmann::json j;
  j["labels"] = std::vector<std::size_t>(labels.begin(), labels.end());
  for (const auto& z : logits) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t b = 0; b < z.dim(0); ++b) {
      auto r = z.sample(b);
      rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    j["logits"].push_back(std::move(rows));
  }
  return j.dump();
}

ExpertLogits sample_logits(std::span<const Tensor> logits, std::size_t b) {
  ExpertLogits z(logits.size());
  for (std::size_t m = 0; m < logits.size(); ++m) {
    auto r = logits[m].sample(b);
    z[m].assign(r.begin(), r.end());
  }
  return z;
}

void write_grads(std::vector<Tensor>& grads, const ExpertLogits& g, std::size_t b, double weight) {
  for (std::size_t m = 0; m < g.size(); ++m) {
    auto row = grads[m].sample(b);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += weight * g[m][c];
  }
}

std::size_t ensemble_correct(const ExpertLogits& z, std::size_t label) {
  std::vector<double> sum(z.front().size(), 0.0);
  for (const auto& row : z)
    for (std::size_t c = 0; c < row.size(); ++c) sum[c] += row[c];
  return argmax(sum) == label ? 1 : 0;
}

double group_norm_max(ShikeModel& model, const std::vector<bool>& trainable) {
  double norms[4] = {0, 0, 0, 0};
  auto refs = model.state();
  for (std::size_t i = 0; i < refs.params.size(); ++i) {
    if (trainable[i]) continue;
    const auto g = static_cast<std::size_t>(param_group(refs.params[i].first));
    for (double v : refs.params[i].second->grad.values()) norms[g] += v * v;
  }
  return std::sqrt(*std::max_element(std::begin(norms), std::end(norms)));
}

}  // namespace

const char* stage_name(TrainingStage stage) {
  switch (stage) {
    case TrainingStage::initialized: return "initialized";
    case TrainingStage::representation: return "representation";
    case TrainingStage::classifier: return "classifier";
  }
  return "?";
}

TrainingStage parse_stage(const std::string& name) {
  if (name == "initialized") return TrainingStage::initialized;
  if (name == "representation") return TrainingStage::representation;
  if (name == "classifier") return TrainingStage::classifier;
  throw FormatError("unknown training stage tag '" + name + "'");
}

void TrainConfig::validate() const {
  if (epochs_stage1 == 0) throw ConfigError("epochs_stage1 must be positive");
  if (epochs_stage2 == 0) throw ConfigError("epochs_stage2 must be positive");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  try {
    weights.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

TrainState::TrainState(ShikeModel m) : model(std::move(m)) { velocity = zeros_like_params(model); }

double cosine_lr(std::size_t epoch, std::size_t total_epochs, double base_lr) {
  if (total_epochs == 0) throw InvalidArgument("cosine schedule needs total_epochs > 0");
  if (epoch > total_epochs) throw InvalidArgument("epoch beyond the end of the schedule");
  const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, TrainingStage stage, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(stage) + 1, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

BatchLosses representation_objective(std::span<const Tensor> expert_logits, std::span<const std::size_t> labels,
                                     const TrainConfig& config, std::vector<Tensor>& logit_grads) {
  const std::size_t batch = labels.size();
  const double inv = 1.0 / static_cast<double>(batch);
  const LossWeights& w = config.weights;
  logit_grads.clear();
  for (const auto& z : expert_logits) logit_grads.emplace_back(z.shape());
  BatchLosses out;
  for (std::size_t b = 0; b < batch; ++b) {
    const ExpertLogits z = sample_logits(expert_logits, b);
    const std::size_t y = labels[b];
    const LossValue ce = loss_ce(z, y, config.ce_reduction);
    write_grads(logit_grads, ce.grad, b, inv);
    out.ce += ce.value * inv;
    if (w.alpha != 0.0 && z.size() > 1) {
      std::vector<DecoupledLogits> students;
      for (const auto& row : z) students.push_back(decouple_logits(row, y));
      const LossValue nt = loss_nt(elect_grand_teacher(students), students, w.tau);
      write_grads(logit_grads, nt.grad, b, w.alpha * inv);
      out.nt += nt.value * inv;
    }
    if (w.beta != 0.0 && z.size() > 1) {
      const LossValue mu = loss_mutual(z, w.tau);
      write_grads(logit_grads, mu.grad, b, w.beta * inv);
      out.mu += mu.value * inv;
    }
    out.correct += ensemble_correct(z, y);
  }
  out.total = loss_total(out.ce, out.nt, out.mu, w);
  return out;
}

BatchLosses classifier_objective(std::span<const Tensor> expert_logits, std::span<const std::size_t> labels,
                                 std::span<const std::size_t> counts, std::vector<Tensor>& logit_grads) {
  const std::size_t batch = labels.size();
  const double inv = 1.0 / static_cast<double>(batch);
  logit_grads.clear();
  for (const auto& z : expert_logits) logit_grads.emplace_back(z.shape());
  BatchLosses out;
  for (std::size_t b = 0; b < batch; ++b) {
    const ExpertLogits z = sample_logits(expert_logits, b);
    const LossValue l = loss_bsce(z, labels[b], counts);
    write_grads(logit_grads, l.grad, b, inv);
    out.ce += l.value * inv;
    out.correct += ensemble_correct(z, labels[b]);
  }
  out.total = out.ce;
  return out;
}

void sgd_step(TrainState& state, double lr, const TrainConfig& config, const std::vector<bool>& mask) {
  auto refs = state.model.state();
  for (std::size_t i = 0; i < refs.params.size(); ++i) {
    if (!mask[i]) continue;
    Parameter& p = *refs.params[i].second;
    Tensor& v = state.velocity[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k] + config.weight_decay * p.value[k];
      v[k] = config.momentum * v[k] + g;
      p.value[k] -= lr * v[k];
    }
  }
}

void run_stage1(TrainState& state, const LabeledDataset& train, const TrainConfig& config,
                std::optional<std::size_t> until_epoch) {
  config.validate();
  if (state.stage == TrainingStage::initialized) {
    state.stage = TrainingStage::representation;
    state.epoch = 0;
  }
  if (state.stage != TrainingStage::representation)
    throw InvalidArgument(std::string("representation learning cannot continue from stage '") +
                          stage_name(state.stage) + "'");
  if (train.spec.num_classes != state.model.num_classes())
    throw InvalidArgument("dataset and model disagree on the number of classes");
  const std::size_t stop = std::min(until_epoch.value_or(config.epochs_stage1), config.epochs_stage1);
  const std::vector<bool> all(state.velocity.size(), true);
  std::vector<Tensor> grads;
  while (state.epoch < stop) {
    const std::size_t epoch = state.epoch;
    const double lr = cosine_lr(epoch, config.epochs_stage1, config.base_lr);
    const auto order = epoch_order(train.size(), config.seed, TrainingStage::representation, epoch);
    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.stage = TrainingStage::representation;
    metrics.lr = lr;
    std::size_t correct = 0;
    for (std::size_t start = 0, batch_no = 0; start < order.size(); start += config.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      Tensor x = gather_rows(train.inputs, rows);
      if (config.augment) {
        Rng rng(derive_seed(config.seed ^ kAugmentSalt, epoch, batch_no));
        x = config.augment(x, rng);
      }
      std::vector<std::size_t> labels;
      labels.reserve(rows.size());
      for (auto r : rows) labels.push_back(train.labels[r]);

      state.model.zero_grad();
      const MoEOutput out = state.model.forward(x);
      if (!all_finite(out.logits))
        throw NumericError("non-finite stage-1 logits at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch_no),
                           logits_dump(out.logits, labels));
      const BatchLosses l = representation_objective(out.logits, labels, config, grads);
      if (!std::isfinite(l.total))
        throw NumericError("non-finite stage-1 loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch_no),
                           logits_dump(out.logits, labels));
      state.model.backward(grads);
      sgd_step(state, lr, config, all);
      const double w = static_cast<double>(rows.size()) / static_cast<double>(order.size());
      metrics.ce += w * l.ce;
      metrics.nt += w * l.nt;
      metrics.mu += w * l.mu;
      metrics.total += w * l.total;
      correct += l.correct;
    }
    metrics.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    state.history.push_back(metrics);
    ++state.epoch;
  }
}

TrainState train_stage1(ShikeModel model, const LabeledDataset& train, const TrainConfig& config) {
  TrainState state(std::move(model));
  run_stage1(state, train, config);
  return state;
}

TrainState train_stage2(TrainState state, const LabeledDataset& train, const TrainConfig& config) {
  config.validate();
  if (state.stage != TrainingStage::representation)
    throw InvalidArgument(std::string("classifier retraining requires a 'representation' state, got '") +
                          stage_name(state.stage) + "'");
  if (train.spec.num_classes != state.model.num_classes())
    throw InvalidArgument("dataset and model disagree on the number of classes");
  ShikeModel& model = state.model;
  model.reinit_heads(derive_seed(config.seed, kHeadSalt));
  state.velocity = zeros_like_params(model);
  state.stage = TrainingStage::classifier;
  state.epoch = 0;

  auto refs = model.state();
  std::vector<bool> trainable(refs.params.size());
  for (std::size_t i = 0; i < refs.params.size(); ++i)
    trainable[i] = param_group(refs.params[i].first) == ParamGroup::head;

  // The frozen extractor is evaluated once in inference mode.
  constexpr std::size_t kChunk = 512;
  const std::size_t experts = model.num_experts();
  std::vector<Tensor> features(experts);
  for (std::size_t start = 0; start < train.size(); start += kChunk) {
    const std::size_t end = std::min(train.size(), start + kChunk);
    const auto pooled = model.pooled_features(train.inputs.slice(start, end));
    for (std::size_t m = 0; m < experts; ++m) {
      if (features[m].empty()) {
        Shape s = pooled[m].shape();
        s[0] = train.size();
        features[m] = Tensor(s);
      }
      std::copy(pooled[m].values().begin(), pooled[m].values().end(),
                features[m].data() + start * pooled[m].sample_size());
    }
  }

  const auto& counts = train.spec.counts;
  std::vector<Tensor> grads;
  for (std::size_t epoch = 0; epoch < config.epochs_stage2; ++epoch) {
    const double lr = cosine_lr(epoch, config.epochs_stage2, config.base_lr);
    const auto order = epoch_order(train.size(), config.seed, TrainingStage::classifier, epoch);
    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.stage = TrainingStage::classifier;
    metrics.lr = lr;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      std::vector<std::size_t> labels;
      labels.reserve(rows.size());
      for (auto r : rows) labels.push_back(train.labels[r]);

      model.zero_grad();
      std::vector<Tensor> logits;
      for (std::size_t m = 0; m < experts; ++m)
        logits.push_back(model.expert(m).head().forward(gather_rows(features[m], rows)));
      if (!all_finite(logits))
        throw NumericError("non-finite stage-2 logits at epoch " + std::to_string(epoch), logits_dump(logits, labels));
      const BatchLosses l = classifier_objective(logits, labels, counts, grads);
      if (!std::isfinite(l.total))
        throw NumericError("non-finite stage-2 loss at epoch " + std::to_string(epoch), logits_dump(logits, labels));
      for (std::size_t m = 0; m < experts; ++m) model.expert(m).head().backward(grads[m]);
      metrics.frozen_grad_norm = std::max(metrics.frozen_grad_norm, group_norm_max(model, trainable));
      sgd_step(state, lr, config, trainable);
      const double w = static_cast<double>(rows.size()) / static_cast<double>(order.size());
      metrics.ce += w * l.ce;
      metrics.total += w * l.total;
      correct += l.correct;
    }
    metrics.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    state.history.push_back(metrics);
    ++state.epoch;
  }
  return state;
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const ShikeModel& model = state.model;
  const ModelConfig& cfg = model.config();
  ArrayArchive ar;
  nlohmann::json history = nlohmann::json::array();
  for (const auto& h : state.history)
    history.push_back({{"epoch", h.epoch},
                       {"stage", stage_name(h.stage)},
                       {"lr", h.lr},
                       {"ce", h.ce},
                       {"nt", h.nt},
                       {"mu", h.mu},
                       {"total", h.total},
                       {"train_accuracy", h.train_accuracy},
                       {"frozen_grad_norm", h.frozen_grad_norm}});
  ar.header = {{"kind", "checkpoint"},
               {"format_version", kCheckpointVersion},
               {"M", model.num_experts()},
               {"S", cfg.backbone.num_stages()},
               {"taps", model.taps()},
               {"stage_widths", cfg.backbone.stage_widths},
               {"class_count", cfg.num_classes},
               {"training_stage", stage_name(state.stage)},
               {"epoch", state.epoch},
               {"model", to_json(cfg)},
               {"history", history}};
  auto refs = model.state();
  for (std::size_t i = 0; i < refs.params.size(); ++i) {
    ar.arrays.emplace_back("param/" + refs.params[i].first, refs.params[i].second->value);
    ar.arrays.emplace_back("velocity/" + refs.params[i].first, state.velocity[i]);
  }
  for (auto& [name, t] : refs.buffers) ar.arrays.emplace_back("buffer/" + name, *t);
  write_archive(path, ar);
}

TrainState load_checkpoint(const std::filesystem::path& path, std::optional<std::size_t> expected_classes) {
  const ArrayArchive ar = read_archive(path);
  const auto& h = ar.header;
  if (h.value("kind", "") != "checkpoint") throw FormatError(path.string() + " is not a checkpoint");
  if (h.value("format_version", -1) != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + h.value("format_version", nlohmann::json()).dump());
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(h.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad model header: " + e.what());
  }
  if (expected_classes && cfg.num_classes != *expected_classes)
    throw FormatError(path.string() + ": checkpoint has " + std::to_string(cfg.num_classes) + " classes, expected " +
                      std::to_string(*expected_classes));
  TrainState state{ShikeModel(cfg)};
  state.stage = parse_stage(h.at("training_stage").get<std::string>());
  state.epoch = h.at("epoch").get<std::size_t>();
  for (const auto& e : h.at("history")) {
    EpochMetrics m;
    m.epoch = e.at("epoch");
    m.stage = parse_stage(e.at("stage").get<std::string>());
    m.lr = e.at("lr");
    m.ce = e.at("ce");
    m.nt = e.at("nt");
    m.mu = e.at("mu");
    m.total = e.at("total");
    m.train_accuracy = e.at("train_accuracy");
    m.frozen_grad_norm = e.value("frozen_grad_norm", 0.0);
    state.history.push_back(m);
  }
  auto copy_into = [&](const std::string& name, Tensor& dst) {
    const Tensor& src = ar.get(name);
    if (src.shape() != dst.shape())
      throw FormatError(path.string() + ": array '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                        shape_str(dst.shape()));
    dst = src;
  };
  auto refs = state.model.state();
  for (std::size_t i = 0; i < refs.params.size(); ++i) {
    copy_into("param/" + refs.params[i].first, refs.params[i].second->value);
    copy_into("velocity/" + refs.params[i].first, state.velocity[i]);
  }
  for (auto& [name, t] : refs.buffers) copy_into("buffer/" + name, *t);
  return state;
}

}  // namespace shike
