#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shike/data.hpp"
#include "shike/losses.hpp"
#include "shike/model.hpp"

namespace shike {

enum class TrainingStage { initialized, representation, classifier };

const char* stage_name(TrainingStage stage);
TrainingStage parse_stage(const std::string& name);

struct TrainConfig {
  std::size_t epochs_stage1 = 60;
  std::size_t epochs_stage2 = 20;
  double base_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 64;
  LossWeights weights;
  ExpertReduction ce_reduction = ExpertReduction::sum;
  std::uint64_t seed = 0;
  /// Applied to every stage-1 batch; empty means pass-through.
  Augmentation augment;

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  TrainingStage stage = TrainingStage::representation;
  double lr = 0.0;
  double ce = 0.0;  // balanced softmax CE during classifier retraining
  double nt = 0.0;
  double mu = 0.0;
  double total = 0.0;
  double train_accuracy = 0.0;
  /// Largest L2 norm of any frozen parameter group's gradient seen this epoch.
  double frozen_grad_norm = 0.0;
};

/// Model plus optimiser state. `velocity[i]` pairs with `model.state().params[i]`.
struct TrainState {
  ShikeModel model;
  std::vector<Tensor> velocity;
  std::size_t epoch = 0;  // epochs completed in the current stage
  TrainingStage stage = TrainingStage::initialized;
  std::vector<EpochMetrics> history;

  explicit TrainState(ShikeModel m);
};

/// base_lr * (1 + cos(pi * epoch / total)) / 2.
double cosine_lr(std::size_t epoch, std::size_t total_epochs, double base_lr);

/// Sample order for one epoch, seeded from (seed, stage, epoch) only.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, TrainingStage stage, std::size_t epoch);

struct BatchLosses {
  double ce = 0.0;
  double nt = 0.0;
  double mu = 0.0;
  double total = 0.0;
  std::size_t correct = 0;
};

/// Stage-1 objective L_ce + alpha L_nt + beta L_mu, averaged over the batch.
/// Writes dL/dz^m (shape [B, C]) for every expert into `logit_grads`.
BatchLosses representation_objective(std::span<const Tensor> expert_logits, std::span<const std::size_t> labels,
                                     const TrainConfig& config, std::vector<Tensor>& logit_grads);

/// Balanced softmax objective averaged over the batch, with gradients.
BatchLosses classifier_objective(std::span<const Tensor> expert_logits, std::span<const std::size_t> labels,
                                 std::span<const std::size_t> counts, std::vector<Tensor>& logit_grads);

/// Momentum SGD with L2 weight decay on the parameters selected by `mask`.
void sgd_step(TrainState& state, double lr, const TrainConfig& config, const std::vector<bool>& mask);

/// Runs representation learning until `until_epoch` (default: all epochs).
/// Resumable: a state saved after epoch k continues exactly where it stopped.
void run_stage1(TrainState& state, const LabeledDataset& train, const TrainConfig& config,
                std::optional<std::size_t> until_epoch = std::nullopt);

TrainState train_stage1(ShikeModel model, const LabeledDataset& train, const TrainConfig& config);

/// Re-initialises every head and retrains only the heads with balanced
/// softmax CE on frozen features; the cosine schedule restarts.
TrainState train_stage2(TrainState state, const LabeledDataset& train, const TrainConfig& config);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Throws FormatError on corruption, version mismatch or, when given, a
/// class count different from `expected_classes`.
TrainState load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::size_t> expected_classes = std::nullopt);

inline constexpr int kCheckpointVersion = 1;

}  // namespace shike
