#pragma once

// Hand-written cross-entropy training loop for a single-expert model, used
// as an oracle for the stage-1 driver.

#include <cmath>
#include <numbers>

#include "shike/train.hpp"

namespace reference {

struct PlainSgd {
  std::vector<shike::Tensor> velocity;
};

/// One epoch of mini-batch CE training with momentum SGD and L2 decay.
inline void ce_epoch(shike::ShikeModel& model, PlainSgd& opt, const shike::LabeledDataset& train,
                     const shike::TrainConfig& cfg, std::size_t epoch) {
  auto refs = model.state();
  if (opt.velocity.empty())
    for (auto& [_, p] : refs.params) opt.velocity.emplace_back(p->value.shape());
  const double lr =
      cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(epoch) / double(cfg.epochs_stage1)));
  const auto order = shike::epoch_order(train.size(), cfg.seed, shike::TrainingStage::representation, epoch);
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    const std::span<const std::size_t> rows(order.data() + start, end - start);
    model.zero_grad();
    const auto out = model.forward(shike::gather_rows(train.inputs, rows));
    const shike::Tensor& z = out.logits[0];
    shike::Tensor g(z.shape());
    const std::size_t classes = z.dim(1);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      double mx = z.sample(b)[0];
      for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, z.sample(b)[c]);
      double denom = 0.0;
      for (std::size_t c = 0; c < classes; ++c) denom += std::exp(z.sample(b)[c] - mx);
      for (std::size_t c = 0; c < classes; ++c) {
        const double p = std::exp(z.sample(b)[c] - mx) / denom;
        g.sample(b)[c] = (p - (c == train.labels[rows[b]] ? 1.0 : 0.0)) / double(rows.size());
      }
    }
    const std::vector<shike::Tensor> grads{g};
    model.backward(grads);
    for (std::size_t i = 0; i < refs.params.size(); ++i) {
      auto& p = *refs.params[i].second;
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        opt.velocity[i][k] = cfg.momentum * opt.velocity[i][k] + p.grad[k] + cfg.weight_decay * p.value[k];
        p.value[k] -= lr * opt.velocity[i][k];
      }
    }
  }
}

/// Largest absolute parameter difference between two models.
inline double max_param_diff(const shike::ShikeModel& a, const shike::ShikeModel& b) {
  const auto ra = a.state(), rb = b.state();
  double d = 0.0;
  for (std::size_t i = 0; i < ra.params.size(); ++i)
    for (std::size_t k = 0; k < ra.params[i].second->value.size(); ++k)
      d = std::max(d, std::abs(ra.params[i].second->value[k] - rb.params[i].second->value[k]));
  return d;
}

}  // namespace reference
