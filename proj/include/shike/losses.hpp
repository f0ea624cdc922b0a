#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace shike {

/// Logits of every expert for one sample: `logits[m][c]`.
using ExpertLogits = std::vector<std::vector<double>>;

/// Split of one logit vector into the target logit and the C-1 non-target
/// logits, listed in ascending class order.
struct DecoupledLogits {
  double target = 0.0;
  std::size_t label = 0;
  std::vector<double> nontarget;
  std::vector<std::size_t> index_map;

  std::size_t num_classes() const { return nontarget.size() + 1; }
  std::vector<double> reconstruct() const;
};

DecoupledLogits decouple_logits(std::span<const double> logits, std::size_t label);

/// Per-position average of the experts' non-target logits.
std::vector<double> consensus_mean(std::span<const DecoupledLogits> experts);

/// Distillation target over the non-target classes: the cross-expert mean
/// at the consensus hardest negative, the cross-expert max everywhere else.
struct GrandTeacher {
  std::vector<double> logits;
  std::size_t consensus_index = 0;
  std::vector<double> mean;
  std::vector<double> max;
  std::vector<std::size_t> index_map;
};

GrandTeacher elect_grand_teacher(std::span<const DecoupledLogits> experts);

/// Numerically stable softmax of z / tau.
std::vector<double> softmax(std::span<const double> z, double tau = 1.0);
std::vector<double> log_softmax(std::span<const double> z, double tau = 1.0);

/// Softmax restricted to non-target logits; rejects non-finite input.
std::vector<double> nontarget_softmax(std::span<const double> z, double tau = 1.0);

/// KL(p || q) from log-probabilities.
double kl_from_log(std::span<const double> log_p, std::span<const double> log_q);

/// Distillation losses are multiplied by tau^2 when tau != 1.
double temperature_scale(double tau);

/// A scalar loss and its gradient with respect to every expert's logits.
struct LossValue {
  double value = 0.0;
  ExpertLogits grad;
};

enum class ExpertReduction { sum, mean };

/// Sum (or mean) over experts of -log softmax(z^m)_y.
LossValue loss_ce(const ExpertLogits& logits, std::size_t label, ExpertReduction reduction = ExpertReduction::sum);

/// Balanced softmax: cross-entropy on z^m + log n, summed over experts.
LossValue loss_bsce(const ExpertLogits& logits, std::size_t label, std::span<const std::size_t> counts);

/// Sum over ordered expert pairs (j, k), j != k, of KL(p^j || p^k). The first
/// argument of each term is a constant: gradients reach only p^k.
LossValue loss_mutual(const ExpertLogits& logits, double tau = 1.0);

/// Sum over experts of KL(p_teacher || p_student) on non-target classes.
/// The teacher is a constant. Gradients are laid out over all C classes; the
/// target entry is always exactly zero.
LossValue loss_nt(const GrandTeacher& teacher, std::span<const DecoupledLogits> students, double tau = 1.0);

struct LossWeights {
  double alpha = 1.0;  // L_nt
  double beta = 1.0;   // L_mu
  double tau = 1.0;

  void validate() const;
};

double loss_total(double ce, double nt, double mu, const LossWeights& weights);

}  // namespace shike
