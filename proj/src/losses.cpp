#include "shike/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "shike/errors.hpp"

namespace shike {
namespace {

void require_experts(const ExpertLogits& logits) {
  if (logits.empty()) throw InvalidArgument("at least one expert is required");
  const std::size_t c = logits.front().size();
  if (c == 0) throw InvalidArgument("empty logit vector");
  for (const auto& z : logits)
    if (z.size() != c) throw ShapeError("experts disagree on the number of classes");
}

void require_label(std::size_t label, std::size_t classes) {
  if (label >= classes)
    throw InvalidArgument("label " + std::to_string(label) + " out of range for " + std::to_string(classes) +
                          " classes");
}

void require_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("temperature must be positive and finite");
}

void require_finite(std::span<const double> z) {
  for (double v : z)
    if (!std::isfinite(v)) throw InvalidArgument("non-target logits must be finite");
}

double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

// Cross-entropy of one logit row and its gradient softmax(z) - onehot(y).
double cross_entropy(std::span<const double> z, std::size_t label, std::vector<double>& grad) {
  const double lse = log_sum_exp(z);
  grad.resize(z.size());
  for (std::size_t c = 0; c < z.size(); ++c) grad[c] = std::exp(z[c] - lse);
  grad[label] -= 1.0;
  return lse - z[label];
}

void check_maps(std::span<const DecoupledLogits> experts) {
  if (experts.empty()) throw InvalidArgument("at least one expert is required");
  for (const auto& e : experts)
    if (e.index_map != experts.front().index_map)
      throw InvalidArgument("experts were decoupled with different index maps");
}

}  // namespace

std::vector<double> DecoupledLogits::reconstruct() const {
  std::vector<double> z(num_classes());
  z[label] = target;
  for (std::size_t i = 0; i < index_map.size(); ++i) z[index_map[i]] = nontarget[i];
  return z;
}

DecoupledLogits decouple_logits(std::span<const double> logits, std::size_t label) {
  require_label(label, logits.size());
  DecoupledLogits d;
  d.target = logits[label];
  d.label = label;
  d.nontarget.reserve(logits.size() - 1);
  d.index_map.reserve(logits.size() - 1);
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (c == label) continue;
    d.nontarget.push_back(logits[c]);
    d.index_map.push_back(c);
  }
  return d;
}

std::vector<double> consensus_mean(std::span<const DecoupledLogits> experts) {
  check_maps(experts);
  std::vector<double> mean(experts.front().nontarget.size(), 0.0);
  for (const auto& e : experts)
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += e.nontarget[i];
  for (auto& v : mean) v /= static_cast<double>(experts.size());
  return mean;
}

GrandTeacher elect_grand_teacher(std::span<const DecoupledLogits> experts) {
  GrandTeacher t;
  t.mean = consensus_mean(experts);
  t.index_map = experts.front().index_map;
  const std::size_t n = t.mean.size();
  t.max.assign(n, -std::numeric_limits<double>::infinity());
  for (const auto& e : experts)
    for (std::size_t i = 0; i < n; ++i) t.max[i] = std::max(t.max[i], e.nontarget[i]);
  // max_element returns the first maximum: ties go to the lowest index.
  t.consensus_index = n ? static_cast<std::size_t>(std::max_element(t.mean.begin(), t.mean.end()) - t.mean.begin()) : 0;
  t.logits = t.max;
  if (n) t.logits[t.consensus_index] = t.mean[t.consensus_index];
  return t;
}

std::vector<double> log_softmax(std::span<const double> z, double tau) {
  require_tau(tau);
  if (z.empty()) return {};
  std::vector<double> s(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) s[i] = z[i] / tau;
  const double lse = log_sum_exp(s);
  for (auto& v : s) v -= lse;
  return s;
}

std::vector<double> softmax(std::span<const double> z, double tau) {
  std::vector<double> p = log_softmax(z, tau);
  for (auto& v : p) v = std::exp(v);
  return p;
}

std::vector<double> nontarget_softmax(std::span<const double> z, double tau) {
  require_finite(z);
  return softmax(z, tau);
}

double kl_from_log(std::span<const double> log_p, std::span<const double> log_q) {
  double kl = 0.0;
  for (std::size_t i = 0; i < log_p.size(); ++i) kl += std::exp(log_p[i]) * (log_p[i] - log_q[i]);
  return kl;
}

double temperature_scale(double tau) { return tau == 1.0 ? 1.0 : tau * tau; }

LossValue loss_ce(const ExpertLogits& logits, std::size_t label, ExpertReduction reduction) {
  require_experts(logits);
  require_label(label, logits.front().size());
  LossValue out;
  out.grad.resize(logits.size());
  for (std::size_t m = 0; m < logits.size(); ++m) out.value += cross_entropy(logits[m], label, out.grad[m]);
  if (reduction == ExpertReduction::mean) {
    const double inv = 1.0 / static_cast<double>(logits.size());
    out.value *= inv;
    for (auto& g : out.grad)
      for (auto& v : g) v *= inv;
  }
  return out;
}

LossValue loss_bsce(const ExpertLogits& logits, std::size_t label, std::span<const std::size_t> counts) {
  require_experts(logits);
  const std::size_t classes = logits.front().size();
  require_label(label, classes);
  if (counts.size() != classes) throw ShapeError("class counts do not match the number of classes");
  std::vector<double> log_prior(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0) throw InvalidArgument("balanced softmax needs every class count >= 1 (class " +
                                              std::to_string(c) + ")");
    log_prior[c] = std::log(static_cast<double>(counts[c]));
  }
  LossValue out;
  out.grad.resize(logits.size());
  std::vector<double> shifted(classes);
  for (std::size_t m = 0; m < logits.size(); ++m) {
    for (std::size_t c = 0; c < classes; ++c) shifted[c] = logits[m][c] + log_prior[c];
    out.value += cross_entropy(shifted, label, out.grad[m]);
  }
  return out;
}

LossValue loss_mutual(const ExpertLogits& logits, double tau) {
  require_experts(logits);
  require_tau(tau);
  const std::size_t experts = logits.size();
  const std::size_t classes = logits.front().size();
  LossValue out;
  out.grad.assign(experts, std::vector<double>(classes, 0.0));
  if (experts == 1) return out;
  const double scale = temperature_scale(tau);
  std::vector<std::vector<double>> log_p(experts);
  for (std::size_t m = 0; m < experts; ++m) log_p[m] = log_softmax(logits[m], tau);
  for (std::size_t j = 0; j < experts; ++j)
    for (std::size_t k = 0; k < experts; ++k) {
      if (j == k) continue;
      out.value += kl_from_log(log_p[j], log_p[k]);
      // d/dz^k KL(p^j || softmax(z^k / tau)) = (p^k - p^j) / tau
      for (std::size_t c = 0; c < classes; ++c)
        out.grad[k][c] += (std::exp(log_p[k][c]) - std::exp(log_p[j][c])) / tau;
    }
  out.value *= scale;
  for (auto& g : out.grad)
    for (auto& v : g) v *= scale;
  return out;
}

LossValue loss_nt(const GrandTeacher& teacher, std::span<const DecoupledLogits> students, double tau) {
  require_tau(tau);
  check_maps(students);
  if (teacher.index_map != students.front().index_map || teacher.logits.size() != students.front().nontarget.size())
    throw ShapeError("grand teacher and students disagree on the non-target classes");
  const std::size_t classes = students.front().num_classes();
  const double scale = temperature_scale(tau);
  LossValue out;
  out.grad.assign(students.size(), std::vector<double>(classes, 0.0));
  if (teacher.logits.empty()) return out;
  require_finite(teacher.logits);
  const std::vector<double> log_t = log_softmax(teacher.logits, tau);
  for (std::size_t m = 0; m < students.size(); ++m) {
    require_finite(students[m].nontarget);
    const std::vector<double> log_s = log_softmax(students[m].nontarget, tau);
    out.value += kl_from_log(log_t, log_s);
    for (std::size_t i = 0; i < log_s.size(); ++i)
      out.grad[m][students[m].index_map[i]] = scale * (std::exp(log_s[i]) - std::exp(log_t[i])) / tau;
  }
  out.value *= scale;
  return out;
}

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw InvalidArgument("alpha must be finite and >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw InvalidArgument("beta must be finite and >= 0");
  require_tau(tau);
}

double loss_total(double ce, double nt, double mu, const LossWeights& weights) {
  return ce + weights.alpha * nt + weights.beta * mu;
}

}  // namespace shike
