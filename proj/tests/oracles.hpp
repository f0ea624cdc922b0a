#pragma once

// Scalar-loop reference implementations used as independent oracles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline double log_sum_exp(const Vec& z, double tau) {
  double m = z[0] / tau;
  for (double v : z) m = std::max(m, v / tau);
  double s = 0.0;
  for (double v : z) s += std::exp(v / tau - m);
  return m + std::log(s);
}

inline Vec probs(const Vec& z, double tau = 1.0) {
  const double lse = log_sum_exp(z, tau);
  Vec p;
  for (double v : z) p.push_back(std::exp(v / tau - lse));
  return p;
}

inline double kl(const Vec& zp, const Vec& zq, double tau) {
  const double lp = log_sum_exp(zp, tau), lq = log_sum_exp(zq, tau);
  double s = 0.0;
  for (std::size_t i = 0; i < zp.size(); ++i) {
    const double a = zp[i] / tau - lp, b = zq[i] / tau - lq;
    s += std::exp(a) * (a - b);
  }
  return s;
}

inline double scale(double tau) { return tau == 1.0 ? 1.0 : tau * tau; }

inline double ce(const Mat& z, std::size_t y) {
  double s = 0.0;
  for (const auto& row : z) s += log_sum_exp(row, 1.0) - row[y];
  return s;
}

inline double bsce(const Mat& z, std::size_t y, const std::vector<std::size_t>& counts) {
  double s = 0.0;
  for (const auto& row : z) {
    double denom = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) denom += static_cast<double>(counts[j]) * std::exp(row[j] - row[y]);
    s += std::log(denom) - std::log(static_cast<double>(counts[y]));
  }
  return s;
}

inline double mutual(const Mat& z, double tau) {
  double s = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j)
    for (std::size_t k = 0; k < z.size(); ++k)
      if (j != k) s += kl(z[j], z[k], tau);
  return s * scale(tau);
}

inline Vec drop(const Vec& z, std::size_t y) {
  Vec out;
  for (std::size_t c = 0; c < z.size(); ++c)
    if (c != y) out.push_back(z[c]);
  return out;
}

struct Teacher {
  Vec logits, mean, max;
  std::size_t consensus = 0;
};

inline Teacher teacher(const Mat& z, std::size_t y) {
  Teacher t;
  const std::size_t n = z[0].size() - 1;
  t.mean.assign(n, 0.0);
  t.max.assign(n, -INFINITY);
  for (const auto& row : z) {
    const Vec nt = drop(row, y);
    for (std::size_t i = 0; i < n; ++i) {
      t.mean[i] += nt[i] / static_cast<double>(z.size());
      if (nt[i] > t.max[i]) t.max[i] = nt[i];
    }
  }
  for (std::size_t i = 1; i < n; ++i)
    if (t.mean[i] > t.mean[t.consensus]) t.consensus = i;
  t.logits = t.max;
  t.logits[t.consensus] = t.mean[t.consensus];
  return t;
}

inline double nt(const Mat& z, std::size_t y, double tau) {
  const Teacher t = teacher(z, y);
  double s = 0.0;
  for (const auto& row : z) s += kl(t.logits, drop(row, y), tau);
  return s * scale(tau);
}

/// Central differences of f over every entry of z.
inline Mat numeric_grad(const std::function<double(const Mat&)>& f, Mat z, double h = 1e-5) {
  Mat g(z.size(), Vec(z[0].size()));
  for (std::size_t m = 0; m < z.size(); ++m)
    for (std::size_t c = 0; c < z[m].size(); ++c) {
      const double keep = z[m][c];
      z[m][c] = keep + h;
      const double up = f(z);
      z[m][c] = keep - h;
      const double down = f(z);
      z[m][c] = keep;
      g[m][c] = (up - down) / (2.0 * h);
    }
  return g;
}

/// ||a - b|| / max(||a||, ||b||, 1e-8) over all entries.
inline double relative_error(const Mat& a, const Mat& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t m = 0; m < a.size(); ++m)
    for (std::size_t c = 0; c < a[m].size(); ++c) {
      diff += (a[m][c] - b[m][c]) * (a[m][c] - b[m][c]);
      na += a[m][c] * a[m][c];
      nb += b[m][c] * b[m][c];
    }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
}

inline Mat random_logits(std::mt19937_64& rng, std::size_t experts, std::size_t classes, double spread = 3.0) {
  std::normal_distribution<double> n(0.0, spread);
  Mat z(experts, Vec(classes));
  for (auto& row : z)
    for (auto& v : row) v = n(rng);
  return z;
}

}  // namespace oracle
