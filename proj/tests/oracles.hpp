#pragma once
// Independent reference computations. Deliberately naive: no shared code
// with the library beyond the Tensor container.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "reid/tensor.hpp"

namespace oracle {

using reid::Tensor;

/// Spatial mean per (sample, channel) as nested vectors.
inline std::vector<std::vector<double>> embed(const Tensor& f) {
  const std::size_t b = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  std::vector<std::vector<double>> e(b, std::vector<double>(c, 0.0));
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) s += f.at(n, ch, y, x);
      e[n][ch] = s / static_cast<double>(h * w);
    }
  return e;
}

/// Materializes e·eᵀ and sums every entry.
inline double outer_sum(const std::vector<double>& e) {
  std::vector<std::vector<double>> m(e.size(), std::vector<double>(e.size()));
  for (std::size_t i = 0; i < e.size(); ++i)
    for (std::size_t j = 0; j < e.size(); ++j) m[i][j] = e[i] * e[j];
  double s = 0.0;
  for (const auto& row : m)
    for (double v : row) s += v;
  return s;
}

inline double covariance_loss(const Tensor& f, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                              double lambda, double alpha, double beta) {
  const auto e = oracle::embed(f);
  std::vector<double> p, n;
  for (const auto& [i, j] : pairs) {
    p.push_back(outer_sum(e[i]));
    n.push_back(outer_sum(e[j]));
  }
  double s = 0.0;
  for (std::size_t i = 1; i < pairs.size(); ++i) s += (p[i] - p[i - 1]) - (n[i] - n[i - 1]);
  return lambda * (alpha * s - beta);
}

/// Softmax evaluated directly, in long double.
inline double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  long double total = 0.0L;
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    long double z = 0.0L;
    for (std::size_t j = 0; j < logits.dim(1); ++j) z += std::exp(static_cast<long double>(logits[i * logits.dim(1) + j]));
    const long double p = std::exp(static_cast<long double>(logits[i * logits.dim(1) + static_cast<std::size_t>(labels[i])])) / z;
    total += -std::log(p);
  }
  return static_cast<double>(total / static_cast<long double>(logits.dim(0)));
}

/// Textbook triangular formula in floating point.
inline double clr(double it, double base, double max, double step) {
  const double cycle = std::floor(1.0 + it / (2.0 * step));
  const double x = std::fabs(it / step - 2.0 * cycle + 1.0);
  return base + (max - base) * std::max(0.0, 1.0 - x);
}

inline std::vector<std::vector<double>> distances(const std::vector<std::vector<double>>& q,
                                                  const std::vector<std::vector<double>>& g) {
  std::vector<std::vector<double>> d(q.size(), std::vector<double>(g.size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = 0; j < g.size(); ++j)
      for (std::size_t k = 0; k < q[i].size(); ++k) d[i][j] += (q[i][k] - g[j][k]) * (q[i][k] - g[j][k]);
  return d;
}

struct Metrics {
  std::map<int, double> cmc;
  std::vector<double> ap;  // valid queries only
  double map = 0.0;
  std::size_t valid = 0;
};

/// Per query: stable sort by distance, drop junk, then count directly.
inline Metrics cmc_map(const std::vector<std::vector<double>>& dist, const std::vector<int>& qid,
                       const std::vector<int>& qcam, const std::vector<int>& gid, const std::vector<int>& gcam,
                       const std::set<int>& topk) {
  Metrics m;
  std::map<int, int> hits;
  for (std::size_t q = 0; q < dist.size(); ++q) {
    std::vector<std::size_t> idx(dist[q].size());
    for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = j;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dist[q][a] < dist[q][b]; });
    std::vector<bool> relevant;
    for (std::size_t j : idx) {
      if (gid[j] == -1 || gid[j] == 0) continue;
      if (gid[j] == qid[q] && gcam[j] == qcam[q]) continue;
      relevant.push_back(gid[j] == qid[q]);
    }
    if (std::count(relevant.begin(), relevant.end(), true) == 0) continue;
    ++m.valid;
    for (int k : topk) {
      bool found = false;
      for (std::size_t r = 0; r < relevant.size() && r < static_cast<std::size_t>(k); ++r) found = found || relevant[r];
      hits[k] += found ? 1 : 0;
    }
    std::vector<double> precisions;
    for (std::size_t r = 0; r < relevant.size(); ++r) {
      if (!relevant[r]) continue;
      std::size_t in_top = 0;
      for (std::size_t t = 0; t <= r; ++t) in_top += relevant[t] ? 1 : 0;
      precisions.push_back(static_cast<double>(in_top) / static_cast<double>(r + 1));
    }
    double s = 0.0;
    for (double p : precisions) s += p;
    m.ap.push_back(s / static_cast<double>(precisions.size()));
  }
  for (int k : topk) m.cmc[k] = m.valid ? static_cast<double>(hits[k]) / static_cast<double>(m.valid) : 0.0;
  double s = 0.0;
  for (double a : m.ap) s += a;
  m.map = m.valid ? s / static_cast<double>(m.valid) : 0.0;
  return m;
}

/// Central differences of a scalar function with respect to every entry of x.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-4) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(x);
    x[i] = orig - h;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max |a-b| / max(|b|_inf, floor): relative error against the reference scale.
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::fabs(a[i] - b[i]));
    scale = std::max(scale, std::fabs(b[i]));
  }
  return diff / scale;
}

/// Gradient check error: relative to the reference scale, except that an
/// exactly-zero analytic gradient (a locally constant function) is compared
/// in absolute terms, where rounding noise in the differences dominates.
inline double gradient_error(const Tensor& analytic, const Tensor& numeric) {
  if (std::all_of(analytic.values().begin(), analytic.values().end(), [](double v) { return v == 0.0; })) {
    double worst = 0.0;
    for (double v : numeric.values()) worst = std::max(worst, std::fabs(v));
    return worst / 1e-5;  // < 1e-4 iff every difference quotient is below 1e-9
  }
  return relative_error(analytic, numeric);
}

}  // namespace oracle
