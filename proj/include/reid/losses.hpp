#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reid/datasets.hpp"
#include "reid/tensor.hpp"

namespace reid {

/// Which feature maps feed the covariance term.
enum class CovTap { block2_active_head, block2_both_heads, backbone };

inline const char* to_string(CovTap tap) {
  switch (tap) {
    case CovTap::block2_active_head: return "block2_active_head";
    case CovTap::block2_both_heads: return "block2_both_heads";
    case CovTap::backbone: return "backbone";
  }
  return "?";
}

inline CovTap parse_cov_tap(std::string_view name) {
  if (name == "block2_active_head") return CovTap::block2_active_head;
  if (name == "block2_both_heads") return CovTap::block2_both_heads;
  if (name == "backbone") return CovTap::backbone;
  throw Error(ErrorKind::unknown_kind, "unknown covariance tap '" + std::string(name) + "'");
}

struct CovLossConfig {
  double lambda = 1.0;
  double alpha = 1e-9;
  double beta = 0.0;
  CovTap tap = CovTap::block2_both_heads;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error(ErrorKind::invalid_config, "lambda must be >= 0");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw Error(ErrorKind::invalid_config, "alpha must be > 0");
    if (!std::isfinite(beta)) throw Error(ErrorKind::invalid_config, "beta must be finite");
  }
};

struct LossValue {
  double value = 0.0;
  std::vector<Tensor> grads;  // one per input, same shapes
};

/// Per-sample spatial mean with a trailing unit axis: [B,C,H,W] -> [B,C,1].
inline Tensor embed(const Tensor& features) {
  require_rank(features, 4, "embed");
  if (!features.all_finite()) throw Error(ErrorKind::non_finite_input, "embed input has NaN/Inf");
  const std::size_t b = features.dim(0), c = features.dim(1), spatial = features.dim(2) * features.dim(3);
  Tensor e({b, c, 1});
  for (std::size_t i = 0; i < b * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < spatial; ++j) s += features[i * spatial + j];
    e[i] = s / static_cast<double>(spatial);
  }
  return e;
}

/// Sum of the entries of e·eᵀ, i.e. (Σ e)².
inline double cov_scalar(std::span<const double> e) {
  const double s = std::accumulate(e.begin(), e.end(), 0.0);
  return s * s;
}

/// Covariance term for one feature map, with its gradient w.r.t. the map.
///
/// P_i and N_i are cov_scalar of the embedded positive/negative sample of the
/// i-th mask pair; S = Σ_i (P_{i+1} - P_i) - (N_{i+1} - N_i);
/// loss = λ (α S - β).
inline LossValue covariance_loss_single(const Tensor& features, const PairMask& mask, const CovLossConfig& cfg) {
  require_rank(features, 4, "covariance_loss");
  mask.validate(features.dim(0));
  if (mask.pairs.size() < 2)
    throw Error(ErrorKind::mask_too_small, "need at least 2 pairs, got " + std::to_string(mask.pairs.size()));
  const Tensor e = embed(features);
  const std::size_t c = features.dim(1), spatial = features.dim(2) * features.dim(3);
  auto row_sum = [&](std::size_t sample) {
    const auto row = e.sample(sample);
    return std::accumulate(row.begin(), row.end(), 0.0);
  };
  const std::size_t n = mask.pairs.size();
  std::vector<double> pos(n), neg(n);
  for (std::size_t i = 0; i < n; ++i) {
    pos[i] = cov_scalar(e.sample(mask.pairs[i].first));
    neg[i] = cov_scalar(e.sample(mask.pairs[i].second));
  }
  double s = 0.0;
  // d S / d P_i and d S / d N_i.
  std::vector<double> dpos(n, 0.0), dneg(n, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    s += (pos[i + 1] - pos[i]) - (neg[i + 1] - neg[i]);
    dpos[i + 1] += 1.0;
    dpos[i] -= 1.0;
    dneg[i + 1] -= 1.0;
    dneg[i] += 1.0;
  }
  LossValue out;
  out.value = cfg.lambda * (cfg.alpha * s - cfg.beta);

  // P = (Σ_c e_c)², e_c = mean over HxW, so dP/dx = 2 Σe / (H W) for every element of that sample.
  std::vector<double> coeff(features.dim(0), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t p = mask.pairs[i].first, q = mask.pairs[i].second;
    coeff[p] += dpos[i] * 2.0 * row_sum(p);
    coeff[q] += dneg[i] * 2.0 * row_sum(q);
  }
  Tensor grad(features.shape());
  const double scale = cfg.lambda * cfg.alpha / static_cast<double>(spatial);
  for (std::size_t b = 0; b < features.dim(0); ++b) {
    if (coeff[b] == 0.0) continue;
    auto g = grad.sample(b);
    std::fill(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(c * spatial), scale * coeff[b]);
  }
  out.grads.push_back(std::move(grad));
  return out;
}

/// Sum of the covariance term over every supplied tap.
inline LossValue covariance_loss(const std::vector<const Tensor*>& taps, const PairMask& mask,
                                 const CovLossConfig& cfg) {
  if (taps.empty()) throw Error(ErrorKind::tap_unavailable, "no feature maps for covariance loss");
  LossValue total;
  for (const Tensor* t : taps) {
    if (t == nullptr || t->empty()) throw Error(ErrorKind::tap_unavailable, "missing covariance tap");
    LossValue one = covariance_loss_single(*t, mask, cfg);
    total.value += one.value;
    total.grads.push_back(std::move(one.grads.front()));
  }
  return total;
}

/// Mean over the batch of -log softmax(logits)[label].
inline LossValue cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b) throw Error(ErrorKind::dim_mismatch, "label count != batch size");
  LossValue out;
  Tensor grad(logits.shape());
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw Error(ErrorKind::label_out_of_range,
                  "label " + std::to_string(labels[i]) + " not in [0," + std::to_string(k) + ")");
    const auto row = logits.sample(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = std::log(z) + mx;
    out.value += log_z - row[static_cast<std::size_t>(labels[i])];
    auto g = grad.sample(i);
    for (std::size_t j = 0; j < k; ++j) g[j] = std::exp(row[j] - log_z) / static_cast<double>(b);
    g[static_cast<std::size_t>(labels[i])] -= 1.0 / static_cast<double>(b);
  }
  out.value /= static_cast<double>(b);
  out.grads.push_back(std::move(grad));
  return out;
}

inline double total_loss(double ce, double cov) {
  if (!std::isfinite(ce) || !std::isfinite(cov)) throw Error(ErrorKind::non_finite_input, "non-finite loss term");
  return ce + cov;
}

}  // namespace reid
