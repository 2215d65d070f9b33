#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "noseprint/errors.hpp"
#include "noseprint/tensor.hpp"

namespace noseprint {

struct LossWeights {
  double w_ce = 1.0;
  double w_tri = 1.0;
  double w_circle = 1.0;
  double smoothing = 0.1;
  double circle_margin = 0.25;
  double circle_scale = 64.0;

  void validate() const {
    if (w_ce < 0 || w_tri < 0 || w_circle < 0) throw ConfigError("loss weights must be >= 0");
    if (w_ce == 0 && w_tri == 0 && w_circle == 0) throw ConfigError("at least one loss weight must be positive");
    if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("loss.smoothing must lie in [0, 1)");
  }
};

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;  // d value / d input, same shape as the differentiated input
};

namespace detail {

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Every identity needs a positive and at least two identities must exist.
inline void check_batch_labels(const std::vector<int>& labels, std::size_t n, const char* who) {
  if (labels.size() != n) throw ArgumentError(std::string(who) + ": label count does not match batch size");
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  if (counts.size() < 2) throw ArgumentError(std::string(who) + ": batch needs at least two distinct identities");
  for (const auto& [id, c] : counts) {
    if (c < 2) throw ArgumentError(std::string(who) + ": identity " + std::to_string(id) + " occurs only once in the batch");
  }
}

}  // namespace detail

/// Turns class indices into one-hot rows [N, K].
template <typename T>
Tensor<T> one_hot(const std::vector<int>& labels, int num_classes) {
  Tensor<T> t({labels.size(), std::size_t(num_classes)});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw ArgumentError("label " + std::to_string(labels[i]) + " out of range");
    t.data[i * num_classes + labels[i]] = T(1);
  }
  return t;
}

/// Mean over the batch of -sum_k q_k log softmax(z)_k with
/// q = (1 - eps) t + eps / K for target rows t summing to 1.
template <typename T>
LossResult<T> ce_label_smooth(const Tensor<T>& logits, const Tensor<T>& targets, double eps) {
  if (logits.rank() != 2 || logits.dim(1) < 2) throw ShapeError("ce: logits must be [N, K] with K >= 2");
  require_shape(targets.shape, logits.shape, "ce targets");
  if (!(eps >= 0.0 && eps < 1.0)) throw ArgumentError("ce: smoothing must lie in [0, 1)");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  LossResult<T> r;
  r.grad = Tensor<T>(logits.shape);
  double total = 0.0;
  std::vector<double> lsm(K);
  for (std::size_t n = 0; n < N; ++n) {
    double tsum = 0;
    for (std::size_t k = 0; k < K; ++k) tsum += targets.data[n * K + k];
    if (std::abs(tsum - 1.0) > 1e-6) throw ArgumentError("ce: target row " + std::to_string(n) + " does not sum to 1");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits.data[n * K + k]));
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits.data[n * K + k] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < K; ++k) {
      lsm[k] = logits.data[n * K + k] - lse;
      const double q = (1.0 - eps) * targets.data[n * K + k] + eps / K;
      total -= q * lsm[k];
      r.grad.data[n * K + k] = static_cast<T>((std::exp(lsm[k]) - q) / N);
    }
  }
  r.value = total / N;
  return r;
}

/// Soft-margin triplet with batch-hard mining: per anchor the farthest
/// positive and nearest negative (Euclidean), loss = mean softplus(d_ap - d_an).
template <typename T>
LossResult<T> triplet_softmargin_batchhard(const Tensor<T>& features, const std::vector<int>& labels) {
  if (features.rank() != 2) throw ShapeError("triplet: features must be [N, D]");
  const std::size_t N = features.dim(0), D = features.dim(1);
  detail::check_batch_labels(labels, N, "triplet");
  std::vector<double> dist(N * N, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) {
      double s = 0;
      for (std::size_t d = 0; d < D; ++d) {
        const double diff = features.data[i * D + d] - features.data[j * D + d];
        s += diff * diff;
      }
      dist[i * N + j] = dist[j * N + i] = std::sqrt(std::max(s, 1e-12));
    }
  LossResult<T> r;
  r.grad = Tensor<T>(features.shape);
  std::vector<double> grad(N * D, 0.0);
  double total = 0.0;
  // d ||f_i - f_j|| / d f_i = (f_i - f_j) / d_ij; zero once clamped.
  auto add_dist_grad = [&](std::size_t i, std::size_t j, double scale) {
    const double d = dist[i * N + j];
    if (d <= 1e-6) return;
    for (std::size_t k = 0; k < D; ++k) {
      const double g = scale * (features.data[i * D + k] - features.data[j * D + k]) / d;
      grad[i * D + k] += g;
      grad[j * D + k] -= g;
    }
  };
  for (std::size_t a = 0; a < N; ++a) {
    std::size_t pos = N, neg = N;
    for (std::size_t j = 0; j < N; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (pos == N || dist[a * N + j] > dist[a * N + pos]) pos = j;
      } else {
        if (neg == N || dist[a * N + j] < dist[a * N + neg]) neg = j;
      }
    }
    const double x = dist[a * N + pos] - dist[a * N + neg];
    total += detail::softplus(x);
    const double s = detail::sigmoid(x) / N;
    add_dist_grad(a, pos, s);
    add_dist_grad(a, neg, -s);
  }
  for (std::size_t i = 0; i < N * D; ++i) r.grad.data[i] = static_cast<T>(grad[i]);
  r.value = total / N;
  return r;
}

/// One anchor's circle term from its positive and negative similarities:
///   log(1 + sum_n exp(g an (sn - m)) * sum_p exp(-g ap (sp - 1 + m))).
inline double circle_anchor_loss(const std::vector<double>& sp, const std::vector<double>& sn, double margin, double scale) {
  if (sp.empty() || sn.empty()) throw ArgumentError("circle: an anchor needs at least one positive and one negative");
  auto lse = [](const std::vector<double>& z) {
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0;
    for (double v : z) sum += std::exp(v - mx);
    return mx + std::log(sum);
  };
  std::vector<double> zp, zn;
  for (double s : sp) zp.push_back(-scale * std::max(0.0, 1.0 + margin - s) * (s - (1.0 - margin)));
  for (double s : sn) zn.push_back(scale * std::max(0.0, s + margin) * (s - margin));
  return detail::softplus(lse(zp) + lse(zn));
}

/// Pairwise circle loss on cosine similarities of internally L2-normalized
/// features. Per anchor:
///   log(1 + sum_n exp(g an (sn - m)) * sum_p exp(-g ap (sp - 1 + m)))
/// with an = max(0, sn + m), ap = max(0, 1 + m - sp). The weights an, ap are
/// held constant in the gradient (stop-gradient), as in the original loss.
template <typename T>
LossResult<T> circle_pairwise(const Tensor<T>& features, const std::vector<int>& labels, double margin, double scale) {
  if (features.rank() != 2) throw ShapeError("circle: features must be [N, D]");
  const std::size_t N = features.dim(0), D = features.dim(1);
  detail::check_batch_labels(labels, N, "circle");
  std::vector<double> unit(N * D), norms(N);
  for (std::size_t i = 0; i < N; ++i) {
    double s = 0;
    for (std::size_t d = 0; d < D; ++d) s += double(features.data[i * D + d]) * features.data[i * D + d];
    norms[i] = std::max(std::sqrt(s), 1e-12);
    for (std::size_t d = 0; d < D; ++d) unit[i * D + d] = features.data[i * D + d] / norms[i];
  }
  std::vector<double> sim(N * N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0;
      for (std::size_t d = 0; d < D; ++d) s += unit[i * D + d] * unit[j * D + d];
      sim[i * N + j] = s;
    }
  const double delta_p = 1.0 - margin, delta_n = margin;
  std::vector<double> dsim(N * N, 0.0);
  double total = 0.0;
  std::vector<double> zp, zn;
  std::vector<std::size_t> ip, in;
  for (std::size_t a = 0; a < N; ++a) {
    zp.clear();
    zn.clear();
    ip.clear();
    in.clear();
    for (std::size_t j = 0; j < N; ++j) {
      if (j == a) continue;
      const double s = sim[a * N + j];
      if (labels[j] == labels[a]) {
        zp.push_back(-scale * std::max(0.0, 1.0 + margin - s) * (s - delta_p));
        ip.push_back(j);
      } else {
        zn.push_back(scale * std::max(0.0, s + margin) * (s - delta_n));
        in.push_back(j);
      }
    }
    auto lse = [](const std::vector<double>& z, std::vector<double>& soft) {
      const double mx = *std::max_element(z.begin(), z.end());
      double sum = 0;
      soft.resize(z.size());
      for (std::size_t k = 0; k < z.size(); ++k) sum += (soft[k] = std::exp(z[k] - mx));
      for (auto& v : soft) v /= sum;
      return mx + std::log(sum);
    };
    std::vector<double> sp_soft, sn_soft;
    const double x = lse(zp, sp_soft) + lse(zn, sn_soft);
    std::vector<double> sp, sn;
    for (std::size_t j : ip) sp.push_back(sim[a * N + j]);
    for (std::size_t j : in) sn.push_back(sim[a * N + j]);
    total += circle_anchor_loss(sp, sn, margin, scale);
    const double outer = detail::sigmoid(x) / N;
    for (std::size_t k = 0; k < ip.size(); ++k) {
      const double s = sim[a * N + ip[k]];
      dsim[a * N + ip[k]] += outer * sp_soft[k] * (-scale * std::max(0.0, 1.0 + margin - s));
    }
    for (std::size_t k = 0; k < in.size(); ++k) {
      const double s = sim[a * N + in[k]];
      dsim[a * N + in[k]] += outer * sn_soft[k] * (scale * std::max(0.0, s + margin));
    }
  }
  // s_ij = u_i . u_j, then back through u = f / ||f||.
  std::vector<double> du(N * D, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      const double g = dsim[i * N + j];
      if (g == 0.0) continue;
      for (std::size_t d = 0; d < D; ++d) {
        du[i * D + d] += g * unit[j * D + d];
        du[j * D + d] += g * unit[i * D + d];
      }
    }
  LossResult<T> r;
  r.grad = Tensor<T>(features.shape);
  for (std::size_t i = 0; i < N; ++i) {
    double dot = 0;
    for (std::size_t d = 0; d < D; ++d) dot += du[i * D + d] * unit[i * D + d];
    for (std::size_t d = 0; d < D; ++d) {
      r.grad.data[i * D + d] = static_cast<T>((du[i * D + d] - unit[i * D + d] * dot) / norms[i]);
    }
  }
  r.value = total / N;
  return r;
}

template <typename T>
struct CombinedLoss {
  double ce = 0.0, triplet = 0.0, circle = 0.0, total = 0.0;
  Tensor<T> grad_logits;
  Tensor<T> grad_features;
};

/// w_ce CE + w_tri triplet + w_circle circle. Zero-weight terms are skipped.
template <typename T>
CombinedLoss<T> combined_loss(const Tensor<T>& logits, const Tensor<T>& features, const Tensor<T>& targets,
                              const std::vector<int>& labels, const LossWeights& w) {
  w.validate();
  CombinedLoss<T> out;
  out.grad_logits = Tensor<T>(logits.shape);
  out.grad_features = Tensor<T>(features.shape);
  if (w.w_ce > 0) {
    auto r = ce_label_smooth(logits, targets, w.smoothing);
    out.ce = r.value;
    for (std::size_t i = 0; i < r.grad.size(); ++i) out.grad_logits.data[i] += static_cast<T>(w.w_ce * r.grad.data[i]);
  }
  if (w.w_tri > 0) {
    auto r = triplet_softmargin_batchhard(features, labels);
    out.triplet = r.value;
    for (std::size_t i = 0; i < r.grad.size(); ++i) out.grad_features.data[i] += static_cast<T>(w.w_tri * r.grad.data[i]);
  }
  if (w.w_circle > 0) {
    auto r = circle_pairwise(features, labels, w.circle_margin, w.circle_scale);
    out.circle = r.value;
    for (std::size_t i = 0; i < r.grad.size(); ++i) out.grad_features.data[i] += static_cast<T>(w.w_circle * r.grad.data[i]);
  }
  out.total = w.w_ce * out.ce + w.w_tri * out.triplet + w.w_circle * out.circle;
  return out;
}

}  // namespace noseprint
