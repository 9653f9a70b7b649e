#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cgd/errors.hpp"
#include "cgd/tensor.hpp"

namespace cgd {

using Label = int;

enum class TripletVariant { hard_margin, soft_margin };

inline TripletVariant parse_triplet_variant(std::string_view s) {
  if (s == "hard" || s == "hard-margin" || s == "hard_margin") return TripletVariant::hard_margin;
  if (s == "soft" || s == "soft-margin" || s == "soft_margin") return TripletVariant::soft_margin;
  throw ConfigError("unknown triplet variant '" + std::string(s) + "' (expected hard-margin or soft-margin)");
}

inline std::string to_string(TripletVariant v) { return v == TripletVariant::hard_margin ? "hard-margin" : "soft-margin"; }

struct TripletConfig {
  double margin = 0.1;
  TripletVariant variant = TripletVariant::hard_margin;

  void validate() const {
    if (!(margin >= 0.0)) throw ConfigError("triplet margin must be >= 0");
  }
};

/// Index of the hardest positive and negative for every anchor.
struct HardestPairs {
  std::vector<std::size_t> positive, negative;
  std::vector<double> d_pos, d_neg;
};

namespace detail {

inline void check_triplet_batch(std::span<const Label> labels) {
  std::map<Label, std::size_t> counts;
  for (auto l : labels) ++counts[l];
  if (counts.size() < 2) throw std::invalid_argument("batch_hard_triplet: batch needs at least two classes");
  for (const auto& [label, n] : counts) {
    if (n < 2) {
      throw std::invalid_argument("batch_hard_triplet: class " + std::to_string(label) +
                                  " has a single instance in the batch; no positive exists");
    }
  }
}

inline std::vector<double> pairwise_euclidean(std::span<const double> x, std::size_t n, std::size_t d) {
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double diff = x[i * d + k] - x[j * d + k];
        acc += diff * diff;
      }
      dist[i * n + j] = dist[j * n + i] = std::sqrt(acc);
    }
  return dist;
}

}  // namespace detail

/// Farthest same-class and nearest other-class member per anchor (first index on ties).
inline HardestPairs mine_hardest(std::span<const double> x, std::span<const Label> labels, std::size_t dim) {
  const std::size_t n = labels.size();
  auto dist = detail::pairwise_euclidean(x, n, dim);
  HardestPairs h;
  h.positive.resize(n);
  h.negative.resize(n);
  h.d_pos.assign(n, -1.0);
  h.d_neg.assign(n, std::numeric_limits<double>::infinity());
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      double d = dist[a * n + j];
      if (labels[j] == labels[a]) {
        if (d > h.d_pos[a]) {
          h.d_pos[a] = d;
          h.positive[a] = j;
        }
      } else if (d < h.d_neg[a]) {
        h.d_neg[a] = d;
        h.negative[a] = j;
      }
    }
  }
  return h;
}

/**
 * Batch-hard triplet loss over N x D embeddings with Euclidean distances.
 * hard-margin: mean_a max(0, m + d+(a) - d-(a)); soft-margin: mean_a log(1 + exp(d+(a) - d-(a))).
 */
inline Tensor batch_hard_triplet(const Tensor& embeddings, std::span<const Label> labels, const TripletConfig& cfg) {
  cfg.validate();
  if (embeddings.ndim() != 2 || embeddings.dim(0) != labels.size()) {
    throw std::invalid_argument("batch_hard_triplet: embeddings " + shape_str(embeddings.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  }
  detail::check_triplet_batch(labels);
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  auto pairs = mine_hardest(embeddings.data(), labels, d);
  std::vector<double> coeff(n);  // d(loss)/d(d+ - d-) per anchor
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    double gap = pairs.d_pos[a] - pairs.d_neg[a];
    if (cfg.variant == TripletVariant::hard_margin) {
      double l = cfg.margin + gap;
      total += l > 0.0 ? l : 0.0;
      coeff[a] = l > 0.0 ? 1.0 : 0.0;
    } else {
      // log1p(exp(g)) without overflow
      total += gap > 0.0 ? gap + std::log1p(std::exp(-gap)) : std::log1p(std::exp(gap));
      coeff[a] = 1.0 / (1.0 + std::exp(-gap));
    }
    coeff[a] /= static_cast<double>(n);
  }
  total /= static_cast<double>(n);
  return make_op("batch_hard_triplet", {}, {total}, {embeddings},
                 [n, d, pairs = std::move(pairs), coeff = std::move(coeff)](detail::Node& o) {
                   auto* g = input_grad(o, 0);
                   if (!g) return;
                   const auto& x = o.inputs[0]->data;
                   const double up = o.grad[0];
                   auto push = [&](std::size_t a, std::size_t b, double dist, double w) {
                     if (dist <= 0.0 || w == 0.0) return;  // subgradient 0 at coincident points
                     for (std::size_t k = 0; k < d; ++k) {
                       double v = w * (x[a * d + k] - x[b * d + k]) / dist;
                       (*g)[a * d + k] += v;
                       (*g)[b * d + k] -= v;
                     }
                   };
                   for (std::size_t a = 0; a < n; ++a) {
                     double w = up * coeff[a];
                     push(a, pairs.positive[a], pairs.d_pos[a], w);
                     push(a, pairs.negative[a], pairs.d_neg[a], -w);
                   }
                 });
}

/// Any ranking loss over (embeddings, labels) -> scalar; batch-hard triplet is the default.
using RankingLoss = std::function<Tensor(const Tensor&, std::span<const Label>)>;

inline RankingLoss make_triplet_loss(TripletConfig cfg) {
  return [cfg](const Tensor& e, std::span<const Label> labels) { return batch_hard_triplet(e, labels, cfg); };
}

// ---------------------------------------------------------------------------
// Auxiliary classification

struct SoftmaxLossConfig {
  double temperature = 0.5;
  double label_smoothing = 0.1;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be > 0");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label smoothing must be in [0, 1)");
  }
};

/// (1 - eps) on the true class, eps / (M - 1) on every other class.
inline std::vector<double> smoothed_targets(std::span<const Label> labels, std::size_t num_classes, double eps) {
  std::vector<double> t(labels.size() * num_classes, eps / static_cast<double>(num_classes - 1));
  for (std::size_t i = 0; i < labels.size(); ++i) t[i * num_classes + static_cast<std::size_t>(labels[i])] = 1.0 - eps;
  return t;
}

/**
 * Temperature-scaled, label-smoothed softmax cross-entropy on the pooled descriptor
 * of the first branch: logits = (f W^T + b) / tau, loss = -mean_i sum_j t_ij log softmax_ij.
 */
inline Tensor aux_softmax_loss(const Tensor& pooled, std::span<const Label> labels, const Tensor& weight,
                               const Tensor& bias, const SoftmaxLossConfig& cfg) {
  cfg.validate();
  if (pooled.ndim() != 2 || pooled.dim(0) != labels.size()) {
    throw std::invalid_argument("aux_softmax_loss: descriptor " + shape_str(pooled.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  }
  const std::size_t m = weight.dim(0);
  if (m < 2) throw std::invalid_argument("aux_softmax_loss: need at least two classes");
  for (auto l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= m) {
      throw std::invalid_argument("aux_softmax_loss: label " + std::to_string(l) + " outside [0, " + std::to_string(m) + ")");
    }
  }
  Tensor logits = scale(bias_add(matmul(pooled, transpose(weight)), bias), 1.0 / cfg.temperature);
  Tensor targets({labels.size(), m}, smoothed_targets(labels, m, cfg.label_smoothing));
  return scale(sum(mul(log_softmax(logits), targets)), -1.0 / static_cast<double>(labels.size()));
}

// ---------------------------------------------------------------------------

struct LossBundle {
  Tensor ranking;
  Tensor classification;
  Tensor total;
};

/// total = rank_weight * ranking + cls_weight * classification. An undefined
/// classification tensor (ranking-only training) contributes 0.
inline LossBundle joint_loss(const Tensor& ranking, const Tensor& classification, double rank_weight = 1.0,
                             double cls_weight = 1.0) {
  LossBundle b{ranking, classification.defined() ? classification : Tensor::scalar(0.0), Tensor{}};
  if (!std::isfinite(b.ranking.item()) || !std::isfinite(b.classification.item())) {
    throw NumericError("non-finite loss (ranking " + std::to_string(b.ranking.item()) + ", classification " +
                       std::to_string(b.classification.item()) + ")");
  }
  Tensor r = rank_weight == 1.0 ? b.ranking : scale(b.ranking, rank_weight);
  if (!classification.defined()) {
    b.total = r;
  } else {
    b.total = add(r, cls_weight == 1.0 ? b.classification : scale(b.classification, cls_weight));
  }
  return b;
}

}  // namespace cgd
