#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cgd/dataio.hpp"
#include "cgd/descriptor.hpp"
#include "cgd/errors.hpp"
#include "cgd/loss.hpp"
#include "cgd/retrieval.hpp"

namespace cgd {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_p = 8;  // classes per batch
  std::size_t batch_k = 4;  // instances per class
  double lr = 1e-4;
  double decay_factor = 0.5;
  std::size_t decay_every = 8;
  std::uint64_t seed = 1;

  std::size_t batch_size() const { return batch_p * batch_k; }

  void validate() const {
    if (batch_p < 2) throw ConfigError("train: batch_p must be >= 2 (negatives are needed)");
    if (batch_k < 2) throw ConfigError("train: batch_k must be >= 2 (positives are needed)");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and >= 0");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("train: decay_factor must be in (0, 1]");
    if (decay_every == 0) throw ConfigError("train: decay_every must be positive");
  }
};

/// lr * decay_factor ^ floor(epoch / decay_every), for 0-based epoch index.
inline double scheduled_lr(const TrainConfig& cfg, std::size_t epoch) {
  return cfg.lr * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

// ---------------------------------------------------------------------------
// PK sampling

/**
 * Indices of p * k items: k from each of p distinct classes, grouped by class.
 * Classes qualify with at least two members; a class smaller than k is sampled
 * with replacement.
 */
template <typename Rng>
std::vector<std::size_t> pk_sample(std::span<const Label> labels, std::size_t p, std::size_t k, Rng& rng) {
  std::map<Label, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<Label> eligible;
  for (const auto& [label, members] : by_class)
    if (members.size() >= 2) eligible.push_back(label);
  if (eligible.size() < p) {
    throw DataError("pk_sample: " + std::to_string(p) + " classes requested but only " + std::to_string(eligible.size()) +
                    " have two or more instances");
  }
  std::shuffle(eligible.begin(), eligible.end(), rng);
  std::vector<std::size_t> out;
  out.reserve(p * k);
  for (std::size_t c = 0; c < p; ++c) {
    auto members = by_class[eligible[c]];
    if (members.size() >= k) {
      std::shuffle(members.begin(), members.end(), rng);
      out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
      for (std::size_t i = 0; i < k; ++i) out.push_back(members[pick(rng)]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(NamedTensors params, AdamOptions options = {}) : params_(std::move(params)), options_(options) {
    for (const auto& [name, t] : params_) {
      first_.emplace_back(t.numel(), 0.0);
      second_.emplace_back(t.numel(), 0.0);
    }
  }

  /// One bias-corrected update. Every parameter must carry a gradient.
  void step(double lr) {
    for (const auto& [name, t] : params_) {
      if (!t.has_grad()) throw std::logic_error("adam: parameter '" + name + "' has no gradient");
    }
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(options_.beta1, t);
    const double c2 = 1.0 - std::pow(options_.beta2, t);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& param = params_[i].second;
      auto g = param.grad();
      auto w = param.mutable_data();
      auto& m = first_[i];
      auto& v = second_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
        v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
        w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  std::uint64_t step_count() const { return steps_; }
  const std::vector<double>& first_moment(std::size_t i) const { return first_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return second_[i]; }
  const NamedTensors& parameters() const { return params_; }

 private:
  NamedTensors params_;
  AdamOptions options_;
  std::vector<std::vector<double>> first_, second_;
  std::uint64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  TrainConfig train;
  TripletConfig triplet;
  SoftmaxLossConfig softmax;
  double rank_weight = 1.0;
  double cls_weight = 1.0;  // 0 disables the auxiliary classifier entirely

  bool uses_classifier() const { return cls_weight != 0.0; }
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double rank_loss = 0.0;
  double cls_loss = 0.0;
  double total = 0.0;
  double val_recall_at_1 = 0.0;
  double lr = 0.0;
  std::vector<double> branch_rank_losses;  // type A only
};

/// "epoch\trank_loss\tcls_loss\ttotal\tval_recall@1\tlr"
inline std::string format_metrics_line(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\t%.6f\t%.9g", m.epoch, m.rank_loss, m.cls_loss, m.total,
                m.val_recall_at_1, m.lr);
  return buf;
}

inline constexpr const char* kMetricsHeader = "epoch\trank_loss\tcls_loss\ttotal\tval_recall@1\tlr";

struct TrainResult {
  std::vector<EpochMetrics> log;
  NamedTensors best_state;  // float32-rounded parameters of the best validation epoch
  double best_recall = -1.0;
  std::size_t best_epoch = 0;  // 0 = initial parameters
  bool aborted = false;
  std::string abort_reason;
};

/// Validation Recall@1 with the query set doubling as gallery (self excluded).
inline double self_recall_at_1(const CgdModel& model, const LabeledImages& data) {
  auto emb = embed_dataset(model, data);
  return evaluate_recall(emb, emb, {1}, true).at(1);
}

struct StepLosses {
  double rank = 0.0, cls = 0.0, total = 0.0;
  std::vector<double> branch_rank;
};

/// Forward, joint loss and backward for one batch; gradients land in the parameters.
inline StepLosses compute_gradients(const CgdModel& model, const Tensor& batch, std::span<const Label> labels,
                                    const TrainOptions& opt) {
  auto out = model.forward(batch);
  StepLosses s;
  Tensor ranking;
  if (model.config().architecture == Architecture::type_a) {
    for (const auto& b : out.branches) {
      Tensor l = batch_hard_triplet(b.vector, labels, opt.triplet);
      s.branch_rank.push_back(l.item());
      ranking = ranking.defined() ? add(ranking, l) : l;
    }
  } else {
    ranking = batch_hard_triplet(out.combined.vector, labels, opt.triplet);
  }
  Tensor classification;
  if (opt.uses_classifier()) {
    classification = aux_softmax_loss(out.pooled[model.config().descriptor.aux_branch], labels, model.classifier_weight(),
                                      model.classifier_bias(), opt.softmax);
  }
  auto bundle = joint_loss(ranking, classification, opt.rank_weight, opt.cls_weight);
  s.rank = bundle.ranking.item();
  s.cls = bundle.classification.item();
  s.total = bundle.total.item();
  if (!std::isfinite(s.total)) throw NumericError("non-finite total loss");
  backward(bundle.total);
  return s;
}

/**
 * Joint training with PK batches. One epoch is floor(N_train / (p k)) batches (at
 * least one). After every epoch the validation Recall@1 is measured and the best
 * parameters are kept. A non-finite loss stops training with `aborted` set; the best
 * state so far stays available.
 */
inline TrainResult train(CgdModel& model, const LabeledImages& train_set, const LabeledImages& val_set,
                         const TrainOptions& opt, const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  opt.train.validate();
  opt.triplet.validate();
  opt.softmax.validate();
  const auto& cfg = opt.train;
  const std::size_t size = model.config().backbone.input_size;

  NamedTensors trainable = model.embedding_parameters();
  if (opt.uses_classifier())
    for (auto& p : model.classifier_parameters()) trainable.push_back(std::move(p));
  Adam adam(trainable);

  std::mt19937_64 sampler_rng(cfg.seed * 2 + 1);
  std::mt19937_64 augment_rng(cfg.seed * 2 + 2);
  const std::size_t batches = std::max<std::size_t>(1, train_set.size() / cfg.batch_size());

  TrainResult result;
  result.best_state = model.state();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = scheduled_lr(cfg, epoch);
    try {
      for (std::size_t b = 0; b < batches; ++b) {
        auto idx = pk_sample(train_set.labels, cfg.batch_p, cfg.batch_k, sampler_rng);
        std::vector<Tensor> images;
        std::vector<Label> labels;
        for (auto i : idx) {
          images.push_back(augment(train_set.images[i], augment_rng, true, size));
          labels.push_back(train_set.labels[i]);
        }
        adam.zero_grad();
        auto s = compute_gradients(model, stack_images(images), labels, opt);
        adam.step(m.lr);
        m.rank_loss += s.rank / static_cast<double>(batches);
        m.cls_loss += s.cls / static_cast<double>(batches);
        m.total += s.total / static_cast<double>(batches);
        if (m.branch_rank_losses.empty()) m.branch_rank_losses.assign(s.branch_rank.size(), 0.0);
        for (std::size_t i = 0; i < s.branch_rank.size(); ++i) m.branch_rank_losses[i] += s.branch_rank[i] / static_cast<double>(batches);
      }
    } catch (const NumericError& e) {
      result.aborted = true;
      result.abort_reason = "epoch " + std::to_string(epoch + 1) + ": " + e.what();
      model.load_state(result.best_state);
      return result;
    }
    m.val_recall_at_1 = self_recall_at_1(model, val_set);
    if (m.val_recall_at_1 > result.best_recall) {
      result.best_recall = m.val_recall_at_1;
      result.best_epoch = m.epoch;
      result.best_state = model.state();
    }
    result.log.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

}  // namespace cgd
