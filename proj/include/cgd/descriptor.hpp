#pragma once

/**
 * @file descriptor.hpp
 * @brief Global descriptor branches and their combination into one embedding.
 *
 * Each branch pools the backbone feature map with a power mean (SPoC p=1,
 * GeM p>1, MAC as the exact maximum), projects it with a bias-free FC layer and
 * L2-normalises it. Branch outputs are concatenated and normalised again. The
 * pooled vector of the first branch also feeds the auxiliary classifier.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cgd/backbone.hpp"
#include "cgd/errors.hpp"
#include "cgd/io.hpp"
#include "cgd/tensor.hpp"

namespace cgd {

enum class PoolKind { spoc, mac, gem };

/// Lift applied before the GeM power so that x^(1/p) has a finite gradient.
inline constexpr double kGemFloor = 1e-6;
inline constexpr double kDefaultGemPower = 3.0;
inline constexpr double kNormEpsilon = 1e-12;

struct DescriptorKind {
  PoolKind tag = PoolKind::spoc;
  double p = kDefaultGemPower;  // meaningful for GeM only

  static DescriptorKind spoc() { return {PoolKind::spoc, 1.0}; }
  static DescriptorKind mac() { return {PoolKind::mac, 0.0}; }
  static DescriptorKind gem(double p = kDefaultGemPower) {
    if (!(p >= 1.0)) throw ConfigError("GeM power must be >= 1, got " + std::to_string(p));
    return {PoolKind::gem, p};
  }

  static DescriptorKind from_letter(char c) {
    switch (c) {
      case 'S': return spoc();
      case 'M': return mac();
      case 'G': return gem();
      default: throw ConfigError(std::string("unknown global descriptor '") + c + "'");
    }
  }

  char letter() const {
    switch (tag) {
      case PoolKind::spoc: return 'S';
      case PoolKind::mac: return 'M';
      case PoolKind::gem: return 'G';
    }
    return '?';
  }
};

/// The configurations the framework admits: every ordering would be redundant
/// because only the first letter (the auxiliary branch) carries meaning.
inline constexpr std::array<std::string_view, 12> kConfigurations{"S",  "M",  "G",   "SM",  "MS",  "SG",
                                                                  "GS", "MG", "GM", "SMG", "MSG", "GSM"};

inline bool is_valid_configuration(std::string_view name) {
  return std::find(kConfigurations.begin(), kConfigurations.end(), name) != kConfigurations.end();
}

struct DescriptorConfig {
  std::vector<DescriptorKind> branches;
  std::size_t total_dim = 0;
  std::vector<std::size_t> per_branch_dims;
  std::size_t aux_branch = 0;

  /// Branch dims are floor(total/n) each with the remainder added to the first.
  static DescriptorConfig parse(std::string_view name, std::size_t total_dim) {
    if (!is_valid_configuration(name)) {
      throw ConfigError("invalid descriptor configuration '" + std::string(name) +
                        "' (expected one of S, M, G, SM, MS, SG, GS, MG, GM, SMG, MSG, GSM)");
    }
    if (total_dim < name.size()) throw ConfigError("embedding dimension smaller than branch count");
    DescriptorConfig cfg;
    cfg.total_dim = total_dim;
    for (char c : name) cfg.branches.push_back(DescriptorKind::from_letter(c));
    std::size_t n = cfg.branches.size();
    cfg.per_branch_dims.assign(n, total_dim / n);
    cfg.per_branch_dims[0] += total_dim % n;
    return cfg;
  }

  std::string name() const {
    std::string s;
    for (const auto& b : branches) s += b.letter();
    return s;
  }

  std::size_t size() const { return branches.size(); }
  const DescriptorKind& aux_kind() const { return branches.at(aux_branch); }
};

// ---------------------------------------------------------------------------
// Branch operations

// Fused GeM over the last axis of N x C x L. Each row is divided by its maximum before
// the power so large p cannot underflow; the result is unchanged by homogeneity.
inline Tensor gem_pool(const Tensor& flat, double p) {
  const std::size_t rows = flat.dim(0) * flat.dim(1), len = flat.dim(2);
  const double inv_len = 1.0 / static_cast<double>(len);
  std::vector<double> out(rows), row_max(rows), row_mean(rows);
  auto in = flat.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double m = kGemFloor;
    for (std::size_t i = 0; i < len; ++i) m = std::max(m, in[r * len + i]);
    double acc = 0.0;
    for (std::size_t i = 0; i < len; ++i) acc += std::pow(std::max(in[r * len + i], kGemFloor) / m, p);
    row_max[r] = m;
    row_mean[r] = acc * inv_len;
    out[r] = m * std::pow(row_mean[r], 1.0 / p);
  }
  return make_op("gem_pool", {flat.dim(0), flat.dim(1)}, std::move(out), {flat},
                 [=](detail::Node& o) {
                   auto* g = input_grad(o, 0);
                   if (!g) return;
                   const auto& x = o.inputs[0]->data;
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double coeff = o.grad[r] * inv_len * std::pow(row_mean[r], 1.0 / p - 1.0);
                     for (std::size_t i = 0; i < len; ++i) {
                       const double v = x[r * len + i];
                       if (v > kGemFloor) (*g)[r * len + i] += coeff * std::pow(v / row_max[r], p - 1.0);
                     }
                   }
                 });
}

/// Power-mean pooling over the spatial extent of an N x C x H x W map -> N x C.
inline Tensor generalized_pool(const Tensor& fmap, const DescriptorKind& kind) {
  if (fmap.ndim() != 4) throw std::invalid_argument("generalized_pool expects N x C x H x W, got " + shape_str(fmap.shape()));
  Tensor flat = reshape(fmap, {fmap.dim(0), fmap.dim(1), fmap.dim(2) * fmap.dim(3)});
  switch (kind.tag) {
    case PoolKind::spoc: return mean_reduce(flat, 2);
    case PoolKind::mac: return max_reduce(flat, 2);
    case PoolKind::gem: {
      if (!(kind.p >= 1.0)) throw ConfigError("GeM power must be >= 1");
      return gem_pool(flat, kind.p);
    }
  }
  throw std::logic_error("unreachable");
}

inline Tensor generalized_pool(const FeatureMap& fmap, const DescriptorKind& kind) {
  return generalized_pool(fmap.tensor, kind);
}

struct BranchEmbedding {
  Tensor vector;  // N x k, unit rows
};

/// rows = l2_normalize(pooled . W^T) for pooled N x C and weight k x C.
inline BranchEmbedding project_branch(const Tensor& pooled, const Tensor& weight) {
  if (pooled.ndim() != 2 || weight.ndim() != 2 || weight.dim(1) != pooled.dim(1)) {
    throw std::invalid_argument("project_branch: weight " + shape_str(weight.shape()) + " incompatible with pooled " +
                                shape_str(pooled.shape()));
  }
  if (weight.dim(0) > weight.dim(1)) {
    std::cerr << "warning: branch projection expands " << weight.dim(1) << " -> " << weight.dim(0) << " dims\n";
  }
  return {l2_normalize(matmul(pooled, transpose(weight)), 1, kNormEpsilon)};
}

enum class CombineMethod { concat, sum };

struct CombinedEmbedding {
  Tensor vector;  // N x D, unit rows
  std::vector<std::pair<std::size_t, std::size_t>> block_bounds;  // [begin, end) per branch
};

/**
 * concat: l2_normalize(branch_1 (+) ... (+) branch_n), the framework's combination.
 * sum: l2_normalize(mean of branches); requires equal branch dims.
 */
inline CombinedEmbedding combine(const std::vector<BranchEmbedding>& branches, CombineMethod method) {
  if (branches.empty()) throw std::invalid_argument("combine: no branches");
  CombinedEmbedding out;
  if (method == CombineMethod::concat) {
    std::vector<Tensor> parts;
    std::size_t begin = 0;
    for (const auto& b : branches) {
      parts.push_back(b.vector);
      out.block_bounds.emplace_back(begin, begin + b.vector.dim(1));
      begin += b.vector.dim(1);
    }
    Tensor joined = parts.size() == 1 ? parts[0] : concat(parts, 1);
    out.vector = l2_normalize(joined, 1, kNormEpsilon);
    return out;
  }
  Tensor acc = branches[0].vector;
  for (std::size_t i = 1; i < branches.size(); ++i) {
    if (branches[i].vector.shape() != acc.shape()) {
      throw std::invalid_argument("combine(sum): branch dims differ " + shape_str(branches[i].vector.shape()) + " vs " +
                                  shape_str(acc.shape()));
    }
    acc = add(acc, branches[i].vector);
  }
  acc = scale(acc, 1.0 / static_cast<double>(branches.size()));
  out.vector = l2_normalize(acc, 1, kNormEpsilon);
  out.block_bounds.emplace_back(0, acc.dim(1));
  return out;
}

// ---------------------------------------------------------------------------
// Full model

/// cgd: per-branch FC + norm, concat, norm. type_a: same wiring, but trained with one
/// ranking loss per branch. type_b: raw pooled vectors concatenated, one shared FC.
enum class Architecture { cgd, type_a, type_b };

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::cgd: return "cgd";
    case Architecture::type_a: return "typeA";
    case Architecture::type_b: return "typeB";
  }
  return "?";
}

inline Architecture parse_architecture(std::string_view s) {
  if (s == "cgd" || s == "CGD") return Architecture::cgd;
  if (s == "typeA" || s == "A" || s == "type_a") return Architecture::type_a;
  if (s == "typeB" || s == "B" || s == "type_b") return Architecture::type_b;
  throw ConfigError("unknown architecture mode '" + std::string(s) + "' (expected cgd, typeA, typeB)");
}

inline std::string to_string(CombineMethod m) { return m == CombineMethod::concat ? "concat" : "sum"; }

inline CombineMethod parse_combine_method(std::string_view s) {
  if (s == "concat") return CombineMethod::concat;
  if (s == "sum") return CombineMethod::sum;
  throw ConfigError("unknown combination method '" + std::string(s) + "' (expected concat or sum)");
}

struct ModelConfig {
  DescriptorConfig descriptor;
  BackboneConfig backbone;
  Architecture architecture = Architecture::cgd;
  CombineMethod combine = CombineMethod::concat;
  std::size_t num_classes = 2;
};

class CgdModel {
 public:
  struct Output {
    FeatureMap fmap;
    std::vector<Tensor> pooled;              // N x C per branch
    std::vector<BranchEmbedding> branches;   // empty for type_b
    CombinedEmbedding combined;
  };

  CgdModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), backbone_(config_.backbone, seed) {
    const auto& desc = config_.descriptor;
    if (desc.branches.empty()) throw ConfigError("descriptor configuration has no branches");
    if (config_.num_classes < 2) throw ConfigError("auxiliary classifier needs at least two classes");
    if (config_.combine == CombineMethod::sum && config_.architecture != Architecture::cgd) {
      throw ConfigError("sum combination is only defined for the cgd architecture");
    }
    const std::size_t c = config_.backbone.output_channels();
    std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
    auto init = [&rng](Shape shape, double stddev) {
      std::normal_distribution<double> dist(0.0, stddev);
      std::vector<double> v(shape_numel(shape));
      for (auto& x : v) x = dist(rng);
      return Tensor(std::move(shape), std::move(v), true);
    };
    const double fc_std = 1.0 / std::sqrt(static_cast<double>(c));
    if (config_.architecture == Architecture::type_b) {
      shared_fc_ = init({desc.total_dim, c * desc.size()}, 1.0 / std::sqrt(static_cast<double>(c * desc.size())));
    } else {
      for (std::size_t i = 0; i < desc.size(); ++i) {
        std::size_t k = config_.combine == CombineMethod::sum ? desc.total_dim : desc.per_branch_dims[i];
        branch_fc_.push_back(init({k, c}, fc_std));
      }
    }
    classifier_weight_ = init({config_.num_classes, c}, fc_std);
    classifier_bias_ = Tensor::zeros({config_.num_classes}, true);
  }

  const ModelConfig& config() const { return config_; }
  const Backbone& backbone() const { return backbone_; }
  const Tensor& classifier_weight() const { return classifier_weight_; }
  const Tensor& classifier_bias() const { return classifier_bias_; }

  Output forward(const Tensor& batch) const {
    Output out;
    out.fmap = backbone_.forward(batch);
    for (const auto& kind : config_.descriptor.branches) out.pooled.push_back(generalized_pool(out.fmap, kind));
    if (config_.architecture == Architecture::type_b) {
      Tensor raw = out.pooled.size() == 1 ? out.pooled[0] : concat(out.pooled, 1);
      out.combined.vector = l2_normalize(matmul(raw, transpose(shared_fc_)), 1, kNormEpsilon);
      out.combined.block_bounds.emplace_back(0, config_.descriptor.total_dim);
      return out;
    }
    for (std::size_t i = 0; i < out.pooled.size(); ++i) out.branches.push_back(project_branch(out.pooled[i], branch_fc_[i]));
    out.combined = combine(out.branches, config_.combine);
    return out;
  }

  /// Inference embedding (no graph recorded).
  Tensor embed(const Tensor& batch) const {
    NoGradGuard guard;
    return forward(batch).combined.vector;
  }

  /// Backbone + projection parameters (everything the ranking loss reaches).
  NamedTensors embedding_parameters() const {
    auto params = backbone_.parameters();
    for (std::size_t i = 0; i < branch_fc_.size(); ++i) params.emplace_back("branch" + std::to_string(i) + ".fc", branch_fc_[i]);
    if (shared_fc_.defined()) params.emplace_back("shared.fc", shared_fc_);
    return params;
  }

  NamedTensors classifier_parameters() const {
    return {{"classifier.weight", classifier_weight_}, {"classifier.bias", classifier_bias_}};
  }

  NamedTensors parameters() const {
    auto params = embedding_parameters();
    for (auto& p : classifier_parameters()) params.push_back(std::move(p));
    return params;
  }

  /// FC projection weights only (branch FCs or the shared type B FC).
  std::size_t projection_parameter_count() const {
    std::size_t n = shared_fc_.defined() ? shared_fc_.numel() : 0;
    for (const auto& w : branch_fc_) n += w.numel();
    return n;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }

  /// Detached copies of all parameters, rounded to float32 (the checkpoint precision).
  NamedTensors state() const {
    NamedTensors out;
    for (const auto& [name, t] : parameters()) {
      auto copy = t.detach();
      for (auto& v : copy.mutable_data()) v = static_cast<double>(static_cast<float>(v));
      out.emplace_back(name, std::move(copy));
    }
    return out;
  }

  void load_state(const NamedTensors& state) {
    auto params = parameters();
    if (state.size() != params.size()) {
      throw ConfigError("checkpoint has " + std::to_string(state.size()) + " entries, model expects " +
                        std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, t] = params[i];
      const auto& [sname, st] = state[i];
      if (name != sname) throw ConfigError("checkpoint entry '" + sname + "' where '" + name + "' was expected");
      if (st.shape() != t.shape()) {
        throw ConfigError("checkpoint entry '" + name + "' has shape " + shape_str(st.shape()) + ", config implies " +
                          shape_str(t.shape()));
      }
      std::copy(st.data().begin(), st.data().end(), t.mutable_data().begin());
    }
  }

 private:
  ModelConfig config_;
  Backbone backbone_;
  std::vector<Tensor> branch_fc_;
  Tensor shared_fc_;
  Tensor classifier_weight_;
  Tensor classifier_bias_;
};

inline CgdModel build_cgd(const DescriptorConfig& descriptor, const BackboneConfig& backbone, Architecture mode,
                          std::size_t num_classes, std::uint64_t seed, CombineMethod combine = CombineMethod::concat) {
  return CgdModel(ModelConfig{descriptor, backbone, mode, combine, num_classes}, seed);
}

// ---------------------------------------------------------------------------
// Configuration selection

/**
 * Two-branch configuration from single-descriptor results: the best single
 * descriptor leads (it drives the auxiliary loss), the runner-up follows.
 * Equal scores are ordered S < M < G.
 */
inline DescriptorConfig select_best_config(const std::map<PoolKind, double>& single_results, std::size_t total_dim) {
  const std::array<PoolKind, 3> order{PoolKind::spoc, PoolKind::mac, PoolKind::gem};
  std::vector<std::pair<PoolKind, double>> ranked;
  for (auto kind : order) {
    auto it = single_results.find(kind);
    if (it == single_results.end()) throw ConfigError("select_best_config: missing single-descriptor result");
    ranked.emplace_back(kind, it->second);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::string name{DescriptorKind{ranked[0].first}.letter(), DescriptorKind{ranked[1].first}.letter()};
  return DescriptorConfig::parse(name, total_dim);
}

}  // namespace cgd
