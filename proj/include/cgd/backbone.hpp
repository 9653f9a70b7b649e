#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cgd/errors.hpp"
#include "cgd/io.hpp"
#include "cgd/tensor.hpp"

namespace cgd {

/// Plain conv(3x3, pad 1) -> ReLU stages. The last stage's stride is forced to 1
/// when remove_last_downsample is set, doubling the final spatial extent.
struct BackboneConfig {
  std::vector<std::size_t> stage_channels{8, 16, 32};
  std::vector<std::size_t> stage_strides{2, 2, 2};
  bool remove_last_downsample = true;
  std::size_t input_size = 32;

  static constexpr std::size_t kInputChannels = 3;
  static constexpr std::size_t kKernel = 3;

  void validate() const {
    if (stage_channels.size() != stage_strides.size()) throw ConfigError("backbone: stage lists differ in length");
    if (stage_channels.size() < 2) throw ConfigError("backbone: at least two stages required");
    for (auto c : stage_channels)
      if (c == 0) throw ConfigError("backbone: zero channels in a stage");
    for (auto s : stage_strides)
      if (s != 1 && s != 2) throw ConfigError("backbone: strides must be 1 or 2");
    if (input_size == 0) throw ConfigError("backbone: input_size must be positive");
  }

  std::vector<std::size_t> effective_strides() const {
    auto s = stage_strides;
    if (remove_last_downsample) s.back() = 1;
    return s;
  }

  std::size_t output_extent() const {
    std::size_t extent = input_size;
    for (auto s : effective_strides()) extent = (extent + 2 - kKernel) / s + 1;
    return extent;
  }

  std::size_t output_channels() const { return stage_channels.back(); }
};

struct FeatureMap {
  Tensor tensor;  // N x C x H x W
  std::size_t channels = 0, height = 0, width = 0;
};

class Backbone {
 public:
  /// He fan-in normal initialisation of conv weights, zero biases, seeded.
  Backbone(BackboneConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    std::size_t in = BackboneConfig::kInputChannels;
    const std::size_t k = BackboneConfig::kKernel;
    for (auto out : config_.stage_channels) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in * k * k)));
      std::vector<double> w(out * in * k * k);
      for (auto& v : w) v = dist(rng);
      weights_.emplace_back(Shape{out, in, k, k}, std::move(w), true);
      biases_.push_back(Tensor::zeros({out}, true));
      in = out;
    }
  }

  const BackboneConfig& config() const { return config_; }

  FeatureMap forward(const Tensor& batch) const {
    const auto s = config_.input_size;
    if (batch.ndim() != 4 || batch.dim(1) != BackboneConfig::kInputChannels || batch.dim(2) != s || batch.dim(3) != s) {
      throw std::invalid_argument("backbone expects N x 3 x " + std::to_string(s) + " x " + std::to_string(s) +
                                  " input, got " + shape_str(batch.shape()));
    }
    auto strides = config_.effective_strides();
    Tensor x = batch;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      x = relu(bias_add(conv2d(x, weights_[i], strides[i], 1), biases_[i]));
    }
    return FeatureMap{x, x.dim(1), x.dim(2), x.dim(3)};
  }

  NamedTensors parameters() const {
    NamedTensors params;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      params.emplace_back("backbone.stage" + std::to_string(i) + ".weight", weights_[i]);
      params.emplace_back("backbone.stage" + std::to_string(i) + ".bias", biases_[i]);
    }
    return params;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }

 private:
  BackboneConfig config_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

inline Backbone build_backbone(const BackboneConfig& config, std::uint64_t seed) { return Backbone(config, seed); }

}  // namespace cgd
