#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "csamoe/errors.hpp"
#include "csamoe/layers.hpp"
#include "csamoe/ops.hpp"

namespace csamoe {

enum class Preset { tiny, full };

inline const char* to_string(Preset p) { return p == Preset::full ? "full" : "tiny"; }

/// Shape schedule of the four-stage residual extractor.
///
/// full: 224×224 input, 7×7/2 stem + 3×3/2 max pool, channels 64..512,
///       two blocks per stage (the ResNet-18 layout).
/// tiny: 64×64 input, 3×3/1 stem + 2×2/2 max pool, channels 8..64, one block
///       per stage. Only used for fast tests and gradient checks.
struct BackboneConfig {
  Preset preset = Preset::tiny;
  std::size_t input_size = 64;
  std::size_t in_channels = 3;
  std::size_t stem_channels = 8;
  std::array<std::size_t, 4> stage_channels{8, 16, 32, 64};
  std::size_t blocks_per_stage = 1;
  std::size_t stem_kernel = 3, stem_stride = 1, stem_pad = 1;
  std::size_t pool_kernel = 2, pool_stride = 2, pool_pad = 0;

  static BackboneConfig full() {
    BackboneConfig c;
    c.preset = Preset::full;
    c.input_size = 224;
    c.stem_channels = 64;
    c.stage_channels = {64, 128, 256, 512};
    c.blocks_per_stage = 2;
    c.stem_kernel = 7;
    c.stem_stride = 2;
    c.stem_pad = 3;
    c.pool_kernel = 3;
    c.pool_stride = 2;
    c.pool_pad = 1;
    return c;
  }
  static BackboneConfig tiny() { return BackboneConfig{}; }
  static BackboneConfig for_preset(Preset p) { return p == Preset::full ? full() : tiny(); }

  std::size_t stem_output_size() const {
    const std::size_t conv = conv_out_size(input_size, stem_kernel, stem_stride, stem_pad);
    return conv_out_size(conv, pool_kernel, pool_stride, pool_pad);
  }
  /// Spatial side of stage k's output (k = 0..3).
  std::size_t stage_size(std::size_t k) const {
    std::size_t s = stem_output_size();
    for (std::size_t i = 1; i <= k; ++i) s = conv_out_size(s, 3, 2, 1);
    return s;
  }
  std::size_t feature_dim() const { return stage_channels[3]; }
};

/// conv-BN-ReLU-conv-BN main path plus identity or 1×1/2 conv-BN shortcut,
/// followed by ReLU after the addition.
template <class T>
struct ResidualBlock {
  Conv2d<T> conv1;
  BatchNorm<T> bn1;
  Conv2d<T> conv2;
  BatchNorm<T> bn2;
  std::optional<Conv2d<T>> down;
  std::optional<BatchNorm<T>> down_bn;

  ResidualBlock() = default;
  ResidualBlock(std::size_t cin, std::size_t cout, bool downsample, Rng& rng)
      : conv1(cin, cout, 3, downsample ? 2 : 1, 1, rng),
        bn1(cout),
        conv2(cout, cout, 3, 1, 1, rng),
        bn2(cout) {
    if (downsample || cin != cout) {
      down.emplace(cin, cout, 1, downsample ? 2 : 1, 0, rng);
      down_bn.emplace(cout);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    if (x.rank() != 4 || x.dim(1) != conv1.in_channels())
      throw DimensionError("residual block expects " + std::to_string(conv1.in_channels()) +
                           " input channels, got " + shape_str(x.shape()));
    Tensor<T> main = bn2(conv2(relu(bn1(conv1(x), training))), training);
    Tensor<T> shortcut = down ? (*down_bn)((*down)(x), training) : x;
    return relu(add(main, shortcut));
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    conv1.visit(prefix + ".conv1", fn);
    bn1.visit(prefix + ".bn1", fn);
    conv2.visit(prefix + ".conv2", fn);
    bn2.visit(prefix + ".bn2", fn);
    if (down) {
      down->visit(prefix + ".downsample.conv", fn);
      down_bn->visit(prefix + ".downsample.bn", fn);
    }
  }
};

/// All four stage maps plus the global-average-pooled last stage.
template <class T>
struct StageOutputs {
  std::array<Tensor<T>, 4> stages;
  Tensor<T> gap;
};

template <class T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, Rng& rng)
      : cfg_(cfg),
        stem_conv_(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride,
                   cfg.stem_pad, rng),
        stem_bn_(cfg.stem_channels) {
    std::size_t cin = cfg.stem_channels;
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t cout = cfg.stage_channels[s];
      for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
        stages_[s].emplace_back(cin, cout, s > 0 && b == 0, rng);
        cin = cout;
      }
    }
  }

  const BackboneConfig& config() const { return cfg_; }

  StageOutputs<T> operator()(const Tensor<T>& x, bool training) {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.input_size ||
        x.dim(3) != cfg_.input_size)
      throw DimensionError("backbone expects [B," + std::to_string(cfg_.in_channels) + "," +
                           std::to_string(cfg_.input_size) + "," +
                           std::to_string(cfg_.input_size) + "], got " + shape_str(x.shape()));
    Tensor<T> h = relu(stem_bn_(stem_conv_(x), training));
    h = max_pool2d(h, cfg_.pool_kernel, cfg_.pool_stride, cfg_.pool_pad);
    StageOutputs<T> out;
    for (std::size_t s = 0; s < 4; ++s) {
      for (auto& block : stages_[s]) h = block(h, training);
      out.stages[s] = h;
    }
    out.gap = global_avg_pool(h);
    return out;
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    stem_conv_.visit(prefix + ".stem.conv", fn);
    stem_bn_.visit(prefix + ".stem.bn", fn);
    for (std::size_t s = 0; s < 4; ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].visit(prefix + ".stage" + std::to_string(s + 1) + ".block" +
                                std::to_string(b + 1),
                            fn);
  }

  std::vector<ResidualBlock<T>>& stage(std::size_t s) { return stages_.at(s); }

 private:
  BackboneConfig cfg_;
  Conv2d<T> stem_conv_;
  BatchNorm<T> stem_bn_;
  std::array<std::vector<ResidualBlock<T>>, 4> stages_;
};

}  // namespace csamoe
