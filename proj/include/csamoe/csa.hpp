#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "csamoe/backbone.hpp"
#include "csamoe/errors.hpp"
#include "csamoe/layers.hpp"
#include "csamoe/ops.hpp"

namespace csamoe {

struct CsaConfig {
  std::array<std::size_t, 4> stage_channels{8, 16, 32, 64};
  std::size_t attn_dim = 32;
  std::size_t bottleneck = 16;

  static CsaConfig for_backbone(const BackboneConfig& b) {
    CsaConfig c;
    c.stage_channels = b.stage_channels;
    if (b.preset == Preset::full) {
      c.attn_dim = 128;
      c.bottleneck = 64;
    } else {
      c.attn_dim = 32;
      c.bottleneck = 16;
    }
    return c;
  }
  std::size_t out_channels() const { return stage_channels[3]; }

  /// Closed-form parameter count of one module.
  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t c : stage_channels) n += 2 * (c * attn_dim + attn_dim);
    n += attn_dim;
    n += bottleneck * attn_dim + bottleneck;
    n += out_channels() * bottleneck + out_channels();
    return n;
  }
};

/// Stage weights and channel weights of one forward pass.
template <class T>
struct CsaTrace {
  Tensor<T> alpha;            // [B,4]
  Tensor<T> fused;            // [B,d]
  Tensor<T> channel_weights;  // [B,C4]
};

template <class T>
struct CsaAggregate {
  std::array<Tensor<T>, 4> keys;    // each [B,d]
  std::array<Tensor<T>, 4> values;  // each [B,d]
};

template <class T>
class CrossStageAttention {
 public:
  std::array<Linear<T>, 4> key;
  std::array<Linear<T>, 4> value;
  Tensor<T> query;  // [1,d]
  Linear<T> down;
  Linear<T> up;

  CrossStageAttention() = default;
  CrossStageAttention(const CsaConfig& cfg, Rng& rng) : cfg_(cfg) {
    for (std::size_t k = 0; k < 4; ++k) {
      key[k] = Linear<T>(cfg.stage_channels[k], cfg.attn_dim, LinearInit::he_normal, rng);
      value[k] = Linear<T>(cfg.stage_channels[k], cfg.attn_dim, LinearInit::he_normal, rng);
    }
    query = normal_leaf<T>({1, cfg.attn_dim}, 1.0 / std::sqrt(static_cast<double>(cfg.attn_dim)),
                           rng);
    down = Linear<T>(cfg.attn_dim, cfg.bottleneck, LinearInit::he_normal, rng);
    up = Linear<T>(cfg.bottleneck, cfg.out_channels(), LinearInit::he_normal, rng);
  }

  const CsaConfig& config() const { return cfg_; }

  /// Spatial mean of each stage, then per-stage key/value projections.
  CsaAggregate<T> aggregate(const std::array<Tensor<T>, 4>& stages) const {
    CsaAggregate<T> out;
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& f = stages[k];
      if (f.rank() != 4 || f.dim(1) != cfg_.stage_channels[k])
        throw DimensionError("cross-stage attention: stage " + std::to_string(k + 1) +
                             " expects " + std::to_string(cfg_.stage_channels[k]) +
                             " channels, got " + shape_str(f.shape()));
      const Tensor<T> z = global_avg_pool(f);
      out.keys[k] = key[k](z);
      out.values[k] = value[k](z);
    }
    return out;
  }

  /// softmax over stages of Q·K_k / sqrt(d); returns [B,4].
  Tensor<T> weights(const std::array<Tensor<T>, 4>& keys) const {
    std::vector<Tensor<T>> scores;
    scores.reserve(4);
    for (const auto& k : keys) scores.push_back(linear(k, query, static_cast<const Tensor<T>*>(nullptr)));
    const T inv = T(1) / std::sqrt(static_cast<T>(query.dim(1)));
    return softmax(scale(concat(scores), inv));
  }

  /// Fuses values with alpha, squeezes/excites to channel weights and scales F4.
  Tensor<T> recalibrate(const std::array<Tensor<T>, 4>& values, const Tensor<T>& alpha,
                        const Tensor<T>& f4, CsaTrace<T>* trace = nullptr) const {
    const Tensor<T> fused = weighted_sum(alpha, stack(std::vector<Tensor<T>>(values.begin(),
                                                                             values.end())));
    const Tensor<T> w_ch = sigmoid(up(relu(down(fused))));
    if (trace) {
      trace->alpha = alpha;
      trace->fused = fused;
      trace->channel_weights = w_ch;
    }
    return channel_scale(f4, w_ch);
  }

  Tensor<T> operator()(const std::array<Tensor<T>, 4>& stages, CsaTrace<T>* trace = nullptr) const {
    const auto agg = aggregate(stages);
    const Tensor<T> alpha = weights(agg.keys);
    return recalibrate(agg.values, alpha, stages[3], trace);
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    for (std::size_t k = 0; k < 4; ++k) {
      key[k].visit(prefix + ".key" + std::to_string(k + 1), fn);
      value[k].visit(prefix + ".value" + std::to_string(k + 1), fn);
    }
    fn(prefix + ".query", query, ParamKind::param);
    down.visit(prefix + ".down", fn);
    up.visit(prefix + ".up", fn);
  }

 private:
  CsaConfig cfg_;
};

}  // namespace csamoe
