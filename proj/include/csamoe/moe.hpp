#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "csamoe/backbone.hpp"
#include "csamoe/csa.hpp"
#include "csamoe/errors.hpp"
#include "csamoe/layers.hpp"
#include "csamoe/ops.hpp"
#include "csamoe/rng.hpp"

namespace csamoe {

enum class Variant { csa_moe, resnet_moe, resnet18 };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::csa_moe: return "csa_moe";
    case Variant::resnet_moe: return "resnet_moe";
    case Variant::resnet18: return "resnet18";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "csa_moe") return Variant::csa_moe;
  if (s == "resnet_moe") return Variant::resnet_moe;
  if (s == "resnet18") return Variant::resnet18;
  throw UsageError("unknown variant '" + s + "' (expected csa_moe, resnet_moe or resnet18)");
}

inline Preset parse_preset(const std::string& s) {
  if (s == "tiny") return Preset::tiny;
  if (s == "full") return Preset::full;
  throw UsageError("unknown preset '" + s + "' (expected tiny or full)");
}

/// Expert order is fixed everywhere: whole image, tumor core, boundary band.
enum class ExpertId : std::size_t { img = 0, tumor = 1, boundary = 2 };
inline constexpr std::array<const char*, 3> kExpertNames{"img", "tumor", "boundary"};

struct ModelConfig {
  Preset preset = Preset::tiny;
  Variant variant = Variant::csa_moe;
  bool drop_tumor = false;
  bool drop_boundary = false;
  double gate_dropout = 0.2;

  BackboneConfig backbone() const { return BackboneConfig::for_preset(preset); }
  CsaConfig csa() const { return CsaConfig::for_backbone(backbone()); }
  std::size_t gate_hidden() const { return preset == Preset::full ? 64 : 16; }
  bool uses_csa() const { return variant == Variant::csa_moe; }
  bool has_gate() const { return variant != Variant::resnet18 && active_experts().size() > 1; }

  std::vector<std::size_t> active_experts() const {
    if (variant == Variant::resnet18) return {0};
    std::vector<std::size_t> e{0};
    if (!drop_tumor) e.push_back(1);
    if (!drop_boundary) e.push_back(2);
    return e;
  }
};

/// One branch: residual backbone, optional cross-stage attention, GAP.
template <class T>
struct Expert {
  Backbone<T> backbone;
  std::optional<CrossStageAttention<T>> csa;

  Expert() = default;
  Expert(const ModelConfig& cfg, const std::string& name, std::uint64_t seed) {
    Rng rng = make_stream(seed, Stream::init, 0, fnv1a64(name));
    backbone = Backbone<T>(cfg.backbone(), rng);
    if (cfg.uses_csa()) {
      Rng csa_rng = make_stream(seed, Stream::init, 0, fnv1a64(name + ".csa"));
      csa.emplace(cfg.csa(), csa_rng);
    }
  }

  Tensor<T> operator()(const Tensor<T>& view, bool training, CsaTrace<T>* trace = nullptr) {
    const auto stages = backbone(view, training);
    if (!csa) return stages.gap;
    return global_avg_pool((*csa)(stages.stages, trace));
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    backbone.visit(prefix, fn);
    if (csa) csa->visit(prefix + ".csa", fn);
  }
};

/// softmax(fc2(dropout(relu(bn(fc1(concat))))))
template <class T>
struct GatingNetwork {
  Linear<T> fc1;
  BatchNorm<T> bn;
  Linear<T> fc2;
  double dropout_rate = 0.2;

  GatingNetwork() = default;
  GatingNetwork(std::size_t in, std::size_t hidden, std::size_t experts, double rate, Rng& rng)
      : fc1(in, hidden, LinearInit::uniform_fan_in, rng),
        bn(hidden),
        fc2(hidden, experts, LinearInit::uniform_fan_in, rng),
        dropout_rate(rate) {}

  Tensor<T> operator()(const std::vector<Tensor<T>>& features, bool training, Rng& rng) {
    const Tensor<T> h = relu(bn(fc1(concat(features)), training));
    return softmax(fc2(dropout(h, dropout_rate, training, rng)));
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fc1.visit(prefix + ".fc1", fn);
    bn.visit(prefix + ".bn", fn);
    fc2.visit(prefix + ".fc2", fn);
  }
};

/// Batched views, each [B,3,H,W]. Views of dropped experts may be left empty.
template <class T>
struct MultiViewBatch {
  std::array<Tensor<T>, 3> views;
  std::vector<T> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return labels.size(); }
};

template <class T>
struct ModelOutput {
  Tensor<T> prob;         // [B]
  Tensor<T> gate_active;  // [B, active experts]; undefined without a gate
  std::vector<T> gate;    // B×3 row-major, zero for dropped experts
  std::array<Tensor<T>, 3> features;
  std::array<CsaTrace<T>, 3> traces;

  T gate_at(std::size_t b, ExpertId e) const { return gate[b * 3 + static_cast<std::size_t>(e)]; }
};

template <class T>
class CsaMoeModel {
 public:
  CsaMoeModel() = default;
  CsaMoeModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    for (std::size_t e : cfg.active_experts())
      experts_[e].emplace(cfg, expert_prefix(e), seed);
    const std::size_t feat = cfg.backbone().feature_dim();
    if (cfg.has_gate()) {
      Rng rng = make_stream(seed, Stream::init, 0, fnv1a64("gate"));
      gate_.emplace(feat * cfg.active_experts().size(), cfg.gate_hidden(),
                    cfg.active_experts().size(), cfg.gate_dropout, rng);
    }
    Rng rng = make_stream(seed, Stream::init, 0, fnv1a64("head"));
    head_ = Linear<T>(feat, 1, LinearInit::uniform_fan_in, rng);
  }

  static std::string expert_prefix(std::size_t e) { return std::string("expert_") + kExpertNames[e]; }

  const ModelConfig& config() const { return cfg_; }
  Expert<T>& expert(ExpertId e) { return experts_.at(static_cast<std::size_t>(e)).value(); }
  bool has_expert(ExpertId e) const { return experts_.at(static_cast<std::size_t>(e)).has_value(); }
  GatingNetwork<T>& gate() { return gate_.value(); }
  Linear<T>& head() { return head_; }

  ModelOutput<T> operator()(const MultiViewBatch<T>& batch, bool training, Rng& dropout_rng) {
    ModelOutput<T> out;
    std::vector<Tensor<T>> feats;
    const auto active = cfg_.active_experts();
    for (std::size_t e : active) {
      const Tensor<T>& view = batch.views[e];
      if (!view.defined())
        throw UsageError(std::string("missing ") + kExpertNames[e] + " view for " +
                         expert_prefix(e));
      out.features[e] = (*experts_[e])(view, training, &out.traces[e]);
      feats.push_back(out.features[e]);
    }
    const std::size_t B = feats[0].dim(0);
    out.gate.assign(B * 3, T(0));
    Tensor<T> fused;
    if (gate_) {
      out.gate_active = (*gate_)(feats, training, dropout_rng);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < active.size(); ++j)
          out.gate[b * 3 + active[j]] = out.gate_active[b * active.size() + j];
      fused = weighted_sum(out.gate_active, stack(feats));
    } else {
      for (std::size_t b = 0; b < B; ++b) out.gate[b * 3 + active[0]] = T(1);
      fused = feats[0];
    }
    out.prob = reshape(sigmoid(head_(fused)), Shape{B});
    return out;
  }

  /// fn(name, tensor, kind) over every parameter and running buffer.
  template <class Fn>
  void visit(Fn&& fn) {
    for (std::size_t e = 0; e < 3; ++e)
      if (experts_[e]) experts_[e]->visit(expert_prefix(e), fn);
    if (gate_) gate_->visit("gate", fn);
    head_.visit("head", fn);
  }

  /// Learnable leaves only.
  ParamSet<T> parameters() {
    ParamSet<T> ps;
    visit([&](const std::string& name, Tensor<T>& t, ParamKind kind) {
      if (kind == ParamKind::param) ps.add(name, t);
    });
    return ps;
  }

  /// Parameters plus BN running statistics; what a checkpoint stores.
  ParamSet<T> state() {
    ParamSet<T> ps;
    visit([&](const std::string& name, Tensor<T>& t, ParamKind) { ps.add(name, t); });
    return ps;
  }

 private:
  ModelConfig cfg_;
  std::array<std::optional<Expert<T>>, 3> experts_;
  std::optional<GatingNetwork<T>> gate_;
  Linear<T> head_;
};

// ---------------------------------------------------------------------------
// Closed-form accounting (parameters and multiply-accumulates) from config.

struct CountRow {
  std::string component;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct CountReport {
  std::vector<CountRow> rows;
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;
  double reference_params_m = 0;  // published reference, millions
  double reference_flops_g = 0;   // published reference, GMACs
};

namespace detail {

inline std::uint64_t conv_macs(std::size_t cin, std::size_t cout, std::size_t k, std::size_t out) {
  return static_cast<std::uint64_t>(cin) * cout * k * k * out * out;
}

inline CountRow count_backbone(const BackboneConfig& c) {
  CountRow r{"backbone"};
  std::size_t s = conv_out_size(c.input_size, c.stem_kernel, c.stem_stride, c.stem_pad);
  r.params += c.in_channels * c.stem_channels * c.stem_kernel * c.stem_kernel + 2 * c.stem_channels;
  r.macs += conv_macs(c.in_channels, c.stem_channels, c.stem_kernel, s);
  s = conv_out_size(s, c.pool_kernel, c.pool_stride, c.pool_pad);
  std::size_t cin = c.stem_channels;
  for (std::size_t st = 0; st < 4; ++st) {
    const std::size_t cout = c.stage_channels[st];
    for (std::size_t b = 0; b < c.blocks_per_stage; ++b) {
      const bool downsample = st > 0 && b == 0;
      const std::size_t out = downsample ? conv_out_size(s, 3, 2, 1) : s;
      r.params += cin * cout * 9 + 2 * cout + cout * cout * 9 + 2 * cout;
      r.macs += conv_macs(cin, cout, 3, out) + conv_macs(cout, cout, 3, out);
      if (downsample || cin != cout) {
        r.params += cin * cout + 2 * cout;
        r.macs += conv_macs(cin, cout, 1, out);
      }
      s = out;
      cin = cout;
    }
  }
  return r;
}

inline CountRow count_csa(const CsaConfig& c) {
  CountRow r{"csa"};
  r.params = c.param_count();
  for (std::size_t ch : c.stage_channels) r.macs += 2 * ch * c.attn_dim;  // key + value
  r.macs += 4 * c.attn_dim;                                              // scores
  r.macs += 4 * c.attn_dim;                                              // fused value
  r.macs += c.attn_dim * c.bottleneck + c.bottleneck * c.out_channels();
  return r;
}

}  // namespace detail

inline CountReport count_model(const ModelConfig& cfg) {
  CountReport rep;
  const auto bb = detail::count_backbone(cfg.backbone());
  const auto active = cfg.active_experts();
  const std::size_t feat = cfg.backbone().feature_dim();
  for (std::size_t e : active) {
    CountRow r = bb;
    r.component = std::string("expert_") + kExpertNames[e] + ".backbone";
    rep.rows.push_back(r);
    if (cfg.uses_csa()) {
      CountRow c = detail::count_csa(cfg.csa());
      c.component = std::string("expert_") + kExpertNames[e] + ".csa";
      rep.rows.push_back(c);
    }
  }
  if (cfg.has_gate()) {
    const std::size_t in = feat * active.size(), h = cfg.gate_hidden(), n = active.size();
    CountRow g{"gate"};
    g.params = in * h + h + 2 * h + h * n + n;
    g.macs = in * h + h * n + n * feat;  // fc1, fc2, weighted fusion
    rep.rows.push_back(g);
  }
  rep.rows.push_back(CountRow{"head", feat + 1, feat});
  for (const auto& r : rep.rows) {
    rep.total_params += r.params;
    rep.total_macs += r.macs;
  }
  if (cfg.preset == Preset::full && !cfg.drop_tumor && !cfg.drop_boundary) {
    switch (cfg.variant) {
      case Variant::resnet18: rep.reference_params_m = 11.178; rep.reference_flops_g = 1.824; break;
      case Variant::resnet_moe: rep.reference_params_m = 33.958; rep.reference_flops_g = 5.471; break;
      case Variant::csa_moe: rep.reference_params_m = 34.820; rep.reference_flops_g = 5.472; break;
    }
  }
  return rep;
}

}  // namespace csamoe
