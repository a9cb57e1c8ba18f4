#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "csamoe/backbone.hpp"
#include "csamoe/csa.hpp"
#include "csamoe/gradcheck.hpp"
#include "csamoe/moe.hpp"

using namespace csamoe;

namespace {

Tensor<double> randn(Rng& rng, Shape shape, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = nd(rng);
  return t;
}

std::array<Tensor<double>, 4> random_stages(Rng& rng, std::size_t b) {
  const auto cfg = BackboneConfig::tiny();
  std::array<Tensor<double>, 4> st;
  for (std::size_t k = 0; k < 4; ++k)
    st[k] = randn(rng, {b, cfg.stage_channels[k], cfg.stage_size(k), cfg.stage_size(k)});
  return st;
}

void fill(Tensor<double>& t, double v) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), v); }

/// Scalar-loop evaluation of pooling, projections, attention and recalibration.
std::vector<double> csa_oracle(const CrossStageAttention<double>& csa,
                               const std::array<Tensor<double>, 4>& st, std::vector<double>* alpha_out) {
  const std::size_t B = st[0].dim(0), d = csa.config().attn_dim, nb = csa.config().bottleneck;
  const std::size_t C4 = st[3].dim(1), hw4 = st[3].dim(2) * st[3].dim(3);
  std::vector<double> out(st[3].numel());
  for (std::size_t b = 0; b < B; ++b) {
    double K[4][128], V[4][128];
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t C = st[k].dim(1), hw = st[k].dim(2) * st[k].dim(3);
      std::vector<double> z(C, 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < hw; ++i) z[c] += st[k][(b * C + c) * hw + i];
        z[c] /= static_cast<double>(hw);
      }
      for (std::size_t j = 0; j < d; ++j) {
        double kk = csa.key[k].bias[j], vv = csa.value[k].bias[j];
        for (std::size_t c = 0; c < C; ++c) {
          kk += csa.key[k].weight[j * C + c] * z[c];
          vv += csa.value[k].weight[j * C + c] * z[c];
        }
        K[k][j] = kk;
        V[k][j] = vv;
      }
    }
    double s[4], mx = -1e300, tot = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      s[k] = 0;
      for (std::size_t j = 0; j < d; ++j) s[k] += csa.query[j] * K[k][j];
      s[k] /= std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[k]);
    }
    double a[4];
    for (std::size_t k = 0; k < 4; ++k) tot += (a[k] = std::exp(s[k] - mx));
    for (std::size_t k = 0; k < 4; ++k) {
      a[k] /= tot;
      if (alpha_out) alpha_out->push_back(a[k]);
    }
    std::vector<double> fused(d, 0.0), hid(nb);
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < 4; ++k) fused[j] += a[k] * V[k][j];
    for (std::size_t i = 0; i < nb; ++i) {
      double h = csa.down.bias[i];
      for (std::size_t j = 0; j < d; ++j) h += csa.down.weight[i * d + j] * fused[j];
      hid[i] = std::max(0.0, h);
    }
    for (std::size_t c = 0; c < C4; ++c) {
      double u = csa.up.bias[c];
      for (std::size_t i = 0; i < nb; ++i) u += csa.up.weight[c * nb + i] * hid[i];
      const double w = 1.0 / (1.0 + std::exp(-u));
      for (std::size_t i = 0; i < hw4; ++i) {
        const std::size_t idx = (b * C4 + c) * hw4 + i;
        out[idx] = w * st[3][idx];
      }
    }
  }
  return out;
}

MultiViewBatch<float> random_batch(std::size_t b, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  MultiViewBatch<float> batch;
  for (auto& v : batch.views) {
    v = Tensor<float>({b, 3, side, side});
    for (auto& x : v.mutable_data()) x = static_cast<float>(uniform01(rng));
  }
  for (std::size_t i = 0; i < b; ++i) batch.labels.push_back(static_cast<float>(i % 2));
  return batch;
}

}  // namespace

// ---------------------------------------------------------------------------
// Backbone

TEST(Backbone, FullPresetStageShapes) {
  Rng rng(1);
  Backbone<float> bb(BackboneConfig::full(), rng);
  Tensor<float> x({2, 3, 224, 224}, 0.5f);
  const auto out = bb(x, false);
  EXPECT_EQ(out.stages[0].shape(), (Shape{2, 64, 56, 56}));
  EXPECT_EQ(out.stages[1].shape(), (Shape{2, 128, 28, 28}));
  EXPECT_EQ(out.stages[2].shape(), (Shape{2, 256, 14, 14}));
  EXPECT_EQ(out.stages[3].shape(), (Shape{2, 512, 7, 7}));
  EXPECT_EQ(out.gap.shape(), (Shape{2, 512}));
}

TEST(Backbone, TinyPresetShapesForBatchSizes) {
  Rng rng(2);
  Backbone<float> bb(BackboneConfig::tiny(), rng);
  for (std::size_t b = 1; b <= 8; ++b) {
    Tensor<float> x({b, 3, 64, 64}, 0.25f);
    const auto out = bb(x, true);
    const std::size_t sizes[] = {32, 16, 8, 4}, ch[] = {8, 16, 32, 64};
    for (std::size_t k = 0; k < 4; ++k)
      EXPECT_EQ(out.stages[k].shape(), (Shape{b, ch[k], sizes[k], sizes[k]}));
    EXPECT_EQ(out.gap.shape(), (Shape{b, 64}));
  }
}

TEST(Backbone, WrongInputSizeIsDimensionError) {
  Rng rng(3);
  Backbone<float> bb(BackboneConfig::tiny(), rng);
  EXPECT_THROW(bb(Tensor<float>({1, 3, 32, 32}), false), DimensionError);
  EXPECT_THROW(bb(Tensor<float>({1, 1, 64, 64}), false), DimensionError);
}

TEST(Backbone, DoubledInputStaysFinite) {
  Rng rng(4), src(5);
  Backbone<float> bb(BackboneConfig::tiny(), rng);
  Tensor<float> x({2, 3, 64, 64});
  for (auto& v : x.mutable_data()) v = static_cast<float>(uniform01(src));
  const auto a = bb(x, false);
  for (auto& v : x.mutable_data()) v *= 2.0f;
  const auto b = bb(x, false);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(a.stages[k].shape(), b.stages[k].shape());
  for (float v : b.gap.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Backbone, ZeroConvsGiveZeroGap) {
  Rng rng(6);
  Backbone<double> bb(BackboneConfig::tiny(), rng);
  bb.visit("bb", [](const std::string& name, Tensor<double>& t, ParamKind) {
    if (name.find("conv") != std::string::npos) fill(t, 0.0);
  });
  const auto out = bb(Tensor<double>({2, 3, 64, 64}), false);
  for (double v : out.gap.data()) EXPECT_EQ(v, 0.0);
}

TEST(ResidualBlock, ZeroMainPathIsRelu) {
  Rng rng(7);
  ResidualBlock<double> blk(4, 4, false, rng);
  fill(blk.conv1.weight, 0.0);
  fill(blk.conv2.weight, 0.0);
  Rng src(8);
  const Tensor<double> x = randn(src, {2, 4, 5, 5});
  const auto y = blk(x, false);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], std::max(0.0, x[i]));
}

TEST(ResidualBlock, DownsampleHalvesAndDoubles) {
  Rng rng(9);
  ResidualBlock<float> blk(64, 128, true, rng);
  const auto y = blk(Tensor<float>({1, 64, 56, 56}, 1.0f), true);
  EXPECT_EQ(y.shape(), (Shape{1, 128, 28, 28}));
  EXPECT_THROW(blk(Tensor<float>({1, 32, 56, 56}), true), DimensionError);
}

TEST(ResidualBlock, InputGradientMatchesFiniteDifferences) {
  Rng rng(10), src(11);
  auto blk = std::make_shared<ResidualBlock<double>>(3, 6, true, rng);
  gradcheck::Inputs in{randn(src, {2, 3, 6, 6})};
  in[0].set_requires_grad(true);
  const gradcheck::Objective obj = [blk](const gradcheck::Inputs& v) { return sum((*blk)(v[0], true)); };
  EXPECT_LT(gradcheck::max_relative_error(obj, in, {}, src), 1e-4);
}

// ---------------------------------------------------------------------------
// Cross-stage attention

TEST(Csa, ZeroStagesGiveZeroKeysAndValues) {
  Rng rng(12);
  CrossStageAttention<double> csa(CsaConfig{}, rng);
  Rng src(13);
  auto st = random_stages(src, 2);
  for (auto& s : st) fill(s, 0.0);
  const auto agg = csa.aggregate(st);
  for (std::size_t k = 0; k < 4; ++k) {
    for (double v : agg.keys[k].data()) EXPECT_EQ(v, 0.0);
    for (double v : agg.values[k].data()) EXPECT_EQ(v, 0.0);
  }
  const auto f4hat = csa(st);
  for (double v : f4hat.data()) EXPECT_EQ(v, 0.0);
}

TEST(Csa, PooledMeanMatchesDirectSummation) {
  Rng rng(14), src(15);
  CrossStageAttention<double> csa(CsaConfig{}, rng);
  // identity key projection on stage 1 exposes z_1 directly
  const auto st = random_stages(src, 3);
  csa.key[0] = Linear<double>(8, 8, LinearInit::he_normal, rng);
  fill(csa.key[0].weight, 0.0);
  for (std::size_t i = 0; i < 8; ++i) csa.key[0].weight.mutable_data()[i * 8 + i] = 1.0;
  const auto agg = csa.aggregate(st);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < 8; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < 32 * 32; ++i) s += st[0][(b * 8 + c) * 1024 + i];
      EXPECT_NEAR(agg.keys[0][b * 8 + c], s / 1024.0, 1e-6);
    }
}

TEST(Csa, ConstantStageGivesAffineKey) {
  Rng rng(16), src(17);
  CrossStageAttention<double> csa(CsaConfig{}, rng);
  auto st = random_stages(src, 1);
  fill(st[1], 0.7);
  const auto agg = csa.aggregate(st);
  for (std::size_t j = 0; j < 32; ++j) {
    double expect = csa.key[1].bias[j];
    for (std::size_t c = 0; c < 16; ++c) expect += csa.key[1].weight[j * 16 + c] * 0.7;
    EXPECT_NEAR(agg.keys[1][j], expect, 1e-12);
  }
}

TEST(Csa, StageWeightExamples) {
  Rng rng(18), src(19);
  CrossStageAttention<double> csa(CsaConfig{}, rng);
  std::array<Tensor<double>, 4> keys;
  const Tensor<double> same = randn(src, {2, 32});
  for (auto& k : keys) k = same;
  const auto equal_keys = csa.weights(keys);
  for (double a : equal_keys.data()) EXPECT_NEAR(a, 0.25, 1e-15);

  for (auto& k : keys) k = randn(src, {2, 32});
  fill(csa.query, 0.0);
  const auto zero_query = csa.weights(keys);
  for (double a : zero_query.data()) EXPECT_NEAR(a, 0.25, 1e-15);

  // d = 4, Q = e1, K_k = 2·ln(k)·e1 so that scores/√4 = ln k
  CsaConfig small;
  small.attn_dim = 4;
  CrossStageAttention<double> c4(small, rng);
  fill(c4.query, 0.0);
  c4.query.mutable_data()[0] = 1.0;
  for (std::size_t k = 0; k < 4; ++k) {
    keys[k] = Tensor<double>({1, 4});
    keys[k].mutable_data()[0] = 2.0 * std::log(static_cast<double>(k + 1));
  }
  const auto alpha = c4.weights(keys);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(alpha[k], 0.1 * (k + 1), 1e-12);
}

TEST(Csa, StageWeightsInvariantToScoreShift) {
  Rng rng(20), src(21);
  CrossStageAttention<double> csa(CsaConfig{}, rng);
  double qq = 0;
  for (double q : csa.query.data()) qq += q * q;
  for (int trial = 0; trial < 20; ++trial) {
    std::array<Tensor<double>, 4> keys, shifted;
    const double c = 3.0 * (uniform01(src) - 0.5);
    for (std::size_t k = 0; k < 4; ++k) {
      keys[k] = randn(src, {2, 32});
      shifted[k] = Tensor<double>(keys[k].shape(), std::vector<double>(keys[k].data().begin(),
                                                                       keys[k].data().end()));
      // adding u = Q·c·√d/|Q|² to every key adds c to every score
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t j = 0; j < 32; ++j)
          shifted[k].mutable_data()[b * 32 + j] += csa.query[j] * c * std::sqrt(32.0) / qq;
    }
    const auto a = csa.weights(keys), s = csa.weights(shifted);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], s[i], 1e-12);
  }
}

TEST(Csa, OneHotAlphaSelectsValue) {
  Rng rng(22), src(23);
  CrossStageAttention<double> csa(CsaConfig{}, rng);
  std::array<Tensor<double>, 4> values;
  for (auto& v : values) v = randn(src, {2, 32});
  Tensor<double> alpha({2, 4}, std::vector<double>{0, 1, 0, 0, 0, 1, 0, 0});
  CsaTrace<double> trace;
  csa.recalibrate(values, alpha, randn(src, {2, 64, 4, 4}), &trace);
  for (std::size_t i = 0; i < values[1].numel(); ++i) EXPECT_EQ(trace.fused[i], values[1][i]);
}

TEST(Csa, ZeroBottleneckHalvesF4) {
  Rng rng(24), src(25);
  CrossStageAttention<double> csa(CsaConfig{}, rng);
  for (auto* t : {&csa.down.weight, &csa.down.bias, &csa.up.weight, &csa.up.bias}) fill(*t, 0.0);
  const auto st = random_stages(src, 2);
  CsaTrace<double> trace;
  const auto out = csa(st, &trace);
  for (double w : trace.channel_weights.data()) EXPECT_EQ(w, 0.5);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], 0.5 * st[3][i]);
}

TEST(Csa, MatchesScalarLoopOracle) {
  Rng rng(26), src(27);
  for (int trial = 0; trial < 5; ++trial) {
    CrossStageAttention<double> csa(CsaConfig{}, rng);
    for (auto& l : csa.key)
      for (auto& v : l.bias.mutable_data()) v = uniform01(src) - 0.5;
    const auto st = random_stages(src, 3);
    CsaTrace<double> trace;
    const auto out = csa(st, &trace);
    std::vector<double> alpha;
    const auto expect = csa_oracle(csa, st, &alpha);
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-6);
    for (std::size_t i = 0; i < alpha.size(); ++i) EXPECT_NEAR(trace.alpha[i], alpha[i], 1e-12);
  }
}

TEST(Csa, TraceInvariantsOverRandomInputs) {
  Rng rng(28), src(29);
  CrossStageAttention<double> csa(CsaConfig{}, rng);
  for (int trial = 0; trial < 100; ++trial) {
    const auto st = random_stages(src, 2);
    CsaTrace<double> trace;
    const auto out = csa(st, &trace);
    for (std::size_t b = 0; b < 2; ++b) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += trace.alpha[b * 4 + k];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    for (double w : trace.channel_weights.data()) {
      EXPECT_GT(w, 0.0);
      EXPECT_LT(w, 1.0);
    }
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_LE(std::abs(out[i]), std::abs(st[3][i]));
  }
}

TEST(Csa, QueryGradientMatchesFiniteDifferences) {
  Rng rng(30), src(31);
  auto csa = std::make_shared<CrossStageAttention<double>>(CsaConfig{}, rng);
  const auto st = random_stages(src, 2);
  const gradcheck::Objective obj = [csa, st](const gradcheck::Inputs&) { return sum((*csa)(st)); };
  EXPECT_LT(gradcheck::max_relative_error(obj, {csa->query}, {}, src), 1e-4);
}

TEST(Csa, FullPresetParameterCount) {
  const auto cfg = CsaConfig::for_backbone(BackboneConfig::full());
  EXPECT_EQ(cfg.param_count(), 288448u);
  Rng rng(32);
  CrossStageAttention<float> csa(cfg, rng);
  std::size_t n = 0, layers = 0;
  csa.visit("csa", [&](const std::string& name, Tensor<float>& t, ParamKind) {
    n += t.numel();
    if (name.find(".key") != std::string::npos || name.find(".value") != std::string::npos)
      ++layers;
  });
  EXPECT_EQ(n, 288448u);
  EXPECT_EQ(layers, 16u);  // 8 projections × (weight, bias)
}

// ---------------------------------------------------------------------------
// Mixture of experts

TEST(Gate, ZeroParametersGiveUniformWeights) {
  ModelConfig cfg;
  CsaMoeModel<double> m(cfg, 1);
  for (auto* t : {&m.gate().fc1.weight, &m.gate().fc1.bias, &m.gate().fc2.weight, &m.gate().fc2.bias})
    fill(*t, 0.0);
  Rng src(2), drop(3);
  const std::vector<Tensor<double>> f{randn(src, {4, 64}), randn(src, {4, 64}), randn(src, {4, 64})};
  for (bool training : {true, false}) {
    const auto w = m.gate()(f, training, drop);
    for (double v : w.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  }
}

TEST(Gate, RowsOnSimplex) {
  ModelConfig cfg;
  CsaMoeModel<double> m(cfg, 4);
  Rng src(5), drop(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::vector<Tensor<double>> f{randn(src, {3, 64}, 5.0), randn(src, {3, 64}), randn(src, {3, 64})};
    const auto w = m.gate()(f, trial % 2 == 0, drop);
    for (std::size_t b = 0; b < 3; ++b)
      EXPECT_NEAR(w[b * 3] + w[b * 3 + 1] + w[b * 3 + 2], 1.0, 1e-6);
  }
}

TEST(Gate, TwoFeatureEvalMatchesScalarOracle) {
  // features of width 2 → concat 6 → hidden 2 → 3 experts
  Rng rng(7), src(8);
  GatingNetwork<double> g(6, 2, 3, 0.2, rng);
  g.bn.state.running_mean = Tensor<double>({2}, std::vector<double>{0.3, -0.2});
  g.bn.state.running_var = Tensor<double>({2}, std::vector<double>{1.5, 0.5});
  g.bn.gamma = Tensor<double>({2}, std::vector<double>{1.2, 0.8});
  g.bn.beta = Tensor<double>({2}, std::vector<double>{0.1, -0.1});
  const std::vector<Tensor<double>> f{randn(src, {1, 2}), randn(src, {1, 2}), randn(src, {1, 2})};
  Rng drop(9);
  const auto w = g(f, false, drop);
  double x[6];
  for (int e = 0; e < 3; ++e)
    for (int i = 0; i < 2; ++i) x[e * 2 + i] = f[e][i];
  double h[2];
  for (int j = 0; j < 2; ++j) {
    double a = g.fc1.bias[j];
    for (int i = 0; i < 6; ++i) a += g.fc1.weight[j * 6 + i] * x[i];
    a = (a - g.bn.state.running_mean[j]) / std::sqrt(g.bn.state.running_var[j] + 1e-5);
    h[j] = std::max(0.0, g.bn.gamma[j] * a + g.bn.beta[j]);
  }
  double logit[3], mx = -1e300, tot = 0;
  for (int e = 0; e < 3; ++e) {
    logit[e] = g.fc2.bias[e] + g.fc2.weight[e * 2] * h[0] + g.fc2.weight[e * 2 + 1] * h[1];
    mx = std::max(mx, logit[e]);
  }
  for (double& l : logit) tot += (l = std::exp(l - mx));
  for (int e = 0; e < 3; ++e) EXPECT_NEAR(w[e], logit[e] / tot, 1e-6);
}

TEST(Fuse, SimplexVertexAndConvexity) {
  Rng src(10);
  const auto fi = randn(src, {2, 8}), ft = randn(src, {2, 8}), fb = randn(src, {2, 8});
  const Tensor<double> vertex({2, 3}, std::vector<double>{1, 0, 0, 1, 0, 0});
  const auto f = weighted_sum(vertex, stack<double>({fi, ft, fb}));
  for (std::size_t i = 0; i < fi.numel(); ++i) EXPECT_EQ(f[i], fi[i]);
  const Tensor<double> w({2, 3}, std::vector<double>{0.2, 0.5, 0.3, 0.6, 0.1, 0.3});
  const auto g = weighted_sum(w, stack<double>({fi, fi, fi}));
  for (std::size_t i = 0; i < fi.numel(); ++i) EXPECT_NEAR(g[i], fi[i], 1e-12);
}

TEST(Fuse, PermutationEquivariant) {
  Rng src(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto fi = randn(src, {3, 8}), ft = randn(src, {3, 8}), fb = randn(src, {3, 8});
    std::vector<double> wv(9), pv(9);
    for (std::size_t b = 0; b < 3; ++b) {
      double a = uniform01(src), c = uniform01(src), d = uniform01(src), s = a + c + d;
      wv[b * 3] = a / s, wv[b * 3 + 1] = c / s, wv[b * 3 + 2] = d / s;
      pv[b * 3] = wv[b * 3 + 2], pv[b * 3 + 1] = wv[b * 3], pv[b * 3 + 2] = wv[b * 3 + 1];
    }
    const auto f = weighted_sum(Tensor<double>({3, 3}, wv), stack<double>({fi, ft, fb}));
    const auto p = weighted_sum(Tensor<double>({3, 3}, pv), stack<double>({fb, fi, ft}));
    for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(f[i], p[i], 1e-12);
  }
}

TEST(Model, OutputContract) {
  for (Variant v : {Variant::csa_moe, Variant::resnet_moe, Variant::resnet18}) {
    ModelConfig cfg;
    cfg.variant = v;
    CsaMoeModel<float> m(cfg, 42);
    const auto batch = random_batch(3, 64, 1);
    Rng drop(2);
    for (bool training : {true, false}) {
      const auto out = m(batch, training, drop);
      ASSERT_EQ(out.prob.shape(), (Shape{3}));
      for (float p : out.prob.data()) {
        EXPECT_TRUE(std::isfinite(p));
        EXPECT_GT(p, 0.0f);
        EXPECT_LT(p, 1.0f);
      }
      for (std::size_t b = 0; b < 3; ++b)
        EXPECT_NEAR(out.gate[b * 3] + out.gate[b * 3 + 1] + out.gate[b * 3 + 2], 1.0, 1e-6);
      EXPECT_EQ(out.features[0].shape(), (Shape{3, 64}));
    }
  }
}

TEST(Model, FullPresetFeatureDimension) {
  ModelConfig cfg;
  cfg.preset = Preset::full;
  cfg.variant = Variant::resnet18;
  CsaMoeModel<float> m(cfg, 1);
  const auto batch = random_batch(1, 224, 3);
  Rng drop(4);
  EXPECT_EQ(m(batch, false, drop).features[0].shape(), (Shape{1, 512}));
}

TEST(Model, ZeroHeadGivesHalf) {
  ModelConfig cfg;
  CsaMoeModel<float> m(cfg, 5);
  std::fill(m.head().weight.mutable_data().begin(), m.head().weight.mutable_data().end(), 0.0f);
  std::fill(m.head().bias.mutable_data().begin(), m.head().bias.mutable_data().end(), 0.0f);
  Rng drop(6);
  const auto out = m(random_batch(2, 64, 7), true, drop);
  for (float p : out.prob.data()) EXPECT_EQ(p, 0.5f);
}

TEST(Model, ZeroInputGivesZeroFeature) {
  ModelConfig cfg;
  CsaMoeModel<double> m(cfg, 8);
  MultiViewBatch<double> batch;
  for (auto& v : batch.views) v = Tensor<double>({2, 3, 64, 64});
  batch.labels = {0, 1};
  Rng drop(9);
  const auto out = m(batch, false, drop);
  for (const auto& f : out.features)
    for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, MissingViewIsUsageError) {
  ModelConfig cfg;
  CsaMoeModel<float> m(cfg, 10);
  auto batch = random_batch(2, 64, 11);
  batch.views[2] = Tensor<float>();
  Rng drop(12);
  EXPECT_THROW(m(batch, false, drop), UsageError);
  cfg.variant = Variant::resnet18;
  CsaMoeModel<float> single(cfg, 10);
  EXPECT_NO_THROW(single(batch, false, drop));
}

TEST(Model, IdentityRecalibrationEqualsResnetMoe) {
  ModelConfig a, b;
  a.variant = Variant::csa_moe;
  b.variant = Variant::resnet_moe;
  CsaMoeModel<double> csa(a, 77), plain(b, 77);
  for (std::size_t e = 0; e < 3; ++e) {
    auto& up = csa.expert(static_cast<ExpertId>(e)).csa->up;
    fill(up.weight, 0.0);
    fill(up.bias, 1000.0);
  }
  MultiViewBatch<double> batch;
  Rng src(13);
  for (auto& v : batch.views) v = randn(src, {2, 3, 64, 64});
  batch.labels = {0, 1};
  for (bool training : {false, true}) {
    Rng d1(14), d2(14);
    const auto x = csa(batch, training, d1), y = plain(batch, training, d2);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(x.prob[i], y.prob[i], 1e-12);
    for (std::size_t e = 0; e < 3; ++e)
      for (std::size_t i = 0; i < x.features[e].numel(); ++i)
        EXPECT_NEAR(x.features[e][i], y.features[e][i], 1e-6);
  }
}

TEST(Model, SymmetricExpertsWithIdenticalViews) {
  ModelConfig cfg;
  CsaMoeModel<double> m(cfg, 15);
  auto ps = m.state();
  for (auto& [name, t] : ps) {
    if (name.rfind("expert_img.", 0) != 0) continue;
    const std::string tail = name.substr(std::string("expert_img").size());
    for (const char* other : {"expert_tumor", "expert_boundary"}) {
      auto dst = ps.at(other + tail).mutable_data();
      std::copy(t.data().begin(), t.data().end(), dst.begin());
    }
  }
  // identical logits rows make the gate exactly uniform
  auto& fc2 = m.gate().fc2;
  for (std::size_t e = 1; e < 3; ++e) {
    for (std::size_t j = 0; j < fc2.in_features(); ++j)
      fc2.weight.mutable_data()[e * fc2.in_features() + j] = fc2.weight[j];
    fc2.bias.mutable_data()[e] = fc2.bias[0];
  }
  Rng src(16), drop(17);
  MultiViewBatch<double> batch;
  batch.views[0] = randn(src, {2, 3, 64, 64});
  batch.views[1] = batch.views[2] = batch.views[0];
  batch.labels = {0, 1};
  const auto out = m(batch, false, drop);
  for (double g : out.gate) EXPECT_EQ(g, 1.0 / 3.0);
  for (std::size_t i = 0; i < out.features[0].numel(); ++i) {
    EXPECT_EQ(out.features[0][i], out.features[1][i]);
    EXPECT_EQ(out.features[0][i], out.features[2][i]);
  }
}

TEST(Model, DroppedExpertsAndNames) {
  ModelConfig cfg;
  cfg.drop_tumor = true;
  CsaMoeModel<float> m(cfg, 18);
  const auto ps = m.parameters();
  EXPECT_FALSE(ps.contains("expert_tumor.stem.conv.weight"));
  EXPECT_TRUE(ps.contains("expert_boundary.csa.query"));
  EXPECT_TRUE(ps.contains("expert_img.stage3.block1.conv2.weight"));
  EXPECT_EQ(ps.at("gate.fc1.weight").shape(), (Shape{16, 128}));
  EXPECT_EQ(ps.at("gate.fc2.weight").shape(), (Shape{2, 16}));
  Rng drop(19);
  const auto out = m(random_batch(2, 64, 20), true, drop);
  for (std::size_t b = 0; b < 2; ++b) {
    EXPECT_EQ(out.gate_at(b, ExpertId::tumor), 0.0f);
    EXPECT_NEAR(out.gate_at(b, ExpertId::img) + out.gate_at(b, ExpertId::boundary), 1.0, 1e-6);
  }
}

TEST(Model, SameSeedSameInitialValues) {
  ModelConfig cfg;
  CsaMoeModel<float> a(cfg, 42), b(cfg, 42), c(cfg, 43);
  const auto pa = a.state(), pb = b.state(), pc = c.state();
  bool any_diff = false;
  for (const auto& [name, t] : pa) {
    const auto& u = pb.at(name);
    ASSERT_TRUE(std::equal(t.data().begin(), t.data().end(), u.data().begin()));
    const auto& w = pc.at(name);
    any_diff |= !std::equal(t.data().begin(), t.data().end(), w.data().begin());
  }
  EXPECT_TRUE(any_diff);
  EXPECT_EQ(count_model(cfg).total_params, pa.total_numel() - [&] {
    std::size_t buffers = 0;
    a.visit([&](const std::string&, Tensor<float>& t, ParamKind k) {
      if (k == ParamKind::buffer) buffers += t.numel();
    });
    return buffers;
  }());
}

// ---------------------------------------------------------------------------
// Accounting

TEST(Count, ClosedFormMatchesConstructedModels) {
  for (Preset p : {Preset::tiny, Preset::full})
    for (Variant v : {Variant::resnet18, Variant::resnet_moe, Variant::csa_moe}) {
      ModelConfig cfg;
      cfg.preset = p;
      cfg.variant = v;
      CsaMoeModel<float> m(cfg, 1);
      EXPECT_EQ(count_model(cfg).total_params, m.parameters().total_numel())
          << to_string(p) << " " << to_string(v);
    }
}

TEST(Count, PublishedParameterTotals) {
  ModelConfig cfg;
  cfg.preset = Preset::full;
  cfg.variant = Variant::resnet18;
  const auto r18 = count_model(cfg);
  EXPECT_EQ(r18.total_params, 11177025u);
  EXPECT_LT(std::abs(r18.total_params / 1e6 - 11.178) / 11.178, 0.005);
  cfg.variant = Variant::resnet_moe;
  const auto moe = count_model(cfg);
  EXPECT_LT(std::abs(moe.total_params / 1e6 - 33.958) / 33.958, 0.02);
  cfg.variant = Variant::csa_moe;
  const auto full = count_model(cfg);
  EXPECT_LT(std::abs(full.total_params / 1e6 - 34.820) / 34.820, 0.02);
  EXPECT_EQ(full.total_params - moe.total_params, 865344u);
}

TEST(Count, PublishedMacTotals) {
  ModelConfig cfg;
  cfg.preset = Preset::full;
  double g[3];
  const Variant vs[] = {Variant::resnet18, Variant::resnet_moe, Variant::csa_moe};
  const double ref[] = {1.824, 5.471, 5.472};
  for (int i = 0; i < 3; ++i) {
    cfg.variant = vs[i];
    const auto r = count_model(cfg);
    g[i] = r.total_macs / 1e9;
    EXPECT_LT(std::abs(g[i] - ref[i]) / ref[i], 0.03) << to_string(vs[i]);
    EXPECT_EQ(r.reference_flops_g, ref[i]);
  }
  EXPECT_LT(g[2] - g[1], 0.002);
  EXPECT_GT(g[2] - g[1], 0.0);
}

// ---------------------------------------------------------------------------
// End-to-end gradient check

TEST(Gradcheck, TinyModelEveryParameter) {
  const auto rep = gradcheck::check_model(Variant::csa_moe, 42, 1e-4);
  for (const auto& [name, err] : rep.per_param) EXPECT_LT(err, 1e-4) << name;
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  EXPECT_GT(rep.per_param.size(), 150u);
}
