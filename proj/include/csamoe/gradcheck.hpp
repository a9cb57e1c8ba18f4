#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "csamoe/moe.hpp"
#include "csamoe/ops.hpp"
#include "csamoe/rng.hpp"
#include "csamoe/tensor.hpp"

// Central finite-difference checks of taped gradients (64-bit only).

namespace csamoe::gradcheck {

using Inputs = std::vector<Tensor<double>>;
using Objective = std::function<Tensor<double>(const Inputs&)>;

struct Options {
  double step = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-3;
  // Per input tensor: check every element when 0, else this many random ones.
  std::size_t max_elements = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Largest relative error between taped and finite-difference gradients of
/// `objective` over all inputs with requires_grad set. `per_input`, when
/// given, receives the worst error of each input (0 for constants).
inline double max_relative_error(const Objective& objective, Inputs inputs, const Options& opt,
                                 Rng& rng, std::vector<double>* per_input = nullptr) {
  for (auto& t : inputs)
    if (t.requires_grad()) t.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = objective(inputs);
    tape.backward(loss);
  }
  double worst = 0.0;
  if (per_input) per_input->assign(inputs.size(), 0.0);
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    auto& t = inputs[n];
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_elements != 0 && idx.size() > opt.max_elements) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_elements);
    }
    auto data = t.mutable_data();
    for (std::size_t i : idx) {
      const double orig = data[i];
      data[i] = orig + opt.step;
      const double up = objective(inputs).item();
      data[i] = orig - opt.step;
      const double down = objective(inputs).item();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double err = relative_error(analytic[i], numeric, opt.denominator_floor);
      worst = std::max(worst, err);
      if (per_input) (*per_input)[n] = std::max((*per_input)[n], err);
    }
  }
  return worst;
}

/// One randomized op check: draws inputs and returns the objective to check.
struct OpCase {
  std::string name;
  std::function<std::pair<Inputs, Objective>(Rng&)> make;
};

struct Report {
  std::string name;
  std::size_t trials = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

inline Report run_case(const OpCase& c, std::size_t trials, std::uint64_t seed, double tolerance,
                       const Options& opt = {}) {
  Report r{c.name, trials, 0.0, true};
  Rng rng = make_stream(seed, Stream::eval, fnv1a64(c.name));
  for (std::size_t t = 0; t < trials; ++t) {
    auto [inputs, objective] = c.make(rng);
    r.max_rel_error = std::max(r.max_rel_error, max_relative_error(objective, inputs, opt, rng));
  }
  r.passed = r.max_rel_error < tolerance && std::isfinite(r.max_rel_error);
  return r;
}

namespace cases {

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

inline Tensor<double> random_tensor(Rng& rng, Shape shape, bool grad = true) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = nd(rng);
  t.set_requires_grad(grad);
  return t;
}

/// Values bounded away from zero so kinks stay outside the FD stencil.
inline Tensor<double> away_from_zero(Rng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.mutable_data()) {
    const double mag = 0.05 + uniform01(rng);
    v = (rng() & 1) ? mag : -mag;
  }
  t.set_requires_grad(true);
  return t;
}

/// Distinct values spaced 0.01 apart in random order (no near-ties for max).
inline Tensor<double> distinct_values(Rng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  auto d = t.mutable_data();
  std::vector<double> v(d.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i) - 1.0;
  std::shuffle(v.begin(), v.end(), rng);
  std::copy(v.begin(), v.end(), d.begin());
  t.set_requires_grad(true);
  return t;
}

/// Random projection sum(out ⊙ R) so gradients are not all ones.
inline Tensor<double> project(const Tensor<double>& out, const Tensor<double>& r) {
  return sum(mul(out, r));
}

inline std::vector<OpCase> standard() {
  std::vector<OpCase> all;
  all.push_back({"conv2d", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
    const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
    const std::size_t h = pick(rng, k, 6), w = pick(rng, k, 6);
    Inputs in{random_tensor(rng, {b, cin, h, w}), random_tensor(rng, {cout, cin, k, k}),
              random_tensor(rng, {cout})};
    const std::size_t ho = conv_out_size(h, k, stride, pad), wo = conv_out_size(w, k, stride, pad);
    in.push_back(random_tensor(rng, {b, cout, ho, wo}, false));
    return std::pair{in, Objective([stride, pad](const Inputs& v) {
      return project(conv2d(v[0], v[1], &v[2], stride, pad), v[3]);
    })};
  }});
  all.push_back({"batchnorm2d_train", [](Rng& rng) {
    const std::size_t b = pick(rng, 2, 3), c = pick(rng, 1, 3), h = pick(rng, 1, 3), w = pick(rng, 2, 3);
    Inputs in{random_tensor(rng, {b, c, h, w}), random_tensor(rng, {c}), random_tensor(rng, {c}),
              random_tensor(rng, {b, c, h, w}, false)};
    return std::pair{in, Objective([c](const Inputs& v) {
      BatchNormState<double> st(c);
      return project(batch_norm(v[0], v[1], v[2], st, true), v[3]);
    })};
  }});
  all.push_back({"batchnorm2d_eval", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 3), c = pick(rng, 1, 3);
    Inputs in{random_tensor(rng, {b, c, 2, 2}), random_tensor(rng, {c}), random_tensor(rng, {c}),
              random_tensor(rng, {b, c, 2, 2}, false)};
    std::vector<double> rm(c), rv(c);
    for (std::size_t i = 0; i < c; ++i) {
      rm[i] = uniform01(rng) - 0.5;
      rv[i] = 0.5 + uniform01(rng);
    }
    return std::pair{in, Objective([c, rm, rv](const Inputs& v) {
      BatchNormState<double> st(c);
      std::copy(rm.begin(), rm.end(), st.running_mean.mutable_data().begin());
      std::copy(rv.begin(), rv.end(), st.running_var.mutable_data().begin());
      return project(batch_norm(v[0], v[1], v[2], st, false), v[3]);
    })};
  }});
  all.push_back({"batchnorm1d_train", [](Rng& rng) {
    const std::size_t b = pick(rng, 2, 5), c = pick(rng, 1, 4);
    Inputs in{random_tensor(rng, {b, c}), random_tensor(rng, {c}), random_tensor(rng, {c}),
              random_tensor(rng, {b, c}, false)};
    return std::pair{in, Objective([c](const Inputs& v) {
      BatchNormState<double> st(c);
      return project(batch_norm(v[0], v[1], v[2], st, true), v[3]);
    })};
  }});
  all.push_back({"relu", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 12);
    Inputs in{away_from_zero(rng, {n}), random_tensor(rng, {n}, false)};
    return std::pair{in, Objective([](const Inputs& v) { return project(relu(v[0]), v[1]); })};
  }});
  all.push_back({"sigmoid", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 12);
    Inputs in{random_tensor(rng, {n}), random_tensor(rng, {n}, false)};
    return std::pair{in, Objective([](const Inputs& v) { return project(sigmoid(v[0]), v[1]); })};
  }});
  all.push_back({"softmax", [](Rng& rng) {
    const std::size_t r = pick(rng, 1, 3), n = pick(rng, 1, 6);
    Inputs in{random_tensor(rng, {r, n}), random_tensor(rng, {r, n}, false)};
    return std::pair{in, Objective([](const Inputs& v) { return project(softmax(v[0]), v[1]); })};
  }});
  all.push_back({"linear", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 3), n = pick(rng, 1, 5), m = pick(rng, 1, 4);
    Inputs in{random_tensor(rng, {b, n}), random_tensor(rng, {m, n}), random_tensor(rng, {m}),
              random_tensor(rng, {b, m}, false)};
    return std::pair{in, Objective([](const Inputs& v) {
      return project(linear(v[0], v[1], v[2]), v[3]);
    })};
  }});
  all.push_back({"max_pool2d", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 2), k = pick(rng, 2, 3),
                      s = pick(rng, 1, 2), p = pick(rng, 0, 1);
    const std::size_t h = pick(rng, k, 6), w = pick(rng, k, 6);
    Inputs in{distinct_values(rng, {b, c, h, w})};
    in.push_back(random_tensor(
        rng, {b, c, conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)}, false));
    return std::pair{in, Objective([k, s, p](const Inputs& v) {
      return project(max_pool2d(v[0], k, s, p), v[1]);
    })};
  }});
  all.push_back({"adaptive_avg_pool2d", [](Rng& rng) {
    const std::size_t h = pick(rng, 1, 7), w = pick(rng, 1, 7);
    const std::size_t oh = pick(rng, 1, h), ow = pick(rng, 1, w);
    Inputs in{random_tensor(rng, {2, 2, h, w}), random_tensor(rng, {2, 2, oh, ow}, false)};
    return std::pair{in, Objective([oh, ow](const Inputs& v) {
      return project(adaptive_avg_pool2d(v[0], oh, ow), v[1]);
    })};
  }});
  all.push_back({"dropout", [](Rng& rng) {
    const std::size_t n = pick(rng, 4, 16);
    const std::uint64_t seed = rng();
    Inputs in{random_tensor(rng, {n}), random_tensor(rng, {n}, false)};
    return std::pair{in, Objective([seed](const Inputs& v) {
      Rng r(seed);
      return project(dropout(v[0], 0.2, true, r), v[1]);
    })};
  }});
  all.push_back({"add_mul_scale", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 8);
    Inputs in{random_tensor(rng, {n}), random_tensor(rng, {n})};
    return std::pair{in, Objective([](const Inputs& v) {
      return sum(mul(add(v[0], scale(v[1], 0.7)), v[0]));
    })};
  }});
  all.push_back({"concat_stack_weighted_sum", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 3), d = pick(rng, 1, 4);
    Inputs in{random_tensor(rng, {b, d}), random_tensor(rng, {b, d}), random_tensor(rng, {b, d}),
              random_tensor(rng, {b, 3}), random_tensor(rng, {b, 3 * d}, false),
              random_tensor(rng, {b, d}, false)};
    return std::pair{in, Objective([](const Inputs& v) {
      const auto fused = weighted_sum(v[3], stack<double>({v[0], v[1], v[2]}));
      return add(project(concat<double>({v[0], v[1], v[2]}), v[4]), project(fused, v[5]));
    })};
  }});
  all.push_back({"channel_scale_reshape", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 3);
    Inputs in{random_tensor(rng, {b, c, 2, 3}), random_tensor(rng, {b * c}),
              random_tensor(rng, {b, c, 2, 3}, false)};
    return std::pair{in, Objective([b, c](const Inputs& v) {
      return project(channel_scale(v[0], reshape(v[1], {b, c})), v[2]);
    })};
  }});
  all.push_back({"bce_loss", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 6);
    Tensor<double> p({n});
    for (auto& x : p.mutable_data()) x = 0.05 + 0.9 * uniform01(rng);
    p.set_requires_grad(true);
    std::vector<double> y(n);
    for (auto& l : y) l = static_cast<double>(rng() & 1);
    return std::pair{Inputs{p}, Objective([y](const Inputs& v) {
      return bce_loss<double>(v[0], y);
    })};
  }});
  return all;
}

}  // namespace cases

/// Worst error of each parameter tensor of an end-to-end model check.
struct ModelReport {
  std::vector<std::pair<std::string, double>> per_param;
  double max_rel_error = 0.0;
  std::size_t elements_checked = 0;
  bool passed = false;
};

/// Tiny-preset model, batch of two random views, training mode (batch
/// statistics, dropout with a fixed mask), BCE loss. Every parameter tensor
/// is checked on `elements_per_param` random entries (all if 0).
/// The default step is smaller than the per-op one: with ~10^5 ReLU and
/// max-pool units a 1e-4 stencil regularly straddles a kink.
inline ModelReport check_model(Variant variant, std::uint64_t seed, double tolerance,
                               std::size_t elements_per_param = 6, double step = 1e-6) {
  ModelConfig cfg;
  cfg.preset = Preset::tiny;
  cfg.variant = variant;
  CsaMoeModel<double> model(cfg, seed);
  const std::size_t side = cfg.backbone().input_size;
  Rng rng = make_stream(seed, Stream::eval, fnv1a64("model"));
  MultiViewBatch<double> batch;
  for (auto& v : batch.views) v = cases::random_tensor(rng, {2, 3, side, side}, false);
  batch.labels = {0.0, 1.0};

  ParamSet<double> params = model.parameters();
  Inputs inputs;
  std::vector<std::string> names;
  for (auto& [name, t] : params) {
    names.push_back(name);
    inputs.push_back(t);
  }
  const Objective objective = [&model, &batch, seed](const Inputs&) {
    Rng drop = make_stream(seed, Stream::dropout);
    const auto out = model(batch, true, drop);
    return bce_loss<double>(out.prob, batch.labels);
  };
  Options opt;
  opt.max_elements = elements_per_param;
  opt.step = step;
  std::vector<double> per;
  ModelReport rep;
  rep.max_rel_error = max_relative_error(objective, inputs, opt, rng, &per);
  for (std::size_t i = 0; i < names.size(); ++i) {
    rep.per_param.emplace_back(names[i], per[i]);
    rep.elements_checked += elements_per_param == 0 ? inputs[i].numel()
                                                    : std::min(elements_per_param, inputs[i].numel());
  }
  rep.passed = rep.max_rel_error < tolerance && std::isfinite(rep.max_rel_error);
  return rep;
}

}  // namespace csamoe::gradcheck
