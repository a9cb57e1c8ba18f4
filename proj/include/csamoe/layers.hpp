#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>

#include "csamoe/ops.hpp"
#include "csamoe/rng.hpp"
#include "csamoe/tensor.hpp"

// Parameterized building blocks. Each exposes visit(prefix, fn) calling
// fn(name, tensor, kind) for its learnable parameters and running buffers.

namespace csamoe {

enum class ParamKind { param, buffer };

template <class T>
Tensor<T> normal_leaf(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, stddev);
  for (auto& v : t.mutable_data()) v = static_cast<T>(nd(rng));
  t.set_requires_grad(true);
  return t;
}

template <class T>
Tensor<T> uniform_leaf(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
  t.set_requires_grad(true);
  return t;
}

template <class T>
Tensor<T> constant_leaf(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

/// Bias-free convolution, He-normal (fan-out) initialized.
template <class T>
struct Conv2d {
  Tensor<T> weight;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride_,
         std::size_t pad_, Rng& rng)
      : weight(normal_leaf<T>({cout, cin, kernel, kernel},
                              std::sqrt(2.0 / static_cast<double>(cout * kernel * kernel)), rng)),
        stride(stride_),
        pad(pad_) {}

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t kernel() const { return weight.dim(2); }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, stride, pad); }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".weight", weight, ParamKind::param);
  }
};

template <class T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> state;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(constant_leaf<T>({channels}, T(1))),
        beta(constant_leaf<T>({channels}, T(0))),
        state(channels) {}

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    return batch_norm(x, gamma, beta, state, training);
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".weight", gamma, ParamKind::param);
    fn(prefix + ".bias", beta, ParamKind::param);
    fn(prefix + ".running_mean", state.running_mean, ParamKind::buffer);
    fn(prefix + ".running_var", state.running_var, ParamKind::buffer);
  }
};

enum class LinearInit {
  he_normal,       // N(0, 2/fan_in) weights, zero bias
  uniform_fan_in,  // U(±1/√fan_in) weights and bias
};

template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, LinearInit init, Rng& rng) {
    const double fan_in = static_cast<double>(in);
    if (init == LinearInit::he_normal) {
      weight = normal_leaf<T>({out, in}, std::sqrt(2.0 / fan_in), rng);
      bias = constant_leaf<T>({out}, T(0));
    } else {
      const double bound = 1.0 / std::sqrt(fan_in);
      weight = uniform_leaf<T>({out, in}, bound, rng);
      bias = uniform_leaf<T>({out}, bound, rng);
    }
  }

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".weight", weight, ParamKind::param);
    fn(prefix + ".bias", bias, ParamKind::param);
  }
};

}  // namespace csamoe
