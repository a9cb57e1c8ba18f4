#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "csamoe/errors.hpp"
#include "csamoe/parallel.hpp"
#include "csamoe/rng.hpp"
#include "csamoe/tensor.hpp"

// Differentiable operators. Every op computes its value eagerly and, when a
// tape is active and some input requires grad, records a closure that
// accumulates input gradients from the output gradient.

namespace csamoe {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values, bool track) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (track) {
    out.set_requires_grad(true);
    out.node()->tape = active_tape<T>();
  }
  return out;
}

template <class T, class Fn>
void record(Fn&& fn) {
  active_tape<T>()->record(std::forward<Fn>(fn));
}

template <class T>
bool wants_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

inline void expect_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " input, got " + shape_str(s));
}

// col[(c*kh + i)*kw + j][oy*wo + ox] = x[c][oy*stride - pad + i][ox*stride - pad + j]
template <class T>
void im2col(const T* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
            T* col) {
  const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(h), iw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = col + ((c * kh + i) * kw + j) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + i) -
                                   static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oy * wo;
          if (y < 0 || y >= ih) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (c * h + static_cast<std::size_t>(y)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * stride + j) -
                                      static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (xx < 0 || xx >= iw) ? T(0) : src[xx];
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho,
                std::size_t wo, T* dx) {
  const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(h), iw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        const T* row = col + ((c * kh + i) * kw + j) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + i) -
                                   static_cast<std::ptrdiff_t>(pad);
          if (y < 0 || y >= ih) continue;
          T* dst = dx + (c * h + static_cast<std::size_t>(y)) * w;
          const T* src = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * stride + j) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (xx >= 0 && xx < iw) dst[xx] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// Output spatial extent of a convolution or pooling window.
inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                 std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

/// 2-D cross-correlation (no kernel flip) with optional per-channel bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                 std::size_t stride, std::size_t pad) {
  detail::expect_rank(x.shape(), 4, "conv2d");
  detail::expect_rank(weight.shape(), 4, "conv2d weight");
  const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin)
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  if (kh > h + 2 * pad || kw > w + 2 * pad)
    throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout))
    throw DimensionError("conv2d: bias " + shape_str(bias->shape()) + " does not match weight " +
                         shape_str(weight.shape()));

  const std::size_t ho = conv_out_size(h, kh, stride, pad), wo = conv_out_size(w, kw, stride, pad);
  const std::size_t ck = cin * kh * kw, hw = ho * wo;
  std::vector<T> out(b * cout * hw);
  const T* xd = x.data().data();
  detail::ConstMatMap<T> wm(weight.data().data(), cout, ck);

  parallel_for(b, [&](std::size_t n) {
    std::vector<T> col(ck * hw);
    detail::im2col(xd + n * cin * h * w, cin, h, w, kh, kw, stride, pad, ho, wo, col.data());
    detail::MatMap<T> om(out.data() + n * cout * hw, cout, hw);
    om.noalias() = wm * detail::ConstMatMap<T>(col.data(), ck, hw);
    if (bias)
      for (std::size_t c = 0; c < cout; ++c) om.row(c).array() += (*bias)[c];
  });

  const bool track = detail::tracking<T>({&x, &weight, bias});
  Tensor<T> result = detail::make_result<T>({b, cout, ho, wo}, std::move(out), track);
  if (track) {
    Tensor<T> bias_t = bias ? *bias : Tensor<T>();
    detail::record<T>([x, weight, bias_t, result, stride, pad, b, cin, h, w, cout, kh, kw, ho, wo,
                       ck, hw]() mutable {
      if (!result.has_grad()) return;
      const T* gy = result.grad().data();
      detail::ConstMatMap<T> wm(weight.data().data(), cout, ck);
      const bool gx = detail::wants_grad(x), gw = detail::wants_grad(weight),
                 gb = detail::wants_grad(bias_t);
      T* dx = gx ? x.mutable_grad().data() : nullptr;
      T* dw = gw ? weight.mutable_grad().data() : nullptr;
      T* db = gb ? bias_t.mutable_grad().data() : nullptr;
      std::vector<T> col(ck * hw);
      for (std::size_t n = 0; n < b; ++n) {
        detail::ConstMatMap<T> gm(gy + n * cout * hw, cout, hw);
        if (gw) {
          detail::im2col(x.data().data() + n * cin * h * w, cin, h, w, kh, kw, stride, pad, ho,
                         wo, col.data());
          detail::MatMap<T>(dw, cout, ck).noalias() +=
              gm * detail::ConstMatMap<T>(col.data(), ck, hw).transpose();
        }
        if (gx) {
          detail::MatMap<T>(col.data(), ck, hw).noalias() = wm.transpose() * gm;
          detail::col2im_add(col.data(), cin, h, w, kh, kw, stride, pad, ho, wo,
                             dx + n * cin * h * w);
        }
        if (gb)
          for (std::size_t c = 0; c < cout; ++c) db[c] += gm.row(c).sum();
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride,
                 std::size_t pad) {
  return conv2d<T>(x, weight, nullptr, stride, pad);
}

/// Running statistics and hyper-parameters of one batch-norm layer.
template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Tensor<T>::zeros({channels})), running_var(Tensor<T>::ones({channels})) {}
};

/// Batch normalization over [B,C] or [B,C,H,W]. Training mode normalizes with
/// the population batch variance and blends the unbiased variance into the
/// running estimate; eval mode uses the running statistics.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool training) {
  if (x.rank() != 2 && x.rank() != 4)
    throw DimensionError("batch_norm: expected [B,C] or [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.numel() != c)
    throw DimensionError("batch_norm: input " + shape_str(x.shape()) + " vs gamma " +
                         shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()));
  if (!(state.eps > T(0))) throw UsageError("batch_norm: epsilon must be positive");
  const std::size_t count = b * hw;
  const T* xd = x.data().data();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(training ? x.numel() : 0);
  std::vector<T> inv_std(c);

  for (std::size_t ch = 0; ch < c; ++ch) {
    T mean, var;
    if (training) {
      double s = 0;
      for (std::size_t n = 0; n < b; ++n) {
        const T* p = xd + (n * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      mean = static_cast<T>(s / static_cast<double>(count));
      double v = 0;
      for (std::size_t n = 0; n < b; ++n) {
        const T* p = xd + (n * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) v += (double(p[i]) - mean) * (double(p[i]) - mean);
      }
      var = static_cast<T>(v / static_cast<double>(count));
      const T unbiased = count > 1 ? static_cast<T>(v / static_cast<double>(count - 1)) : var;
      auto rm = state.running_mean.mutable_data();
      auto rv = state.running_var.mutable_data();
      rm[ch] = (T(1) - state.momentum) * rm[ch] + state.momentum * mean;
      rv[ch] = (T(1) - state.momentum) * rv[ch] + state.momentum * unbiased;
    } else {
      mean = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const T is = T(1) / std::sqrt(var + state.eps);
    inv_std[ch] = is;
    const T g = gamma[ch], bt = beta[ch];
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t off = (n * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (xd[off + i] - mean) * is;
        if (training) xhat[off + i] = xh;
        out[off + i] = g * xh + bt;
      }
    }
  }

  const bool track = detail::tracking<T>({&x, &gamma, &beta});
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), track);
  if (track) {
    if (!training) {
      // Eval mode is affine in x; xhat is recomputed from the frozen statistics.
      std::vector<T> mean(c);
      for (std::size_t ch = 0; ch < c; ++ch) mean[ch] = state.running_mean[ch];
      detail::record<T>([x, gamma, beta, result, mean, inv_std, b, c, hw]() mutable {
        if (!result.has_grad()) return;
        const T* gy = result.grad().data();
        const T* xd = x.data().data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sg = 0, sgx = 0;
          for (std::size_t n = 0; n < b; ++n)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t k = (n * c + ch) * hw + i;
              sg += gy[k];
              sgx += gy[k] * (xd[k] - mean[ch]) * inv_std[ch];
            }
          if (detail::wants_grad(beta)) beta.mutable_grad()[ch] += sg;
          if (detail::wants_grad(gamma)) gamma.mutable_grad()[ch] += sgx;
          if (detail::wants_grad(x)) {
            auto dx = x.mutable_grad();
            const T k0 = gamma[ch] * inv_std[ch];
            for (std::size_t n = 0; n < b; ++n)
              for (std::size_t i = 0; i < hw; ++i) dx[(n * c + ch) * hw + i] += gy[(n * c + ch) * hw + i] * k0;
          }
        }
      });
    } else {
      detail::record<T>([x, gamma, beta, result, xhat = std::move(xhat), inv_std, b, c, hw,
                         count]() mutable {
        if (!result.has_grad()) return;
        const T* gy = result.grad().data();
        const T nf = static_cast<T>(count);
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sg = 0, sgx = 0;
          for (std::size_t n = 0; n < b; ++n)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t k = (n * c + ch) * hw + i;
              sg += gy[k];
              sgx += gy[k] * xhat[k];
            }
          if (detail::wants_grad(beta)) beta.mutable_grad()[ch] += sg;
          if (detail::wants_grad(gamma)) gamma.mutable_grad()[ch] += sgx;
          if (detail::wants_grad(x)) {
            auto dx = x.mutable_grad();
            const T k0 = gamma[ch] * inv_std[ch] / nf;
            for (std::size_t n = 0; n < b; ++n)
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t k = (n * c + ch) * hw + i;
                dx[k] += k0 * (nf * gy[k] - sg - xhat[k] * sgx);
              }
          }
        }
      });
    }
  }
  return result;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), track);
  if (track)
    detail::record<T>([x, result]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      auto dx = x.mutable_grad();
      auto xd = x.data();
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (xd[i] > T(0)) dx[i] += gy[i];
    });
  return result;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-xd[i]));
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), track);
  if (track)
    detail::record<T>([x, result]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      auto y = result.data();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i] * y[i] * (T(1) - y[i]);
    });
  return result;
}

/// Softmax along the last axis with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = xd.data() + r * n;
    T* q = out.data() + r * n;
    const T m = *std::max_element(p, p + n);
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += (q[i] = std::exp(p[i] - m));
    for (std::size_t i = 0; i < n; ++i) q[i] /= s;
  }
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), track);
  if (track)
    detail::record<T>([x, result, n, rows]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      auto y = result.data();
      auto dx = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += gy[r * n + i] * y[r * n + i];
        for (std::size_t i = 0; i < n; ++i) dx[r * n + i] += y[r * n + i] * (gy[r * n + i] - dot);
      }
    });
  return result;
}

/// y = x · weightᵀ + bias for x [B,n], weight [m,n], bias [m].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  detail::expect_rank(x.shape(), 2, "linear");
  detail::expect_rank(weight.shape(), 2, "linear weight");
  const std::size_t b = x.dim(0), n = x.dim(1), m = weight.dim(0);
  if (weight.dim(1) != n)
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  if (bias && bias->numel() != m)
    throw DimensionError("linear: bias " + shape_str(bias->shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  std::vector<T> out(b * m);
  detail::MatMap<T> om(out.data(), b, m);
  om.noalias() = detail::ConstMatMap<T>(x.data().data(), b, n) *
                 detail::ConstMatMap<T>(weight.data().data(), m, n).transpose();
  if (bias)
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t j = 0; j < m; ++j) om(r, j) += (*bias)[j];

  const bool track = detail::tracking<T>({&x, &weight, bias});
  Tensor<T> result = detail::make_result<T>({b, m}, std::move(out), track);
  if (track) {
    Tensor<T> bias_t = bias ? *bias : Tensor<T>();
    detail::record<T>([x, weight, bias_t, result, b, n, m]() mutable {
      if (!result.has_grad()) return;
      detail::ConstMatMap<T> gm(result.grad().data(), b, m);
      if (detail::wants_grad(x))
        detail::MatMap<T>(x.mutable_grad().data(), b, n).noalias() +=
            gm * detail::ConstMatMap<T>(weight.data().data(), m, n);
      if (detail::wants_grad(weight))
        detail::MatMap<T>(weight.mutable_grad().data(), m, n).noalias() +=
            gm.transpose() * detail::ConstMatMap<T>(x.data().data(), b, n);
      if (detail::wants_grad(bias_t)) {
        auto db = bias_t.mutable_grad();
        for (std::size_t j = 0; j < m; ++j) db[j] += gm.col(j).sum();
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return linear<T>(x, weight, &bias);
}

/// Max pooling; padded positions never win.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride,
                     std::size_t pad) {
  detail::expect_rank(x.shape(), 4, "max_pool2d");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel == 0 || stride == 0 || kernel > h + 2 * pad || kernel > w + 2 * pad)
    throw DimensionError("max_pool2d: kernel " + std::to_string(kernel) +
                         " does not fit padded input " + shape_str(x.shape()));
  const std::size_t ho = conv_out_size(h, kernel, stride, pad);
  const std::size_t wo = conv_out_size(w, kernel, stride, pad);
  std::vector<T> out(b * c * ho * wo);
  std::vector<std::size_t> arg(out.size());
  auto xd = x.data();
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    const T* p = xd.data() + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < kernel; ++i) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + i) -
                                   static_cast<std::ptrdiff_t>(pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * stride + j) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t k = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(xx);
            if (p[k] > best) {
              best = p[k];
              best_i = k;
            }
          }
        }
        const std::size_t o = (plane * ho + oy) * wo + ox;
        out[o] = best;
        arg[o] = plane * h * w + best_i;
      }
  }
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result = detail::make_result<T>({b, c, ho, wo}, std::move(out), track);
  if (track)
    detail::record<T>([x, result, arg = std::move(arg)]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      auto dx = x.mutable_grad();
      for (std::size_t o = 0; o < gy.size(); ++o) dx[arg[o]] += gy[o];
    });
  return result;
}

/// Adaptive average pooling with bins [floor(i·H/oh), ceil((i+1)·H/oh)).
template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::expect_rank(x.shape(), 4, "adaptive_avg_pool2d");
  if (out_h == 0 || out_w == 0) throw DimensionError("adaptive_avg_pool2d: output dims must be >= 1");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto bin = [](std::size_t i, std::size_t in, std::size_t out) {
    return std::pair<std::size_t, std::size_t>{i * in / out, ((i + 1) * in + out - 1) / out};
  };
  std::vector<T> out(b * c * out_h * out_w);
  auto xd = x.data();
  for (std::size_t plane = 0; plane < b * c; ++plane)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        auto [y0, y1] = bin(oy, h, out_h);
        auto [x0, x1] = bin(ox, w, out_w);
        T s = 0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) s += xd[plane * h * w + y * w + xx];
        out[(plane * out_h + oy) * out_w + ox] = s / static_cast<T>((y1 - y0) * (x1 - x0));
      }
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result = detail::make_result<T>({b, c, out_h, out_w}, std::move(out), track);
  if (track)
    detail::record<T>([x, result, b, c, h, w, out_h, out_w, bin]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      auto dx = x.mutable_grad();
      for (std::size_t plane = 0; plane < b * c; ++plane)
        for (std::size_t oy = 0; oy < out_h; ++oy)
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            auto [y0, y1] = bin(oy, h, out_h);
            auto [x0, x1] = bin(ox, w, out_w);
            const T g = gy[(plane * out_h + oy) * out_w + ox] /
                        static_cast<T>((y1 - y0) * (x1 - x0));
            for (std::size_t y = y0; y < y1; ++y)
              for (std::size_t xx = x0; xx < x1; ++xx) dx[plane * h * w + y * w + xx] += g;
          }
    });
  return result;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result = detail::make_result<T>(std::move(shape),
                                            std::vector<T>(x.data().begin(), x.data().end()), track);
  if (track)
    detail::record<T>([x, result]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i];
    });
  return result;
}

/// Global average pooling [B,C,H,W] -> [B,C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::expect_rank(x.shape(), 4, "global_avg_pool");
  return reshape(adaptive_avg_pool2d(x, 1, 1), {x.dim(0), x.dim(1)});
}

/// Inverted dropout; eval mode and rate 0 return the input itself.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw UsageError("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = uniform01(rng) < rate ? T(0) : keep_scale;
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), track);
  if (track)
    detail::record<T>([x, result, mask = std::move(mask)]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i] * mask[i];
    });
  return result;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  const bool track = detail::tracking<T>({&a, &b});
  Tensor<T> result = detail::make_result<T>(a.shape(), std::move(out), track);
  if (track)
    detail::record<T>([a, b, result]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      for (const Tensor<T>* t : {&a, &b})
        if (detail::wants_grad(*t)) {
          auto d = t->mutable_grad();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i];
        }
    });
  return result;
}

/// Elementwise product of equal-shape tensors.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  const bool track = detail::tracking<T>({&a, &b});
  Tensor<T> result = detail::make_result<T>(a.shape(), std::move(out), track);
  if (track)
    detail::record<T>([a, b, result]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      if (detail::wants_grad(a)) {
        auto d = a.mutable_grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] * b[i];
      }
      if (detail::wants_grad(b)) {
        auto d = b.mutable_grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] * a[i];
      }
    });
  return result;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), track);
  if (track)
    detail::record<T>([x, result, factor]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i] * factor;
    });
  return result;
}

/// Sum of all elements as a [1] tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result = detail::make_result<T>({1}, {s}, track);
  if (track)
    detail::record<T>([x, result]() mutable {
      if (!result.has_grad()) return;
      const T g = result.grad()[0];
      for (auto& d : x.mutable_grad()) d += g;
    });
  return result;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Concatenates rank-2 tensors [B,n_i] along the feature axis.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const std::size_t b = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::expect_rank(p.shape(), 2, "concat");
    if (p.dim(0) != b)
      throw DimensionError("concat: batch mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    total += p.dim(1);
  }
  std::vector<T> out(b * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t n = p.dim(1);
    for (std::size_t r = 0; r < b; ++r)
      std::copy_n(p.data().data() + r * n, n, out.data() + r * total + off);
    off += n;
  }
  bool track = false;
  for (const auto& p : parts) track = track || detail::tracking<T>({&p});
  Tensor<T> result = detail::make_result<T>({b, total}, std::move(out), track);
  if (track)
    detail::record<T>([parts, result, b, total]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t n = p.dim(1);
        if (detail::wants_grad(p)) {
          auto d = p.mutable_grad();
          for (std::size_t r = 0; r < b; ++r)
            for (std::size_t j = 0; j < n; ++j) d[r * n + j] += gy[r * total + off + j];
        }
        off += n;
      }
    });
  return result;
}

/// Stacks K rank-2 tensors [B,d] into [B,K,d].
template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("stack: no inputs");
  const Shape s0 = parts[0].shape();
  detail::expect_rank(s0, 2, "stack");
  for (const auto& p : parts)
    if (p.shape() != s0)
      throw DimensionError("stack: shape mismatch " + shape_str(s0) + " vs " + shape_str(p.shape()));
  const std::size_t b = s0[0], d = s0[1], k = parts.size();
  std::vector<T> out(b * k * d);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t r = 0; r < b; ++r)
      std::copy_n(parts[i].data().data() + r * d, d, out.data() + (r * k + i) * d);
  bool track = false;
  for (const auto& p : parts) track = track || detail::tracking<T>({&p});
  Tensor<T> result = detail::make_result<T>({b, k, d}, std::move(out), track);
  if (track)
    detail::record<T>([parts, result, b, k, d]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      for (std::size_t i = 0; i < k; ++i) {
        if (!detail::wants_grad(parts[i])) continue;
        auto g = parts[i].mutable_grad();
        for (std::size_t r = 0; r < b; ++r)
          for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gy[(r * k + i) * d + j];
      }
    });
  return result;
}

/// out[b,:] = Σ_k weights[b,k] · values[b,k,:]
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& weights, const Tensor<T>& values) {
  detail::expect_rank(weights.shape(), 2, "weighted_sum weights");
  detail::expect_rank(values.shape(), 3, "weighted_sum values");
  const std::size_t b = values.dim(0), k = values.dim(1), d = values.dim(2);
  if (weights.dim(0) != b || weights.dim(1) != k)
    throw DimensionError("weighted_sum: weights " + shape_str(weights.shape()) +
                         " incompatible with values " + shape_str(values.shape()));
  std::vector<T> out(b * d, T(0));
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t i = 0; i < k; ++i) {
      const T wv = weights[r * k + i];
      const T* v = values.data().data() + (r * k + i) * d;
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] += wv * v[j];
    }
  const bool track = detail::tracking<T>({&weights, &values});
  Tensor<T> result = detail::make_result<T>({b, d}, std::move(out), track);
  if (track)
    detail::record<T>([weights, values, result, b, k, d]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      const bool gw = detail::wants_grad(weights), gv = detail::wants_grad(values);
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t i = 0; i < k; ++i) {
          const T* v = values.data().data() + (r * k + i) * d;
          if (gw) {
            T s = 0;
            for (std::size_t j = 0; j < d; ++j) s += gy[r * d + j] * v[j];
            weights.mutable_grad()[r * k + i] += s;
          }
          if (gv) {
            auto dv = values.mutable_grad();
            const T wv = weights[r * k + i];
            for (std::size_t j = 0; j < d; ++j) dv[(r * k + i) * d + j] += wv * gy[r * d + j];
          }
        }
    });
  return result;
}

/// Multiplies each channel plane x[b,c,:,:] by s[b,c].
template <class T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& s) {
  detail::expect_rank(x.shape(), 4, "channel_scale");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (s.numel() != b * c)
    throw DimensionError("channel_scale: scales " + shape_str(s.shape()) + " vs input " +
                         shape_str(x.shape()));
  std::vector<T> out(x.numel());
  for (std::size_t p = 0; p < b * c; ++p)
    for (std::size_t i = 0; i < hw; ++i) out[p * hw + i] = s[p] * x[p * hw + i];
  const bool track = detail::tracking<T>({&x, &s});
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), track);
  if (track)
    detail::record<T>([x, s, result, b, c, hw]() mutable {
      if (!result.has_grad()) return;
      auto gy = result.grad();
      const bool gx = detail::wants_grad(x), gs = detail::wants_grad(s);
      for (std::size_t p = 0; p < b * c; ++p) {
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) {
          if (gx) x.mutable_grad()[p * hw + i] += gy[p * hw + i] * s[p];
          acc += gy[p * hw + i] * x[p * hw + i];
        }
        if (gs) s.mutable_grad()[p] += acc;
      }
    });
  return result;
}

/// Mean binary cross-entropy of probabilities against {0,1} labels. The
/// probabilities are clamped to [1e-7, 1 - 1e-7] before the logarithm.
template <class T>
Tensor<T> bce_loss(const Tensor<T>& prob, std::span<const T> labels) {
  if (prob.numel() != labels.size() || labels.empty())
    throw DimensionError("bce_loss: " + std::to_string(prob.numel()) + " probabilities vs " +
                         std::to_string(labels.size()) + " labels");
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  const std::size_t n = labels.size();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T p = std::clamp(prob[i], lo, hi);
    total -= labels[i] * std::log(p) + (T(1) - labels[i]) * std::log(T(1) - p);
  }
  const bool track = detail::tracking<T>({&prob});
  Tensor<T> result = detail::make_result<T>({1}, {total / static_cast<T>(n)}, track);
  if (track) {
    std::vector<T> y(labels.begin(), labels.end());
    detail::record<T>([prob, result, y = std::move(y), lo, hi, n]() mutable {
      if (!result.has_grad()) return;
      const T g = result.grad()[0] / static_cast<T>(n);
      auto dp = prob.mutable_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T p = std::clamp(prob[i], lo, hi);
        dp[i] += g * (-(y[i] / p) + (T(1) - y[i]) / (T(1) - p));
      }
    });
  }
  return result;
}

}  // namespace csamoe
