#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <tuple>
#include <type_traits>
#include <utility>
#include <vector>

#include "csamoe/errors.hpp"
#include "csamoe/rng.hpp"
#include "csamoe/tensor.hpp"

namespace csamoe {

/// 8-bit grayscale raster, row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(w * h, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  bool operator==(const GrayImage&) const = default;
};

/// Binary raster with values strictly in {0,1}.
struct BinaryMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t w, std::size_t h, std::uint8_t fill = 0)
      : width(w), height(h), bits(w * h, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return bits[y * width + x]; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  bool empty() const { return count() == 0; }
  bool operator==(const BinaryMask&) const = default;
};

enum class Interp { nearest, bilinear };

namespace detail {

template <class Raster>
std::vector<std::uint8_t>& raster_values(Raster& r) {
  if constexpr (std::is_same_v<Raster, GrayImage>)
    return r.pixels;
  else
    return r.bits;
}

template <class Raster>
const std::vector<std::uint8_t>& raster_values(const Raster& r) {
  if constexpr (std::is_same_v<Raster, GrayImage>)
    return r.pixels;
  else
    return r.bits;
}

// Center-aligned nearest source index: floor((i + 0.5) * in / out).
inline std::size_t nearest_src(std::size_t i, std::size_t in, std::size_t out) {
  return std::min(in - 1, (2 * i + 1) * in / (2 * out));
}

}  // namespace detail

/// Resizes a GrayImage or BinaryMask. Masks only support nearest mode.
template <class Raster>
Raster resize(const Raster& src, std::size_t out_w, std::size_t out_h, Interp mode) {
  if (out_w == 0 || out_h == 0) throw DimensionError("resize: output dimensions must be >= 1");
  if constexpr (std::is_same_v<Raster, BinaryMask>) {
    if (mode == Interp::bilinear) throw UsageError("resize: masks must use nearest interpolation");
  }
  Raster dst(out_w, out_h);
  const auto& in = detail::raster_values(src);
  auto& out = detail::raster_values(dst);
  if (mode == Interp::nearest) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const std::size_t sy = detail::nearest_src(y, src.height, out_h);
      for (std::size_t x = 0; x < out_w; ++x)
        out[y * out_w + x] = in[sy * src.width + detail::nearest_src(x, src.width, out_w)];
    }
    return dst;
  }
  auto coord = [](std::size_t i, std::size_t n_in, std::size_t n_out) {
    const double s = (static_cast<double>(i) + 0.5) * static_cast<double>(n_in) /
                         static_cast<double>(n_out) -
                     0.5;
    const double c = std::clamp(s, 0.0, static_cast<double>(n_in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(c));
    const std::size_t hi = std::min(lo + 1, n_in - 1);
    return std::tuple<std::size_t, std::size_t, double>{lo, hi, c - static_cast<double>(lo)};
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto [y0, y1, fy] = coord(y, src.height, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [x0, x1, fx] = coord(x, src.width, out_w);
      const double top = (1 - fx) * in[y0 * src.width + x0] + fx * in[y0 * src.width + x1];
      const double bot = (1 - fx) * in[y1 * src.width + x0] + fx * in[y1 * src.width + x1];
      const double v = (1 - fy) * top + fy * bot;
      out[y * out_w + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return dst;
}

/// Three identical channels scaled by 1/255.
template <class T>
Tensor<T> to_pseudo_rgb(const GrayImage& img) {
  Tensor<T> t({3, img.height, img.width});
  auto d = t.mutable_data();
  const std::size_t n = img.pixels.size();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) d[c * n + i] = static_cast<T>(img.pixels[i]) / T(255);
  return t;
}

/// `iterations` passes of 3×3 erosion; out-of-image neighbours count as 0.
inline BinaryMask erode_n(const BinaryMask& mask, int iterations) {
  if (iterations < 0) throw UsageError("erode_n: iterations must be >= 0");
  BinaryMask cur = mask;
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(mask.width),
                       h = static_cast<std::ptrdiff_t>(mask.height);
  for (int it = 0; it < iterations; ++it) {
    BinaryMask next(mask.width, mask.height);
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        std::uint8_t keep = 1;
        for (std::ptrdiff_t dy = -1; dy <= 1 && keep; ++dy)
          for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
            const std::ptrdiff_t yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w || !cur.bits[yy * w + xx]) {
              keep = 0;
              break;
            }
          }
        next.bits[y * w + x] = keep;
      }
    cur = std::move(next);
  }
  return cur;
}

/// `iterations` passes of 3×3 dilation, clipped at the image border.
inline BinaryMask dilate_n(const BinaryMask& mask, int iterations) {
  if (iterations < 0) throw UsageError("dilate_n: iterations must be >= 0");
  BinaryMask cur = mask;
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(mask.width),
                       h = static_cast<std::ptrdiff_t>(mask.height);
  for (int it = 0; it < iterations; ++it) {
    BinaryMask next(mask.width, mask.height);
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        std::uint8_t hit = 0;
        for (std::ptrdiff_t dy = -1; dy <= 1 && !hit; ++dy)
          for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
            const std::ptrdiff_t yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < h && xx >= 0 && xx < w && cur.bits[yy * w + xx]) {
              hit = 1;
              break;
            }
          }
        next.bits[y * w + x] = hit;
      }
    cur = std::move(next);
  }
  return cur;
}

/// dilate_n(mask, iterations) AND NOT mask.
inline BinaryMask boundary_band(const BinaryMask& mask, int iterations = 5) {
  BinaryMask band = dilate_n(mask, iterations);
  for (std::size_t i = 0; i < band.bits.size(); ++i) band.bits[i] &= static_cast<std::uint8_t>(!mask.bits[i]);
  return band;
}

inline GrayImage apply_mask(const GrayImage& img, const BinaryMask& mask) {
  if (img.width != mask.width || img.height != mask.height)
    throw DimensionError("apply_mask: image " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + " vs mask " + std::to_string(mask.width) +
                         "x" + std::to_string(mask.height));
  GrayImage out(img.width, img.height);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = mask.bits[i] ? img.pixels[i] : 0;
  return out;
}

/// One augmentation draw: flips are applied first, then the rotation.
struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;
};

inline AugmentParams draw_augment(Rng& rng) {
  AugmentParams p;
  p.hflip = uniform01(rng) < 0.5;
  p.vflip = uniform01(rng) < 0.5;
  p.angle_deg = -15.0 + 30.0 * uniform01(rng);
  return p;
}

/// Applies the same geometric transform to image (bilinear) and mask
/// (nearest); pixels mapped from outside the raster are filled with 0.
inline std::pair<GrayImage, BinaryMask> apply_augment(const GrayImage& img, const BinaryMask& mask,
                                                      const AugmentParams& p) {
  if (img.width != mask.width || img.height != mask.height)
    throw DimensionError("augment: image and mask dimensions differ");
  const std::size_t w = img.width, h = img.height;
  GrayImage fi = img;
  BinaryMask fm = mask;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = p.hflip ? w - 1 - x : x;
      const std::size_t sy = p.vflip ? h - 1 - y : y;
      fi.at(x, y) = img.at(sx, sy);
      fm.at(x, y) = mask.at(sx, sy);
    }
  if (p.angle_deg == 0.0) return {std::move(fi), std::move(fm)};

  const double th = p.angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  GrayImage ri(w, h);
  BinaryMask rm(w, h);
  auto pixel = [&](std::ptrdiff_t x, std::ptrdiff_t y) -> double {
    if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(w) || y >= static_cast<std::ptrdiff_t>(h))
      return 0.0;
    return fi.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      // inverse map: rotate the destination point by -theta about the center
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double ax = sx - fx0, ay = sy - fy0;
      const auto x0 = static_cast<std::ptrdiff_t>(fx0), y0 = static_cast<std::ptrdiff_t>(fy0);
      const double v = (1 - ay) * ((1 - ax) * pixel(x0, y0) + ax * pixel(x0 + 1, y0)) +
                       ay * ((1 - ax) * pixel(x0, y0 + 1) + ax * pixel(x0 + 1, y0 + 1));
      ri.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      const auto nx = static_cast<std::ptrdiff_t>(std::lround(sx));
      const auto ny = static_cast<std::ptrdiff_t>(std::lround(sy));
      if (nx >= 0 && ny >= 0 && nx < static_cast<std::ptrdiff_t>(w) && ny < static_cast<std::ptrdiff_t>(h))
        rm.at(x, y) = fm.at(static_cast<std::size_t>(nx), static_cast<std::size_t>(ny));
    }
  return {std::move(ri), std::move(rm)};
}

inline std::pair<GrayImage, BinaryMask> augment(const GrayImage& img, const BinaryMask& mask, Rng& rng) {
  return apply_augment(img, mask, draw_augment(rng));
}

}  // namespace csamoe
