#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <cstddef>
#include <random>

#include "csamoe/image.hpp"

namespace csamoe::testing {

/// Random mask made of a few filled ellipses plus scattered single pixels.
inline BinaryMask random_mask(std::mt19937_64& rng, std::size_t w = 48, std::size_t h = 40) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  BinaryMask m(w, h);
  const int blobs = static_cast<int>(rng() % 4);
  for (int b = 0; b < blobs; ++b) {
    const double cx = u(rng) * w, cy = u(rng) * h;
    const double rx = 1 + u(rng) * w / 3, ry = 1 + u(rng) * h / 3;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        if (dx * dx + dy * dy <= 1.0) m.at(x, y) = 1;
      }
  }
  const double density = u(rng) * 0.05;
  for (auto& b : m.bits)
    if (u(rng) < density) b = 1;
  return m;
}

/// Square of side `side` with top-left corner at (x0, y0).
inline BinaryMask square_mask(std::size_t w, std::size_t h, std::size_t x0, std::size_t y0,
                              std::size_t side) {
  BinaryMask m(w, h);
  for (std::size_t y = y0; y < y0 + side; ++y)
    for (std::size_t x = x0; x < x0 + side; ++x) m.at(x, y) = 1;
  return m;
}

inline bool subset(const BinaryMask& a, const BinaryMask& b) {
  for (std::size_t i = 0; i < a.bits.size(); ++i)
    if (a.bits[i] && !b.bits[i]) return false;
  return true;
}

}  // namespace csamoe::testing
