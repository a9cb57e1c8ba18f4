#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "csamoe/errors.hpp"
#include "csamoe/image.hpp"
#include "csamoe/image_io.hpp"
#include "csamoe/moe.hpp"
#include "csamoe/parallel.hpp"
#include "csamoe/rng.hpp"
#include "csamoe/tensor.hpp"

namespace csamoe {

namespace fs = std::filesystem;

inline constexpr std::array<const char*, 2> kClassNames{"benign", "malignant"};

struct Sample {
  std::string id;  // "<class>/<stem>"
  GrayImage image;
  BinaryMask mask;
  int label = 0;  // 0 benign, 1 malignant
};

template <class T>
struct MultiViewSample {
  std::string id;
  Tensor<T> whole, core, boundary;  // each [3,H,W]
  int label = 0;
  int erosion_fallback = 5;  // erosion iterations actually used for the core
};

// ---------------------------------------------------------------------------
// Loading

/// Reads root/{benign,malignant}/<stem>.{png,pgm} with <stem>_mask.{png,pgm},
/// resizing images bilinearly and masks nearest to size×size. Samples are
/// returned sorted by id. Empty masks are skipped with a warning.
inline std::vector<Sample> load_dataset(const fs::path& root, std::size_t size = 224,
                                        std::vector<std::string>* warnings = nullptr) {
  std::vector<Sample> out;
  std::vector<std::string> missing;
  for (int label = 0; label < 2; ++label) {
    const fs::path dir = root / kClassNames[label];
    if (!fs::is_directory(dir)) throw FormatError("missing class directory " + dir.string());
    std::map<std::string, fs::path> images, masks;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      const std::string ext = detail::lower_ext(entry.path());
      if (ext != ".png" && ext != ".pgm") continue;
      std::string stem = entry.path().stem().string();
      if (stem.size() > 5 && stem.compare(stem.size() - 5, 5, "_mask") == 0)
        masks[stem.substr(0, stem.size() - 5)] = entry.path();
      else
        images[stem] = entry.path();
    }
    if (images.empty()) throw FormatError("class directory " + dir.string() + " has no images");
    for (const auto& [stem, path] : images) {
      const std::string id = std::string(kClassNames[label]) + "/" + stem;
      auto m = masks.find(stem);
      if (m == masks.end()) {
        missing.push_back(id);
        continue;
      }
      Sample s;
      s.id = id;
      s.label = label;
      s.image = resize(read_gray(path), size, size, Interp::bilinear);
      s.mask = resize(read_mask(m->second), size, size, Interp::nearest);
      if (s.mask.empty()) {
        if (warnings) warnings->push_back("skipping " + id + ": empty mask");
        continue;
      }
      out.push_back(std::move(s));
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing mask for:";
    for (const auto& id : missing) msg += " " + id;
    throw FormatError(msg);
  }
  std::sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  return out;
}

// ---------------------------------------------------------------------------
// Stratified split

struct SplitSpec {
  double test_fraction = 0.15;
  double val_fraction_of_remainder = 0.1765;
  std::uint64_t seed = 42;
};

struct Split {
  std::vector<Sample> train, val, test;
};

namespace detail {

/// floor(n·f) with f taken to six decimals, in integer arithmetic.
inline std::size_t floor_fraction(std::size_t n, double f) {
  const auto micro = static_cast<std::uint64_t>(std::llround(f * 1e6));
  return static_cast<std::size_t>(static_cast<std::uint64_t>(n) * micro / 1000000ULL);
}

}  // namespace detail

/// Per class: shuffle with the split stream, take floor(test·n) for test,
/// floor(val·rest) for validation, the remainder for training. Each part is
/// returned sorted by id.
inline Split stratified_split(const std::vector<Sample>& samples, const SplitSpec& spec = {}) {
  Split out;
  for (int label = 0; label < 2; ++label) {
    std::vector<const Sample*> cls;
    for (const auto& s : samples)
      if (s.label == label) cls.push_back(&s);
    std::sort(cls.begin(), cls.end(), [](const Sample* a, const Sample* b) { return a->id < b->id; });
    Rng rng = make_stream(spec.seed, Stream::split, 0, static_cast<std::uint64_t>(label));
    std::shuffle(cls.begin(), cls.end(), rng);
    const std::size_t n = cls.size();
    const std::size_t n_test = detail::floor_fraction(n, spec.test_fraction);
    const std::size_t n_val = detail::floor_fraction(n - n_test, spec.val_fraction_of_remainder);
    if (n_test == 0 || n_val == 0 || n - n_test - n_val == 0)
      throw UsageError(std::string("class ") + kClassNames[label] + " has too few samples (" +
                       std::to_string(n) + ") for a three-way split");
    for (std::size_t i = 0; i < n; ++i) {
      auto& part = i < n_test ? out.test : i < n_test + n_val ? out.val : out.train;
      part.push_back(*cls[i]);
    }
  }
  for (auto* part : {&out.train, &out.val, &out.test})
    std::sort(part->begin(), part->end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  return out;
}

/// `id,label,part` rows sorted by id.
inline void write_manifest(const fs::path& path, const Split& split) {
  std::vector<std::tuple<std::string, int, const char*>> rows;
  for (const auto& s : split.train) rows.emplace_back(s.id, s.label, "train");
  for (const auto& s : split.val) rows.emplace_back(s.id, s.label, "val");
  for (const auto& s : split.test) rows.emplace_back(s.id, s.label, "test");
  std::sort(rows.begin(), rows.end());
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  out << "id,label,part\n";
  for (const auto& [id, label, part] : rows) out << id << ',' << label << ',' << part << '\n';
}

// ---------------------------------------------------------------------------
// Views

/// Core erosion with fallback: 5 iterations, else the largest count in 4..0
/// that leaves a non-empty mask. Returns the iterations used, or -1 if the
/// mask itself is empty.
inline int eroded_core(const BinaryMask& mask, BinaryMask& core, int iterations = 5) {
  for (int it = iterations; it >= 0; --it) {
    core = erode_n(mask, it);
    if (!core.empty()) return it;
  }
  return -1;
}

/// Optionally augments the pair, then derives whole / core / boundary views
/// from the same (augmented) pair. Returns nullopt when the mask is empty.
template <class T>
std::optional<MultiViewSample<T>> make_views(const Sample& s, bool augmenting, Rng& rng,
                                             std::string* warning = nullptr) {
  GrayImage img = s.image;
  BinaryMask mask = s.mask;
  if (augmenting) std::tie(img, mask) = augment(s.image, s.mask, rng);
  BinaryMask core;
  const int used = eroded_core(mask, core);
  if (used < 0) {
    if (warning) *warning = "skipping " + s.id + ": empty mask";
    return std::nullopt;
  }
  MultiViewSample<T> v;
  v.id = s.id;
  v.label = s.label;
  v.erosion_fallback = used;
  v.whole = to_pseudo_rgb<T>(img);
  v.core = to_pseudo_rgb<T>(apply_mask(img, core));
  v.boundary = to_pseudo_rgb<T>(apply_mask(img, boundary_band(mask, 5)));
  return v;
}

/// Stacks views into [B,3,H,W] tensors in the given order.
template <class T>
MultiViewBatch<T> collate(const std::vector<const MultiViewSample<T>*>& items) {
  MultiViewBatch<T> b;
  if (items.empty()) return b;
  const Shape& s = items[0]->whole.shape();
  const std::size_t per = items[0]->whole.numel();
  std::array<std::vector<T>, 3> data;
  for (auto& d : data) d.reserve(per * items.size());
  for (const auto* it : items) {
    const Tensor<T>* views[3] = {&it->whole, &it->core, &it->boundary};
    for (std::size_t v = 0; v < 3; ++v) {
      if (views[v]->shape() != s) throw DimensionError("collate: mixed view sizes in one batch");
      data[v].insert(data[v].end(), views[v]->data().begin(), views[v]->data().end());
    }
    b.labels.push_back(static_cast<T>(it->label));
    b.ids.push_back(it->id);
  }
  for (std::size_t v = 0; v < 3; ++v)
    b.views[v] = Tensor<T>(Shape{items.size(), s[0], s[1], s[2]}, std::move(data[v]));
  return b;
}

/// Visit order of one epoch: a seeded permutation when shuffling, else the
/// part's id order.
inline std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle, std::uint64_t seed,
                                            std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng = make_stream(seed, Stream::shuffle, epoch);
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

struct BatchOptions {
  std::size_t batch_size = 32;
  bool shuffle = false;
  bool augment = false;
  std::size_t workers = 1;
};

/// Batches of one epoch over a part. Per-sample augmentation streams are keyed
/// by (seed, epoch, sample id), so the batches do not depend on `workers`.
template <class T>
class BatchIterator {
 public:
  BatchIterator(const std::vector<Sample>& part, const BatchOptions& opt, std::uint64_t seed,
                std::uint64_t epoch)
      : part_(&part), opt_(opt), seed_(seed), epoch_(epoch) {
    if (part.empty()) throw UsageError("cannot batch an empty part");
    if (opt.batch_size == 0) throw UsageError("batch size must be positive");
    order_ = epoch_order(part.size(), opt.shuffle, seed, epoch);
  }

  std::size_t size() const { return (order_.size() + opt_.batch_size - 1) / opt_.batch_size; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  MultiViewBatch<T> batch(std::size_t i) {
    const std::size_t lo = i * opt_.batch_size, hi = std::min(order_.size(), lo + opt_.batch_size);
    std::vector<std::optional<MultiViewSample<T>>> views(hi - lo);
    std::vector<std::string> warn(hi - lo);
    parallel_for(hi - lo, opt_.workers, [&](std::size_t j) {
      const Sample& s = (*part_)[order_[lo + j]];
      Rng rng = make_stream(seed_, Stream::augment, epoch_, fnv1a64(s.id));
      views[j] = make_views<T>(s, opt_.augment, rng, &warn[j]);
    });
    std::vector<const MultiViewSample<T>*> items;
    for (std::size_t j = 0; j < views.size(); ++j) {
      if (views[j]) items.push_back(&*views[j]);
      else warnings_.push_back(warn[j]);
    }
    return collate(items);
  }

 private:
  const std::vector<Sample>* part_;
  BatchOptions opt_;
  std::uint64_t seed_, epoch_;
  std::vector<std::size_t> order_;
  std::vector<std::string> warnings_;
};

/// Un-augmented views of a whole part, computed once (validation/test).
template <class T>
std::vector<MultiViewSample<T>> precompute_views(const std::vector<Sample>& part,
                                                 std::size_t workers = 1,
                                                 std::vector<std::string>* warnings = nullptr) {
  std::vector<std::optional<MultiViewSample<T>>> tmp(part.size());
  std::vector<std::string> warn(part.size());
  parallel_for(part.size(), workers, [&](std::size_t i) {
    Rng unused(0);
    tmp[i] = make_views<T>(part[i], false, unused, &warn[i]);
  });
  std::vector<MultiViewSample<T>> out;
  for (std::size_t i = 0; i < tmp.size(); ++i) {
    if (tmp[i]) out.push_back(std::move(*tmp[i]));
    else if (warnings) warnings->push_back(warn[i]);
  }
  return out;
}

/// Ordered batches over precomputed views.
template <class T>
std::vector<MultiViewBatch<T>> ordered_batches(const std::vector<MultiViewSample<T>>& views,
                                               std::size_t batch_size) {
  std::vector<MultiViewBatch<T>> out;
  for (std::size_t lo = 0; lo < views.size(); lo += batch_size) {
    std::vector<const MultiViewSample<T>*> items;
    for (std::size_t i = lo; i < std::min(views.size(), lo + batch_size); ++i) items.push_back(&views[i]);
    out.push_back(collate(items));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Boundary roughness and the synthetic lesion generator

/// Length of the 0.5 iso-contour of the mask (marching squares over pixel
/// centers, outside treated as 0).
inline double contour_length(const BinaryMask& m) {
  const double diag = std::sqrt(0.5);
  auto at = [&](long x, long y) -> int {
    if (x < 0 || y < 0 || x >= static_cast<long>(m.width) || y >= static_cast<long>(m.height)) return 0;
    return m.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  };
  double len = 0;
  for (long y = -1; y < static_cast<long>(m.height); ++y)
    for (long x = -1; x < static_cast<long>(m.width); ++x) {
      const int a = at(x, y), b = at(x + 1, y), c = at(x + 1, y + 1), d = at(x, y + 1);
      const int n = a + b + c + d;
      if (n == 1 || n == 3) len += diag;
      else if (n == 2) len += (a == c) ? 2 * diag : 1.0;  // diagonal pair is a saddle
    }
  return len;
}

/// perimeter² / area; 4π for a disc, larger for irregular outlines.
inline double roughness(const BinaryMask& m) {
  const std::size_t area = m.count();
  if (area == 0) return 0.0;
  const double p = contour_length(m);
  return p * p / static_cast<double>(area);
}

struct SyntheticSpec {
  std::size_t per_class = 200;
  std::size_t size = 64;
  std::uint64_t seed = 7;
  std::string extension = ".pgm";
  double benign_max_roughness = 18.0;
  double malignant_min_roughness = 32.0;
};

namespace detail {

inline double wrap_pi(double a) {
  a = std::fmod(a + M_PI, 2 * M_PI);
  if (a < 0) a += 2 * M_PI;
  return a - M_PI;
}

struct LesionShape {
  double cx, cy, a, b, psi;
  int spikes = 0;
  double phase = 0, amplitude = 0, duty = 0.5;
  std::vector<double> spike_gain;

  double radius(double theta) const {
    const double t = theta - psi;
    const double ca = b * std::cos(t), sa = a * std::sin(t);
    double r = a * b / std::sqrt(ca * ca + sa * sa);
    if (spikes > 0) {
      const double period = 2 * M_PI / spikes;
      const double u = theta - phase;
      const long k = std::lround(u / period);
      const double off = std::abs(u - static_cast<double>(k) * period);
      const double half = 0.5 * duty * period;
      const double gain = spike_gain[static_cast<std::size_t>(((k % spikes) + spikes) % spikes)];
      if (off < half) r *= 1.0 + amplitude * gain * (1.0 - off / half);
    }
    return r;
  }
};

inline BinaryMask render_mask(const LesionShape& s, std::size_t size) {
  BinaryMask m(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - s.cx, dy = static_cast<double>(y) - s.cy;
      const double rho = std::sqrt(dx * dx + dy * dy);
      m.at(x, y) = rho <= s.radius(std::atan2(dy, dx)) ? 1 : 0;
    }
  return m;
}

/// Smooth random field in roughly [-1,1]: sum of a few Gaussian bumps.
inline std::vector<double> bump_field(Rng& rng, std::size_t size, int bumps, double width) {
  std::vector<double> f(size * size, 0.0);
  for (int i = 0; i < bumps; ++i) {
    const double bx = uniform01(rng) * size, by = uniform01(rng) * size;
    const double sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
    const double w = width * (0.6 + 0.8 * uniform01(rng));
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = x - bx, dy = y - by;
        f[y * size + x] += sign * std::exp(-(dx * dx + dy * dy) / (2 * w * w));
      }
  }
  return f;
}

inline std::uint8_t clamp_pixel(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace detail

/// One synthetic lesion. Benign: smooth ellipse, homogeneous interior, mild
/// noise. Malignant: ellipse with 8–16 radial spicules, textured interior,
/// stronger speckle. Shapes are redrawn until the roughness margin holds.
inline Sample synth_sample(const SyntheticSpec& spec, int label, std::size_t index) {
  Rng rng = make_stream(spec.seed, Stream::synth, static_cast<std::uint64_t>(label), index);
  const double S = static_cast<double>(spec.size);
  std::normal_distribution<double> nd(0.0, 1.0);
  detail::LesionShape shape{};
  BinaryMask mask;
  for (int attempt = 0;; ++attempt) {
    if (attempt == 200) throw NumericalError("synthetic generator failed to meet the roughness margin");
    shape = detail::LesionShape{};
    shape.cx = S * (0.5 + 0.08 * (uniform01(rng) - 0.5));
    shape.cy = S * (0.5 + 0.08 * (uniform01(rng) - 0.5));
    shape.psi = uniform01(rng) * M_PI;
    if (label == 0) {
      shape.a = S * (0.17 + 0.08 * uniform01(rng));
      shape.b = shape.a * (0.65 + 0.35 * uniform01(rng));
    } else {
      shape.a = S * (0.13 + 0.05 * uniform01(rng));
      shape.b = shape.a * (0.7 + 0.3 * uniform01(rng));
      shape.spikes = 8 + static_cast<int>(rng() % 9);
      shape.phase = uniform01(rng) * 2 * M_PI;
      shape.amplitude = 0.6 + 0.3 * uniform01(rng);
      shape.duty = 0.45 + 0.1 * uniform01(rng);
      for (int k = 0; k < shape.spikes; ++k) shape.spike_gain.push_back(0.7 + 0.6 * uniform01(rng));
    }
    mask = detail::render_mask(shape, spec.size);
    const double r = roughness(mask);
    if (mask.count() > 0 && (label == 0 ? r < spec.benign_max_roughness : r > spec.malignant_min_roughness))
      break;
  }

  GrayImage img(spec.size, spec.size);
  const auto texture = detail::bump_field(rng, spec.size, 6, S * 0.08);
  const double bg = 95 + 20 * uniform01(rng);
  for (std::size_t y = 0; y < spec.size; ++y)
    for (std::size_t x = 0; x < spec.size; ++x) {
      const std::size_t i = y * spec.size + x;
      double v = bg + 10 * texture[i] + 0.1 * (static_cast<double>(y) - S / 2) + 10 * nd(rng);
      if (mask.bits[i]) {
        v = label == 0 ? 45 + 5 * nd(rng) : 55 + 25 * texture[i] + 18 * nd(rng);
      }
      img.pixels[i] = detail::clamp_pixel(v);
    }
  Sample s;
  s.id = std::string(kClassNames[label]) + "/" + (label == 0 ? "b_" : "m_") +
         [&] {
           char buf[16];
           std::snprintf(buf, sizeof buf, "%04zu", index);
           return std::string(buf);
         }();
  s.label = label;
  s.image = std::move(img);
  s.mask = std::move(mask);
  return s;
}

/// Generates per_class samples of each class in memory, sorted by id.
inline std::vector<Sample> synth_samples(const SyntheticSpec& spec, std::size_t workers = 1) {
  std::vector<Sample> out(2 * spec.per_class);
  parallel_for(out.size(), workers, [&](std::size_t i) {
    const int label = i < spec.per_class ? 0 : 1;
    out[i] = synth_sample(spec, label, i % spec.per_class);
  });
  std::sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  return out;
}

/// Writes the samples in the load_dataset layout and returns them.
inline std::vector<Sample> synth_generate(const SyntheticSpec& spec, const fs::path& root,
                                          std::size_t workers = 1) {
  if (spec.per_class == 0) throw UsageError("synthetic count per class must be at least 1");
  std::error_code ec;
  for (const char* c : kClassNames) {
    fs::create_directories(root / c, ec);
    if (ec) throw UsageError("cannot create " + (root / c).string() + ": " + ec.message());
  }
  auto samples = synth_samples(spec, workers);
  for (const auto& s : samples) {
    write_gray(root / (s.id + spec.extension), s.image);
    write_mask(root / (s.id + "_mask" + spec.extension), s.mask);
  }
  return samples;
}

}  // namespace csamoe
