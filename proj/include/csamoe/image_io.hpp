#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <string>

#include "csamoe/errors.hpp"
#include "csamoe/image.hpp"

// 8-bit grayscale PGM (binary P5) and PNG reading/writing. PNG goes through
// libpng's simplified API.

namespace csamoe {

namespace fs = std::filesystem;

namespace detail {

inline std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

inline void skip_pgm_space(std::istream& in) {
  while (in) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
}

}  // namespace detail

inline GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw FormatError(path.string() + ": not a binary PGM (P5)");
  std::size_t w = 0, h = 0, maxval = 0;
  detail::skip_pgm_space(in);
  in >> w;
  detail::skip_pgm_space(in);
  in >> h;
  detail::skip_pgm_space(in);
  in >> maxval;
  in.get();
  if (!in || w == 0 || h == 0 || maxval == 0 || maxval > 255)
    throw FormatError(path.string() + ": unsupported PGM header");
  GrayImage img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(w * h));
  if (in.gcount() != static_cast<std::streamsize>(w * h))
    throw FormatError(path.string() + ": truncated PGM data");
  if (maxval != 255)
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::min<std::size_t>(255, p * 255 / maxval));
  return img;
}

inline void write_pgm(const fs::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

inline GrayImage read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw FormatError(path.string() + ": " + image.message);
  image.format = PNG_FORMAT_GRAY;
  GrayImage img(image.width, image.height);
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError(path.string() + ": " + image.message);
  }
  return img;
}

inline void write_png(const fs::path& path, const GrayImage& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, img.pixels.data(), 0, nullptr))
    throw FormatError(path.string() + ": " + image.message);
}

/// Reads .pgm or .png by extension.
inline GrayImage read_gray(const fs::path& path) {
  const std::string ext = detail::lower_ext(path);
  if (ext == ".pgm") return read_pgm(path);
  if (ext == ".png") return read_png(path);
  throw FormatError(path.string() + ": unsupported image extension");
}

inline void write_gray(const fs::path& path, const GrayImage& img) {
  const std::string ext = detail::lower_ext(path);
  if (ext == ".pgm") return write_pgm(path, img);
  if (ext == ".png") return write_png(path, img);
  throw FormatError(path.string() + ": unsupported image extension");
}

/// Loads a mask image, thresholding intensities > 127 to 1.
inline BinaryMask read_mask(const fs::path& path) {
  const GrayImage g = read_gray(path);
  BinaryMask m(g.width, g.height);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) m.bits[i] = g.pixels[i] > 127 ? 1 : 0;
  return m;
}

inline void write_mask(const fs::path& path, const BinaryMask& mask) {
  GrayImage g(mask.width, mask.height);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = mask.bits[i] ? 255 : 0;
  write_gray(path, g);
}

}  // namespace csamoe
