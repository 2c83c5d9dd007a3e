#pragma once

// 8-bit RGB images and binary PPM (P6) I/O.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vdt/dense_array.hpp"
#include "vdt/error.hpp"

namespace vdt {

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // height x width x 3, row-major

  Image() = default;
  Image(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), pixels(h * w * 3, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("image", "cannot open " + path + " for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("image", "write failed for " + path);
}

namespace detail {

// Next whitespace-delimited header token, skipping '#' comments.
inline std::string ppm_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string ignored;
      std::getline(in, ignored);
      if (!tok.empty()) break;
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
    } else {
      tok.push_back(ch);
    }
  }
  return tok;
}

}  // namespace detail

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("image", "cannot open " + path);
  auto bad = [&](const std::string& why) { return IoError("image", path + ": " + why); };
  if (detail::ppm_token(in) != "P6") throw bad("not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(detail::ppm_token(in));
    h = std::stoul(detail::ppm_token(in));
    maxval = std::stoul(detail::ppm_token(in));
  } catch (const std::exception&) {
    throw bad("malformed header");
  }
  if (w == 0 || h == 0) throw bad("zero-sized image");
  if (maxval != 255) throw bad("only 8-bit PPM is supported");
  Image img(h, w);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw bad("truncated pixel data");
  return img;
}

// Stacks images into a B x H x W x 3 array scaled to [-1, 1].
template <typename T>
DenseArray<T> to_tensor(const std::vector<Image>& images) {
  if (images.empty()) throw InputError("image", "cannot stack an empty image list");
  const std::size_t h = images.front().height, w = images.front().width;
  DenseArray<T> out({images.size(), h, w, 3});
  T* dst = out.data();
  for (const Image& img : images) {
    if (img.height != h || img.width != w) {
      throw InputError("image", "mixed image sizes in one batch: " + std::to_string(h) + "x" + std::to_string(w) +
                                    " vs " + std::to_string(img.height) + "x" + std::to_string(img.width));
    }
    for (std::uint8_t p : img.pixels) *dst++ = static_cast<T>(p) / T(127.5) - T(1);
  }
  return out;
}

}  // namespace vdt
