#pragma once

// 8-bit image decoding (binary PGM, PNG via libpng), RGB-to-gray conversion,
// corner-aligned bilinear resizing and PGM writing.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "gcf/errors.hpp"
#include "gcf/tensor.hpp"

namespace gcf {

// Interleaved 8-bit pixels, channels = 1 (gray) or 3 (RGB).
struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline RawImage decode_pgm(const std::vector<std::uint8_t>& bytes, const std::string& where) {
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw DataError("corrupt PGM header in " + where);
    }
    if (digits == 0) throw DataError("corrupt PGM header in " + where);
    return v;
  };
  RawImage img;
  img.width = read_int();
  img.height = read_int();
  const std::size_t maxval = read_int();
  if (img.width == 0 || img.height == 0 || maxval != 255) {
    throw DataError("unsupported PGM in " + where + " (need 8-bit, maxval 255)");
  }
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DataError("corrupt PGM header in " + where);
  ++pos;
  img.channels = 1;
  const std::size_t n = img.width * img.height;
  if (bytes.size() - pos < n) throw DataError("truncated PGM data in " + where);
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

inline RawImage decode_png(const std::vector<std::uint8_t>& bytes, const std::string& where) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw DataError("corrupt PNG " + where + ": " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  RawImage img;
  img.width = image.width;
  img.height = image.height;
  img.channels = color ? 3 : 1;
  img.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError("corrupt PNG " + where + ": " + msg);
  }
  return img;
}

}  // namespace detail

inline RawImage decode_image(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  static constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) return detail::decode_png(bytes, path.string());
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return detail::decode_pgm(bytes, path.string());
  throw DataError("unsupported image format: " + path.string() + " (expected PNG or binary PGM)");
}

// Planar float channels in [0,1] for an 8-bit image, converted to `channels`.
inline std::vector<double> to_planes(const RawImage& img, std::size_t channels) {
  const std::size_t n = img.width * img.height;
  std::vector<double> out(channels * n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* px = &img.pixels[i * img.channels];
    if (channels == 1) {
      out[i] = img.channels == 1 ? px[0] : 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
    } else {
      for (std::size_t c = 0; c < 3; ++c) out[c * n + i] = img.channels == 1 ? px[0] : px[c];
    }
  }
  for (auto& v : out) v /= 255.0;
  return out;
}

// Corner-aligned bilinear resize of one plane: output corners coincide with
// input corners, src = dst * (in - 1) / (out - 1).
inline std::vector<double> resize_bilinear(const std::vector<double>& plane, std::size_t in_w, std::size_t in_h,
                                           std::size_t out_w, std::size_t out_h) {
  std::vector<double> out(out_w * out_h);
  auto coord = [](std::size_t o, std::size_t in, std::size_t outn) {
    return outn == 1 ? 0.0 : static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(outn - 1);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, in_h, out_h);
    const std::size_t y0 = std::min(static_cast<std::size_t>(sy), in_h - 1);
    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, in_w, out_w);
      const std::size_t x0 = std::min(static_cast<std::size_t>(sx), in_w - 1);
      const std::size_t x1 = std::min(x0 + 1, in_w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = plane[y0 * in_w + x0] * (1 - fx) + plane[y0 * in_w + x1] * fx;
      const double bot = plane[y1 * in_w + x0] * (1 - fx) + plane[y1 * in_w + x1] * fx;
      out[y * out_w + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

// Decodes, converts to `channels`, resizes to size x size and scales to [0,1].
template <class T>
Tensor<T> load_image(const std::filesystem::path& path, std::size_t size, std::size_t channels) {
  if (channels != 1 && channels != 3) throw DataError("load_image: channels must be 1 or 3");
  const RawImage raw = decode_image(path);
  const auto planes = to_planes(raw, channels);
  const std::size_t n = raw.width * raw.height;
  std::vector<T> data;
  data.reserve(channels * size * size);
  for (std::size_t c = 0; c < channels; ++c) {
    std::vector<double> plane(planes.begin() + static_cast<std::ptrdiff_t>(c * n),
                              planes.begin() + static_cast<std::ptrdiff_t>((c + 1) * n));
    if (raw.width != size || raw.height != size) plane = resize_bilinear(plane, raw.width, raw.height, size, size);
    for (double v : plane) data.push_back(static_cast<T>(std::clamp(v, 0.0, 1.0)));
  }
  return Tensor<T>({channels, size, size}, std::move(data));
}

inline void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

inline void write_png(const std::filesystem::path& path, const RawImage& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

}  // namespace gcf
