#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "noseprint/errors.hpp"

namespace noseprint {

/// H x W x C raster with values in [0,1], row-major, channel-interleaved.
struct ImageBuffer {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> data;

  ImageBuffer() = default;
  ImageBuffer(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {
    if (h < 1 || w < 1) throw ArgumentError("ImageBuffer: dimensions must be positive");
    if (c != 1 && c != 3) throw ArgumentError("ImageBuffer: channels must be 1 or 3");
  }

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  float& at(int y, int x, int c = 0) { return data[index(y, x, c)]; }
  float at(int y, int x, int c = 0) const { return data[index(y, x, c)]; }

  bool same_shape(const ImageBuffer& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const ImageBuffer&) const = default;

  void clamp() {
    for (auto& v : data) v = std::clamp(v, 0.0f, 1.0f);
  }
};

namespace detail {

struct PnmCursor {
  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;

  void skip_space_and_comments() {
    while (pos < bytes.size()) {
      const unsigned char ch = bytes[pos];
      if (ch == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\v' || ch == '\f') {
        ++pos;
      } else {
        break;
      }
    }
  }

  int read_uint(const char* field) {
    skip_space_and_comments();
    const std::size_t start = pos;
    long value = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      value = value * 10 + (bytes[pos] - '0');
      if (value > 1 << 24) throw FormatError(std::string("PNM ") + field + " too large", start);
      ++pos;
    }
    if (pos == start) throw FormatError(std::string("PNM header: expected ") + field, start);
    return static_cast<int>(value);
  }
};

}  // namespace detail

/// Decodes an in-memory binary PGM (P5) or PPM (P6) with maxval 255.
inline ImageBuffer decode_pnm(const std::vector<unsigned char>& bytes) {
  detail::PnmCursor cur{bytes};
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("unsupported image magic (expected P5 or P6)", 0);
  }
  const int channels = bytes[1] == '5' ? 1 : 3;
  cur.pos = 2;
  const int width = cur.read_uint("width");
  const int height = cur.read_uint("height");
  cur.skip_space_and_comments();
  const std::size_t maxval_at = cur.pos;
  const int maxval = cur.read_uint("maxval");
  if (width < 1 || height < 1) throw FormatError("PNM dimensions must be positive", maxval_at);
  if (maxval != 255) throw FormatError("PNM maxval must be 255, got " + std::to_string(maxval), maxval_at);
  if (cur.pos >= bytes.size()) throw FormatError("PNM header truncated", cur.pos);
  ++cur.pos;  // single whitespace byte before the raster
  const std::size_t count = static_cast<std::size_t>(width) * height * channels;
  if (bytes.size() - cur.pos < count) {
    throw FormatError("PNM payload truncated: need " + std::to_string(count) + " bytes, have " +
                          std::to_string(bytes.size() - cur.pos),
                      bytes.size());
  }
  ImageBuffer img(height, width, channels);
  for (std::size_t i = 0; i < count; ++i) img.data[i] = static_cast<float>(bytes[cur.pos + i]) / 255.0f;
  return img;
}

inline std::vector<unsigned char> encode_pnm(const ImageBuffer& img) {
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" +
                             std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(header.size() + img.data.size());
  for (float v : img.data) {
    const double clamped = std::clamp(static_cast<double>(v), 0.0, 1.0);
    out.push_back(static_cast<unsigned char>(std::lround(clamped * 255.0)));
  }
  return out;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline ImageBuffer load_image(const std::filesystem::path& path) {
  try {
    return decode_pnm(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.message(), e.offset());
  }
}

inline void save_image(const ImageBuffer& img, const std::filesystem::path& path) {
  write_file_bytes(path, encode_pnm(img));
}

}  // namespace noseprint
