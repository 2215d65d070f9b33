#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "noseprint/errors.hpp"
#include "noseprint/image.hpp"
#include "noseprint/rng.hpp"

namespace noseprint {

/// Forward map from input pixel coordinates (x, y) to output coordinates:
/// x' = m[0][0] x + m[0][1] y + m[0][2], y' = m[1][0] x + m[1][1] y + m[1][2].
using AffineMatrix = std::array<std::array<double, 3>, 2>;

inline AffineMatrix affine_identity() { return {{{1, 0, 0}, {0, 1, 0}}}; }

inline AffineMatrix affine_compose(const AffineMatrix& outer, const AffineMatrix& inner) {
  AffineMatrix r{};
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) r[i][j] = outer[i][0] * inner[0][j] + outer[i][1] * inner[1][j];
    r[i][2] = outer[i][0] * inner[0][2] + outer[i][1] * inner[1][2] + outer[i][2];
  }
  return r;
}

inline AffineMatrix affine_translation(double dx, double dy) { return {{{1, 0, dx}, {0, 1, dy}}}; }

// Linear part `a` applied about the image center.
inline AffineMatrix affine_about_center(const std::array<std::array<double, 2>, 2>& a, int height, int width) {
  const double cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
  AffineMatrix lin = {{{a[0][0], a[0][1], 0}, {a[1][0], a[1][1], 0}}};
  return affine_compose(affine_translation(cx, cy), affine_compose(lin, affine_translation(-cx, -cy)));
}

inline AffineMatrix affine_rotation(double degrees, int height, int width) {
  const double t = degrees * std::numbers::pi / 180.0;
  return affine_about_center({{{std::cos(t), -std::sin(t)}, {std::sin(t), std::cos(t)}}}, height, width);
}

inline AffineMatrix affine_shear(double degrees, int height, int width) {
  return affine_about_center({{{1.0, std::tan(degrees * std::numbers::pi / 180.0)}, {0.0, 1.0}}}, height, width);
}

inline AffineMatrix affine_scale(double s, int height, int width) {
  return affine_about_center({{{s, 0.0}, {0.0, s}}}, height, width);
}

/// Bilinear resize with half-pixel centers: source = (i + 0.5) * in / out - 0.5,
/// clamped to the edges.
inline ImageBuffer resize_bilinear(const ImageBuffer& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ArgumentError("resize_bilinear: output dimensions must be >= 1");
  if (out_h == img.height && out_w == img.width) return img;
  ImageBuffer out(out_h, out_w, img.channels);
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  for (int i = 0; i < out_h; ++i) {
    const double fy = std::clamp((i + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int j = 0; j < out_w; ++j) {
      const double fx = std::clamp((j + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
        const double bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
        out.at(i, j, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

/// Inverse-mapped bilinear warp. Neighbors outside the frame read `fill`.
inline ImageBuffer affine(const ImageBuffer& img, const AffineMatrix& m, float fill = 0.0f) {
  const double det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
  if (std::abs(det) <= 1e-8) throw ArgumentError("affine: matrix is singular");
  if (m == affine_identity()) return img;
  const double i00 = m[1][1] / det, i01 = -m[0][1] / det;
  const double i10 = -m[1][0] / det, i11 = m[0][0] / det;
  ImageBuffer out(img.height, img.width, img.channels);
  auto sample = [&](int y, int x, int c) -> double {
    if (y < 0 || y >= img.height || x < 0 || x >= img.width) return fill;
    return img.at(y, x, c);
  };
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double ox = x - m[0][2], oy = y - m[1][2];
      const double sx = i00 * ox + i01 * oy;
      const double sy = i10 * ox + i11 * oy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
      const double wx = sx - fx, wy = sy - fy;
      for (int c = 0; c < img.channels; ++c) {
        double v;
        if (y0 < -1 || y0 >= img.height || x0 < -1 || x0 >= img.width) {
          v = fill;
        } else {
          v = (sample(y0, x0, c) * (1 - wx) + sample(y0, x0 + 1, c) * wx) * (1 - wy) +
              (sample(y0 + 1, x0, c) * (1 - wx) + sample(y0 + 1, x0 + 1, c) * wx) * wy;
        }
        out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

inline ImageBuffer crop(const ImageBuffer& img, int y0, int x0, int h, int w) {
  if (h < 1 || w < 1 || y0 < 0 || x0 < 0 || y0 + h > img.height || x0 + w > img.width) {
    throw ArgumentError("crop: window outside the image");
  }
  ImageBuffer out(h, w, img.channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
  return out;
}

struct CropRange {
  double area_lo = 0.6;
  double area_hi = 1.0;
  double aspect_lo = 3.0 / 4.0;
  double aspect_hi = 4.0 / 3.0;
};

/// Random-area, random-aspect window resized back to the input size.
/// Up to 10 attempts; falls back to the full frame.
inline ImageBuffer random_crop_resize(const ImageBuffer& img, RngStream& rng, const CropRange& range = {}) {
  if (!(range.area_lo <= range.area_hi) || range.area_lo <= 0.0 || range.area_hi > 1.0) {
    throw ArgumentError("random_crop_resize: area range must satisfy 0 < lo <= hi <= 1");
  }
  if (!(range.aspect_lo > 0.0 && range.aspect_lo <= range.aspect_hi)) {
    throw ArgumentError("random_crop_resize: invalid aspect range");
  }
  const double total = static_cast<double>(img.height) * img.width;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = rng.uniform(range.area_lo, range.area_hi) * total;
    const double log_aspect = rng.uniform(std::log(range.aspect_lo), std::log(range.aspect_hi));
    const double aspect = std::exp(log_aspect);
    const int w = static_cast<int>(std::lround(std::sqrt(area * aspect)));
    const int h = static_cast<int>(std::lround(std::sqrt(area / aspect)));
    if (w < 1 || h < 1 || w > img.width || h > img.height) continue;
    const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(img.height - h + 1)));
    const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(img.width - w + 1)));
    if (h == img.height && w == img.width) return img;
    return resize_bilinear(crop(img, y0, x0, h, w), img.height, img.width);
  }
  return img;
}

inline double luma(const ImageBuffer& img, int y, int x) {
  if (img.channels == 1) return img.at(y, x, 0);
  return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

inline double mean_luma(const ImageBuffer& img) {
  double s = 0.0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) s += luma(img, y, x);
  return s / (static_cast<double>(img.height) * img.width);
}

struct ColorFactors {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
};

/// Brightness, then contrast about the mean luma, then saturation toward the
/// per-pixel luma; each stage clamps. A factor of exactly 1 skips its stage.
/// Saturation is a no-op on grayscale input.
inline ImageBuffer adjust_color(const ImageBuffer& img, const ColorFactors& f) {
  ImageBuffer out = img;
  if (f.brightness != 1.0) {
    for (auto& v : out.data) v = static_cast<float>(std::clamp(v * f.brightness, 0.0, 1.0));
  }
  if (f.contrast != 1.0) {
    const double mean = mean_luma(out);
    for (auto& v : out.data) v = static_cast<float>(std::clamp((v - mean) * f.contrast + mean, 0.0, 1.0));
  }
  if (f.saturation != 1.0 && out.channels == 3) {
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        const double gray = luma(out, y, x);
        for (int c = 0; c < 3; ++c) {
          const double v = gray * (1.0 - f.saturation) + out.at(y, x, c) * f.saturation;
          out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return out;
}

struct JitterStrength {
  double brightness = 0.0;
  double contrast = 0.0;
  double saturation = 0.0;
};

/// Factors are drawn uniformly from [1 - d, 1 + d]; a zero strength yields
/// exactly 1. Always consumes three draws.
inline ImageBuffer color_jitter(const ImageBuffer& img, RngStream& rng, const JitterStrength& s) {
  for (double d : {s.brightness, s.contrast, s.saturation}) {
    if (!(d >= 0.0 && d < 1.0)) throw ArgumentError("color_jitter: strengths must lie in [0, 1)");
  }
  auto draw = [&rng](double d) {
    const double u = rng.uniform();
    return d == 0.0 ? 1.0 : 1.0 - d + 2.0 * d * u;
  };
  ColorFactors f;
  f.brightness = draw(s.brightness);
  f.contrast = draw(s.contrast);
  f.saturation = draw(s.saturation);
  return adjust_color(img, f);
}

/// Normalized 1-D Gaussian taps, radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    total += k[i + radius];
  }
  for (auto& v : k) v /= total;
  return k;
}

/// Separable Gaussian filter with clamp-to-edge padding.
inline ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
  if (sigma < 0.0) throw ArgumentError("gaussian_blur: sigma must be >= 0");
  if (sigma < 1e-3) return img;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int H = img.height, W = img.width, C = img.channels;
  std::vector<double> tmp(img.data.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int t = -r; t <= r; ++t) acc += k[t + r] * img.at(y, std::clamp(x + t, 0, W - 1), c);
        tmp[img.index(y, x, c)] = acc;
      }
  ImageBuffer out(H, W, C);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int t = -r; t <= r; ++t) acc += k[t + r] * tmp[img.index(std::clamp(y + t, 0, H - 1), x, c)];
        out.at(y, x, c) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  return out;
}

inline ImageBuffer horizontal_flip(const ImageBuffer& img) {
  ImageBuffer out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
  return out;
}

struct CutBox {
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open [y0, y1) x [x0, x1)
  int area() const { return std::max(0, y1 - y0) * std::max(0, x1 - x0); }
};

struct CutmixResult {
  ImageBuffer image;
  double lambda_effective = 1.0;
  CutBox box;
};

/// Pastes `box` from `b` into `a`; lambda_effective = 1 - box area / frame area.
inline CutmixResult cutmix_with_box(const ImageBuffer& a, const ImageBuffer& b, CutBox box) {
  if (!a.same_shape(b)) throw ArgumentError("cutmix: images must have identical dimensions");
  box.y0 = std::clamp(box.y0, 0, a.height);
  box.y1 = std::clamp(box.y1, 0, a.height);
  box.x0 = std::clamp(box.x0, 0, a.width);
  box.x1 = std::clamp(box.x1, 0, a.width);
  CutmixResult r{a, 1.0, box};
  for (int y = box.y0; y < box.y1; ++y)
    for (int x = box.x0; x < box.x1; ++x)
      for (int c = 0; c < a.channels; ++c) r.image.at(y, x, c) = b.at(y, x, c);
  r.lambda_effective = 1.0 - static_cast<double>(box.area()) / (static_cast<double>(a.height) * a.width);
  return r;
}

/// Box geometry for a given lambda and center: sides H*sqrt(1-lambda), W*sqrt(1-lambda).
inline CutBox cutmix_box(int height, int width, double lambda, double cy, double cx) {
  const double ratio = std::sqrt(std::clamp(1.0 - lambda, 0.0, 1.0));
  const int bh = static_cast<int>(std::lround(height * ratio));
  const int bw = static_cast<int>(std::lround(width * ratio));
  CutBox box;
  box.y0 = std::clamp(static_cast<int>(std::lround(cy - bh / 2.0)), 0, height);
  box.x0 = std::clamp(static_cast<int>(std::lround(cx - bw / 2.0)), 0, width);
  box.y1 = std::clamp(static_cast<int>(std::lround(cy + bh / 2.0)), 0, height);
  box.x1 = std::clamp(static_cast<int>(std::lround(cx + bw / 2.0)), 0, width);
  return box;
}

/// lambda ~ Beta(alpha, alpha), box center uniform in the frame.
inline CutmixResult cutmix(const ImageBuffer& a, const ImageBuffer& b, RngStream& rng, double beta_alpha = 1.0) {
  if (!a.same_shape(b)) throw ArgumentError("cutmix: images must have identical dimensions");
  const double lambda = rng.beta(beta_alpha, beta_alpha);
  const double cy = rng.uniform() * a.height;
  const double cx = rng.uniform() * a.width;
  return cutmix_with_box(a, b, cutmix_box(a.height, a.width, lambda, cy, cx));
}

}  // namespace noseprint
