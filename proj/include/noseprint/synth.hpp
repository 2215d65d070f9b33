#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "noseprint/augment.hpp"
#include "noseprint/errors.hpp"
#include "noseprint/image.hpp"
#include "noseprint/manifest.hpp"
#include "noseprint/plan.hpp"
#include "noseprint/rng.hpp"

namespace noseprint {

struct Wave {
  double fx = 0, fy = 0;  // cycles per unit length along x and y
  double phase = 0;
  double amplitude = 0;
};

/// Texture parameters of one synthetic identity, fully determined by `seed`.
struct IdentitySpec {
  std::string id;
  std::uint64_t seed = 0;
  std::vector<Wave> waves;
  std::vector<std::array<double, 2>> cells;  // cellular seed points in unit coordinates
};

/// Nuisance applied per rendered instance: a similarity transform, capture
/// lighting (gain about mid-gray, offset, linear ramp) and pixel noise.
/// Lighting is off by default; capture shifts come from ShiftProfile instead.
struct InstanceJitter {
  double max_rotate_deg = 25.0;
  double max_translate = 0.06;  // fraction of the frame
  double max_scale = 0.08;      // scale drawn from [1 - s, 1 + s]
  double max_gain = 0.0;        // gain drawn from [1 - g, 1 + g]
  double max_offset = 0.0;
  double max_ramp = 0.0;        // peak-to-center amplitude of the lighting ramp
  double noise_std = 0.03;

  static InstanceJitter none() { return {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0}; }
};

/// Capture-condition shift applied after the instance is rendered.
struct ShiftProfile {
  double blur_sigma = 0.0;
  double brightness = 0.0;  // additive
  double noise_std = 0.0;

  void validate() const {
    if (blur_sigma < 0 || brightness < 0 || noise_std < 0) throw ArgumentError("ShiftProfile fields must be >= 0");
  }
};

constexpr int kTextureWaves = 10;
constexpr int kTextureCells = 24;

inline IdentitySpec make_identity(std::string id, std::uint64_t seed) {
  IdentitySpec spec;
  spec.id = std::move(id);
  spec.seed = seed;
  RngStream rng(seed, 0);
  for (int k = 0; k < kTextureWaves; ++k) {
    const double freq = rng.uniform(3.0, 9.0);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    spec.waves.push_back({freq * std::cos(angle), freq * std::sin(angle), rng.uniform(0.0, 2.0 * std::numbers::pi),
                          rng.uniform(0.5, 1.0)});
  }
  for (int k = 0; k < kTextureCells; ++k) spec.cells.push_back({rng.uniform(-0.2, 1.2), rng.uniform(-0.2, 1.2)});
  return spec;
}

/// Texture value at unit coordinates (u, v): a sinusoid bank plus a
/// nearest-seed-distance ridge field, bounded to [0, 1]. The field is mirrored
/// about u = 0.5, giving the left-right symmetry of a nose.
inline double texture_value(const IdentitySpec& spec, double u, double v) {
  u = 0.5 + std::abs(u - 0.5);
  double wave = 0.0, total = 0.0;
  for (const auto& w : spec.waves) {
    wave += w.amplitude * std::sin(2.0 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
    total += w.amplitude;
  }
  wave = total > 0 ? wave / total : 0.0;
  double nearest = std::numeric_limits<double>::infinity();
  for (const auto& c : spec.cells) nearest = std::min(nearest, std::hypot(u - c[0], v - c[1]));
  const double ridge = 1.0 - 2.0 * std::min(1.0, nearest / 0.18);
  return std::clamp(0.5 + 0.3 * wave + 0.2 * ridge, 0.0, 1.0);
}

namespace detail {

// Samples the texture through a similarity transform about the frame center.
inline ImageBuffer render_transformed(const IdentitySpec& spec, int size, double rotate_rad, double scale, double tx,
                                      double ty) {
  ImageBuffer img(size, size, 1);
  const double c = std::cos(rotate_rad), s = std::sin(rotate_rad);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double pu = (x + 0.5) / size - 0.5, pv = (y + 0.5) / size - 0.5;
      const double u = (c * pu - s * pv) / scale + 0.5 - tx;
      const double v = (s * pu + c * pv) / scale + 0.5 - ty;
      img.at(y, x) = static_cast<float>(texture_value(spec, u, v));
    }
  }
  return img;
}

}  // namespace detail

inline ImageBuffer render_identity(const IdentitySpec& spec, int size) {
  if (size < 16) throw ArgumentError("render_identity: size must be >= 16");
  return detail::render_transformed(spec, size, 0.0, 1.0, 0.0, 0.0);
}

/// Base texture under a per-instance similarity jitter with additive noise,
/// followed by the shift profile (blur, brightness, noise). Deterministic in
/// (spec.seed, instance_idx).
inline ImageBuffer render_instance(const IdentitySpec& spec, int instance_idx, int size, const InstanceJitter& jitter,
                                   const ShiftProfile& shift) {
  if (size < 16) throw ArgumentError("render_instance: size must be >= 16");
  shift.validate();
  RngStream rng(spec.seed, 1 + static_cast<std::uint64_t>(instance_idx));
  const double rot = rng.uniform(-1.0, 1.0) * jitter.max_rotate_deg * std::numbers::pi / 180.0;
  const double scale = 1.0 + rng.uniform(-1.0, 1.0) * jitter.max_scale;
  const double tx = rng.uniform(-1.0, 1.0) * jitter.max_translate;
  const double ty = rng.uniform(-1.0, 1.0) * jitter.max_translate;
  const double gain = 1.0 + rng.uniform(-1.0, 1.0) * jitter.max_gain;
  const double offset = rng.uniform(-1.0, 1.0) * jitter.max_offset;
  const double ramp = rng.uniform(0.0, 1.0) * jitter.max_ramp;
  const double ramp_dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
  ImageBuffer img = detail::render_transformed(spec, size, rot, scale, tx, ty);
  if (gain != 1.0 || offset != 0.0 || ramp != 0.0) {
    const double rx = std::cos(ramp_dir), ry = std::sin(ramp_dir);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double pu = (x + 0.5) / size - 0.5, pv = (y + 0.5) / size - 0.5;
        const double light = offset + 2.0 * ramp * (rx * pu + ry * pv);
        img.at(y, x) = static_cast<float>(std::clamp((img.at(y, x) - 0.5) * gain + 0.5 + light, 0.0, 1.0));
      }
  }
  if (jitter.noise_std > 0) {
    for (auto& v : img.data) v = static_cast<float>(std::clamp(v + jitter.noise_std * rng.normal(), 0.0, 1.0));
  }
  img = gaussian_blur(img, shift.blur_sigma);
  if (shift.brightness > 0) {
    for (auto& v : img.data) v = static_cast<float>(std::clamp(v + shift.brightness, 0.0, 1.0));
  }
  if (shift.noise_std > 0) {
    RngStream noise = rng.child(0x5A1F7);
    for (auto& v : img.data) v = static_cast<float>(std::clamp(v + shift.noise_std * noise.normal(), 0.0, 1.0));
  }
  return img;
}

inline std::string identity_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "id_%04d", index);
  return buf;
}

inline IdentitySpec dataset_identity(std::uint64_t dataset_seed, int index) {
  return make_identity(identity_name(index), detail::splitmix64(dataset_seed ^ detail::splitmix64(static_cast<std::uint64_t>(index))));
}

struct SynthOptions {
  int n_ids = 20;
  int per_id = 10;
  int size = 64;
  std::uint64_t seed = 0;
  ShiftProfile shift;
  InstanceJitter jitter;
};

/// Writes n_ids * per_id PGM files plus `manifest.csv` into out_dir.
inline Manifest generate_dataset(const SynthOptions& opt, const std::filesystem::path& out_dir) {
  if (opt.n_ids < 2 || opt.per_id < 2) throw ArgumentError("generate_dataset: need n_ids >= 2 and per_id >= 2");
  if (opt.size < 16) throw ArgumentError("generate_dataset: size must be >= 16");
  opt.shift.validate();
  detail::ensure_writable_dir(out_dir);
  Manifest m;
  m.base_dir = out_dir;
  for (int i = 0; i < opt.n_ids; ++i) {
    const IdentitySpec spec = dataset_identity(opt.seed, i);
    for (int k = 0; k < opt.per_id; ++k) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_%03d.pgm", spec.id.c_str(), k);
      save_image(render_instance(spec, k, opt.size, opt.jitter, opt.shift), out_dir / name);
      m.rows.push_back({name, spec.id, name, ""});
    }
  }
  write_manifest(m, out_dir / "manifest.csv");
  return m;
}

/// Mean Pearson correlation of pixel values within and across identities.
struct CorrelationSummary {
  double within = 0.0;
  double between = 0.0;
};

inline double pixel_correlation(const ImageBuffer& a, const ImageBuffer& b) {
  if (!a.same_shape(b)) throw ArgumentError("pixel_correlation: shape mismatch");
  const std::size_t n = a.data.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a.data[i];
    mb += b.data[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a.data[i] - ma) * (b.data[i] - mb);
    saa += (a.data[i] - ma) * (a.data[i] - ma);
    sbb += (b.data[i] - mb) * (b.data[i] - mb);
  }
  return (saa > 0 && sbb > 0) ? sab / std::sqrt(saa * sbb) : 0.0;
}

inline CorrelationSummary correlation_summary(const std::vector<ImageBuffer>& images, const std::vector<std::string>& ids) {
  double within = 0, between = 0;
  std::size_t nw = 0, nb = 0;
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t j = i + 1; j < images.size(); ++j) {
      const double r = pixel_correlation(images[i], images[j]);
      if (ids[i] == ids[j]) {
        within += r;
        ++nw;
      } else {
        between += r;
        ++nb;
      }
    }
  return {nw ? within / nw : 0.0, nb ? between / nb : 0.0};
}

}  // namespace noseprint
