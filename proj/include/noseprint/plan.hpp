#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "noseprint/augment.hpp"
#include "noseprint/errors.hpp"
#include "noseprint/image.hpp"
#include "noseprint/manifest.hpp"
#include "noseprint/rng.hpp"

namespace noseprint {

/// One pipeline stage: an op name, its apply probability, and its parameters.
struct AugStep {
  std::string op;
  double p = 1.0;
  nlohmann::json params = nlohmann::json::object();
};

struct AugPlan {
  std::uint64_t seed = 0;
  std::vector<AugStep> steps;
};

namespace detail {

struct Range {
  double lo = 0.0, hi = 0.0;
  double draw(RngStream& rng) const { return rng.uniform(lo, hi); }
};

inline const std::set<std::string>& allowed_params(const std::string& op) {
  static const std::map<std::string, std::set<std::string>> table = {
      {"resize", {"height", "width"}},
      {"affine", {"rotate", "translate", "shear", "scale", "fill"}},
      {"rotate", {"degrees", "fill"}},
      {"translate", {"fraction", "fill"}},
      {"shear", {"degrees", "fill"}},
      {"crop", {"area", "aspect"}},
      {"color_jitter", {"brightness", "contrast", "saturation"}},
      {"brightness", {"strength"}},
      {"contrast", {"strength"}},
      {"blur", {"sigma"}},
      {"flip", {}},
      {"augmix", {"width", "depth", "alpha", "pool"}},
  };
  const auto it = table.find(op);
  if (it == table.end()) throw ConfigError("plan: unknown op '" + op + "'");
  return it->second;
}

// Ops that AugMix chains may draw. Blur and saturation stay out so that a
// blur shift at test time is not seen during chain mixing.
inline bool augmix_pool_op(const std::string& op) {
  static const std::set<std::string> ok = {"rotate", "translate", "shear", "affine", "crop", "brightness", "contrast"};
  return ok.count(op) > 0;
}

inline Range range_param(const nlohmann::json& params, const char* key, Range fallback, const std::string& where) {
  if (!params.contains(key)) return fallback;
  const auto& v = params.at(key);
  if (v.is_number()) return {v.get<double>(), v.get<double>()};
  if (v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number()) {
    Range r{v[0].get<double>(), v[1].get<double>()};
    if (r.lo > r.hi) throw ConfigError(where + "." + key + ": range lower bound exceeds upper bound");
    return r;
  }
  throw ConfigError(where + "." + key + ": expected a number or a [lo, hi] pair");
}

inline double number_param(const nlohmann::json& params, const char* key, double fallback, const std::string& where) {
  if (!params.contains(key)) return fallback;
  const auto& v = params.at(key);
  if (!v.is_number()) throw ConfigError(where + "." + key + ": expected a number");
  return v.get<double>();
}

}  // namespace detail

AugStep parse_step(const nlohmann::json& j, const std::string& where);

/// Checks op names, parameter keys and value shapes; errors name the offending key.
inline void validate_step(const AugStep& step, const std::string& where) {
  const auto& allowed = detail::allowed_params(step.op);
  if (!(step.p >= 0.0 && step.p <= 1.0)) throw ConfigError(where + ".p: probability must lie in [0, 1]");
  if (!step.params.is_object()) throw ConfigError(where + ".params: expected an object");
  for (const auto& [key, value] : step.params.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ".params." + key + ": unknown parameter for op '" + step.op + "'");
    if (key == "pool") {
      if (!value.is_array() || value.empty()) throw ConfigError(where + ".params.pool: expected a non-empty array of steps");
      for (std::size_t i = 0; i < value.size(); ++i) {
        const std::string w = where + ".params.pool[" + std::to_string(i) + "]";
        const AugStep inner = parse_step(value[i], w);
        if (!detail::augmix_pool_op(inner.op)) throw ConfigError(w + ".op: '" + inner.op + "' is not allowed in an augmix pool");
      }
    } else if (key == "height" || key == "width") {
      if (!value.is_number_integer() || value.get<long long>() < 1) throw ConfigError(where + ".params." + key + ": expected a positive integer");
    } else if (key == "fill" || key == "alpha" || key == "brightness" || key == "contrast" || key == "saturation" ||
               key == "strength") {
      const double v = detail::number_param(step.params, key.c_str(), 0.0, where + ".params");
      if (key == "fill" && !(v >= 0.0 && v <= 1.0)) throw ConfigError(where + ".params.fill: must lie in [0, 1]");
      if (key == "alpha" && !(v > 0.0)) throw ConfigError(where + ".params.alpha: must be positive");
      if (key != "fill" && key != "alpha" && !(v >= 0.0 && v < 1.0)) throw ConfigError(where + ".params." + key + ": must lie in [0, 1)");
    } else {
      detail::range_param(step.params, key.c_str(), {}, where + ".params");
    }
  }
  if (step.op == "augmix") {
    if (step.params.contains("width") && (!step.params["width"].is_number_integer() || step.params["width"].get<int>() < 1)) {
      throw ConfigError(where + ".params.width: expected an integer >= 1");
    }
    const auto depth = detail::range_param(step.params, "depth", {1, 3}, where + ".params");
    if (depth.lo < 1) throw ConfigError(where + ".params.depth: must be >= 1");
    if (!step.params.contains("pool")) throw ConfigError(where + ".params.pool: augmix requires a pool");
  }
  if (step.op == "resize" && (!step.params.contains("height") || !step.params.contains("width"))) {
    throw ConfigError(where + ".params: resize requires height and width");
  }
}

inline AugStep parse_step(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key != "op" && key != "p" && key != "params") throw ConfigError(where + "." + key + ": unknown key");
  }
  if (!j.contains("op") || !j["op"].is_string()) throw ConfigError(where + ".op: missing or not a string");
  AugStep s;
  s.op = j["op"].get<std::string>();
  if (j.contains("p")) {
    if (!j["p"].is_number()) throw ConfigError(where + ".p: expected a number");
    s.p = j["p"].get<double>();
  }
  if (j.contains("params")) s.params = j["params"];
  validate_step(s, where);
  return s;
}

inline AugPlan plan_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("plan: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "seed" && key != "steps") throw ConfigError("plan." + key + ": unknown key");
  }
  AugPlan plan;
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned() && !(j["seed"].is_number_integer() && j["seed"].get<long long>() >= 0)) {
      throw ConfigError("plan.seed: expected an unsigned integer");
    }
    plan.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("steps")) {
    if (!j["steps"].is_array()) throw ConfigError("plan.steps: expected an array");
    for (std::size_t i = 0; i < j["steps"].size(); ++i) {
      plan.steps.push_back(parse_step(j["steps"][i], "plan.steps[" + std::to_string(i) + "]"));
    }
  }
  return plan;
}

inline nlohmann::json step_to_json(const AugStep& s) { return {{"op", s.op}, {"p", s.p}, {"params", s.params}}; }

inline nlohmann::json plan_to_json(const AugPlan& plan) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : plan.steps) steps.push_back(step_to_json(s));
  return {{"seed", plan.seed}, {"steps", steps}};
}

inline AugPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plan " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("plan " + path.string() + ": " + e.what());
  }
  return plan_from_json(j);
}

struct AugmixParams {
  int width = 3;
  int depth_lo = 1;
  int depth_hi = 3;
  double alpha = 1.0;
  std::vector<AugStep> pool;
};

ImageBuffer augmix(const ImageBuffer& img, RngStream& rng, const AugmixParams& params);

/// Applies the op unconditionally (the step's probability is not consulted).
inline ImageBuffer apply_op(const ImageBuffer& img, const AugStep& step, RngStream& rng) {
  const auto& prm = step.params;
  const std::string& where = step.op;
  const int H = img.height, W = img.width;
  auto fill = [&] { return static_cast<float>(detail::number_param(prm, "fill", 0.0, where)); };
  if (step.op == "resize") {
    return resize_bilinear(img, prm.at("height").get<int>(), prm.at("width").get<int>());
  }
  if (step.op == "affine") {
    const double rot = detail::range_param(prm, "rotate", {-15, 15}, where).draw(rng);
    const auto tr = detail::range_param(prm, "translate", {-0.05, 0.05}, where);
    const double tx = tr.draw(rng) * W, ty = tr.draw(rng) * H;
    const double sh = detail::range_param(prm, "shear", {-10, 10}, where).draw(rng);
    const double sc = detail::range_param(prm, "scale", {0.9, 1.1}, where).draw(rng);
    AffineMatrix m = affine_compose(affine_rotation(rot, H, W), affine_compose(affine_shear(sh, H, W), affine_scale(sc, H, W)));
    m = affine_compose(affine_translation(tx, ty), m);
    return affine(img, m, fill());
  }
  if (step.op == "rotate") {
    const double deg = detail::range_param(prm, "degrees", {-15, 15}, where).draw(rng);
    return affine(img, deg == 0.0 ? affine_identity() : affine_rotation(deg, H, W), fill());
  }
  if (step.op == "translate") {
    const auto r = detail::range_param(prm, "fraction", {-0.1, 0.1}, where);
    const double tx = r.draw(rng) * W, ty = r.draw(rng) * H;
    return affine(img, affine_translation(tx, ty), fill());
  }
  if (step.op == "shear") {
    const double deg = detail::range_param(prm, "degrees", {-10, 10}, where).draw(rng);
    return affine(img, deg == 0.0 ? affine_identity() : affine_shear(deg, H, W), fill());
  }
  if (step.op == "crop") {
    const auto area = detail::range_param(prm, "area", {0.6, 1.0}, where);
    const auto aspect = detail::range_param(prm, "aspect", {3.0 / 4.0, 4.0 / 3.0}, where);
    return random_crop_resize(img, rng, {area.lo, area.hi, aspect.lo, aspect.hi});
  }
  if (step.op == "color_jitter") {
    return color_jitter(img, rng,
                        {detail::number_param(prm, "brightness", 0.2, where), detail::number_param(prm, "contrast", 0.2, where),
                         detail::number_param(prm, "saturation", 0.2, where)});
  }
  if (step.op == "brightness") return color_jitter(img, rng, {detail::number_param(prm, "strength", 0.3, where), 0, 0});
  if (step.op == "contrast") return color_jitter(img, rng, {0, detail::number_param(prm, "strength", 0.3, where), 0});
  if (step.op == "blur") return gaussian_blur(img, detail::range_param(prm, "sigma", {0.1, 2.0}, where).draw(rng));
  if (step.op == "flip") return horizontal_flip(img);
  if (step.op == "augmix") {
    AugmixParams ap;
    if (prm.contains("width")) ap.width = prm["width"].get<int>();
    const auto depth = detail::range_param(prm, "depth", {1, 3}, where);
    ap.depth_lo = static_cast<int>(depth.lo);
    ap.depth_hi = static_cast<int>(depth.hi);
    ap.alpha = detail::number_param(prm, "alpha", 1.0, where);
    for (std::size_t i = 0; i < prm.at("pool").size(); ++i) ap.pool.push_back(parse_step(prm["pool"][i], where + ".pool"));
    return augmix(img, rng, ap);
  }
  throw ConfigError("plan: unknown op '" + step.op + "'");
}

/// Draws the apply decision (always one draw), then runs the op if selected.
inline ImageBuffer apply_step(const ImageBuffer& img, const AugStep& step, RngStream& rng) {
  const double u = rng.uniform();
  if (u >= step.p) return img;
  return apply_op(img, step, rng);
}

/// output = m x + (1 - m) sum_i w_i chain_i, clamped.
inline ImageBuffer augmix_mix(const ImageBuffer& img, const std::vector<ImageBuffer>& chains,
                              const std::vector<double>& weights, double skip) {
  if (chains.size() != weights.size()) throw ArgumentError("augmix: one weight per chain required");
  ImageBuffer out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    double mixed = 0.0;
    for (std::size_t c = 0; c < chains.size(); ++c) mixed += weights[c] * chains[c].data[i];
    const double v = skip * img.data[i] + (1.0 - skip) * mixed;
    out.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

/// Chain weights ~ Dirichlet(alpha), skip weight ~ Beta(alpha, alpha); each
/// chain applies a uniformly drawn depth of ops sampled from the pool.
inline ImageBuffer augmix(const ImageBuffer& img, RngStream& rng, const AugmixParams& params) {
  if (params.pool.empty()) throw ArgumentError("augmix: op pool is empty");
  if (params.width < 1) throw ArgumentError("augmix: width must be >= 1");
  if (params.depth_lo < 1 || params.depth_lo > params.depth_hi) throw ArgumentError("augmix: invalid depth range");
  for (const auto& s : params.pool) {
    if (!detail::augmix_pool_op(s.op)) throw ArgumentError("augmix: op '" + s.op + "' is not allowed in the pool");
  }
  const auto weights = rng.dirichlet(static_cast<std::size_t>(params.width), params.alpha);
  const double skip = rng.beta(params.alpha, params.alpha);
  std::vector<ImageBuffer> chains;
  chains.reserve(static_cast<std::size_t>(params.width));
  for (int c = 0; c < params.width; ++c) {
    const int depth = params.depth_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(params.depth_hi - params.depth_lo + 1)));
    ImageBuffer chain = img;
    for (int d = 0; d < depth; ++d) {
      const auto& op = params.pool[rng.below(params.pool.size())];
      chain = apply_op(chain, op, rng);
    }
    chains.push_back(std::move(chain));
  }
  return augmix_mix(img, chains, weights, skip);
}

inline ImageBuffer augment_image(const ImageBuffer& img, const AugPlan& plan, RngStream& rng) {
  ImageBuffer out = img;
  for (const auto& step : plan.steps) out = apply_step(out, step, rng);
  return out;
}

/// The full offline plan: augmix, affine, color jitter, blur, crop.
inline AugPlan full_augmentation_plan(std::uint64_t seed) {
  const nlohmann::json pool = nlohmann::json::array({
      {{"op", "rotate"}, {"params", {{"degrees", {-15, 15}}}}},
      {{"op", "translate"}, {"params", {{"fraction", {-0.08, 0.08}}}}},
      {{"op", "shear"}, {"params", {{"degrees", {-10, 10}}}}},
      {{"op", "crop"}, {"params", {{"area", {0.7, 1.0}}}}},
      {{"op", "brightness"}, {"params", {{"strength", 0.3}}}},
      {{"op", "contrast"}, {"params", {{"strength", 0.3}}}},
  });
  nlohmann::json j = {
      {"seed", seed},
      {"steps",
       {
           {{"op", "augmix"}, {"p", 0.5}, {"params", {{"width", 3}, {"depth", {1, 3}}, {"alpha", 1.0}, {"pool", pool}}}},
           {{"op", "affine"},
            {"p", 0.5},
            {"params", {{"rotate", {-10, 10}}, {"translate", {-0.05, 0.05}}, {"shear", {-5, 5}}, {"scale", {0.95, 1.05}}}}},
           {{"op", "color_jitter"}, {"p", 0.5}, {"params", {{"brightness", 0.3}, {"contrast", 0.3}, {"saturation", 0.2}}}},
           {{"op", "blur"}, {"p", 0.5}, {"params", {{"sigma", {0.3, 1.5}}}}},
           {{"op", "crop"}, {"p", 0.5}, {"params", {{"area", {0.7, 1.0}}}}},
       }},
  };
  return plan_from_json(j);
}

namespace detail {

inline void ensure_writable_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  const auto probe = dir / ".noseprint_write_probe";
  {
    std::ofstream f(probe, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("output directory is not writable: " + dir.string());
  }
  std::filesystem::remove(probe, ec);
}

inline std::string indexed_name(std::size_t index, const std::string& tag, int channels) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "img_%06zu_%s.%s", index, tag.c_str(), channels == 1 ? "pgm" : "ppm");
  return buf;
}

}  // namespace detail

/// Offline expansion: every input image is written back plus `copies`
/// augmented variants. Copy k of image i draws from substream i * copies + k
/// of the plan's seed. Writes `out_dir/manifest.csv` and returns it.
inline Manifest apply_plan(const Manifest& input, const AugPlan& plan, int copies, const std::filesystem::path& out_dir) {
  if (copies < 0) throw ArgumentError("apply_plan: copies must be >= 0");
  detail::ensure_writable_dir(out_dir);
  Manifest out;
  out.base_dir = out_dir;
  for (std::size_t i = 0; i < input.rows.size(); ++i) {
    const auto& row = input.rows[i];
    ImageBuffer img;
    try {
      if (!row.error.empty()) throw IoError("upstream error: " + row.error);
      img = load_image(input.resolve(row));
    } catch (const Error& e) {
      std::string msg = e.what();
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      out.rows.push_back({"", row.identity, row.path, msg});
      continue;
    }
    const std::string orig_name = detail::indexed_name(i, "orig", img.channels);
    save_image(img, out_dir / orig_name);
    out.rows.push_back({orig_name, row.identity, row.path, ""});
    for (int k = 0; k < copies; ++k) {
      RngStream rng(plan.seed, static_cast<std::uint64_t>(i) * static_cast<std::uint64_t>(copies) + static_cast<std::uint64_t>(k));
      const ImageBuffer aug = augment_image(img, plan, rng);
      const std::string name = detail::indexed_name(i, "aug" + std::to_string(k + 1), aug.channels);
      save_image(aug, out_dir / name);
      out.rows.push_back({name, row.identity, row.path, ""});
    }
  }
  write_manifest(out, out_dir / "manifest.csv");
  return out;
}

}  // namespace noseprint
