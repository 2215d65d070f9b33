#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "noseprint/augment.hpp"
#include "noseprint/checkpoint.hpp"
#include "noseprint/embed.hpp"
#include "noseprint/errors.hpp"
#include "noseprint/losses.hpp"
#include "noseprint/manifest.hpp"
#include "noseprint/model.hpp"
#include "noseprint/plan.hpp"
#include "noseprint/rng.hpp"

namespace noseprint {

struct TrainConfig {
  int P = 16;
  int K = 4;
  double lr = 3.5e-4;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 35;
  int input_size = 224;
  double flip_p = 0.5;
  double cutmix_p = 0.5;
  double cutmix_alpha = 1.0;
  std::uint64_t seed = 0;
  LossWeights loss;
  ModelConfig model;  // num_classes is taken from the training manifest
  std::optional<AugPlan> augment;  // online per-image plan; the plan's seed is unused

  void validate() const {
    if (P < 2) throw ConfigError("P must be >= 2");
    if (K < 2) throw ConfigError("K must be >= 2");
    if (!(lr > 0)) throw ConfigError("lr must be > 0");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta1/beta2 must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("eps must be > 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (input_size < 1) throw ConfigError("input_size must be >= 1");
    if (!(flip_p >= 0 && flip_p <= 1) || !(cutmix_p >= 0 && cutmix_p <= 1)) throw ConfigError("flip_p/cutmix_p must lie in [0, 1]");
    if (!(cutmix_alpha > 0)) throw ConfigError("cutmix_alpha must be > 0");
    loss.validate();
  }
};

namespace detail {

template <typename V>
void read_key(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + key + ": wrong value type");
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError((where.empty() ? std::string("config") : where.substr(0, where.size() - 1)) + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + where + key + "'");
  }
}

}  // namespace detail

inline LossWeights loss_weights_from_json(const nlohmann::json& j, const std::string& where = "loss.") {
  detail::reject_unknown(j, {"w_ce", "w_tri", "w_circle", "smoothing", "circle_margin", "circle_scale"}, where);
  LossWeights w;
  detail::read_key(j, "w_ce", w.w_ce, where);
  detail::read_key(j, "w_tri", w.w_tri, where);
  detail::read_key(j, "w_circle", w.w_circle, where);
  detail::read_key(j, "smoothing", w.smoothing, where);
  detail::read_key(j, "circle_margin", w.circle_margin, where);
  detail::read_key(j, "circle_scale", w.circle_scale, where);
  return w;
}

inline nlohmann::json to_json(const LossWeights& w) {
  return {{"w_ce", w.w_ce}, {"w_tri", w.w_tri}, {"w_circle", w.w_circle}, {"smoothing", w.smoothing},
          {"circle_margin", w.circle_margin}, {"circle_scale", w.circle_scale}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& where = "model.") {
  detail::reject_unknown(j, {"in_channels", "stem_channels", "stage_channels", "pool", "gem_p", "head", "embed_dim", "dropout_p"}, where);
  ModelConfig m;
  detail::read_key(j, "in_channels", m.backbone.in_channels, where);
  detail::read_key(j, "stem_channels", m.backbone.stem_channels, where);
  detail::read_key(j, "stage_channels", m.backbone.stage_channels, where);
  std::string pool = to_string(m.pool), head = to_string(m.head.kind);
  detail::read_key(j, "pool", pool, where);
  detail::read_key(j, "head", head, where);
  m.pool = parse_pool_mode(pool);
  m.head.kind = parse_head_kind(head);
  detail::read_key(j, "gem_p", m.gem_p, where);
  detail::read_key(j, "embed_dim", m.head.embed_dim, where);
  detail::read_key(j, "dropout_p", m.head.dropout_p, where);
  return m;
}

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"in_channels", m.backbone.in_channels}, {"stem_channels", m.backbone.stem_channels},
          {"stage_channels", m.backbone.stage_channels}, {"pool", to_string(m.pool)}, {"gem_p", m.gem_p},
          {"head", to_string(m.head.kind)}, {"embed_dim", m.head.embed_dim}, {"dropout_p", m.head.dropout_p}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"P", "K", "lr", "weight_decay", "beta1", "beta2", "eps", "epochs", "input_size", "flip_p", "cutmix_p",
                             "cutmix_alpha", "seed", "loss", "model", "augment"},
                         "");
  TrainConfig c;
  detail::read_key(j, "P", c.P, "");
  detail::read_key(j, "K", c.K, "");
  detail::read_key(j, "lr", c.lr, "");
  detail::read_key(j, "weight_decay", c.weight_decay, "");
  detail::read_key(j, "beta1", c.beta1, "");
  detail::read_key(j, "beta2", c.beta2, "");
  detail::read_key(j, "eps", c.eps, "");
  detail::read_key(j, "epochs", c.epochs, "");
  detail::read_key(j, "input_size", c.input_size, "");
  detail::read_key(j, "flip_p", c.flip_p, "");
  detail::read_key(j, "cutmix_p", c.cutmix_p, "");
  detail::read_key(j, "cutmix_alpha", c.cutmix_alpha, "");
  detail::read_key(j, "seed", c.seed, "");
  if (j.contains("loss")) c.loss = loss_weights_from_json(j["loss"]);
  if (j.contains("model")) c.model = model_config_from_json(j["model"]);
  if (j.contains("augment") && !j["augment"].is_null()) c.augment = plan_from_json(j["augment"]);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"P", c.P}, {"K", c.K}, {"lr", c.lr}, {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
                      {"beta2", c.beta2}, {"eps", c.eps}, {"epochs", c.epochs}, {"input_size", c.input_size},
                      {"flip_p", c.flip_p}, {"cutmix_p", c.cutmix_p}, {"cutmix_alpha", c.cutmix_alpha}, {"seed", c.seed},
                      {"loss", to_json(c.loss)}, {"model", to_json(c.model)}};
  j["augment"] = c.augment ? plan_to_json(*c.augment) : nlohmann::json(nullptr);
  return j;
}

// ---- PK sampling -----------------------------------------------------------

struct SampleRef {
  std::size_t image = 0;  // index into the training image list
  int label = 0;          // class index
};

using Batch = std::vector<SampleRef>;

/// One epoch of P x K batches. Identities are consumed from a shuffled queue
/// (refilled with a fresh shuffle when empty), so every identity appears at
/// least once per epoch. The epoch has max(ceil(ids / P), ceil(images / (P K)))
/// batches. Identities with fewer than K images are sampled with replacement.
inline std::vector<Batch> pk_sample_epoch(const std::vector<std::vector<std::size_t>>& images_by_class, int P, int K, RngStream& rng) {
  if (P < 2 || K < 1) throw ConfigError("pk_sample_epoch: need P >= 2 and K >= 1");
  const std::size_t n_classes = images_by_class.size();
  if (n_classes < static_cast<std::size_t>(P)) {
    throw ConfigError("pk_sample_epoch: dataset has " + std::to_string(n_classes) + " identities, fewer than P = " + std::to_string(P));
  }
  std::size_t total = 0;
  for (const auto& v : images_by_class) {
    if (v.empty()) throw ConfigError("pk_sample_epoch: identity without images");
    total += v.size();
  }
  const std::size_t per_batch = std::size_t(P) * K;
  const std::size_t n_batches = std::max((n_classes + P - 1) / P, (total + per_batch - 1) / per_batch);
  std::deque<int> queue;
  auto refill = [&] {
    std::vector<int> order(n_classes);
    for (std::size_t i = 0; i < n_classes; ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order.begin(), order.end());
    queue.insert(queue.end(), order.begin(), order.end());
  };
  std::vector<Batch> batches;
  for (std::size_t b = 0; b < n_batches; ++b) {
    std::vector<int> chosen;
    std::vector<int> deferred;
    while (chosen.size() < static_cast<std::size_t>(P)) {
      if (queue.empty()) refill();
      const int id = queue.front();
      queue.pop_front();
      if (std::find(chosen.begin(), chosen.end(), id) != chosen.end()) {
        deferred.push_back(id);
      } else {
        chosen.push_back(id);
      }
    }
    for (auto it = deferred.rbegin(); it != deferred.rend(); ++it) queue.push_front(*it);
    Batch batch;
    for (int id : chosen) {
      const auto& pool = images_by_class[static_cast<std::size_t>(id)];
      if (pool.size() >= static_cast<std::size_t>(K)) {
        std::vector<std::size_t> pick = pool;
        rng.shuffle(pick.begin(), pick.end());
        for (int k = 0; k < K; ++k) batch.push_back({pick[static_cast<std::size_t>(k)], id});
      } else {
        for (int k = 0; k < K; ++k) batch.push_back({pool[rng.below(pool.size())], id});
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ---- Adam ------------------------------------------------------------------

struct AdamConfig {
  double lr = 3.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
};

struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;
};

/// Adam with L2 coupling: g = grad + wd * param, bias-corrected moments,
/// param -= lr * m_hat / (sqrt(v_hat) + eps). Only trainable parameters move.
/// Non-finite gradients abort the step before anything is modified.
template <typename T>
void adam_step(ParamStore<T>& store, OptimizerState& state, const AdamConfig& cfg) {
  for (const auto& p : store.all()) {
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.grad.size(); ++i) {
      if (!std::isfinite(static_cast<double>(p.grad.data[i]))) {
        throw NumericError("non-finite gradient in parameter '" + p.name + "' at element " + std::to_string(i));
      }
    }
  }
  if (state.m.empty()) {
    for (const auto& p : store.all()) {
      state.m.emplace_back(p.value.size(), 0.0);
      state.v.emplace_back(p.value.size(), 0.0);
    }
  }
  if (state.m.size() != store.size()) throw ShapeError("adam: optimizer state does not match the parameter table");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < store.size(); ++k) {
    auto& p = store[k];
    if (!p.trainable) continue;
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.value.size()) throw ShapeError("adam: moment buffer shape differs for '" + p.name + "'");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad.data[i]) + cfg.weight_decay * p.value.data[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      p.value.data[i] = static_cast<T>(p.value.data[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// ---- training loop ---------------------------------------------------------

struct TrainLogRow {
  int epoch = 0;
  int batch = 0;
  double ce = 0, triplet = 0, circle = 0, total = 0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  std::vector<std::string> classes;

  double epoch_mean(int epoch) const {
    double s = 0;
    int n = 0;
    for (const auto& r : rows)
      if (r.epoch == epoch) {
        s += r.total;
        ++n;
      }
    return n ? s / n : 0.0;
  }
};

inline std::string format_log_row(const TrainLogRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.batch, r.ce, r.triplet, r.circle, r.total);
  return buf;
}

struct TrainOptions {
  std::filesystem::path log_path;  // empty: no CSV log
  // Learning rate per epoch (1-based); constant when unset.
  std::function<double(int epoch, double base_lr)> lr_schedule;
};

namespace detail {

inline std::uint64_t slot_stream(int epoch, std::size_t batch, std::size_t slot) {
  return splitmix64(splitmix64(splitmix64(static_cast<std::uint64_t>(epoch)) ^ batch) ^ slot);
}

}  // namespace detail

struct TrainedModel {
  Network<float> network;
  TrainLog log;
};

/// Joint-loss training: PK batches, per-image flip (and optional online plan),
/// batch-level cutmix with CE-only target mixing, Adam. Deterministic in
/// (config, manifest, seed).
inline TrainedModel train(const TrainConfig& config, const Manifest& manifest, const TrainOptions& options = {}) {
  config.validate();
  std::map<std::string, int> class_of;
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
    if (!manifest.rows[i].error.empty()) continue;
    usable.push_back(i);
    class_of.emplace(manifest.rows[i].identity, 0);
  }
  TrainLog log;
  int next = 0;
  for (auto& [name, idx] : class_of) {
    idx = next++;
    log.classes.push_back(name);
  }
  if (class_of.size() < static_cast<std::size_t>(config.P)) {
    throw ConfigError("training set has " + std::to_string(class_of.size()) + " identities, fewer than P = " + std::to_string(config.P));
  }
  const int C = config.model.backbone.in_channels;
  std::vector<ImageBuffer> images;
  std::vector<std::vector<std::size_t>> by_class(class_of.size());
  for (std::size_t i : usable) {
    const auto& row = manifest.rows[i];
    images.push_back(prepare_input(load_image(manifest.resolve(row)), C, config.input_size));
    by_class[static_cast<std::size_t>(class_of[row.identity])].push_back(images.size() - 1);
  }
  ModelConfig mcfg = config.model;
  mcfg.head.num_classes = static_cast<int>(class_of.size());
  Network<float> net(mcfg, config.seed);
  OptimizerState opt;
  const int num_classes = mcfg.head.num_classes;

  std::ofstream log_file;
  if (!options.log_path.empty()) {
    log_file.open(options.log_path, std::ios::binary | std::ios::trunc);
    if (!log_file) throw IoError("cannot write training log " + options.log_path.string());
    log_file << "epoch,batch,loss_ce,loss_tri,loss_circle,loss_total\n";
  }

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    RngStream sampler(config.seed, detail::splitmix64(0xE90C ^ static_cast<std::uint64_t>(epoch)));
    const auto batches = pk_sample_epoch(by_class, config.P, config.K, sampler);
    AdamConfig adam{config.lr, config.beta1, config.beta2, config.eps, config.weight_decay};
    if (options.lr_schedule) adam.lr = options.lr_schedule(epoch, config.lr);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const Batch& batch = batches[b];
      const std::size_t B = batch.size();
      std::vector<ImageBuffer> inputs;
      inputs.reserve(B);
      for (std::size_t s = 0; s < B; ++s) {
        RngStream rng(config.seed, detail::slot_stream(epoch, b, s));
        ImageBuffer img = images[batch[s].image];
        if (rng.bernoulli(config.flip_p)) img = horizontal_flip(img);
        if (config.augment) img = augment_image(img, *config.augment, rng);
        inputs.push_back(std::move(img));
      }
      Tensor<float> targets = one_hot<float>([&] {
        std::vector<int> l;
        for (const auto& s : batch) l.push_back(s.label);
        return l;
      }(), num_classes);
      std::vector<int> metric_labels;
      for (const auto& s : batch) metric_labels.push_back(s.label);

      RngStream batch_rng(config.seed, detail::slot_stream(epoch, b, 0xC07));
      if (batch_rng.bernoulli(config.cutmix_p)) {
        // One box for the whole batch; partner = same slot of the next identity block,
        // so majority-area labels stay a P x K arrangement.
        const std::size_t shift = static_cast<std::size_t>(config.K);
        std::vector<ImageBuffer> mixed;
        mixed.reserve(B);
        double lam = 1.0;
        for (std::size_t s = 0; s < B; ++s) {
          RngStream box_rng = batch_rng;
          auto r = cutmix(inputs[s], inputs[(s + shift) % B], box_rng, config.cutmix_alpha);
          lam = r.lambda_effective;
          mixed.push_back(std::move(r.image));
        }
        inputs = std::move(mixed);
        for (std::size_t s = 0; s < B; ++s) {
          const int own = batch[s].label, other = batch[(s + shift) % B].label;
          for (int k = 0; k < num_classes; ++k) targets.data[s * num_classes + k] = 0.0f;
          targets.data[s * num_classes + own] += static_cast<float>(lam);
          targets.data[s * num_classes + other] += static_cast<float>(1.0 - lam);
          metric_labels[s] = lam >= 0.5 ? own : other;
        }
      }

      std::vector<const ImageBuffer*> ptrs;
      for (const auto& im : inputs) ptrs.push_back(&im);
      RngStream dropout_rng(config.seed, detail::slot_stream(epoch, b, 0xD40));
      net.zero_grad();
      auto out = net.forward(to_batch<float>(ptrs), Mode::train, &dropout_rng);
      auto loss = combined_loss(out.logits, out.metric_feature, targets, metric_labels, config.loss);
      TrainLogRow row{epoch, static_cast<int>(b + 1), loss.ce, loss.triplet, loss.circle, loss.total};
      log.rows.push_back(row);
      if (log_file) {
        log_file << format_log_row(row);
        log_file.flush();
      }
      if (!std::isfinite(loss.total)) throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(b + 1));
      net.backward(nullptr, &loss.grad_features, &loss.grad_logits);
      adam_step(net.params(), opt, adam);
    }
  }
  return {std::move(net), std::move(log)};
}

}  // namespace noseprint
