#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "noseprint/errors.hpp"
#include "noseprint/layers.hpp"
#include "noseprint/rng.hpp"
#include "noseprint/tensor.hpp"

namespace noseprint {

/// Stem conv3x3/1 then one conv3x3/2 + BN + ReLU block per stage.
struct BackboneConfig {
  int in_channels = 1;
  int stem_channels = 16;
  std::vector<int> stage_channels = {16, 32, 64};

  int out_channels() const { return stage_channels.back(); }
  int out_extent(int in) const {
    for (std::size_t i = 0; i < stage_channels.size(); ++i) in = Conv2d<float>::out_extent(in, 2);
    return in;
  }
};

enum class HeadKind { linear, bn, reduction };

struct HeadConfig {
  HeadKind kind = HeadKind::bn;
  int embed_dim = 64;  // reduction head only
  int num_classes = 2;
  double dropout_p = 0.5;  // reduction head only
};

struct ModelConfig {
  BackboneConfig backbone;
  PoolMode pool = PoolMode::gem;
  double gem_p = 3.0;
  HeadConfig head;

  void validate() const {
    if (backbone.in_channels != 1 && backbone.in_channels != 3) throw ConfigError("model.in_channels must be 1 or 3");
    if (backbone.stage_channels.empty()) throw ConfigError("model.stage_channels needs at least one stage");
    if (backbone.stem_channels < 1) throw ConfigError("model.stem_channels must be >= 1");
    for (int c : backbone.stage_channels)
      if (c < 1) throw ConfigError("model.stage_channels entries must be >= 1");
    if (head.num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
    if (head.kind == HeadKind::reduction && head.embed_dim < 1) throw ConfigError("model.embed_dim must be >= 1");
    if (!(head.dropout_p >= 0.0 && head.dropout_p < 1.0)) throw ConfigError("model.dropout_p must lie in [0, 1)");
    if (pool == PoolMode::gem && !(gem_p > 0.0)) throw ConfigError("model.gem_p must be positive");
  }
};

inline std::string to_string(PoolMode m) {
  switch (m) {
    case PoolMode::avg: return "avg";
    case PoolMode::max: return "max";
    case PoolMode::gem: return "gem";
    case PoolMode::attention: return "attention";
  }
  return "?";
}

inline PoolMode parse_pool_mode(const std::string& s) {
  if (s == "avg") return PoolMode::avg;
  if (s == "max") return PoolMode::max;
  if (s == "gem") return PoolMode::gem;
  if (s == "attention") return PoolMode::attention;
  throw ConfigError("unknown pool mode '" + s + "' (expected avg|max|gem|attention)");
}

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::linear: return "linear";
    case HeadKind::bn: return "bn";
    case HeadKind::reduction: return "reduction";
  }
  return "?";
}

inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "linear") return HeadKind::linear;
  if (s == "bn") return HeadKind::bn;
  if (s == "reduction") return HeadKind::reduction;
  throw ConfigError("unknown head kind '" + s + "' (expected linear|bn|reduction)");
}

/// Extractor + aggregation + head. `T` is float for training and double for
/// gradient checking.
///
/// Outputs per sample:
///   feature        - inference embedding (pre-classifier; post-BN for the bn head)
///   metric_feature - input to the metric losses (pooled vector for linear/bn heads,
///                    the reduced vector for the reduction head)
///   logits         - classifier output, no bias
template <typename T>
class Network {
 public:
  struct Output {
    Tensor<T> feature;
    Tensor<T> metric_feature;
    Tensor<T> logits;
  };

  Network(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg), dropout_(cfg.head.kind == HeadKind::reduction ? cfg.head.dropout_p : 0.0) {
    cfg_.validate();
    const auto& bb = cfg_.backbone;
    blocks_.push_back(make_block("backbone.stem", bb.in_channels, bb.stem_channels, 1));
    int prev = bb.stem_channels;
    for (std::size_t i = 0; i < bb.stage_channels.size(); ++i) {
      blocks_.push_back(make_block("backbone.stage" + std::to_string(i + 1), prev, bb.stage_channels[i], 2));
      prev = bb.stage_channels[i];
    }
    pool_ = Pool<T>(store_, cfg_.pool, prev, cfg_.gem_p);
    int dim = prev;
    switch (cfg_.head.kind) {
      case HeadKind::linear:
        break;
      case HeadKind::bn:
        head_bn_ = BatchNorm<T>(store_, "head.bn", dim, /*with_shift=*/false);
        break;
      case HeadKind::reduction:
        reduce_ = Linear<T>(store_, "head.reduce", dim, cfg_.head.embed_dim);
        reduce_bn_ = BatchNorm<T>(store_, "head.reduce_bn", cfg_.head.embed_dim);
        dim = cfg_.head.embed_dim;
        break;
    }
    classifier_ = Linear<T>(store_, "head.classifier", dim, cfg_.head.num_classes);
    feature_dim_ = dim;
    initialize(init_seed);
  }

  const ModelConfig& config() const { return cfg_; }
  int feature_dim() const { return feature_dim_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  void zero_grad() { store_.zero_grad(); }

  Tensor<T> backbone_forward(const Tensor<T>& x, Mode mode) {
    const auto& bb = cfg_.backbone;
    if (x.rank() != 4 || static_cast<int>(x.dim(1)) != bb.in_channels) {
      throw ShapeError("backbone: expected input [N," + std::to_string(bb.in_channels) + ",H,W], got " + shape_string(x.shape));
    }
    if (x.dim(0) == 0) throw ShapeError("backbone: empty batch");
    const std::size_t min_extent = std::size_t{1} << bb.stage_channels.size();
    if (x.dim(2) < min_extent || x.dim(3) < min_extent) {
      throw ShapeError("backbone: input spatial size must be >= " + std::to_string(min_extent));
    }
    Tensor<T> h = x;
    for (auto& b : blocks_) {
      h = b.conv.forward(store_, h);
      h = b.bn.forward(store_, h, mode);
      h = b.relu.forward(h);
    }
    return h;
  }

  Output forward(const Tensor<T>& x, Mode mode, RngStream* dropout_rng = nullptr) {
    has_graph_ = false;
    Tensor<T> map = backbone_forward(x, mode);
    Tensor<T> pooled = pool_.forward(store_, map);
    Output out;
    switch (cfg_.head.kind) {
      case HeadKind::linear:
        out.feature = pooled;
        out.metric_feature = pooled;
        break;
      case HeadKind::bn:
        out.feature = head_bn_.forward(store_, pooled, mode);
        out.metric_feature = pooled;
        break;
      case HeadKind::reduction: {
        Tensor<T> r = reduce_bn_.forward(store_, reduce_.forward(store_, pooled), mode);
        r = reduce_relu_.forward(r);
        out.feature = dropout_.forward(r, mode, dropout_rng);
        out.metric_feature = out.feature;
        break;
      }
    }
    out.logits = classifier_.forward(store_, out.feature);
    batch_ = x.dim(0);
    has_graph_ = true;
    return out;
  }

  /// Identifies the linear piece of the last forward pass: every ReLU on/off
  /// state followed by the max-pool selections. Two inputs with equal patterns
  /// lie on the same smooth piece of the network.
  std::vector<std::size_t> activation_pattern() const {
    std::vector<std::size_t> out;
    for (const auto& b : blocks_) out.insert(out.end(), b.relu.mask().begin(), b.relu.mask().end());
    out.insert(out.end(), reduce_relu_.mask().begin(), reduce_relu_.mask().end());
    out.insert(out.end(), pool_.argmax().begin(), pool_.argmax().end());
    return out;
  }

  /// Accumulates parameter gradients for upstream gradients on any subset of
  /// the outputs (null entries count as zero).
  void backward(const Tensor<T>* d_feature, const Tensor<T>* d_metric, const Tensor<T>* d_logits) {
    if (!has_graph_) throw StateError("backward called without a preceding forward pass");
    const Shape fshape = {batch_, std::size_t(feature_dim_)};
    Tensor<T> d_feat(fshape);
    if (d_feature) accumulate(d_feat, *d_feature, "feature gradient");
    if (d_logits) {
      require_shape(d_logits->shape, {batch_, std::size_t(cfg_.head.num_classes)}, "logit gradient");
      accumulate(d_feat, classifier_.backward(store_, *d_logits), "classifier gradient");
    } else {
      classifier_.backward(store_, Tensor<T>({batch_, std::size_t(cfg_.head.num_classes)}));
    }
    Tensor<T> d_pooled;
    switch (cfg_.head.kind) {
      case HeadKind::linear:
        d_pooled = d_feat;
        if (d_metric) accumulate(d_pooled, *d_metric, "metric gradient");
        break;
      case HeadKind::bn:
        d_pooled = head_bn_.backward(store_, d_feat);
        if (d_metric) accumulate(d_pooled, *d_metric, "metric gradient");
        break;
      case HeadKind::reduction:
        if (d_metric) accumulate(d_feat, *d_metric, "metric gradient");
        d_pooled = reduce_.backward(store_, reduce_bn_.backward(store_, reduce_relu_.backward(dropout_.backward(d_feat))));
        break;
    }
    Tensor<T> d = pool_.backward(store_, d_pooled);
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
      d = it->relu.backward(d);
      d = it->bn.backward(store_, d);
      d = it->conv.backward(store_, d);
    }
    has_graph_ = false;
  }

 private:
  struct Block {
    Conv2d<T> conv;
    BatchNorm<T> bn;
    Relu<T> relu;
  };

  Block make_block(const std::string& prefix, int in, int out, int stride) {
    return Block{Conv2d<T>(store_, prefix + ".conv", in, out, stride), BatchNorm<T>(store_, prefix + ".bn", out), Relu<T>()};
  }

  static void accumulate(Tensor<T>& dst, const Tensor<T>& src, const char* what) {
    require_shape(src.shape, dst.shape, what);
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
  }

  // Kaiming-normal (fan-out) for convolutions and the reduction layer,
  // N(0, 0.001^2) for the classifier, zeros for attention.
  void initialize(std::uint64_t seed) {
    RngStream rng(seed, 0x1417);
    for (auto& p : store_.all()) {
      const auto& n = p.name;
      auto ends_with = [&n](const std::string& s) { return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0; };
      if (ends_with(".conv.weight")) {
        const double std = std::sqrt(2.0 / (p.value.dim(0) * 9.0));
        for (auto& v : p.value.data) v = static_cast<T>(rng.normal(0.0, std));
      } else if (n == "head.reduce.weight") {
        const double std = std::sqrt(2.0 / p.value.dim(0));
        for (auto& v : p.value.data) v = static_cast<T>(rng.normal(0.0, std));
      } else if (n == "head.classifier.weight") {
        for (auto& v : p.value.data) v = static_cast<T>(rng.normal(0.0, 0.001));
      }
    }
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  std::vector<Block> blocks_;
  Pool<T> pool_;
  BatchNorm<T> head_bn_;
  Linear<T> reduce_;
  BatchNorm<T> reduce_bn_;
  Relu<T> reduce_relu_;
  Dropout<T> dropout_;
  Linear<T> classifier_;
  int feature_dim_ = 0;
  std::size_t batch_ = 0;
  bool has_graph_ = false;
};

}  // namespace noseprint
