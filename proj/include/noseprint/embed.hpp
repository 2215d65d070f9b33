#pragma once

#include <string>
#include <utility>
#include <vector>

#include "noseprint/augment.hpp"
#include "noseprint/checkpoint.hpp"
#include "noseprint/image.hpp"
#include "noseprint/manifest.hpp"
#include "noseprint/model.hpp"
#include "noseprint/retrieval.hpp"

namespace noseprint {

/// Matches the network's channel count (luma for RGB->gray, replication for
/// gray->RGB) and resizes to size x size.
inline ImageBuffer prepare_input(const ImageBuffer& img, int channels, int size) {
  ImageBuffer src = img;
  if (img.channels != channels) {
    src = ImageBuffer(img.height, img.width, channels);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        if (channels == 1) {
          src.at(y, x, 0) = static_cast<float>(luma(img, y, x));
        } else {
          for (int c = 0; c < 3; ++c) src.at(y, x, c) = img.at(y, x, 0);
        }
      }
  }
  return resize_bilinear(src, size, size);
}

/// Packs same-sized images into an [N, C, H, W] tensor.
template <typename T>
Tensor<T> to_batch(const std::vector<const ImageBuffer*>& images) {
  if (images.empty()) throw ArgumentError("to_batch: no images");
  const ImageBuffer& f = *images.front();
  const std::size_t C = f.channels, H = f.height, W = f.width;
  Tensor<T> t({images.size(), C, H, W});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const ImageBuffer& im = *images[n];
    if (!im.same_shape(f)) throw ShapeError("to_batch: images differ in shape");
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          t.data[((n * C + c) * H + y) * W + x] = im.at(static_cast<int>(y), static_cast<int>(x), static_cast<int>(c));
  }
  return t;
}

struct EmbedResult {
  EmbeddingStore store;
  std::vector<std::pair<std::string, std::string>> errors;  // (id, message)
};

/// Eval-mode forward over every manifest image. Ids are the manifest paths.
/// Cosine mode stores unit vectors; euclidean mode stores raw features.
/// Failing images become error entries and are skipped.
inline EmbedResult extract_embeddings(Network<float>& net, const Manifest& manifest, int input_size, Metric metric,
                                      std::size_t batch_size = 32) {
  if (input_size < 1) throw ArgumentError("extract_embeddings: input size must be positive");
  EmbedResult result;
  result.store.set_dim(static_cast<std::size_t>(net.feature_dim()));
  std::vector<ImageBuffer> images;
  std::vector<std::string> ids;
  auto flush = [&] {
    if (images.empty()) return;
    std::vector<const ImageBuffer*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    const auto out = net.forward(to_batch<float>(ptrs), Mode::eval);
    const std::size_t D = out.feature.dim(1);
    for (std::size_t n = 0; n < images.size(); ++n) {
      std::vector<float> v(out.feature.data.begin() + n * D, out.feature.data.begin() + (n + 1) * D);
      try {
        if (metric == Metric::cosine) l2_normalize(v);
        if (result.store.find(ids[n])) continue;  // duplicate manifest rows share one record
        result.store.add({ids[n], std::move(v)});
      } catch (const Error& e) {
        result.errors.emplace_back(ids[n], e.what());
      }
    }
    images.clear();
    ids.clear();
  };
  for (const auto& row : manifest.rows) {
    if (!row.error.empty()) {
      result.errors.emplace_back(row.path, row.error);
      continue;
    }
    try {
      images.push_back(prepare_input(load_image(manifest.resolve(row)), net.config().backbone.in_channels, input_size));
      ids.push_back(row.path);
    } catch (const Error& e) {
      result.errors.emplace_back(row.path, e.what());
      continue;
    }
    if (images.size() == batch_size) flush();
  }
  flush();
  return result;
}

inline EmbedResult extract_embeddings(const Checkpoint& ckpt, const Manifest& manifest, int input_size, Metric metric) {
  Network<float> net = network_from_checkpoint<float>(ckpt);
  return extract_embeddings(net, manifest, input_size, metric);
}

}  // namespace noseprint
