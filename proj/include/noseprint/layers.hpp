#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "noseprint/errors.hpp"
#include "noseprint/rng.hpp"
#include "noseprint/tensor.hpp"

namespace noseprint {

enum class Mode { train, eval };

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;  // false for running statistics
};

/// Flat, ordered parameter table. Layers refer to entries by index so a
/// network stays copyable.
template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, Shape shape, bool trainable = true, T fill = T(0)) {
    Param<T> p{std::move(name), Tensor<T>(shape, fill), Tensor<T>(shape), trainable};
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }
  Param<T>& operator[](std::size_t i) { return params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return params_[i]; }
  std::vector<Param<T>>& all() { return params_; }
  const std::vector<Param<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  Param<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  const Param<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T(0));
  }

 private:
  std::vector<Param<T>> params_;
};

/// 3x3 convolution, padding 1, with bias. Forward caches the im2col buffer.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& prefix, int in_c, int out_c, int stride)
      : in_c_(in_c), out_c_(out_c), stride_(stride) {
    w_ = store.add(prefix + ".weight", {std::size_t(out_c), std::size_t(in_c), 3, 3});
    b_ = store.add(prefix + ".bias", {std::size_t(out_c)});
  }

  std::size_t weight_index() const { return w_; }
  int in_channels() const { return in_c_; }
  int out_channels() const { return out_c_; }
  static int out_extent(int in, int stride) { return (in - 1) / stride + 1; }

  Tensor<T> forward(ParamStore<T>& store, const Tensor<T>& x) {
    if (x.rank() != 4 || static_cast<int>(x.dim(1)) != in_c_) {
      throw ShapeError("conv: expected input [N," + std::to_string(in_c_) + ",H,W], got " + shape_string(x.shape));
    }
    n_ = x.dim(0);
    h_ = static_cast<int>(x.dim(2));
    w_in_ = static_cast<int>(x.dim(3));
    ho_ = out_extent(h_, stride_);
    wo_ = out_extent(w_in_, stride_);
    const std::size_t K = std::size_t(in_c_) * 9, P = std::size_t(ho_) * wo_;
    cols_.assign(n_ * K * P, T(0));
    for (std::size_t n = 0; n < n_; ++n) {
      const T* xs = x.data.data() + n * in_c_ * h_ * w_in_;
      T* col = cols_.data() + n * K * P;
      for (int c = 0; c < in_c_; ++c)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            T* row = col + (std::size_t(c) * 9 + ky * 3 + kx) * P;
            for (int oy = 0; oy < ho_; ++oy) {
              const int iy = oy * stride_ + ky - 1;
              if (iy < 0 || iy >= h_) continue;
              const T* src = xs + (std::size_t(c) * h_ + iy) * w_in_;
              for (int ox = 0; ox < wo_; ++ox) {
                const int ix = ox * stride_ + kx - 1;
                if (ix >= 0 && ix < w_in_) row[oy * wo_ + ox] = src[ix];
              }
            }
          }
    }
    Tensor<T> y({n_, std::size_t(out_c_), std::size_t(ho_), std::size_t(wo_)});
    const T* W = store[w_].value.data.data();
    const T* B = store[b_].value.data.data();
    for (std::size_t n = 0; n < n_; ++n) {
      const T* col = cols_.data() + n * K * P;
      T* out = y.data.data() + n * out_c_ * P;
      for (int o = 0; o < out_c_; ++o) {
        T* yo = out + o * P;
        std::fill(yo, yo + P, B[o]);
        for (std::size_t k = 0; k < K; ++k) {
          const T wk = W[o * K + k];
          const T* ck = col + k * P;
          for (std::size_t p = 0; p < P; ++p) yo[p] += wk * ck[p];
        }
      }
    }
    return y;
  }

  Tensor<T> backward(ParamStore<T>& store, const Tensor<T>& dy) {
    const std::size_t K = std::size_t(in_c_) * 9, P = std::size_t(ho_) * wo_;
    require_shape(dy.shape, {n_, std::size_t(out_c_), std::size_t(ho_), std::size_t(wo_)}, "conv backward");
    const T* W = store[w_].value.data.data();
    T* dW = store[w_].grad.data.data();
    T* dB = store[b_].grad.data.data();
    Tensor<T> dx({n_, std::size_t(in_c_), std::size_t(h_), std::size_t(w_in_)});
    std::vector<T> dcol(K * P);
    for (std::size_t n = 0; n < n_; ++n) {
      const T* col = cols_.data() + n * K * P;
      const T* g = dy.data.data() + n * out_c_ * P;
      std::fill(dcol.begin(), dcol.end(), T(0));
      for (int o = 0; o < out_c_; ++o) {
        const T* go = g + o * P;
        T bsum = 0;
        for (std::size_t p = 0; p < P; ++p) bsum += go[p];
        dB[o] += bsum;
        for (std::size_t k = 0; k < K; ++k) {
          const T* ck = col + k * P;
          T acc = 0;
          for (std::size_t p = 0; p < P; ++p) acc += go[p] * ck[p];
          dW[o * K + k] += acc;
          const T wk = W[o * K + k];
          T* dk = dcol.data() + k * P;
          for (std::size_t p = 0; p < P; ++p) dk[p] += wk * go[p];
        }
      }
      T* dxs = dx.data.data() + n * in_c_ * h_ * w_in_;
      for (int c = 0; c < in_c_; ++c)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const T* row = dcol.data() + (std::size_t(c) * 9 + ky * 3 + kx) * P;
            for (int oy = 0; oy < ho_; ++oy) {
              const int iy = oy * stride_ + ky - 1;
              if (iy < 0 || iy >= h_) continue;
              T* dst = dxs + (std::size_t(c) * h_ + iy) * w_in_;
              for (int ox = 0; ox < wo_; ++ox) {
                const int ix = ox * stride_ + kx - 1;
                if (ix >= 0 && ix < w_in_) dst[ix] += row[oy * wo_ + ox];
              }
            }
          }
    }
    return dx;
  }

 private:
  int in_c_ = 0, out_c_ = 0, stride_ = 1;
  std::size_t w_ = 0, b_ = 0;
  std::size_t n_ = 0;
  int h_ = 0, w_in_ = 0, ho_ = 0, wo_ = 0;
  std::vector<T> cols_;
};

/// Batch normalization over every axis except 1 (input [N,C] or [N,C,H,W]).
/// Running variance uses the unbiased batch estimate; momentum 0.1.
template <typename T>
class BatchNorm {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm() = default;
  BatchNorm(ParamStore<T>& store, const std::string& prefix, int channels, bool with_shift = true)
      : c_(channels), with_shift_(with_shift) {
    gamma_ = store.add(prefix + ".weight", {std::size_t(channels)}, true, T(1));
    if (with_shift) beta_ = store.add(prefix + ".bias", {std::size_t(channels)});
    mean_ = store.add(prefix + ".running_mean", {std::size_t(channels)}, false, T(0));
    var_ = store.add(prefix + ".running_var", {std::size_t(channels)}, false, T(1));
  }

  Tensor<T> forward(ParamStore<T>& store, const Tensor<T>& x, Mode mode) {
    if (x.rank() < 2 || static_cast<int>(x.dim(1)) != c_) {
      throw ShapeError("batchnorm: expected " + std::to_string(c_) + " channels, got " + shape_string(x.shape));
    }
    shape_ = x.shape;
    n_ = x.dim(0);
    s_ = x.size() / (n_ * c_);
    mode_ = mode;
    const std::size_t M = n_ * s_;
    if (mode == Mode::train && M < 2) throw ShapeError("batchnorm: train mode needs more than one value per channel");
    xhat_.assign(x.size(), T(0));
    inv_std_.assign(c_, T(0));
    Tensor<T> y(x.shape);
    const T* g = store[gamma_].value.data.data();
    for (int c = 0; c < c_; ++c) {
      double mean, var;
      if (mode == Mode::train) {
        double s = 0;
        for (std::size_t n = 0; n < n_; ++n)
          for (std::size_t i = 0; i < s_; ++i) s += x.data[(n * c_ + c) * s_ + i];
        mean = s / M;
        double v = 0;
        for (std::size_t n = 0; n < n_; ++n)
          for (std::size_t i = 0; i < s_; ++i) {
            const double d = x.data[(n * c_ + c) * s_ + i] - mean;
            v += d * d;
          }
        var = v / M;
        auto& rm = store[mean_].value.data[c];
        auto& rv = store[var_].value.data[c];
        rm = static_cast<T>((1 - kMomentum) * rm + kMomentum * mean);
        rv = static_cast<T>((1 - kMomentum) * rv + kMomentum * var * M / (M - 1));
      } else {
        mean = store[mean_].value.data[c];
        var = store[var_].value.data[c];
      }
      const double inv = 1.0 / std::sqrt(var + kEps);
      inv_std_[c] = static_cast<T>(inv);
      const T beta = with_shift_ ? store[beta_].value.data[c] : T(0);
      for (std::size_t n = 0; n < n_; ++n)
        for (std::size_t i = 0; i < s_; ++i) {
          const std::size_t idx = (n * c_ + c) * s_ + i;
          const T xh = static_cast<T>((x.data[idx] - mean) * inv);
          xhat_[idx] = xh;
          y.data[idx] = g[c] * xh + beta;
        }
    }
    return y;
  }

  Tensor<T> backward(ParamStore<T>& store, const Tensor<T>& dy) {
    require_shape(dy.shape, shape_, "batchnorm backward");
    const std::size_t M = n_ * s_;
    Tensor<T> dx(shape_);
    const T* g = store[gamma_].value.data.data();
    for (int c = 0; c < c_; ++c) {
      double sum_dy = 0, sum_dy_xh = 0;
      for (std::size_t n = 0; n < n_; ++n)
        for (std::size_t i = 0; i < s_; ++i) {
          const std::size_t idx = (n * c_ + c) * s_ + i;
          sum_dy += dy.data[idx];
          sum_dy_xh += dy.data[idx] * xhat_[idx];
        }
      store[gamma_].grad.data[c] += static_cast<T>(sum_dy_xh);
      if (with_shift_) store[beta_].grad.data[c] += static_cast<T>(sum_dy);
      const double inv = inv_std_[c];
      for (std::size_t n = 0; n < n_; ++n)
        for (std::size_t i = 0; i < s_; ++i) {
          const std::size_t idx = (n * c_ + c) * s_ + i;
          if (mode_ == Mode::train) {
            // dxhat = dy * gamma; dx = inv/M * (M dxhat - sum dxhat - xhat sum(dxhat xhat))
            dx.data[idx] = static_cast<T>(g[c] * inv / M * (M * dy.data[idx] - sum_dy - xhat_[idx] * sum_dy_xh));
          } else {
            dx.data[idx] = static_cast<T>(g[c] * inv * dy.data[idx]);
          }
        }
    }
    return dx;
  }

 private:
  int c_ = 0;
  bool with_shift_ = true;
  std::size_t gamma_ = 0, beta_ = 0, mean_ = 0, var_ = 0;
  Shape shape_;
  std::size_t n_ = 0, s_ = 0;
  Mode mode_ = Mode::eval;
  std::vector<T> xhat_, inv_std_;
};

template <typename T>
class Relu {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> y = x;
    mask_.assign(x.size(), 0);
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y.data[i] > T(0)) {
        mask_[i] = 1;
      } else {
        y.data[i] = T(0);
      }
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (!mask_[i]) dx.data[i] = T(0);
    return dx;
  }
  const std::vector<unsigned char>& mask() const { return mask_; }

 private:
  std::vector<unsigned char> mask_;
};

/// y = x W^T, W is [out, in]. No bias.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& prefix, int in, int out) : in_(in), out_(out) {
    w_ = store.add(prefix + ".weight", {std::size_t(out), std::size_t(in)});
  }
  std::size_t weight_index() const { return w_; }

  Tensor<T> forward(ParamStore<T>& store, const Tensor<T>& x) {
    if (x.rank() != 2 || static_cast<int>(x.dim(1)) != in_) {
      throw ShapeError("linear: expected input [N," + std::to_string(in_) + "], got " + shape_string(x.shape));
    }
    x_ = x;
    const std::size_t N = x.dim(0);
    Tensor<T> y({N, std::size_t(out_)});
    const T* W = store[w_].value.data.data();
    for (std::size_t n = 0; n < N; ++n)
      for (int o = 0; o < out_; ++o) {
        T acc = 0;
        for (int i = 0; i < in_; ++i) acc += W[o * in_ + i] * x.data[n * in_ + i];
        y.data[n * out_ + o] = acc;
      }
    return y;
  }

  Tensor<T> backward(ParamStore<T>& store, const Tensor<T>& dy) {
    const std::size_t N = x_.dim(0);
    require_shape(dy.shape, {N, std::size_t(out_)}, "linear backward");
    const T* W = store[w_].value.data.data();
    T* dW = store[w_].grad.data.data();
    Tensor<T> dx({N, std::size_t(in_)});
    for (std::size_t n = 0; n < N; ++n)
      for (int o = 0; o < out_; ++o) {
        const T g = dy.data[n * out_ + o];
        if (g == T(0)) continue;
        for (int i = 0; i < in_; ++i) {
          dW[o * in_ + i] += g * x_.data[n * in_ + i];
          dx.data[n * in_ + i] += g * W[o * in_ + i];
        }
      }
    return dx;
  }

 private:
  int in_ = 0, out_ = 0;
  std::size_t w_ = 0;
  Tensor<T> x_;
};

/// Inverted dropout; active only in train mode.
template <typename T>
class Dropout {
 public:
  explicit Dropout(double p = 0.0) : p_(p) {
    if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("dropout: p must lie in [0, 1)");
  }
  Tensor<T> forward(const Tensor<T>& x, Mode mode, RngStream* rng) {
    scale_.assign(x.size(), T(1));
    if (mode == Mode::eval || p_ == 0.0) return x;
    if (rng == nullptr) throw StateError("dropout: train mode requires a random stream");
    Tensor<T> y = x;
    const T keep = static_cast<T>(1.0 / (1.0 - p_));
    for (std::size_t i = 0; i < y.size(); ++i) {
      scale_[i] = rng->uniform() >= p_ ? keep : T(0);
      y.data[i] *= scale_[i];
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= scale_[i];
    return dx;
  }

 private:
  double p_;
  std::vector<T> scale_;
};

enum class PoolMode { avg, max, gem, attention };

/// Spatial aggregation [N,C,H,W] -> [N,C].
///   avg, max;
///   gem: (mean x^p)^(1/p) with learnable p;
///   attention: softmax over locations of (a . x_hw + b), weighted sum of x_hw.
template <typename T>
class Pool {
 public:
  Pool() = default;
  Pool(ParamStore<T>& store, PoolMode mode, int channels, double gem_p = 3.0) : mode_(mode), c_(channels) {
    if (mode == PoolMode::gem) p_ = store.add("gem.p", {1}, true, static_cast<T>(gem_p));
    if (mode == PoolMode::attention) {
      a_ = store.add("attn.weight", {std::size_t(channels)});
      b_ = store.add("attn.bias", {1});
    }
  }

  PoolMode mode() const { return mode_; }

  Tensor<T> forward(ParamStore<T>& store, const Tensor<T>& x) {
    if (x.rank() != 4 || static_cast<int>(x.dim(1)) != c_) {
      throw ShapeError("pool: expected [N," + std::to_string(c_) + ",H,W], got " + shape_string(x.shape));
    }
    x_ = x;
    const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
    if (S == 0) throw ShapeError("pool: empty spatial extent");
    Tensor<T> y({N, C});
    switch (mode_) {
      case PoolMode::avg:
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          double s = 0;
          for (std::size_t i = 0; i < S; ++i) s += x.data[nc * S + i];
          y.data[nc] = static_cast<T>(s / S);
        }
        break;
      case PoolMode::max:
        argmax_.assign(N * C, 0);
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          std::size_t best = 0;
          for (std::size_t i = 1; i < S; ++i)
            if (x.data[nc * S + i] > x.data[nc * S + best]) best = i;
          argmax_[nc] = best;
          y.data[nc] = x.data[nc * S + best];
        }
        break;
      case PoolMode::gem: {
        const double p = store[p_].value.data[0];
        mean_pow_.assign(N * C, 0.0);
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          double s = 0;
          for (std::size_t i = 0; i < S; ++i) {
            const double v = x.data[nc * S + i];
            if (v < 0) throw DomainError("gem pooling: negative input " + std::to_string(v));
            s += std::pow(v, p);
          }
          mean_pow_[nc] = s / S;
          y.data[nc] = static_cast<T>(mean_pow_[nc] > 0 ? std::pow(mean_pow_[nc], 1.0 / p) : 0.0);
        }
        break;
      }
      case PoolMode::attention: {
        const T* a = store[a_].value.data.data();
        const double b = store[b_].value.data[0];
        weights_.assign(N * S, 0.0);
        for (std::size_t n = 0; n < N; ++n) {
          std::vector<double> logit(S, b);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < S; ++i) logit[i] += a[c] * x.data[(n * C + c) * S + i];
          const double mx = *std::max_element(logit.begin(), logit.end());
          double z = 0;
          for (std::size_t i = 0; i < S; ++i) z += (logit[i] = std::exp(logit[i] - mx));
          for (std::size_t i = 0; i < S; ++i) weights_[n * S + i] = logit[i] / z;
          for (std::size_t c = 0; c < C; ++c) {
            double s = 0;
            for (std::size_t i = 0; i < S; ++i) s += weights_[n * S + i] * x.data[(n * C + c) * S + i];
            y.data[n * C + c] = static_cast<T>(s);
          }
        }
        break;
      }
    }
    return y;
  }

  Tensor<T> backward(ParamStore<T>& store, const Tensor<T>& dy) {
    const std::size_t N = x_.dim(0), C = x_.dim(1), S = x_.dim(2) * x_.dim(3);
    require_shape(dy.shape, {N, C}, "pool backward");
    Tensor<T> dx(x_.shape);
    switch (mode_) {
      case PoolMode::avg:
        for (std::size_t nc = 0; nc < N * C; ++nc)
          for (std::size_t i = 0; i < S; ++i) dx.data[nc * S + i] = static_cast<T>(dy.data[nc] / double(S));
        break;
      case PoolMode::max:
        for (std::size_t nc = 0; nc < N * C; ++nc) dx.data[nc * S + argmax_[nc]] = dy.data[nc];
        break;
      case PoolMode::gem: {
        const double p = store[p_].value.data[0];
        double dp = 0;
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          const double m = mean_pow_[nc];
          if (m <= 0) continue;  // all-zero channel: output pinned at 0
          const double y = std::pow(m, 1.0 / p);
          const double g = dy.data[nc];
          const double scale = std::pow(m, 1.0 / p - 1.0) / S;
          double xlogx = 0;
          for (std::size_t i = 0; i < S; ++i) {
            const double v = x_.data[nc * S + i];
            if (v > 0) {
              dx.data[nc * S + i] = static_cast<T>(g * scale * std::pow(v, p - 1.0));
              xlogx += std::pow(v, p) * std::log(v);
            }
          }
          xlogx /= S;
          dp += g * y * (-std::log(m) / (p * p) + xlogx / (p * m));
        }
        store[p_].grad.data[0] += static_cast<T>(dp);
        break;
      }
      case PoolMode::attention: {
        const T* a = store[a_].value.data.data();
        T* da = store[a_].grad.data.data();
        double db = 0;
        for (std::size_t n = 0; n < N; ++n) {
          // g_s = sum_c dy_c x_cs; dlogit_s = w_s (g_s - sum_t w_t g_t)
          std::vector<double> gs(S, 0.0);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < S; ++i) gs[i] += dy.data[n * C + c] * x_.data[(n * C + c) * S + i];
          double wg = 0;
          for (std::size_t i = 0; i < S; ++i) wg += weights_[n * S + i] * gs[i];
          std::vector<double> dl(S);
          for (std::size_t i = 0; i < S; ++i) {
            dl[i] = weights_[n * S + i] * (gs[i] - wg);
            db += dl[i];
          }
          for (std::size_t c = 0; c < C; ++c) {
            double dac = 0;
            for (std::size_t i = 0; i < S; ++i) {
              const std::size_t idx = (n * C + c) * S + i;
              dx.data[idx] = static_cast<T>(weights_[n * S + i] * dy.data[n * C + c] + dl[i] * a[c]);
              dac += dl[i] * x_.data[idx];
            }
            da[c] += static_cast<T>(dac);
          }
        }
        store[b_].grad.data[0] += static_cast<T>(db);
        break;
      }
    }
    return dx;
  }
  /// Selected locations of the last max pooling (empty for other modes).
  const std::vector<std::size_t>& argmax() const { return argmax_; }

 private:
  PoolMode mode_ = PoolMode::avg;
  int c_ = 0;
  std::size_t p_ = 0, a_ = 0, b_ = 0;
  Tensor<T> x_;
  std::vector<std::size_t> argmax_;
  std::vector<double> mean_pow_, weights_;
};

}  // namespace noseprint
