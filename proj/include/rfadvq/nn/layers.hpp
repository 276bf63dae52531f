#pragma once

#include <algorithm>
#include <cmath>
#include <bit>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "rfadvq/nn/tensor.hpp"
#include "rfadvq/random.hpp"

namespace rfadvq::nn {

// Serializable description of a layer: kind tag plus integer hyperparameters.
struct LayerSpec {
  std::string kind;
  std::vector<std::int64_t> args;
  bool operator==(const LayerSpec&) const = default;
};

// Per-layer forward state kept for the backward pass.
template <typename T>
using Cache = std::vector<Tensor<T>>;

// Layers own their parameters but never mutate them during forward or
// backward; activations live in a caller-owned Cache and parameter gradients
// in a caller-owned buffer, so one layer can serve many concurrent passes.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerSpec spec() const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const = 0;
  // Accumulates into param_grads (one entry per parameter tensor) and returns
  // the gradient with respect to the layer input.
  virtual Tensor<T> backward(const Tensor<T>& grad_out, const Cache<T>& cache,
                             std::span<Tensor<T>> param_grads) const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual void initialize(Rng&) {}

  std::vector<Tensor<T>>& params() noexcept { return params_; }
  const std::vector<Tensor<T>>& params() const noexcept { return params_; }

 protected:
  std::vector<Tensor<T>> params_;
};

namespace detail {

template <typename T>
void uniform_fill(Tensor<T>& t, double bound, Rng& rng) {
  for (auto& v : t.values()) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
}

inline void require_rank(const Shape& s, std::size_t rank, const char* where) {
  if (s.size() != rank) {
    throw ShapeError(std::string(where) + ": expected rank " + std::to_string(rank) +
                     " input, got " + to_string(s));
  }
}

// First and one-past-last output index t with 0 <= t*stride + offset < limit.
inline std::pair<std::size_t, std::size_t> valid_range(std::int64_t offset, std::int64_t stride,
                                                      std::int64_t limit, std::int64_t count) {
  std::int64_t lo = 0;
  if (offset < 0) lo = (-offset + stride - 1) / stride;
  std::int64_t hi = count;
  if (limit - 1 - offset < 0) {
    hi = 0;
  } else {
    hi = std::min<std::int64_t>(count, (limit - 1 - offset) / stride + 1);
  }
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Column buffer for a strided convolution: col[i*k + kk][t] = x[i][t*s + kk - p]
// (zero outside the input). Turns both convolution directions into
// contiguous multiply-accumulate sweeps.
template <typename T>
Tensor<T> im2col(const T* x, std::size_t channels, std::size_t len, std::size_t k,
                 std::size_t s, std::size_t p, std::size_t cols) {
  Tensor<T> col({channels * k, cols});
  for (std::size_t i = 0; i < channels; ++i) {
    const T* xr = x + i * len;
    for (std::size_t kk = 0; kk < k; ++kk) {
      T* cr = col.data() + (i * k + kk) * cols;
      const std::int64_t off = std::int64_t(kk) - std::int64_t(p);
      auto [lo, hi] = valid_range(off, s, len, cols);
      for (std::size_t t = lo; t < hi; ++t) cr[t] = xr[std::int64_t(t * s) + off];
    }
  }
  return col;
}

// Adjoint of im2col: x[i][t*s + kk - p] += col[i*k + kk][t].
template <typename T>
void col2im(const Tensor<T>& col, T* x, std::size_t channels, std::size_t len, std::size_t k,
            std::size_t s, std::size_t p) {
  const std::size_t cols = col.dim(1);
  for (std::size_t i = 0; i < channels; ++i) {
    T* xr = x + i * len;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T* cr = col.data() + (i * k + kk) * cols;
      const std::int64_t off = std::int64_t(kk) - std::int64_t(p);
      auto [lo, hi] = valid_range(off, s, len, cols);
      for (std::size_t t = lo; t < hi; ++t) xr[std::int64_t(t * s) + off] += cr[t];
    }
  }
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMatrix<T>>;

// out += a * b   (a: rows x inner, b: inner x cols)
template <typename T>
void matmul_acc(const T* a, const T* b, T* out, std::size_t rows, std::size_t inner,
                std::size_t cols) {
  MutMap<T>(out, rows, cols).noalias() +=
      ConstMap<T>(a, rows, inner) * ConstMap<T>(b, inner, cols);
}

// out += a^T b   (a: rows x inner, b: rows x cols, out: inner x cols)
template <typename T>
void matmul_tn_acc(const T* a, const T* b, T* out, std::size_t rows, std::size_t inner,
                   std::size_t cols) {
  MutMap<T>(out, inner, cols).noalias() +=
      ConstMap<T>(a, rows, inner).transpose() * ConstMap<T>(b, rows, cols);
}

// out += a b^T   (a: rows x cols, b: inner x cols, out: rows x inner)
template <typename T>
void matmul_nt_acc(const T* a, const T* b, T* out, std::size_t rows, std::size_t inner,
                   std::size_t cols) {
  MutMap<T>(out, rows, inner).noalias() +=
      ConstMap<T>(a, rows, cols) * ConstMap<T>(b, inner, cols).transpose();
}

}  // namespace detail

// 1-D convolution over a [channels, length] input. Weight is stored as
// [out, in * kernel].
template <typename T>
class Conv1d final : public Layer<T> {
 public:
  Conv1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
         std::size_t pad = 0)
      : in_(in), out_(out), k_(kernel), s_(stride), p_(pad) {
    if (in == 0 || out == 0 || kernel == 0 || stride == 0) {
      throw InvalidArgument("conv1d: dimensions must be positive");
    }
    this->params_ = {Tensor<T>({out, in * kernel}), Tensor<T>({out})};
  }

  LayerSpec spec() const override {
    return {"conv1d", {std::int64_t(in_), std::int64_t(out_), std::int64_t(k_),
                       std::int64_t(s_), std::int64_t(p_)}};
  }

  Shape output_shape(const Shape& in) const override {
    detail::require_rank(in, 2, "conv1d");
    if (in[0] != in_ || in[1] + 2 * p_ < k_) {
      throw ShapeError("conv1d: incompatible input " + to_string(in));
    }
    return {out_, (in[1] + 2 * p_ - k_) / s_ + 1};
  }

  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    const Shape os = output_shape(x.shape());
    const std::size_t olen = os[1];
    const auto& b = this->params_[1];
    Tensor<T> y(os);
    for (std::size_t o = 0; o < out_; ++o) {
      for (auto& v : y.row(o)) v = b[o];
    }
    if (k_ == 1 && s_ == 1 && p_ == 0) {
      detail::matmul_acc(this->params_[0].data(), x.data(), y.data(), out_, in_, olen);
      cache = {x};
    } else {
      auto col = detail::im2col(x.data(), in_, x.dim(1), k_, s_, p_, olen);
      detail::matmul_acc(this->params_[0].data(), col.data(), y.data(), out_, in_ * k_, olen);
      cache = {std::move(col), Tensor<T>({1}, {T(x.dim(1))})};
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, const Cache<T>& cache,
                     std::span<Tensor<T>> grads) const override {
    const Tensor<T>& col = cache.at(0);
    const std::size_t olen = g.dim(1);
    for (std::size_t o = 0; o < out_; ++o) {
      T acc = 0;
      for (auto v : g.row(o)) acc += v;
      grads[1][o] += acc;
    }
    detail::matmul_nt_acc(g.data(), col.data(), grads[0].data(), out_, in_ * k_, olen);
    Tensor<T> gcol({in_ * k_, olen});
    detail::matmul_tn_acc(this->params_[0].data(), g.data(), gcol.data(), out_, in_ * k_, olen);
    if (cache.size() == 1) return gcol;
    const std::size_t len = std::size_t(cache.at(1)[0]);
    Tensor<T> gx({in_, len});
    detail::col2im(gcol, gx.data(), in_, len, k_, s_, p_);
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv1d>(*this); }

  void initialize(Rng& rng) override {
    const double bound = 1.0 / std::sqrt(double(in_ * k_));
    detail::uniform_fill(this->params_[0], bound, rng);
    this->params_[1].fill(T{0});
  }

 private:
  std::size_t in_, out_, k_, s_, p_;
};

// Transposed 1-D convolution (fractionally strided upsampling), the adjoint
// of Conv1d with the same (kernel, stride, pad). Weight is [in, out * kernel].
template <typename T>
class ConvTranspose1d final : public Layer<T> {
 public:
  ConvTranspose1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                  std::size_t pad = 0)
      : in_(in), out_(out), k_(kernel), s_(stride), p_(pad) {
    if (in == 0 || out == 0 || kernel == 0 || stride == 0) {
      throw InvalidArgument("conv_transpose1d: dimensions must be positive");
    }
    this->params_ = {Tensor<T>({in, out * kernel}), Tensor<T>({out})};
  }

  LayerSpec spec() const override {
    return {"conv_transpose1d", {std::int64_t(in_), std::int64_t(out_), std::int64_t(k_),
                                 std::int64_t(s_), std::int64_t(p_)}};
  }

  Shape output_shape(const Shape& in) const override {
    detail::require_rank(in, 2, "conv_transpose1d");
    if (in[0] != in_ || in[1] == 0 || (in[1] - 1) * s_ + k_ <= 2 * p_) {
      throw ShapeError("conv_transpose1d: incompatible input " + to_string(in));
    }
    return {out_, (in[1] - 1) * s_ + k_ - 2 * p_};
  }

  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    const Shape os = output_shape(x.shape());
    const std::size_t len = x.dim(1), olen = os[1];
    Tensor<T> col({out_ * k_, len});
    detail::matmul_tn_acc(this->params_[0].data(), x.data(), col.data(), in_, out_ * k_, len);
    Tensor<T> y(os);
    const auto& b = this->params_[1];
    for (std::size_t o = 0; o < out_; ++o) {
      for (auto& v : y.row(o)) v = b[o];
    }
    detail::col2im(col, y.data(), out_, olen, k_, s_, p_);
    cache = {x};
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, const Cache<T>& cache,
                     std::span<Tensor<T>> grads) const override {
    const Tensor<T>& x = cache.at(0);
    const std::size_t len = x.dim(1), olen = g.dim(1);
    for (std::size_t o = 0; o < out_; ++o) {
      T acc = 0;
      for (auto v : g.row(o)) acc += v;
      grads[1][o] += acc;
    }
    auto gcol = detail::im2col(g.data(), out_, olen, k_, s_, p_, len);
    detail::matmul_nt_acc(x.data(), gcol.data(), grads[0].data(), in_, out_ * k_, len);
    Tensor<T> gx(x.shape());
    detail::matmul_acc(this->params_[0].data(), gcol.data(), gx.data(), in_, out_ * k_, len);
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<ConvTranspose1d>(*this);
  }

  void initialize(Rng& rng) override {
    const double fan_in = double(in_ * k_) / double(s_);
    detail::uniform_fill(this->params_[0], 1.0 / std::sqrt(fan_in), rng);
    this->params_[1].fill(T{0});
  }

 private:
  std::size_t in_, out_, k_, s_, p_;
};

// Fully connected layer over the flattened input. Weight is [out, in].
template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(std::size_t in, std::size_t out) : in_(in), out_(out) {
    if (in == 0 || out == 0) throw InvalidArgument("dense: dimensions must be positive");
    this->params_ = {Tensor<T>({out, in}), Tensor<T>({out})};
  }

  LayerSpec spec() const override { return {"dense", {std::int64_t(in_), std::int64_t(out_)}}; }

  Shape output_shape(const Shape& in) const override {
    if (shape_size(in) != in_) throw ShapeError("dense: incompatible input " + to_string(in));
    return {out_};
  }

  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    output_shape(x.shape());
    const auto& w = this->params_[0];
    const auto& b = this->params_[1];
    Tensor<T> y({out_});
    for (std::size_t o = 0; o < out_; ++o) {
      const T* wr = w.data() + o * in_;
      T acc = b[o];
      for (std::size_t i = 0; i < in_; ++i) acc += wr[i] * x[i];
      y[o] = acc;
    }
    cache = {x};
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, const Cache<T>& cache,
                     std::span<Tensor<T>> grads) const override {
    const Tensor<T>& x = cache.at(0);
    const auto& w = this->params_[0];
    Tensor<T> gx(x.shape());
    for (std::size_t o = 0; o < out_; ++o) {
      const T go = g[o];
      grads[1][o] += go;
      const T* wr = w.data() + o * in_;
      T* gwr = grads[0].data() + o * in_;
      for (std::size_t i = 0; i < in_; ++i) {
        gwr[i] += go * x[i];
        gx[i] += go * wr[i];
      }
    }
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }

  void initialize(Rng& rng) override {
    detail::uniform_fill(this->params_[0], 1.0 / std::sqrt(double(in_)), rng);
    this->params_[1].fill(T{0});
  }

 private:
  std::size_t in_, out_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  LayerSpec spec() const override { return {"relu", {}}; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    Tensor<T> y = x;
    for (auto& v : y.values()) v = v > T{0} ? v : T{0};
    cache = {x};
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g, const Cache<T>& cache,
                     std::span<Tensor<T>>) const override {
    const Tensor<T>& x = cache.at(0);
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > T{0} ? g[i] : T{0};
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU>(*this); }
};

namespace detail {

// exp for float32 activations: Cody-Waite range reduction plus a degree-6
// polynomial, ~2 ulp on [-87, 88]. Written branch-free so loops over it
// vectorize; std::exp is kept for double.
inline float fast_exp(float x) {
  x = x < -87.0f ? -87.0f : (x > 88.0f ? 88.0f : x);
  // Round-to-nearest via the 1.5*2^23 shifter; the integer lands in the low
  // mantissa bits, which avoids a float->int conversion.
  constexpr float shifter = 12582912.0f;
  const float t = x * 1.44269504088896341f + shifter;
  const float n = t - shifter;
  const float r = (x - n * 0.693359375f) + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const std::int32_t k = std::bit_cast<std::int32_t>(t) - std::bit_cast<std::int32_t>(shifter);
  return p * std::bit_cast<float>((k + 127) << 23);
}

template <typename T>
T activation_exp(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return fast_exp(x);
  } else {
    return std::exp(x);
  }
}

}  // namespace detail

// x * sigmoid(x); smooth, so finite-difference checks never straddle a kink.
template <typename T>
class SiLU final : public Layer<T> {
 public:
  LayerSpec spec() const override { return {"silu", {}}; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    Tensor<T> y(x.shape()), sig(x.shape());
    const T* xs = x.data();
    T* ys = y.data();
    T* ss = sig.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      ss[i] = T{1} / (T{1} + detail::activation_exp(-xs[i]));
      ys[i] = xs[i] * ss[i];
    }
    cache = {x, std::move(sig)};
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g, const Cache<T>& cache,
                     std::span<Tensor<T>>) const override {
    const Tensor<T>& x = cache.at(0);
    const Tensor<T>& sig = cache.at(1);
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T s = sig[i];
      gx[i] = g[i] * s * (T{1} + x[i] * (T{1} - s));
    }
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<SiLU>(*this); }
};

template <typename T>
class Tanh final : public Layer<T> {
 public:
  LayerSpec spec() const override { return {"tanh", {}}; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
    cache = {y};
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g, const Cache<T>& cache,
                     std::span<Tensor<T>>) const override {
    const Tensor<T>& y = cache.at(0);
    Tensor<T> gx(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] = g[i] * (T{1} - y[i] * y[i]);
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Tanh>(*this); }
};

// [channels, length] -> [channels], mean over length.
template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  LayerSpec spec() const override { return {"global_avg_pool", {}}; }
  Shape output_shape(const Shape& in) const override {
    detail::require_rank(in, 2, "global_avg_pool");
    return {in[0]};
  }
  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    const Shape os = output_shape(x.shape());
    const std::size_t len = x.dim(1);
    Tensor<T> y(os);
    for (std::size_t c = 0; c < os[0]; ++c) {
      T acc = 0;
      for (std::size_t t = 0; t < len; ++t) acc += x(c, t);
      y[c] = acc / T(len);
    }
    cache = {Tensor<T>({2}, {T(x.dim(0)), T(len)})};
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g, const Cache<T>& cache,
                     std::span<Tensor<T>>) const override {
    const std::size_t ch = std::size_t(cache.at(0)[0]), len = std::size_t(cache.at(0)[1]);
    Tensor<T> gx({ch, len});
    for (std::size_t c = 0; c < ch; ++c) {
      const T v = g[c] / T(len);
      for (std::size_t t = 0; t < len; ++t) gx(c, t) = v;
    }
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
};

// [channels, length] -> [channels]. Averages each channel separately over
// the `period` sample phases (t mod period) and keeps the largest phase mean.
template <typename T>
class PolyphaseMaxPool final : public Layer<T> {
 public:
  explicit PolyphaseMaxPool(std::size_t period) : period_(period) {
    if (period == 0) throw InvalidArgument("polyphase_max_pool: period must be positive");
  }
  LayerSpec spec() const override { return {"polyphase_max_pool", {std::int64_t(period_)}}; }
  Shape output_shape(const Shape& in) const override {
    detail::require_rank(in, 2, "polyphase_max_pool");
    if (in[1] < period_) throw ShapeError("polyphase_max_pool: input shorter than period");
    return {in[0]};
  }
  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    const Shape os = output_shape(x.shape());
    const std::size_t ch = os[0], len = x.dim(1);
    Tensor<T> y(os);
    // cache: [ch, len], then the winning phase per channel
    Tensor<T> winner({ch});
    std::vector<T> acc(period_);
    for (std::size_t c = 0; c < ch; ++c) {
      std::fill(acc.begin(), acc.end(), T{0});
      for (std::size_t t = 0; t < len; ++t) acc[t % period_] += x(c, t);
      std::size_t best = 0;
      T best_v = acc[0] / T(phase_count(0, len));
      for (std::size_t p = 1; p < period_; ++p) {
        const T v = acc[p] / T(phase_count(p, len));
        if (v > best_v) best_v = v, best = p;
      }
      y[c] = best_v;
      winner[c] = T(best);
    }
    cache = {Tensor<T>({2}, {T(ch), T(len)}), std::move(winner)};
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g, const Cache<T>& cache,
                     std::span<Tensor<T>>) const override {
    const std::size_t ch = std::size_t(cache.at(0)[0]), len = std::size_t(cache.at(0)[1]);
    const Tensor<T>& winner = cache.at(1);
    Tensor<T> gx({ch, len});
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t p = std::size_t(winner[c]);
      const T v = g[c] / T(phase_count(p, len));
      for (std::size_t t = p; t < len; t += period_) gx(c, t) = v;
    }
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<PolyphaseMaxPool>(*this);
  }

 private:
  std::size_t phase_count(std::size_t p, std::size_t len) const {
    return (len - p + period_ - 1) / period_;
  }

  std::size_t period_;
};

// Normalizes a [channels, length] activation over all of its elements, then
// applies a per-channel gain and bias.
template <typename T>
class LayerNorm1d final : public Layer<T> {
 public:
  explicit LayerNorm1d(std::size_t channels, double eps = 1e-5) : ch_(channels), eps_(eps) {
    this->params_ = {Tensor<T>({channels}, T{1}), Tensor<T>({channels})};
  }
  LayerSpec spec() const override { return {"layer_norm1d", {std::int64_t(ch_)}}; }
  Shape output_shape(const Shape& in) const override {
    detail::require_rank(in, 2, "layer_norm1d");
    if (in[0] != ch_) throw ShapeError("layer_norm1d: incompatible input " + to_string(in));
    return in;
  }
  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    output_shape(x.shape());
    const std::size_t n = x.size(), len = x.dim(1);
    T mean = 0;
    for (auto v : x.values()) mean += v;
    mean /= T(n);
    T var = 0;
    for (auto v : x.values()) var += (v - mean) * (v - mean);
    var /= T(n);
    const T inv_std = T{1} / std::sqrt(var + T(eps_));
    Tensor<T> xhat(x.shape()), y(x.shape());
    for (std::size_t c = 0; c < ch_; ++c) {
      for (std::size_t t = 0; t < len; ++t) {
        const T h = (x(c, t) - mean) * inv_std;
        xhat(c, t) = h;
        y(c, t) = this->params_[0][c] * h + this->params_[1][c];
      }
    }
    cache = {std::move(xhat), Tensor<T>({1}, {inv_std})};
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g, const Cache<T>& cache,
                     std::span<Tensor<T>> grads) const override {
    const Tensor<T>& xhat = cache.at(0);
    const T inv_std = cache.at(1)[0];
    const std::size_t n = xhat.size(), len = xhat.dim(1);
    Tensor<T> dh(xhat.shape());
    T sum_dh = 0, sum_dh_h = 0;
    for (std::size_t c = 0; c < ch_; ++c) {
      for (std::size_t t = 0; t < len; ++t) {
        grads[0][c] += g(c, t) * xhat(c, t);
        grads[1][c] += g(c, t);
        const T d = g(c, t) * this->params_[0][c];
        dh(c, t) = d;
        sum_dh += d;
        sum_dh_h += d * xhat(c, t);
      }
    }
    Tensor<T> gx(xhat.shape());
    for (std::size_t i = 0; i < n; ++i) {
      gx[i] = inv_std / T(n) * (T(n) * dh[i] - sum_dh - xhat[i] * sum_dh_h);
    }
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<LayerNorm1d>(*this); }

 private:
  std::size_t ch_;
  double eps_;
};

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec) {
  const auto& a = spec.args;
  auto need = [&](std::size_t n) {
    if (a.size() != n) throw FormatError("layer '" + spec.kind + "' expects " +
                                         std::to_string(n) + " arguments");
    for (auto v : a) {
      if (v < 0) throw FormatError("layer '" + spec.kind + "' has a negative argument");
    }
  };
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(a[i]); };
  if (spec.kind == "conv1d") {
    need(5);
    return std::make_unique<Conv1d<T>>(u(0), u(1), u(2), u(3), u(4));
  }
  if (spec.kind == "conv_transpose1d") {
    need(5);
    return std::make_unique<ConvTranspose1d<T>>(u(0), u(1), u(2), u(3), u(4));
  }
  if (spec.kind == "dense") {
    need(2);
    return std::make_unique<Dense<T>>(u(0), u(1));
  }
  if (spec.kind == "layer_norm1d") {
    need(1);
    return std::make_unique<LayerNorm1d<T>>(u(0));
  }
  if (spec.kind == "polyphase_max_pool") {
    need(1);
    return std::make_unique<PolyphaseMaxPool<T>>(u(0));
  }
  need(0);
  if (spec.kind == "relu") return std::make_unique<ReLU<T>>();
  if (spec.kind == "silu") return std::make_unique<SiLU<T>>();
  if (spec.kind == "tanh") return std::make_unique<Tanh<T>>();
  if (spec.kind == "global_avg_pool") return std::make_unique<GlobalAvgPool<T>>();
  throw FormatError("unknown layer kind '" + spec.kind + "'");
}

}  // namespace rfadvq::nn
