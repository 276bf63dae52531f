#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "rfadvq/io/checkpoint.hpp"
#include "rfadvq/nn/graph.hpp"
#include "rfadvq/nn/optimizer.hpp"
#include "rfadvq/waveforms.hpp"

namespace rfadvq {

inline constexpr std::size_t kTokens = 64;
inline constexpr std::size_t kCodewordLength = 512;
inline constexpr std::size_t kDefaultCodebookSize = 128;

enum class QuantMode { Stochastic, Argmax };

inline const char* to_string(QuantMode m) {
  return m == QuantMode::Stochastic ? "stochastic" : "argmax";
}

inline QuantMode parse_quant_mode(const std::string& s) {
  if (s == "stochastic") return QuantMode::Stochastic;
  if (s == "argmax") return QuantMode::Argmax;
  throw InvalidArgument("unknown quantization mode '" + s + "'");
}

using TokenIndex = std::uint16_t;
using Tokens = std::array<TokenIndex, kTokens>;

// Grid of per-slice posteriors over the codebook: [64, q_s].
struct PosteriorGrid {
  std::size_t codebook_size = 0;
  std::vector<double> probs;

  std::span<const double> row(std::size_t i) const {
    return {probs.data() + i * codebook_size, codebook_size};
  }
};

template <typename T>
struct LatentCode {
  Tokens indices{};
  nn::Tensor<T> quantized;  // [64, 512], row i is codebook row indices[i]
};

// KL(p || uniform) = sum p log(p q_s).
inline double kl_to_uniform(std::span<const double> p) {
  double kl = std::log(double(p.size()));
  for (double v : p) {
    if (v > 0.0) kl += v * std::log(v);
  }
  return std::max(kl, 0.0);
}

namespace detail {

// d[i][k] = ||z_i - e_k||^2 for z: [n, l], e: [q, l]. The expanded form is
// used for speed; rows where it is not finite are recomputed directly.
template <typename T>
std::vector<double> squared_distances(const nn::Tensor<T>& z, const nn::Tensor<T>& e) {
  const std::size_t n = z.dim(0), q = e.dim(0), l = z.dim(1);
  using M = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const M zd = nn::detail::ConstMap<T>(z.data(), n, l).template cast<double>();
  const M ed = nn::detail::ConstMap<T>(e.data(), q, l).template cast<double>();
  std::vector<double> d(n * q);
  Eigen::Map<M> dm(d.data(), n, q);
  dm.noalias() = -2.0 * zd * ed.transpose();
  const Eigen::VectorXd zn = zd.rowwise().squaredNorm();
  const Eigen::VectorXd en = ed.rowwise().squaredNorm();
  for (std::size_t i = 0; i < n; ++i) {
    bool finite = std::isfinite(zn[i]);
    for (std::size_t k = 0; k < q; ++k) {
      double v = dm(i, k) + zn[i] + en[k];
      finite = finite && std::isfinite(v);
      dm(i, k) = v < 0.0 ? 0.0 : v;
    }
    if (finite) continue;
    for (std::size_t k = 0; k < q; ++k) {
      // Scaled accumulation survives components near the double range.
      double scale = 0.0, ssq = 1.0;
      for (std::size_t j = 0; j < l; ++j) {
        const double a = std::abs(double(z(i, j)) - double(e(k, j)));
        if (a == 0.0) continue;
        if (scale < a) {
          ssq = 1.0 + ssq * (scale / a) * (scale / a);
          scale = a;
        } else {
          ssq += (a / scale) * (a / scale);
        }
      }
      dm(i, k) = scale * scale * ssq;
    }
  }
  return d;
}

// In-place: each row of length q of -d becomes log-softmax.
inline void log_softmax_neg_rows(std::vector<double>& d, std::size_t q) {
  const std::size_t n = d.size() / q;
  for (std::size_t i = 0; i < n; ++i) {
    double* r = d.data() + i * q;
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < q; ++k) lo = std::min(lo, r[k]);
    if (!std::isfinite(lo)) {
      // Every distance overflowed: no information left, fall back to uniform.
      for (std::size_t k = 0; k < q; ++k) r[k] = -std::log(double(q));
      continue;
    }
    double s = 0.0;
    for (std::size_t k = 0; k < q; ++k) s += std::exp(lo - r[k]);
    const double ls = std::log(s);
    for (std::size_t k = 0; k < q; ++k) r[k] = (lo - r[k]) - ls;
  }
}

inline std::size_t sample_index(std::span<const double> p, Rng& rng) {
  const double u = uniform01(rng);
  double c = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    c += p[k];
    if (u < c) return k;
  }
  // Rounding left u above the last partial sum: take the last nonzero bin.
  for (std::size_t k = p.size(); k-- > 0;) {
    if (p[k] > 0.0) return k;
  }
  return p.size() - 1;
}

template <typename T>
nn::Tensor<T> transpose(const nn::Tensor<T>& a) {
  const std::size_t r = a.dim(0), c = a.dim(1);
  nn::Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  }
  return out;
}

}  // namespace detail

// Posterior over codewords for one slice: p_k proportional to
// exp(-||z - e_k||^2), normalized in the log domain.
template <typename T>
std::vector<double> posterior(std::span<const T> z, const nn::Tensor<T>& codebook) {
  if (codebook.rank() != 2 || z.size() != codebook.dim(1)) {
    throw ShapeError("posterior: slice length does not match codebook");
  }
  nn::Tensor<T> zt({1, z.size()}, std::vector<T>(z.begin(), z.end()));
  auto d = detail::squared_distances(zt, codebook);
  detail::log_softmax_neg_rows(d, codebook.dim(0));
  for (auto& v : d) v = std::exp(v);
  return d;
}

// One index per row: a draw from the row's posterior, or its mode.
inline Tokens draw_tokens(const PosteriorGrid& p, QuantMode mode, Rng& rng) {
  if (p.probs.size() != kTokens * p.codebook_size) throw ShapeError("posterior grid is not 64 rows");
  Tokens t{};
  for (std::size_t i = 0; i < kTokens; ++i) {
    const auto r = p.row(i);
    t[i] = TokenIndex(mode == QuantMode::Stochastic
                          ? detail::sample_index(r, rng)
                          : std::size_t(std::max_element(r.begin(), r.end()) - r.begin()));
  }
  return t;
}

struct VQVAEHyper {
  std::size_t epochs = 15;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double beta = 0.25;
  std::size_t codebook_size = kDefaultCodebookSize;
  std::array<std::size_t, 2> channels{32, 64};  // hidden widths of encoder and decoder
  // Codewords used less than this fraction of the uniform expected count in
  // an epoch are reinitialized.
  double reset_fraction = 0.01;
  // Multiplies the initial weights of the last encoder layer. At fan-in
  // scaled init the slice distances are O(1) and the posterior starts out
  // uniform, which collapses every token onto the same mean codeword.
  double encoder_output_gain = 10.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs == 0 || batch_size == 0 || !(learning_rate > 0.0)) {
      throw InvalidArgument("vqvae hyperparameters must be positive");
    }
    if (!(beta >= 0.0)) throw InvalidArgument("beta must be nonnegative");
    if (codebook_size < 2 || codebook_size > 65535) {
      throw InvalidArgument("codebook_size must be in [2, 65535]");
    }
    if (reset_fraction < 0.0 || reset_fraction >= 1.0) {
      throw InvalidArgument("reset_fraction must be in [0, 1)");
    }
    if (!(encoder_output_gain > 0.0)) throw InvalidArgument("encoder_output_gain must be > 0");
    if (channels[0] == 0 || channels[1] == 0) throw InvalidArgument("vqvae channels must be >= 1");
  }
};

struct VQLossTerms {
  double total = 0.0;
  double reconstruction = 0.0;
  double quantization = 0.0;
  double commitment = 0.0;
  double kl = 0.0;

  VQLossTerms& operator+=(const VQLossTerms& o) {
    total += o.total;
    reconstruction += o.reconstruction;
    quantization += o.quantization;
    commitment += o.commitment;
    kl += o.kl;
    return *this;
  }
};

template <typename T>
struct VQGradients {
  nn::Gradients<T> encoder;
  nn::Gradients<T> decoder;
  nn::Tensor<T> codebook;
};

// Stop-gradient operands of one loss evaluation. Holding them fixed turns
// the straight-through objective into an ordinary differentiable function,
// which is what a finite-difference check needs.
template <typename T>
struct FrozenQuantization {
  Tokens indices{};
  nn::Tensor<T> encoder_output;  // sg[Z_e], [64, 512]
  nn::Tensor<T> codebook;        // sg[e]
};

template <typename T>
class BasicVQVAE {
 public:
  // Two stride-4 convolutions (2 -> c1 -> c2 channels) and a 1x1 projection
  // to 512; the decoder mirrors it with transposed convolutions.
  static nn::Graph<T> encoder_architecture(std::size_t c1 = 32, std::size_t c2 = 64) {
    nn::Graph<T> g({2, kWindow});
    g.template add<nn::Conv1d<T>>(2, c1, 8, 4, 2)
        .template add<nn::SiLU<T>>()
        .template add<nn::Conv1d<T>>(c1, c2, 8, 4, 2)
        .template add<nn::SiLU<T>>()
        .template add<nn::Conv1d<T>>(c2, kCodewordLength, 1);
    return g;
  }
  static nn::Graph<T> decoder_architecture(std::size_t c1 = 32, std::size_t c2 = 64) {
    nn::Graph<T> g({kCodewordLength, kTokens});
    g.template add<nn::Conv1d<T>>(kCodewordLength, c2, 1)
        .template add<nn::SiLU<T>>()
        .template add<nn::ConvTranspose1d<T>>(c2, c1, 8, 4, 2)
        .template add<nn::SiLU<T>>()
        .template add<nn::ConvTranspose1d<T>>(c1, 2, 8, 4, 2);
    return g;
  }

  explicit BasicVQVAE(std::size_t codebook_size = kDefaultCodebookSize, double beta = 0.25,
                      std::size_t c1 = 32, std::size_t c2 = 64)
      : encoder_(encoder_architecture(c1, c2)),
        decoder_(decoder_architecture(c1, c2)),
        codebook_({codebook_size, kCodewordLength}),
        beta_(beta) {}

  BasicVQVAE(nn::Graph<T> encoder, nn::Graph<T> decoder, nn::Tensor<T> codebook, double beta)
      : encoder_(std::move(encoder)),
        decoder_(std::move(decoder)),
        codebook_(std::move(codebook)),
        beta_(beta) {
    if (encoder_.input_shape() != nn::Shape{2, kWindow} ||
        encoder_.output_shape() != nn::Shape{kCodewordLength, kTokens}) {
      throw ShapeError("vqvae encoder must map [2,1024] to [512,64]");
    }
    if (decoder_.input_shape() != nn::Shape{kCodewordLength, kTokens} ||
        decoder_.output_shape() != nn::Shape{2, kWindow}) {
      throw ShapeError("vqvae decoder must map [512,64] to [2,1024]");
    }
    if (codebook_.rank() != 2 || codebook_.dim(1) != kCodewordLength ||
        codebook_.dim(0) < 2 || codebook_.dim(0) > 65535) {
      throw ShapeError("vqvae codebook must be [q_s, 512]");
    }
  }

  std::size_t codebook_size() const noexcept { return codebook_.dim(0); }
  double beta() const noexcept { return beta_; }
  const nn::Tensor<T>& codebook() const noexcept { return codebook_; }
  nn::Tensor<T>& codebook() noexcept { return codebook_; }
  const nn::Graph<T>& encoder() const noexcept { return encoder_; }
  nn::Graph<T>& encoder() noexcept { return encoder_; }
  const nn::Graph<T>& decoder() const noexcept { return decoder_; }
  nn::Graph<T>& decoder() noexcept { return decoder_; }

  // Z_e as 64 slices of length 512: [64, 512].
  nn::Tensor<T> encode(const nn::Tensor<T>& x) const {
    return detail::transpose(encoder_.infer(x));
  }
  nn::Tensor<T> encode(const IQDatapoint& x) const { return encode(x.template to_tensor<T>()); }

  PosteriorGrid posterior_grid(const nn::Tensor<T>& z) const {
    nn::expect_shape(z, {kTokens, kCodewordLength}, "posterior_grid");
    PosteriorGrid g{codebook_size(), detail::squared_distances(z, codebook_)};
    detail::log_softmax_neg_rows(g.probs, g.codebook_size);
    for (auto& v : g.probs) v = std::exp(v);
    return g;
  }

  Tokens sample_tokens(const PosteriorGrid& p, QuantMode mode, Rng& rng) const {
    return draw_tokens(p, mode, rng);
  }

  LatentCode<T> code_from_tokens(const Tokens& t) const {
    LatentCode<T> c{t, nn::Tensor<T>({kTokens, kCodewordLength})};
    for (std::size_t i = 0; i < kTokens; ++i) {
      if (t[i] >= codebook_size()) throw InvalidArgument("token index out of range");
      std::copy_n(codebook_.data() + std::size_t(t[i]) * kCodewordLength, kCodewordLength,
                  c.quantized.data() + i * kCodewordLength);
    }
    return c;
  }

  LatentCode<T> quantize(const nn::Tensor<T>& z, QuantMode mode, Rng& rng) const {
    return code_from_tokens(sample_tokens(posterior_grid(z), mode, rng));
  }

  nn::Tensor<T> decode(const LatentCode<T>& code) const {
    nn::expect_shape(code.quantized, {kTokens, kCodewordLength}, "decode");
    return decoder_.infer(detail::transpose(code.quantized));
  }
  nn::Tensor<T> decode(const Tokens& t) const { return decode(code_from_tokens(t)); }

  struct Reconstruction {
    nn::Tensor<T> x_hat;
    LatentCode<T> code;
  };

  Reconstruction reconstruct(const nn::Tensor<T>& x, Rng& rng,
                             QuantMode mode = QuantMode::Stochastic) const {
    auto code = quantize(encode(x), mode, rng);
    auto xh = decode(code);
    return {std::move(xh), std::move(code)};
  }
  Reconstruction reconstruct(const IQDatapoint& x, Rng& rng,
                             QuantMode mode = QuantMode::Stochastic) const {
    return reconstruct(x.template to_tensor<T>(), rng, mode);
  }

  VQGradients<T> zero_gradients() const {
    return {encoder_.zero_gradients(), decoder_.zero_gradients(), nn::Tensor<T>(codebook_.shape())};
  }

  // Draws the quantization for x and returns the stop-gradient operands.
  FrozenQuantization<T> freeze(const nn::Tensor<T>& x, QuantMode mode, Rng& rng) const {
    auto z = encode(x);
    Tokens t = sample_tokens(posterior_grid(z), mode, rng);
    return {t, std::move(z), codebook_};
  }

  // L = L_rec + L_quant + beta (L_commit + KL) for the fixed quantization fq.
  // Gradients (if requested) are accumulated into grads; the input gradient
  // includes x's role as the reconstruction target.
  VQLossTerms loss(const nn::Tensor<T>& x, const FrozenQuantization<T>& fq,
                   VQGradients<T>* grads = nullptr, nn::Tensor<T>* input_grad = nullptr) const {
    nn::Tape<T> tape;
    const auto z = detail::transpose(encoder_.forward(x, tape));
    return loss_impl(x, z, tape, fq.indices, fq.encoder_output, fq.codebook, false, grads,
                     input_grad);
  }

  // One training evaluation: stochastic quantization of the live encoder
  // output with sg[] taken at the current values.
  VQLossTerms training_loss(const nn::Tensor<T>& x, Rng& rng, VQGradients<T>& grads,
                            Tokens* drawn = nullptr, nn::Tensor<T>* z_out = nullptr) const {
    nn::Tape<T> tape;
    const auto z = detail::transpose(encoder_.forward(x, tape));
    const auto pg = posterior_grid(z);
    const Tokens t = sample_tokens(pg, QuantMode::Stochastic, rng);
    if (drawn) *drawn = t;
    auto terms = loss_impl(x, z, tape, t, z, codebook_, true, &grads, nullptr, &pg);
    if (z_out) *z_out = z;
    return terms;
  }

  template <typename U>
  BasicVQVAE<U> cast() const {
    return BasicVQVAE<U>(encoder_.template cast<U>(), decoder_.template cast<U>(),
                         codebook_.template cast<U>(), beta_);
  }

 private:
  VQLossTerms loss_impl(const nn::Tensor<T>& x, const nn::Tensor<T>& z, const nn::Tape<T>& tape,
                        const Tokens& idx, const nn::Tensor<T>& z_sg, const nn::Tensor<T>& e_sg,
                        bool live, VQGradients<T>* grads, nn::Tensor<T>* input_grad,
                        const PosteriorGrid* pg_in = nullptr) const {
    const std::size_t q = codebook_size(), l = kCodewordLength, m = kTokens * l;
    const double n_in = double(2 * kWindow);
    for (auto k : idx) {
      if (k >= q) throw InvalidArgument("token index out of range");
    }
    VQLossTerms terms;
    const bool want = grads != nullptr || input_grad != nullptr;
    nn::Tensor<T> gz({kTokens, l});

    // Decoder input: z + (sg[e_k] - sg[z]), which is exactly e_k in training.
    nn::Tensor<T> u({kTokens, l});
    for (std::size_t i = 0; i < kTokens; ++i) {
      const T* e = e_sg.data() + std::size_t(idx[i]) * l;
      T* ur = u.data() + i * l;
      if (live) {
        std::copy_n(e, l, ur);
      } else {
        for (std::size_t j = 0; j < l; ++j) ur[j] = z(i, j) + (e[j] - z_sg(i, j));
      }
    }
    nn::Tape<T> dtape;
    const auto xh = decoder_.forward(detail::transpose(u), dtape);
    nn::Tensor<T> gxh(xh.shape());
    double rec = 0.0;
    for (std::size_t i = 0; i < xh.size(); ++i) {
      const double r = double(xh[i]) - double(x[i]);
      rec += r * r;
      gxh[i] = T(2.0 * r / n_in);
    }
    terms.reconstruction = rec / n_in;

    // Commitment (gradient to z) and codebook pull (gradient to e).
    double commit = 0.0, quant = 0.0;
    for (std::size_t i = 0; i < kTokens; ++i) {
      const std::size_t k = idx[i];
      for (std::size_t j = 0; j < l; ++j) {
        const double dc = double(z(i, j)) - double(e_sg(k, j));
        const double dq = double(z_sg(i, j)) - double(codebook_(k, j));
        commit += dc * dc;
        quant += dq * dq;
        if (want) gz(i, j) += T(beta_ * 2.0 * dc / double(m));
        if (grads) grads->codebook(k, j) += T(-2.0 * dq / double(m));
      }
    }
    terms.commitment = commit / double(m);
    terms.quantization = quant / double(m);

    // KL of each slice's posterior from uniform, summed over slices and
    // scaled per input element.
    PosteriorGrid local;
    const PosteriorGrid& pg = pg_in ? *pg_in : (local = posterior_grid(z), local);
    std::vector<double> gd(kTokens * q);
    double kl = 0.0;
    for (std::size_t i = 0; i < kTokens; ++i) {
      const auto p = pg.row(i);
      double plogp = 0.0;
      for (double v : p) {
        if (v > 0.0) plogp += v * std::log(v);
      }
      kl += plogp + std::log(double(q));
      for (std::size_t k = 0; k < q; ++k) {
        const double lp = p[k] > 0.0 ? std::log(p[k]) : 0.0;
        // dKL/dd_ik = -p_k (log p_k - sum p log p)
        gd[i * q + k] = -p[k] * (lp - plogp) / n_in;
      }
    }
    terms.kl = std::max(kl, 0.0) / n_in;
    if (want) {
      // d_ik = ||z_i - e_k||^2: dz_i = 2 sum_k g_ik (z_i - e_k), de_k = -2 sum_i g_ik (z_i - e_k)
      using M = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
      const Eigen::Map<const M> G(gd.data(), kTokens, q);
      const M zd = nn::detail::ConstMap<T>(z.data(), kTokens, l).template cast<double>();
      const M ed = nn::detail::ConstMap<T>(codebook_.data(), q, l).template cast<double>();
      const Eigen::VectorXd rs = G.rowwise().sum();
      const M dz = 2.0 * beta_ * (zd.array().colwise() * rs.array()).matrix() -
                   2.0 * beta_ * (G * ed);
      for (std::size_t i = 0; i < kTokens; ++i) {
        for (std::size_t j = 0; j < l; ++j) gz(i, j) += T(dz(i, j));
      }
      if (grads) {
        const Eigen::RowVectorXd cs = G.colwise().sum();
        const M de = -2.0 * beta_ * (G.transpose() * zd) +
                     2.0 * beta_ * (ed.array().colwise() * cs.transpose().array()).matrix();
        for (std::size_t k = 0; k < q; ++k) {
          for (std::size_t j = 0; j < l; ++j) grads->codebook(k, j) += T(de(k, j));
        }
      }
    }
    terms.total = terms.reconstruction + terms.quantization +
                  beta_ * (terms.commitment + terms.kl);

    if (want) {
      nn::Gradients<T> dec_scratch;
      nn::Gradients<T>& dg = grads ? grads->decoder : (dec_scratch = decoder_.zero_gradients());
      const auto gu = detail::transpose(decoder_.backward(gxh, dtape, dg));
      nn::add_into<T>(gz.values(), gu.values());  // straight-through
      nn::Gradients<T> enc_scratch;
      nn::Gradients<T>& eg = grads ? grads->encoder : (enc_scratch = encoder_.zero_gradients());
      auto gx = encoder_.backward(detail::transpose(gz), tape, eg);
      if (input_grad) {
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= gxh[i];
        *input_grad = std::move(gx);
      }
    }
    return terms;
  }

  nn::Graph<T> encoder_;
  nn::Graph<T> decoder_;
  nn::Tensor<T> codebook_;
  double beta_;
};

using VQVAEModel = BasicVQVAE<float>;

struct VQTrainingInfo {
  std::size_t epochs_run = 0;
  std::vector<VQLossTerms> epoch_terms;  // epoch means
  std::vector<std::size_t> resets;       // codewords reinitialized per epoch
  std::vector<std::size_t> active_codewords;
};

// Minibatch Adam on the VQVAE objective with straight-through gradients and
// end-of-epoch resets of poorly used codewords.
inline VQVAEModel train_vqvae(std::span<const IQDatapoint> data, const VQVAEHyper& hyper,
                              VQTrainingInfo* info = nullptr) {
  hyper.validate();
  if (data.empty()) throw InvalidArgument("train_vqvae: empty dataset");
  VQVAEModel model(hyper.codebook_size, hyper.beta, hyper.channels[0], hyper.channels[1]);
  {
    Rng init(derive_seed(hyper.seed, 0xE1C0));
    model.encoder().initialize(init);
    model.decoder().initialize(init);
    auto enc = model.encoder().parameters();
    for (auto it = enc.end() - 2; it != enc.end(); ++it) {
      for (auto& w : (*it)->values()) w *= float(hyper.encoder_output_gain);
    }
  }
  Rng rng(derive_seed(hyper.seed, 0x7A11));
  const std::size_t q = hyper.codebook_size, l = kCodewordLength;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto shuffle = [&] {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  };

  // Codewords start at encoder slices of a random batch.
  shuffle();
  std::vector<nn::Tensor<float>> slices;
  for (std::size_t b = 0; b < std::min(hyper.batch_size, data.size()); ++b) {
    slices.push_back(model.encode(data[order[b]]));
  }
  auto random_slice = [&](float* dst) {
    const auto& z = slices[uniform_index(rng, slices.size())];
    const std::size_t i = uniform_index(rng, kTokens);
    std::copy_n(z.data() + i * l, l, dst);
  };
  for (std::size_t k = 0; k < q; ++k) random_slice(model.codebook().data() + k * l);

  auto params = model.encoder().parameters();
  for (auto* p : model.decoder().parameters()) params.push_back(p);
  params.push_back(&model.codebook());
  const std::size_t cb_slot = params.size() - 1;
  nn::OptState<float> opt(nn::AdamConfig{hyper.learning_rate}, params);

  VQTrainingInfo local;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    shuffle();
    std::vector<std::uint64_t> usage(q, 0);
    VQLossTerms sum;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t end = std::min(order.size(), start + hyper.batch_size);
      auto g = model.zero_gradients();
      slices.clear();
      for (std::size_t b = start; b < end; ++b) {
        Tokens t{};
        nn::Tensor<float> z;
        const auto terms = model.training_loss(data[order[b]].to_tensor(), rng, g, &t, &z);
        if (!std::isfinite(terms.total)) {
          throw TrainingFailed("vqvae loss diverged at epoch " + std::to_string(epoch + 1) +
                                   " (rec " + std::to_string(terms.reconstruction) + ", quant " +
                                   std::to_string(terms.quantization) + ", commit " +
                                   std::to_string(terms.commitment) + ", kl " +
                                   std::to_string(terms.kl) + ")",
                               terms.reconstruction);
        }
        sum += terms;
        for (auto k : t) ++usage[k];
        slices.push_back(std::move(z));
      }
      std::vector<nn::Tensor<float>> flat;
      for (auto& t : g.encoder) flat.push_back(std::move(t));
      for (auto& t : g.decoder) flat.push_back(std::move(t));
      flat.push_back(std::move(g.codebook));
      nn::optimizer_step<float>(params, flat, opt, 1.0 / double(end - start));
    }
    const double expected = double(order.size() * kTokens) / double(q);
    std::size_t resets = 0, active = 0;
    for (std::size_t k = 0; k < q; ++k) {
      active += usage[k] > 0;
      if (double(usage[k]) < hyper.reset_fraction * expected) {
        random_slice(model.codebook().data() + k * l);
        opt.reset_row(cb_slot, k);
        ++resets;
      }
    }
    const double nd = double(order.size());
    local.epoch_terms.push_back({sum.total / nd, sum.reconstruction / nd, sum.quantization / nd,
                                 sum.commitment / nd, sum.kl / nd});
    local.resets.push_back(resets);
    local.active_codewords.push_back(active);
    local.epochs_run = epoch + 1;
  }
  if (info) *info = local;
  return model;
}

inline nlohmann::json to_json(const VQLossTerms& t) {
  return {{"total", t.total},
          {"reconstruction", t.reconstruction},
          {"quantization", t.quantization},
          {"commitment", t.commitment},
          {"kl", t.kl}};
}

inline io::Checkpoint to_checkpoint(const VQVAEModel& model, const VQTrainingInfo& info = {}) {
  io::Checkpoint ck;
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& t : info.epoch_terms) curve.push_back(to_json(t));
  ck.metadata = {{"model", "vqvae"},
                 {"beta", model.beta()},
                 {"codebook_size", model.codebook_size()},
                 {"codeword_length", kCodewordLength},
                 {"tokens", kTokens},
                 {"epochs", info.epochs_run},
                 {"loss_curve", curve},
                 {"resets", info.resets}};
  ck.graphs.emplace_back("encoder", model.encoder());
  ck.graphs.emplace_back("decoder", model.decoder());
  ck.tensors.emplace_back("codebook", model.codebook());
  return ck;
}

inline VQVAEModel vqvae_from_checkpoint(const io::Checkpoint& ck) {
  if (ck.metadata.value("model", "") != "vqvae") throw FormatError("checkpoint is not a vqvae");
  return VQVAEModel(ck.graph("encoder"), ck.graph("decoder"), ck.tensor("codebook"),
                    ck.metadata.at("beta").get<double>());
}

}  // namespace rfadvq
