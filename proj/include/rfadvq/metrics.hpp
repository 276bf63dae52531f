#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rfadvq/vqvae.hpp"

namespace rfadvq {

namespace detail {

inline void require_same_length(std::size_t a, std::size_t b, const char* where) {
  if (a != b) {
    throw InvalidArgument(std::string(where) + ": code lengths differ (" + std::to_string(a) +
                          " vs " + std::to_string(b) + ")");
  }
}

inline std::vector<TokenIndex> index_set(std::span<const TokenIndex> a) {
  std::vector<TokenIndex> s(a.begin(), a.end());
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

}  // namespace detail

// Number of positions whose indices differ.
inline std::size_t hamming(std::span<const TokenIndex> a, std::span<const TokenIndex> b) {
  detail::require_same_length(a.size(), b.size(), "hamming");
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

// |set(a) - set(b)|: indices used by a that b never uses.
inline std::size_t set_difference_raw(std::span<const TokenIndex> a,
                                      std::span<const TokenIndex> b) {
  detail::require_same_length(a.size(), b.size(), "set_difference_raw");
  const auto sa = detail::index_set(a), sb = detail::index_set(b);
  std::size_t n = 0;
  for (auto v : sa) n += !std::binary_search(sb.begin(), sb.end(), v);
  return n;
}

// |set(a) symmetric-difference set(b)|.
inline std::size_t set_distance_raw(std::span<const TokenIndex> a, std::span<const TokenIndex> b) {
  return set_difference_raw(a, b) + set_difference_raw(b, a);
}

// Latent distances between x and x_a, each normalized by the distance between
// two independent quantizations of x.
struct LatentDistanceReport {
  double raw_hamming = 0.0;
  double raw_set = 0.0;
  double raw_set_one_sided = 0.0;
  double baseline_hamming = 0.0;
  double baseline_set = 0.0;
  double baseline_set_one_sided = 0.0;
  std::optional<double> normalized_hamming;
  std::optional<double> normalized_set;
  std::optional<double> normalized_set_one_sided;
  // One-sigma sampling error of the normalized values (delta method).
  double sigma_hamming = 0.0;
  double sigma_set = 0.0;
  std::size_t trials = 0;
  std::size_t datapoints = 0;

  bool degenerate() const { return !normalized_hamming || !normalized_set; }
};

inline nlohmann::json to_json(const LatentDistanceReport& r) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"raw_hamming", r.raw_hamming},
          {"raw_set", r.raw_set},
          {"raw_set_one_sided", r.raw_set_one_sided},
          {"baseline_hamming", r.baseline_hamming},
          {"baseline_set", r.baseline_set},
          {"baseline_set_one_sided", r.baseline_set_one_sided},
          {"normalized_hamming", opt(r.normalized_hamming)},
          {"normalized_set", opt(r.normalized_set)},
          {"normalized_set_one_sided", opt(r.normalized_set_one_sided)},
          {"sigma_hamming", r.sigma_hamming},
          {"sigma_set", r.sigma_set},
          {"trials", r.trials},
          {"datapoints", r.datapoints}};
}

// Running sums of per-trial distances, pooled over any number of datapoints.
class LatentDistanceAccumulator {
 public:
  explicit LatentDistanceAccumulator(std::size_t trials) : trials_(trials) {
    if (trials < 2) throw InvalidArgument("latent distances need trials >= 2");
  }

  // px, pa: posteriors of x and x_a. Each trial draws one code from each for
  // the numerator and two fresh codes of x for the baseline.
  void add(const PosteriorGrid& px, const PosteriorGrid& pa, Rng& rng) {
    for (std::size_t t = 0; t < trials_; ++t) {
      const Tokens a = draw_tokens(px, QuantMode::Stochastic, rng);
      const Tokens b = draw_tokens(pa, QuantMode::Stochastic, rng);
      num_h_.add(double(hamming(a, b)));
      num_s_.add(double(set_distance_raw(a, b)));
      num_o_.add(double(set_difference_raw(a, b)));
    }
    for (std::size_t t = 0; t < trials_; ++t) {
      const Tokens a = draw_tokens(px, QuantMode::Stochastic, rng);
      const Tokens b = draw_tokens(px, QuantMode::Stochastic, rng);
      den_h_.add(double(hamming(a, b)));
      den_s_.add(double(set_distance_raw(a, b)));
      den_o_.add(double(set_difference_raw(a, b)));
    }
    ++datapoints_;
  }

  template <typename T>
  void add(const BasicVQVAE<T>& vq, const nn::Tensor<T>& x, const nn::Tensor<T>& x_a, Rng& rng) {
    add(vq.posterior_grid(vq.encode(x)), vq.posterior_grid(vq.encode(x_a)), rng);
  }

  // Pools another accumulator's samples; the trial counts must agree.
  void merge(const LatentDistanceAccumulator& o) {
    if (o.trials_ != trials_) throw InvalidArgument("merging accumulators with different trials");
    for (auto [a, b] : {std::pair{&num_h_, &o.num_h_}, {&num_s_, &o.num_s_}, {&num_o_, &o.num_o_},
                        {&den_h_, &o.den_h_}, {&den_s_, &o.den_s_}, {&den_o_, &o.den_o_}}) {
      a->n += b->n;
      a->sum += b->sum;
      a->sumsq += b->sumsq;
    }
    datapoints_ += o.datapoints_;
  }

  std::size_t trials() const noexcept { return trials_; }

  LatentDistanceReport report() const {
    LatentDistanceReport r;
    r.trials = trials_;
    r.datapoints = datapoints_;
    r.raw_hamming = num_h_.mean();
    r.raw_set = num_s_.mean();
    r.raw_set_one_sided = num_o_.mean();
    r.baseline_hamming = den_h_.mean();
    r.baseline_set = den_s_.mean();
    r.baseline_set_one_sided = den_o_.mean();
    auto ratio = [](const Moments& n, const Moments& d, double* sigma) -> std::optional<double> {
      if (!(d.mean() > 0.0)) return std::nullopt;
      const double q = n.mean() / d.mean();
      if (sigma) {
        const double rn = n.mean() > 0.0 ? n.stderr_() / n.mean() : 0.0;
        const double rd = d.stderr_() / d.mean();
        *sigma = q * std::sqrt(rn * rn + rd * rd);
      }
      return q;
    };
    r.normalized_hamming = ratio(num_h_, den_h_, &r.sigma_hamming);
    r.normalized_set = ratio(num_s_, den_s_, &r.sigma_set);
    r.normalized_set_one_sided = ratio(num_o_, den_o_, nullptr);
    return r;
  }

 private:
  struct Moments {
    double n = 0.0, sum = 0.0, sumsq = 0.0;
    void add(double v) {
      n += 1.0;
      sum += v;
      sumsq += v * v;
    }
    double mean() const { return n > 0.0 ? sum / n : 0.0; }
    double stderr_() const {
      if (n < 2.0) return 0.0;
      const double var = std::max(0.0, (sumsq - sum * sum / n) / (n - 1.0));
      return std::sqrt(var / n);
    }
  };

  std::size_t trials_;
  std::size_t datapoints_ = 0;
  Moments num_h_, num_s_, num_o_, den_h_, den_s_, den_o_;
};

template <typename T>
LatentDistanceReport normalized_latent_distances(const BasicVQVAE<T>& vq, const nn::Tensor<T>& x,
                                                 const nn::Tensor<T>& x_a, std::size_t trials,
                                                 Rng& rng) {
  LatentDistanceAccumulator acc(trials);
  acc.add(vq, x, x_a, rng);
  return acc.report();
}

inline LatentDistanceReport normalized_latent_distances(const VQVAEModel& vq,
                                                        const IQDatapoint& x,
                                                        const IQDatapoint& x_a,
                                                        std::size_t trials, Rng& rng) {
  return normalized_latent_distances(vq, x.to_tensor(), x_a.to_tensor(), trials, rng);
}

struct CodewordHistogram {
  std::vector<std::uint64_t> counts;
  std::string population;  // e.g. "8pam/fgsm1/0.3"
  std::size_t datapoints = 0;

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
  std::vector<std::size_t> support() const {
    std::vector<std::size_t> s;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      if (counts[k]) s.push_back(k);
    }
    return s;
  }
  std::size_t support_size() const {
    return std::size_t(std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }));
  }
  void add(const Tokens& t) {
    for (auto k : t) ++counts.at(k);
    ++datapoints;
  }
};

// Accumulates sampled token indices of every datapoint.
inline CodewordHistogram codeword_histogram(const VQVAEModel& vq,
                                            std::span<const IQDatapoint> data, Rng& rng,
                                            std::string population = {},
                                            QuantMode mode = QuantMode::Stochastic) {
  if (data.empty()) throw InvalidArgument("codeword_histogram: empty input");
  CodewordHistogram h{std::vector<std::uint64_t>(vq.codebook_size(), 0), std::move(population)};
  for (const auto& x : data) {
    h.add(vq.sample_tokens(vq.posterior_grid(vq.encode(x)), mode, rng));
  }
  return h;
}

// Attack signal-to-noise ratio 20 log10(std / eps) in dB.
inline double snr_a(double data_std, double eps) {
  if (!(data_std > 0.0) || !(eps > 0.0)) {
    throw InvalidArgument("snr_a: data_std and eps must be positive");
  }
  return 20.0 * std::log10(data_std / eps);
}

}  // namespace rfadvq
