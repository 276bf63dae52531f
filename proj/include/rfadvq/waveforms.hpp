#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rfadvq/error.hpp"
#include "rfadvq/nn/tensor.hpp"
#include "rfadvq/random.hpp"

namespace rfadvq {

using cdouble = std::complex<double>;
using ComplexSequence = std::vector<cdouble>;

enum class ModulationScheme : std::uint8_t { ASK4 = 0, PAM8, PSK16, QAM32X, FSK2, OFDM256 };

inline constexpr std::size_t kNumClasses = 6;
inline constexpr std::size_t kWindow = 1024;

inline constexpr std::array<ModulationScheme, kNumClasses> kAllSchemes = {
    ModulationScheme::ASK4,   ModulationScheme::PAM8, ModulationScheme::PSK16,
    ModulationScheme::QAM32X, ModulationScheme::FSK2, ModulationScheme::OFDM256};

inline constexpr std::size_t class_label(ModulationScheme s) { return static_cast<std::size_t>(s); }

inline ModulationScheme scheme_from_label(std::size_t label) {
  if (label >= kNumClasses) throw InvalidArgument("class label out of range: " + std::to_string(label));
  return kAllSchemes[label];
}

inline constexpr std::string_view scheme_name(ModulationScheme s) {
  constexpr std::array<std::string_view, kNumClasses> names = {"4ask", "8pam",  "16psk",
                                                               "32qam_cross", "2fsk", "ofdm256"};
  return names[class_label(s)];
}

inline ModulationScheme parse_scheme(std::string_view name) {
  for (auto s : kAllSchemes) {
    if (scheme_name(s) == name) return s;
  }
  throw InvalidArgument("unknown modulation scheme '" + std::string(name) + "'");
}

struct Constellation {
  std::vector<cdouble> points;
  unsigned bits_per_symbol = 0;
};

namespace detail {

inline Constellation normalized(std::vector<cdouble> pts, unsigned bits) {
  double power = 0.0;
  for (const auto& p : pts) power += std::norm(p);
  power /= double(pts.size());
  const double scale = 1.0 / std::sqrt(power);
  for (auto& p : pts) p *= scale;
  return {std::move(pts), bits};
}

inline Constellation square_qam(int side, unsigned bits) {
  std::vector<cdouble> pts;
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) pts.emplace_back(2 * c - side + 1, 2 * r - side + 1);
  }
  return normalized(std::move(pts), bits);
}

}  // namespace detail

// Unit-average-power symbol alphabet. OFDM256 yields its per-subcarrier
// 256-QAM alphabet; FSK2 has no static constellation.
inline Constellation constellation(ModulationScheme scheme) {
  using S = ModulationScheme;
  switch (scheme) {
    case S::ASK4:
      return detail::normalized({-3.0, -1.0, 1.0, 3.0}, 2);
    case S::PAM8: {
      std::vector<cdouble> pts;
      for (int k = 0; k < 8; ++k) pts.emplace_back(k - 3.5, 0.0);
      return detail::normalized(std::move(pts), 3);
    }
    case S::PSK16: {
      std::vector<cdouble> pts;
      for (int k = 0; k < 16; ++k) pts.push_back(std::polar(1.0, 2.0 * std::numbers::pi * k / 16.0));
      return {std::move(pts), 4};
    }
    case S::QAM32X: {
      // 6x6 grid of odd levels with the four corners removed.
      std::vector<cdouble> pts;
      for (int r = -5; r <= 5; r += 2) {
        for (int c = -5; c <= 5; c += 2) {
          if (std::abs(r) == 5 && std::abs(c) == 5) continue;
          pts.emplace_back(c, r);
        }
      }
      return detail::normalized(std::move(pts), 5);
    }
    case S::OFDM256:
      return detail::square_qam(16, 8);
    case S::FSK2:
      break;
  }
  throw UnsupportedScheme(std::string(scheme_name(scheme)) + " has no static constellation");
}

struct ModulatorConfig {
  double rrc_rolloff = 0.35;
  std::size_t rrc_span_symbols = 8;
  double fsk_modulation_index = 0.5;
  std::size_t ofdm_subcarriers = 256;
  std::size_t ofdm_cyclic_prefix = 64;
};

// Samples per symbol each scheme is synthesized at. The OFDM IDFT output is
// taken at one sample per subcarrier.
inline constexpr std::size_t default_sps(ModulationScheme s) {
  switch (s) {
    case ModulationScheme::FSK2:
      return 8;
    case ModulationScheme::OFDM256:
      return 1;
    default:
      return 2;
  }
}

// Bits consumed per modulation symbol; for OFDM256 one symbol is a whole
// OFDM symbol (all subcarriers).
inline std::size_t bits_per_symbol(ModulationScheme s, const ModulatorConfig& cfg = {}) {
  switch (s) {
    case ModulationScheme::FSK2:
      return 1;
    case ModulationScheme::OFDM256:
      return cfg.ofdm_subcarriers * 8;
    default:
      return constellation(s).bits_per_symbol;
  }
}

// Root-raised-cosine taps spanning span*sps+1 samples, unit energy.
inline std::vector<double> rrc_taps(double rolloff, std::size_t span, std::size_t sps) {
  const std::size_t n = span * sps + 1;
  const double mid = double(n - 1) / 2.0;
  const double pi = std::numbers::pi;
  std::vector<double> h(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = (double(i) - mid) / double(sps);
    if (std::abs(t) < 1e-12) {
      h[i] = 1.0 - rolloff + 4.0 * rolloff / pi;
    } else if (rolloff > 0.0 && std::abs(std::abs(t) - 1.0 / (4.0 * rolloff)) < 1e-12) {
      h[i] = rolloff / std::sqrt(2.0) *
             ((1.0 + 2.0 / pi) * std::sin(pi / (4.0 * rolloff)) +
              (1.0 - 2.0 / pi) * std::cos(pi / (4.0 * rolloff)));
    } else {
      const double num = std::sin(pi * t * (1.0 - rolloff)) +
                         4.0 * rolloff * t * std::cos(pi * t * (1.0 + rolloff));
      const double den = pi * t * (1.0 - std::pow(4.0 * rolloff * t, 2.0));
      h[i] = num / den;
    }
  }
  double energy = 0.0;
  for (double v : h) energy += v * v;
  for (double& v : h) v /= std::sqrt(energy);
  return h;
}

// In-place radix-2 FFT; inverse=true computes the unscaled inverse transform.
inline void fft(std::span<cdouble> a, bool inverse) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw InvalidArgument("fft length must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * std::numbers::pi / double(len) * (inverse ? 1.0 : -1.0);
    const cdouble wl = std::polar(1.0, ang);
    for (std::size_t i = 0; i < n; i += len) {
      cdouble w = 1.0;
      for (std::size_t j = 0; j < len / 2; ++j) {
        const cdouble u = a[i + j], v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

namespace detail {

inline std::size_t bits_to_index(std::span<const std::uint8_t> bits) {
  std::size_t idx = 0;
  for (auto b : bits) idx = (idx << 1) | (b ? 1u : 0u);
  return idx;
}

inline ComplexSequence modulate_linear(const Constellation& c, std::span<const std::uint8_t> bits,
                                       std::size_t sps, const ModulatorConfig& cfg) {
  const std::size_t nsym = bits.size() / c.bits_per_symbol;
  const auto taps = rrc_taps(cfg.rrc_rolloff, cfg.rrc_span_symbols, sps);
  const std::size_t delay = (taps.size() - 1) / 2;
  const std::size_t len = nsym * sps;
  // Delay-compensated convolution of the zero-stuffed symbol train: output
  // sample k*sps is centered on symbol k.
  ComplexSequence out(len);
  for (std::size_t k = 0; k < nsym; ++k) {
    const cdouble sym = c.points[bits_to_index(bits.subspan(k * c.bits_per_symbol, c.bits_per_symbol))];
    const std::int64_t center = std::int64_t(k * sps);
    for (std::size_t j = 0; j < taps.size(); ++j) {
      const std::int64_t n = center + std::int64_t(j) - std::int64_t(delay);
      if (n >= 0 && n < std::int64_t(len)) out[std::size_t(n)] += sym * taps[j];
    }
  }
  return out;
}

inline ComplexSequence modulate_fsk(std::span<const std::uint8_t> bits, std::size_t sps,
                                    const ModulatorConfig& cfg) {
  // Continuous-phase FSK: each symbol advances the phase by +-pi*h.
  ComplexSequence out;
  out.reserve(bits.size() * sps);
  const double step = std::numbers::pi * cfg.fsk_modulation_index / double(sps);
  double phase = 0.0;
  for (auto b : bits) {
    const double d = b ? step : -step;
    for (std::size_t s = 0; s < sps; ++s) {
      out.push_back(std::polar(1.0, phase));
      phase = std::remainder(phase + d, 2.0 * std::numbers::pi);
    }
  }
  return out;
}

inline ComplexSequence modulate_ofdm(std::span<const std::uint8_t> bits, const ModulatorConfig& cfg) {
  const auto qam = constellation(ModulationScheme::OFDM256);
  const std::size_t nsc = cfg.ofdm_subcarriers, cp = cfg.ofdm_cyclic_prefix;
  const std::size_t per_symbol = nsc * qam.bits_per_symbol;
  ComplexSequence out;
  std::vector<cdouble> grid(nsc);
  const double scale = 1.0 / std::sqrt(double(nsc));
  for (std::size_t s = 0; s * per_symbol < bits.size(); ++s) {
    for (std::size_t k = 0; k < nsc; ++k) {
      grid[k] = qam.points[bits_to_index(
          bits.subspan(s * per_symbol + k * qam.bits_per_symbol, qam.bits_per_symbol))];
    }
    fft(grid, true);
    for (auto& v : grid) v *= scale;
    out.insert(out.end(), grid.end() - std::int64_t(cp), grid.end());
    out.insert(out.end(), grid.begin(), grid.end());
  }
  return out;
}

}  // namespace detail

// Maps a bit stream to complex baseband samples.
//  - linear schemes: constellation mapping, zero-stuff upsampling and RRC
//    pulse shaping; output has |bits|/m * sps samples,
//  - FSK2: continuous-phase binary FSK (constant envelope),
//  - OFDM256: 256-QAM on every subcarrier, IDFT, cyclic prefix.
inline ComplexSequence modulate(ModulationScheme scheme, std::span<const std::uint8_t> bits,
                                std::size_t sps, const ModulatorConfig& cfg = {}) {
  if (sps != default_sps(scheme)) {
    throw InvalidArgument(std::string(scheme_name(scheme)) + " requires " +
                          std::to_string(default_sps(scheme)) + " samples per symbol, got " +
                          std::to_string(sps));
  }
  const std::size_t m = bits_per_symbol(scheme, cfg);
  if (bits.empty() || bits.size() % m != 0) {
    throw InvalidArgument(std::string(scheme_name(scheme)) + ": bit count " +
                          std::to_string(bits.size()) + " is not a positive multiple of " +
                          std::to_string(m));
  }
  switch (scheme) {
    case ModulationScheme::FSK2:
      return detail::modulate_fsk(bits, sps, cfg);
    case ModulationScheme::OFDM256:
      return detail::modulate_ofdm(bits, cfg);
    default:
      return detail::modulate_linear(constellation(scheme), bits, sps, cfg);
  }
}

struct IQDatapoint {
  std::array<float, kWindow> i{};
  std::array<float, kWindow> q{};
  std::uint8_t label = 0;

  bool operator==(const IQDatapoint&) const = default;

  template <typename T = float>
  nn::Tensor<T> to_tensor() const {
    nn::Tensor<T> t({2, kWindow});
    for (std::size_t k = 0; k < kWindow; ++k) {
      t(0, k) = static_cast<T>(i[k]);
      t(1, k) = static_cast<T>(q[k]);
    }
    return t;
  }

  template <typename T>
  static IQDatapoint from_tensor(const nn::Tensor<T>& t, std::uint8_t label) {
    nn::expect_shape(t, {2, kWindow}, "IQDatapoint::from_tensor");
    IQDatapoint x;
    x.label = label;
    for (std::size_t k = 0; k < kWindow; ++k) {
      x.i[k] = static_cast<float>(t(0, k));
      x.q[k] = static_cast<float>(t(1, k));
    }
    return x;
  }
};

using Datapoints = std::vector<IQDatapoint>;

// Real parts to channel 1, imaginary parts to channel 2, jointly scaled so
// the peak complex magnitude is 1.
inline IQDatapoint complex_to_2d(std::span<const cdouble> window, std::size_t label) {
  if (window.size() != kWindow) {
    throw InvalidArgument("complex_to_2d: window must have " + std::to_string(kWindow) +
                          " samples, got " + std::to_string(window.size()));
  }
  if (label >= kNumClasses) throw InvalidArgument("complex_to_2d: label out of range");
  double peak = 0.0;
  for (const auto& s : window) peak = std::max(peak, std::abs(s));
  if (!(peak > 0.0) || !std::isfinite(peak)) {
    throw DegenerateInput("complex_to_2d: window has zero peak magnitude");
  }
  IQDatapoint x;
  x.label = static_cast<std::uint8_t>(label);
  for (std::size_t k = 0; k < kWindow; ++k) {
    x.i[k] = static_cast<float>(window[k].real() / peak);
    x.q[k] = static_cast<float>(window[k].imag() / peak);
  }
  return x;
}

struct DatasetSpec {
  std::size_t per_class_count = 600;
  std::uint64_t seed = 1;
  double train_fraction = 5.0 / 6.0;
  double test_fraction = 1.0 / 6.0;
  std::vector<ModulationScheme> classes{kAllSchemes.begin(), kAllSchemes.end()};
  ModulatorConfig modulator{};

  void validate() const {
    if (per_class_count < 1) throw InvalidArgument("per_class_count must be >= 1");
    if (train_fraction < 0.0 || test_fraction < 0.0 ||
        std::abs(train_fraction + test_fraction - 1.0) > 1e-9) {
      throw InvalidArgument("train/test fractions must be nonnegative and sum to 1");
    }
    if (classes.empty()) throw InvalidArgument("dataset needs at least one class");
  }

  std::size_t train_per_class() const {
    return static_cast<std::size_t>(std::llround(double(per_class_count) * train_fraction));
  }
};

struct Dataset {
  Datapoints train;
  Datapoints test;
  double std_dev = 0.0;  // population std of all train I/Q values

  std::size_t size() const noexcept { return train.size() + test.size(); }
};

// Population standard deviation over every I and Q value.
inline double dataset_std(const Datapoints& xs) {
  if (xs.empty()) return 0.0;
  double sum = 0.0, sq = 0.0;
  for (const auto& x : xs) {
    for (std::size_t k = 0; k < kWindow; ++k) {
      sum += x.i[k] + double(x.q[k]);
      sq += double(x.i[k]) * x.i[k] + double(x.q[k]) * x.q[k];
    }
  }
  const double n = 2.0 * kWindow * double(xs.size());
  const double mean = sum / n;
  return std::sqrt(std::max(0.0, sq / n - mean * mean));
}

// One datapoint of `scheme` from its own RNG stream: fresh random bits, the
// modulated sequence, and a window at a uniformly random offset clear of the
// pulse-shaping transients.
inline IQDatapoint synthesize_datapoint(ModulationScheme scheme, Rng& rng,
                                        const ModulatorConfig& cfg = {}) {
  const std::size_t sps = default_sps(scheme);
  const std::size_t m = bits_per_symbol(scheme, cfg);
  std::size_t nsym = 0, guard = 0;
  if (scheme == ModulationScheme::OFDM256) {
    const std::size_t sym_len = cfg.ofdm_subcarriers + cfg.ofdm_cyclic_prefix;
    nsym = (kWindow + sym_len - 1) / sym_len + 1;
  } else if (scheme == ModulationScheme::FSK2) {
    nsym = kWindow / sps + 16;
  } else {
    guard = cfg.rrc_span_symbols * sps;
    nsym = kWindow / sps + 2 * cfg.rrc_span_symbols + 64;
  }
  std::vector<std::uint8_t> bits(nsym * m);
  for (auto& b : bits) b = static_cast<std::uint8_t>(rng() >> 63);
  const auto u = modulate(scheme, bits, sps, cfg);
  const std::size_t span = u.size() - 2 * guard - kWindow;
  const std::size_t offset = guard + uniform_index(rng, span + 1);
  return complex_to_2d(std::span<const cdouble>(u).subspan(offset, kWindow), class_label(scheme));
}

// Deterministic in (spec, seed): each datapoint draws from an RNG derived from
// (seed, class, index). Within each split, datapoints are grouped by class.
inline Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  const std::size_t ntrain = spec.train_per_class();
  for (auto scheme : spec.classes) {
    for (std::size_t k = 0; k < spec.per_class_count; ++k) {
      Rng rng(derive_seed(spec.seed, class_label(scheme), k));
      auto x = synthesize_datapoint(scheme, rng, spec.modulator);
      (k < ntrain ? ds.train : ds.test).push_back(x);
    }
  }
  ds.std_dev = dataset_std(ds.train.empty() ? ds.test : ds.train);
  return ds;
}

}  // namespace rfadvq
