#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numeric>
#include <set>

#include "rfadvq/waveforms.hpp"

using namespace rfadvq;

namespace {

std::vector<std::uint8_t> random_bits(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint8_t> bits(n);
  for (auto& b : bits) b = std::uint8_t(rng() & 1);
  return bits;
}

double mean_power(const std::vector<cdouble>& pts) {
  double p = 0.0;
  for (const auto& z : pts) p += std::norm(z);
  return p / double(pts.size());
}

}  // namespace

TEST(Constellation, Psk16IsUnitCircle) {
  const auto c = constellation(ModulationScheme::PSK16);
  ASSERT_EQ(c.points.size(), 16u);
  EXPECT_EQ(c.bits_per_symbol, 4u);
  for (std::size_t k = 0; k < 16; ++k) {
    EXPECT_NEAR(std::abs(c.points[k]), 1.0, 1e-12);
    EXPECT_NEAR(std::abs(c.points[k] - std::polar(1.0, 2.0 * M_PI * double(k) / 16.0)), 0.0, 1e-12);
  }
}

TEST(Constellation, Ask4MatchesPowerOracle) {
  // Oracle: levels +-1, +-3 have mean power (1 + 9 + 1 + 9) / 4 = 5.
  const std::vector<double> levels = {-3, -1, 1, 3};
  double power = 0.0;
  for (double v : levels) power += v * v;
  power /= 4.0;
  const auto c = constellation(ModulationScheme::ASK4);
  ASSERT_EQ(c.points.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(c.points[k].real(), levels[k] / std::sqrt(power), 1e-12);
    EXPECT_EQ(c.points[k].imag(), 0.0);
  }
  EXPECT_NEAR(mean_power(c.points), 1.0, 1e-9);
}

TEST(Constellation, Qam32CrossMatchesGridEnumeration) {
  // Oracle: odd 6x6 grid without corners.
  std::set<std::pair<int, int>> grid;
  for (int r : {-5, -3, -1, 1, 3, 5}) {
    for (int c : {-5, -3, -1, 1, 3, 5}) {
      if (std::abs(r) != 5 || std::abs(c) != 5) grid.insert({c, r});
    }
  }
  ASSERT_EQ(grid.size(), 32u);
  double power = 0.0;
  for (auto [c, r] : grid) power += c * c + r * r;
  const double scale = std::sqrt(power / 32.0);

  const auto con = constellation(ModulationScheme::QAM32X);
  ASSERT_EQ(con.points.size(), 32u);
  EXPECT_EQ(con.bits_per_symbol, 5u);
  cdouble mean = 0.0;
  std::set<std::pair<int, int>> seen;
  for (const auto& z : con.points) {
    mean += z;
    seen.insert({int(std::lround(z.real() * scale)), int(std::lround(z.imag() * scale))});
  }
  EXPECT_EQ(seen, grid);
  EXPECT_NEAR(std::abs(mean), 0.0, 1e-12);
  EXPECT_NEAR(mean_power(con.points), 1.0, 1e-9);
}

TEST(Constellation, AllAreUnitPowerAndZeroMean) {
  for (auto s : {ModulationScheme::ASK4, ModulationScheme::PAM8, ModulationScheme::PSK16,
                 ModulationScheme::QAM32X, ModulationScheme::OFDM256}) {
    const auto c = constellation(s);
    EXPECT_EQ(c.points.size(), std::size_t(1) << c.bits_per_symbol) << scheme_name(s);
    EXPECT_NEAR(mean_power(c.points), 1.0, 1e-9) << scheme_name(s);
    const cdouble mean = std::accumulate(c.points.begin(), c.points.end(), cdouble{});
    EXPECT_NEAR(std::abs(mean), 0.0, 1e-9) << scheme_name(s);
  }
}

TEST(Constellation, FskHasNone) {
  EXPECT_THROW(constellation(ModulationScheme::FSK2), UnsupportedScheme);
}

TEST(Schemes, LabelsAndNamesAreUnique) {
  std::set<std::string_view> names;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    EXPECT_EQ(class_label(kAllSchemes[k]), k);
    EXPECT_EQ(scheme_from_label(k), kAllSchemes[k]);
    EXPECT_EQ(parse_scheme(scheme_name(kAllSchemes[k])), kAllSchemes[k]);
    names.insert(scheme_name(kAllSchemes[k]));
  }
  EXPECT_EQ(names.size(), kNumClasses);
  EXPECT_THROW(scheme_from_label(6), InvalidArgument);
  EXPECT_THROW(parse_scheme("bpsk"), InvalidArgument);
}

TEST(Rrc, UnitEnergyAndSymmetric) {
  const auto h = rrc_taps(0.35, 8, 2);
  ASSERT_EQ(h.size(), 17u);
  double e = 0.0;
  for (double v : h) e += v * v;
  EXPECT_NEAR(e, 1.0, 1e-12);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(h[i], h[h.size() - 1 - i], 1e-15);
}

TEST(Rrc, MatchedPairIsNyquist) {
  // h * h sampled at symbol spacing is a scaled delta (zero ISI), up to the
  // truncation of a long filter.
  const std::size_t sps = 4;
  const auto h = rrc_taps(0.35, 32, sps);
  std::vector<double> g(2 * h.size() - 1, 0.0);
  for (std::size_t a = 0; a < h.size(); ++a) {
    for (std::size_t b = 0; b < h.size(); ++b) g[a + b] += h[a] * h[b];
  }
  const std::size_t mid = h.size() - 1;
  for (std::size_t k = sps; k + mid < g.size(); k += sps) EXPECT_NEAR(g[mid + k] / g[mid], 0.0, 2e-3);
}

TEST(Fft, InverseRoundTripAndDirectDft) {
  std::vector<cdouble> a(16);
  Rng rng(3);
  for (auto& v : a) v = {standard_normal(rng), standard_normal(rng)};
  auto b = a;
  fft(b, false);
  for (std::size_t k = 0; k < 16; ++k) {
    cdouble s = 0.0;
    for (std::size_t n = 0; n < 16; ++n) s += a[n] * std::polar(1.0, -2.0 * M_PI * double(k * n) / 16.0);
    EXPECT_NEAR(std::abs(s - b[k]), 0.0, 1e-12);
  }
  fft(b, true);
  for (std::size_t n = 0; n < 16; ++n) EXPECT_NEAR(std::abs(b[n] / 16.0 - a[n]), 0.0, 1e-12);
  std::vector<cdouble> bad(12);
  EXPECT_THROW(fft(bad, false), InvalidArgument);
}

TEST(Modulate, FskHasConstantEnvelope) {
  const auto bits = random_bits(300, 5);
  const auto u = modulate(ModulationScheme::FSK2, bits, 8);
  ASSERT_EQ(u.size(), 300u * 8u);
  for (const auto& z : u) EXPECT_NEAR(std::abs(z), 1.0, 1e-9);
}

TEST(Modulate, FskPhaseIsContinuous) {
  const auto bits = random_bits(200, 6);
  const auto u = modulate(ModulationScheme::FSK2, bits, 8);
  const double step = M_PI * 0.5 / 8.0;
  for (std::size_t k = 1; k < u.size(); ++k) {
    EXPECT_NEAR(std::abs(std::arg(u[k] / u[k - 1])), step, 1e-9);
  }
}

TEST(Modulate, Psk16ConstantSymbolsArePeriodic) {
  const std::vector<std::uint8_t> bits(4 * 200, 0);
  const auto u = modulate(ModulationScheme::PSK16, bits, 2);
  ASSERT_EQ(u.size(), 400u);
  // Away from the filter transients at both ends.
  for (std::size_t k = 40; k + 42 < u.size(); ++k) EXPECT_NEAR(std::abs(u[k] - u[k + 2]), 0.0, 1e-12);
}

TEST(Modulate, LinearSamplesAtSymbolInstantsFollowTheFilter) {
  // Oracle: direct convolution of a symbol train with the RRC taps.
  const auto bits = random_bits(2 * 64, 7);
  const auto u = modulate(ModulationScheme::ASK4, bits, 2);
  const auto c = constellation(ModulationScheme::ASK4);
  const auto h = rrc_taps(0.35, 8, 2);
  std::vector<cdouble> train(128 + h.size(), 0.0);
  for (std::size_t k = 0; k < 64; ++k) train[2 * k] = c.points[std::size_t(bits[2 * k] * 2 + bits[2 * k + 1])];
  for (std::size_t n = 0; n < u.size(); ++n) {
    cdouble s = 0.0;
    for (std::size_t j = 0; j < h.size(); ++j) {
      const std::int64_t src = std::int64_t(n) + 8 - std::int64_t(j);
      if (src >= 0 && src < 128) s += train[std::size_t(src)] * h[j];
    }
    EXPECT_NEAR(std::abs(s - u[n]), 0.0, 1e-12);
  }
}

TEST(Modulate, OfdmLengthAndCyclicPrefix) {
  const auto bits = random_bits(256 * 8, 8);
  const auto u = modulate(ModulationScheme::OFDM256, bits, 1);
  ASSERT_EQ(u.size(), 256u + 64u);
  for (std::size_t k = 0; k < 64; ++k) EXPECT_NEAR(std::abs(u[k] - u[256 + k]), 0.0, 1e-12);
}

TEST(Modulate, OfdmSubcarriersCarryTheQamSymbols) {
  const auto bits = random_bits(256 * 8, 9);
  const auto u = modulate(ModulationScheme::OFDM256, bits, 1);
  std::vector<cdouble> body(u.begin() + 64, u.end());
  fft(body, false);
  const auto qam = constellation(ModulationScheme::OFDM256);
  for (std::size_t k = 0; k < 256; ++k) {
    std::size_t idx = 0;
    for (std::size_t b = 0; b < 8; ++b) idx = (idx << 1) | bits[k * 8 + b];
    EXPECT_NEAR(std::abs(body[k] / 16.0 - qam.points[idx]), 0.0, 1e-9);
  }
}

TEST(Modulate, RejectsBadArguments) {
  const std::vector<std::uint8_t> bits(7, 1);
  EXPECT_THROW(modulate(ModulationScheme::PSK16, bits, 2), InvalidArgument);
  EXPECT_THROW(modulate(ModulationScheme::PSK16, std::vector<std::uint8_t>(8), 4), InvalidArgument);
  EXPECT_THROW(modulate(ModulationScheme::FSK2, bits, 2), InvalidArgument);
  EXPECT_THROW(modulate(ModulationScheme::FSK2, std::vector<std::uint8_t>{}, 8), InvalidArgument);
}

TEST(ComplexTo2d, RealWindowHasZeroQ) {
  std::vector<cdouble> w(kWindow);
  for (std::size_t k = 0; k < kWindow; ++k) w[k] = std::sin(0.1 * double(k)) + 0.5;
  const auto x = complex_to_2d(w, 0);
  for (float v : x.q) EXPECT_EQ(v, 0.0f);
}

TEST(ComplexTo2d, PeakBecomesOne) {
  std::vector<cdouble> w(kWindow, cdouble(0.5, -0.25));
  w[123] = cdouble(0.0, 4.0);
  const auto x = complex_to_2d(w, 3);
  EXPECT_EQ(x.label, 3);
  EXPECT_NEAR(std::hypot(x.i[123], x.q[123]), 1.0, 1e-7);
  for (std::size_t k = 0; k < kWindow; ++k) {
    EXPECT_LE(std::hypot(double(x.i[k]), double(x.q[k])), 1.0 + 1e-7);
    EXPECT_LE(std::abs(x.i[k]), 1.0f);
    EXPECT_LE(std::abs(x.q[k]), 1.0f);
  }
}

TEST(ComplexTo2d, RoundTripRecombines) {
  Rng rng(10);
  std::vector<cdouble> w(kWindow);
  double peak = 0.0;
  for (auto& z : w) {
    z = {3.0 * standard_normal(rng), 3.0 * standard_normal(rng)};
    peak = std::max(peak, std::abs(z));
  }
  const auto x = complex_to_2d(w, 1);
  for (std::size_t k = 0; k < kWindow; ++k) {
    EXPECT_NEAR(std::abs(cdouble(x.i[k], x.q[k]) - w[k] / peak), 0.0, 1e-7);
  }
}

TEST(ComplexTo2d, RejectsBadWindows) {
  EXPECT_THROW(complex_to_2d(std::vector<cdouble>(1000, 1.0), 0), InvalidArgument);
  EXPECT_THROW(complex_to_2d(std::vector<cdouble>(kWindow, 0.0), 0), DegenerateInput);
  EXPECT_THROW(complex_to_2d(std::vector<cdouble>(kWindow, 1.0), 6), InvalidArgument);
}

TEST(Dataset, CountsPerClass) {
  DatasetSpec spec;
  spec.per_class_count = 10;
  spec.seed = 4;
  const auto ds = generate_dataset(spec);
  EXPECT_EQ(ds.size(), 60u);
  std::array<std::size_t, kNumClasses> train{}, test{};
  for (const auto& x : ds.train) ++train[x.label];
  for (const auto& x : ds.test) ++test[x.label];
  const std::size_t ntrain = spec.train_per_class();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    EXPECT_EQ(train[c], ntrain);
    EXPECT_EQ(test[c], 10 - ntrain);
  }
}

TEST(Dataset, DeterministicInSeed) {
  DatasetSpec spec;
  spec.per_class_count = 6;
  spec.seed = 11;
  const auto a = generate_dataset(spec), b = generate_dataset(spec);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.std_dev, b.std_dev);
  spec.seed = 12;
  const auto c = generate_dataset(spec);
  EXPECT_NE(a.train, c.train);
}

TEST(Dataset, DatapointsArePeakNormalized) {
  DatasetSpec spec;
  spec.per_class_count = 4;
  const auto ds = generate_dataset(spec);
  for (const auto& x : ds.train) {
    double peak = 0.0;
    for (std::size_t k = 0; k < kWindow; ++k) peak = std::max(peak, std::hypot(double(x.i[k]), double(x.q[k])));
    EXPECT_NEAR(peak, 1.0, 1e-6) << int(x.label);
  }
}

TEST(Dataset, StdMatchesDirectComputation) {
  DatasetSpec spec;
  spec.per_class_count = 3;
  const auto ds = generate_dataset(spec);
  std::vector<double> v;
  for (const auto& x : ds.train) {
    v.insert(v.end(), x.i.begin(), x.i.end());
    v.insert(v.end(), x.q.begin(), x.q.end());
  }
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double var = 0.0;
  for (double a : v) var += (a - mean) * (a - mean);
  EXPECT_NEAR(ds.std_dev, std::sqrt(var / double(v.size())), 1e-9);
  EXPECT_GT(ds.std_dev, 0.0);
}

TEST(Dataset, FskDatapointsKeepConstantEnvelope) {
  Rng rng(13);
  const auto x = synthesize_datapoint(ModulationScheme::FSK2, rng);
  for (std::size_t k = 0; k < kWindow; ++k) EXPECT_NEAR(std::hypot(x.i[k], x.q[k]), 1.0, 1e-6);
}

TEST(Dataset, SpecValidation) {
  DatasetSpec spec;
  spec.per_class_count = 0;
  EXPECT_THROW(spec.validate(), InvalidArgument);
  spec.per_class_count = 5;
  spec.train_fraction = 0.7;
  EXPECT_THROW(spec.validate(), InvalidArgument);
  spec.test_fraction = 0.3;
  EXPECT_NO_THROW(spec.validate());
}
