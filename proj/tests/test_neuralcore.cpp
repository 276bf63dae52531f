#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "rfadvq/io/checkpoint.hpp"
#include "rfadvq/nn/gradcheck.hpp"
#include "rfadvq/nn/layers.hpp"
#include "rfadvq/nn/optimizer.hpp"

using namespace rfadvq;
using namespace rfadvq::nn;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = scale * standard_normal(rng);
  return t;
}

void randomize(Graph<double>& g, Rng& rng, double scale = 0.5) {
  for (auto* p : g.parameters()) {
    for (auto& v : p->values()) v = scale * standard_normal(rng);
  }
}

// Fixed random projection of the output, so every output element matters.
ScalarLoss projection_loss(const Shape& out_shape, std::uint64_t seed) {
  Rng rng(seed);
  auto w = std::make_shared<Tensor<double>>(random_tensor(out_shape, rng));
  return [w](const Tensor<double>& y) {
    LossResult<double> r{0.0, Tensor<double>(y.shape())};
    for (std::size_t i = 0; i < y.size(); ++i) {
      r.value += (*w)[i] * y[i];
      r.grad[i] = (*w)[i];
    }
    return r;
  };
}

void expect_grad_check(Graph<double> g, Tensor<double> x, std::uint64_t seed = 1) {
  const auto loss = projection_loss(g.output_shape(), seed);
  GradCheckOptions opt;
  opt.samples_per_block = 64;
  const auto report = grad_check(std::move(g), std::move(x), loss, opt);
  for (const auto& b : report.blocks) {
    EXPECT_TRUE(b.pass) << b.name << " max relative error " << b.max_relative_error;
  }
}

// Oracle for a strided, padded 1-D convolution.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                           std::size_t k, std::size_t s, std::size_t p) {
  const std::size_t cin = x.dim(0), len = x.dim(1), cout = w.dim(0);
  const std::size_t olen = (len + 2 * p - k) / s + 1;
  Tensor<double> y({cout, olen});
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t t = 0; t < olen; ++t) {
      double acc = b[o];
      for (std::size_t i = 0; i < cin; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const std::int64_t src = std::int64_t(t * s + kk) - std::int64_t(p);
          if (src >= 0 && src < std::int64_t(len)) acc += w(o, i * k + kk) * x(i, std::size_t(src));
        }
      }
      y(o, t) = acc;
    }
  }
  return y;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Tensor, ShapeAndAccess) {
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  t(1, 2) = 4.0f;
  EXPECT_EQ(t[5], 4.0f);
  EXPECT_EQ(t.row(1)[2], 4.0f);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
  EXPECT_THROW(expect_shape(t, {3, 2}, "test"), ShapeError);
  const auto d = t.cast<double>();
  EXPECT_EQ(d(1, 2), 4.0);
  EXPECT_EQ(t.reshaped({6})[5], 4.0f);
}

class ConvShapes : public ::testing::TestWithParam<std::array<std::size_t, 5>> {};

TEST_P(ConvShapes, ForwardMatchesOracle) {
  const auto [cin, cout, k, s, p] = GetParam();
  Rng rng(cin * 100 + k * 10 + s);
  Conv1d<double> conv(cin, cout, k, s, p);
  conv.params()[0] = random_tensor({cout, cin * k}, rng);
  conv.params()[1] = random_tensor({cout}, rng);
  const auto x = random_tensor({cin, 37}, rng);
  Cache<double> cache;
  const auto y = conv.forward(x, cache);
  const auto ref = conv_oracle(x, conv.params()[0], conv.params()[1], k, s, p);
  ASSERT_EQ(y.shape(), ref.shape());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST_P(ConvShapes, TransposeIsTheAdjoint) {
  // <conv(x), y> = <x, conv_t(y)> with shared weights and zero bias.
  const auto [cin, cout, k, s, p] = GetParam();
  Rng rng(cout * 100 + k * 10 + p);
  const std::size_t len = 40;
  Conv1d<double> conv(cin, cout, k, s, p);
  conv.params()[0] = random_tensor({cout, cin * k}, rng);
  Cache<double> c1, c2;
  const auto x = random_tensor({cin, len}, rng);
  const auto cx = conv.forward(x, c1);
  const auto y = random_tensor(cx.shape(), rng);
  ConvTranspose1d<double> convt(cout, cin, k, s, p);
  convt.params()[0] = conv.params()[0];
  const auto ty = convt.forward(y, c2);
  ASSERT_EQ(ty.dim(1), (cx.dim(1) - 1) * s + k - 2 * p);
  // The transposed output can be shorter than len when (len + 2p - k) % s != 0.
  double rhs = 0.0;
  for (std::size_t i = 0; i < cin; ++i) {
    for (std::size_t t = 0; t < ty.dim(1); ++t) rhs += x(i, t) * ty(i, t);
  }
  EXPECT_NEAR(dot(cx, y), rhs, 1e-9 * (1.0 + std::abs(rhs)));
}

INSTANTIATE_TEST_SUITE_P(Layers, ConvShapes,
                         ::testing::Values(std::array<std::size_t, 5>{2, 3, 1, 1, 0},
                                           std::array<std::size_t, 5>{2, 4, 5, 1, 2},
                                           std::array<std::size_t, 5>{3, 2, 8, 4, 2},
                                           std::array<std::size_t, 5>{1, 2, 4, 2, 1},
                                           std::array<std::size_t, 5>{2, 8, 17, 1, 8}));

TEST(Dense, ForwardMatchesMatrixVector) {
  Rng rng(2);
  Dense<double> d(5, 3);
  d.params()[0] = random_tensor({3, 5}, rng);
  d.params()[1] = random_tensor({3}, rng);
  const auto x = random_tensor({5}, rng);
  Cache<double> c;
  const auto y = d.forward(x, c);
  for (std::size_t o = 0; o < 3; ++o) {
    double acc = d.params()[1][o];
    for (std::size_t i = 0; i < 5; ++i) acc += d.params()[0](o, i) * x[i];
    EXPECT_NEAR(y[o], acc, 1e-12);
  }
}

TEST(Activations, Values) {
  Tensor<double> x({1, 4}, std::vector<double>{-2.0, -0.5, 0.0, 1.5});
  Cache<double> c;
  const auto r = ReLU<double>().forward(x, c);
  const auto s = SiLU<double>().forward(x, c);
  const auto t = Tanh<double>().forward(x, c);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(r[i], std::max(0.0, x[i]));
    EXPECT_NEAR(s[i], x[i] / (1.0 + std::exp(-x[i])), 1e-15);
    EXPECT_NEAR(t[i], std::tanh(x[i]), 1e-15);
  }
}

TEST(Pooling, GlobalAverage) {
  Tensor<double> x({2, 3}, std::vector<double>{1, 2, 3, -1, 0, 4});
  Cache<double> c;
  const auto y = GlobalAvgPool<double>().forward(x, c);
  ASSERT_EQ(y.shape(), Shape{2});
  EXPECT_NEAR(y[0], 2.0, 1e-15);
  EXPECT_NEAR(y[1], 1.0, 1e-15);
}

TEST(Pooling, PolyphaseMaxPicksTheBestPhase) {
  // Channel 0: phase means (1+3+5)/3 = 3 and (2+4)/2 = 3 -> tie keeps phase 0.
  // Channel 1: phase means (0+0+0)/3 and (6+8)/2 = 7.
  Tensor<double> x({2, 5}, std::vector<double>{1, 2, 3, 4, 5, 0, 6, 0, 8, 0});
  PolyphaseMaxPool<double> pool(2);
  Cache<double> c;
  const auto y = pool.forward(x, c);
  ASSERT_EQ(y.shape(), Shape{2});
  EXPECT_NEAR(y[0], 3.0, 1e-15);
  EXPECT_NEAR(y[1], 7.0, 1e-15);
  std::vector<Tensor<double>> none;
  const auto g = pool.backward(Tensor<double>({2}, std::vector<double>{3.0, 1.0}), c, none);
  const std::vector<double> expect = {1, 0, 1, 0, 1, 0, 0.5, 0, 0.5, 0};
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(g[i], expect[i], 1e-15);
}

TEST(LayerNorm, NormalizesWholeWindow) {
  Rng rng(4);
  LayerNorm1d<double> ln(3, 0.0);
  ln.params()[0] = Tensor<double>({3}, std::vector<double>{1.0, 2.0, -1.0});
  ln.params()[1] = Tensor<double>({3}, std::vector<double>{0.0, 1.0, 0.5});
  const auto x = random_tensor({3, 20}, rng, 3.0);
  Cache<double> c;
  const auto y = ln.forward(x, c);
  double mean = 0.0, var = 0.0;
  for (auto v : x.values()) mean += v;
  mean /= 60.0;
  for (auto v : x.values()) var += (v - mean) * (v - mean);
  var /= 60.0;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t t = 0; t < 20; ++t) {
      const double h = (x(ch, t) - mean) / std::sqrt(var);
      EXPECT_NEAR(y(ch, t), ln.params()[0][ch] * h + ln.params()[1][ch], 1e-12);
    }
  }
}

TEST(GradCheck, Conv1d) {
  Rng rng(5);
  Graph<double> g({3, 24});
  g.add<Conv1d<double>>(3, 4, 5, 2, 2);
  randomize(g, rng);
  expect_grad_check(std::move(g), random_tensor({3, 24}, rng));
}

TEST(GradCheck, ConvTranspose1d) {
  Rng rng(6);
  Graph<double> g({4, 10});
  g.add<ConvTranspose1d<double>>(4, 2, 8, 4, 2);
  randomize(g, rng);
  expect_grad_check(std::move(g), random_tensor({4, 10}, rng));
}

TEST(GradCheck, Dense) {
  Rng rng(7);
  Graph<double> g({12});
  g.add<Dense<double>>(12, 5);
  randomize(g, rng);
  expect_grad_check(std::move(g), random_tensor({12}, rng));
}

TEST(GradCheck, Activations) {
  Rng rng(8);
  Graph<double> g({2, 16});
  g.add<SiLU<double>>().add<Tanh<double>>();
  expect_grad_check(std::move(g), random_tensor({2, 16}, rng));
  Graph<double> r({2, 16});
  r.add<ReLU<double>>();
  // Keep clear of the kink at 0.
  auto x = random_tensor({2, 16}, rng);
  for (auto& v : x.values()) v += v > 0 ? 0.1 : -0.1;
  expect_grad_check(std::move(r), x);
}

TEST(GradCheck, LayerNorm1d) {
  Rng rng(9);
  Graph<double> g({3, 12});
  g.add<LayerNorm1d<double>>(3);
  randomize(g, rng);
  expect_grad_check(std::move(g), random_tensor({3, 12}, rng, 2.0));
}

TEST(GradCheck, Pools) {
  Rng rng(10);
  Graph<double> g({3, 11});
  g.add<GlobalAvgPool<double>>();
  expect_grad_check(std::move(g), random_tensor({3, 11}, rng));
  Graph<double> p({3, 11});
  p.add<PolyphaseMaxPool<double>>(2);
  expect_grad_check(std::move(p), random_tensor({3, 11}, rng));
}

TEST(GradCheck, StackedGraph) {
  Rng rng(11);
  Graph<double> g({2, 32});
  g.add<Conv1d<double>>(2, 4, 5, 1, 2)
      .add<LayerNorm1d<double>>(4)
      .add<Conv1d<double>>(4, 6, 1)
      .add<SiLU<double>>()
      .add<Conv1d<double>>(6, 8, 4, 2, 1)
      .add<SiLU<double>>()
      .add<PolyphaseMaxPool<double>>(2)
      .add<Dense<double>>(8, 3);
  randomize(g, rng);
  expect_grad_check(std::move(g), random_tensor({2, 32}, rng));
}

TEST(Losses, SoftmaxCrossEntropyMatchesDirectFormula) {
  Tensor<double> z({4}, std::vector<double>{1.0, -2.0, 0.5, 3.0});
  const auto r = softmax_cross_entropy(z, 2);
  double denom = 0.0;
  for (auto v : z.values()) denom += std::exp(v);
  EXPECT_NEAR(r.value, -std::log(std::exp(0.5) / denom), 1e-12);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(r.grad[k], std::exp(z[k]) / denom - (k == 2 ? 1.0 : 0.0), 1e-12);
  }
  // Stable for large logits.
  Tensor<double> big({2}, std::vector<double>{1000.0, 0.0});
  EXPECT_NEAR(softmax_cross_entropy(big, 1).value, 1000.0, 1e-9);
  EXPECT_THROW(softmax_cross_entropy(z, 4), InvalidArgument);
}

TEST(Losses, MeanSquaredError) {
  Tensor<double> a({3}, std::vector<double>{1, 2, 3}), b({3}, std::vector<double>{0, 2, 5});
  const auto r = mean_squared_error(a, b);
  EXPECT_NEAR(r.value, (1.0 + 0.0 + 4.0) / 3.0, 1e-15);
  EXPECT_NEAR(r.grad[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.grad[2], -4.0 / 3.0, 1e-15);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // After one bias-corrected step, m/sqrt(v) = sign(g).
  Tensor<double> p({3}, std::vector<double>{1.0, -1.0, 0.0});
  Tensor<double> g({3}, std::vector<double>{0.5, -2.0, 0.0});
  std::vector<Tensor<double>*> params{&p};
  OptState<double> st(AdamConfig{0.1}, params);
  std::vector<Tensor<double>> grads{g};
  optimizer_step<double>(params, grads, st);
  EXPECT_NEAR(p[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p[1], -1.0 + 0.1 * 2.0 / (2.0 + 1e-8), 1e-12);
  EXPECT_EQ(p[2], 0.0);
}

TEST(Adam, ConvergesOnQuadratic) {
  Tensor<double> p({2}, std::vector<double>{3.0, -4.0});
  std::vector<Tensor<double>*> params{&p};
  OptState<double> st(AdamConfig{0.05}, params);
  for (int it = 0; it < 2000; ++it) {
    std::vector<Tensor<double>> grads{Tensor<double>({2}, std::vector<double>{2 * (p[0] - 1), 2 * (p[1] + 2)})};
    optimizer_step<double>(params, grads, st);
  }
  EXPECT_NEAR(p[0], 1.0, 1e-3);
  EXPECT_NEAR(p[1], -2.0, 1e-3);
}

TEST(Graph, ChainValidationAndClone) {
  Graph<float> g({2, 16});
  g.add<Conv1d<float>>(2, 4, 3, 1, 1);
  EXPECT_THROW(g.add<Conv1d<float>>(3, 4, 3), ShapeError);
  Rng rng(12);
  g.initialize(rng);
  Graph<float> copy = g;
  copy.parameters()[0]->fill(0.0f);
  EXPECT_NE(*g.parameters()[0], *copy.parameters()[0]);
  EXPECT_EQ(g.output_shape(), (Shape{4, 16}));
  EXPECT_EQ(g.parameter_count(), 4u * 2u * 3u + 4u);
}

TEST(Graph, InitializationIsFanInScaled) {
  Graph<float> g({64, 8});
  g.add<Conv1d<float>>(64, 128, 1);
  Rng rng(13);
  g.initialize(rng);
  const float bound = 1.0f / 8.0f;
  float peak = 0.0f;
  for (float v : g.parameters()[0]->values()) peak = std::max(peak, std::abs(v));
  EXPECT_LE(peak, bound);
  EXPECT_GT(peak, 0.9f * bound);
}

TEST(Checkpoint, ByteExactRoundTrip) {
  io::Checkpoint ck;
  ck.metadata = {{"model", "test"}, {"value", 1.25}};
  Graph<float> g({2, 16});
  g.add<Conv1d<float>>(2, 4, 3, 1, 1).add<LayerNorm1d<float>>(4).add<SiLU<float>>()
      .add<PolyphaseMaxPool<float>>(2).add<Dense<float>>(4, 3);
  Rng rng(14);
  g.initialize(rng);
  ck.graphs.emplace_back("net", g);
  ck.tensors.emplace_back("extra", Tensor<float>({2, 2}, std::vector<float>{1, 2, 3, 4}));
  std::stringstream a;
  io::write_checkpoint(a, ck);
  const auto back = io::read_checkpoint(a);
  std::stringstream b;
  io::write_checkpoint(b, back);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(back.graph("net").specs(), g.specs());
  EXPECT_EQ(back.tensor("extra")[3], 4.0f);
  EXPECT_EQ(back.metadata.at("value").get<double>(), 1.25);
  EXPECT_THROW(back.graph("missing"), FormatError);
}

TEST(Checkpoint, RejectsCorruption) {
  io::Checkpoint ck;
  Graph<float> g({3});
  g.add<Dense<float>>(3, 2);
  ck.graphs.emplace_back("net", g);
  std::stringstream s;
  io::write_checkpoint(s, ck);
  const std::string good = s.str();

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  std::stringstream m(bad_magic);
  EXPECT_THROW(io::read_checkpoint(m), FormatError);

  std::string bumped = good;
  bumped[4] = char(io::Checkpoint::kVersion + 1);
  std::stringstream v(bumped);
  EXPECT_THROW(io::read_checkpoint(v), UnsupportedVersion);

  std::stringstream t(good.substr(0, good.size() - 3));
  EXPECT_THROW(io::read_checkpoint(t), FormatError);
}
