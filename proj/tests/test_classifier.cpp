#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "rfadvq/classifier.hpp"
#include "rfadvq/io/checkpoint.hpp"
#include "rfadvq/nn/gradcheck.hpp"

using namespace rfadvq;

namespace {

Dataset tiny_dataset(std::size_t per_class, std::uint64_t seed = 3) {
  DatasetSpec spec;
  spec.per_class_count = per_class;
  spec.seed = seed;
  return generate_dataset(spec);
}

}  // namespace

TEST(Classifier, MapsAWindowToSixLogits) {
  const auto g = ClassifierModel::architecture();
  EXPECT_EQ(g.input_shape(), (nn::Shape{2, kWindow}));
  EXPECT_EQ(g.output_shape(), (nn::Shape{kNumClasses}));
  const auto ds = tiny_dataset(1);
  const auto model = ClassifierModel::initialized(5);
  for (const auto& x : ds.train) {
    const auto p = model.predict(x);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-6);
    for (double v : p) EXPECT_GE(v, 0.0);
    EXPECT_EQ(model.predict_label(x), std::size_t(std::max_element(p.begin(), p.end()) - p.begin()));
  }
}

TEST(Classifier, RejectsForeignGraph) {
  nn::Graph<float> g({2, kWindow});
  g.add<nn::GlobalAvgPool<float>>().add<nn::Dense<float>>(2, 5);
  EXPECT_THROW(ClassifierModel{std::move(g)}, ShapeError);
  const auto model = ClassifierModel::initialized(1);
  EXPECT_THROW(model.loss_and_input_grad(nn::Tensor<float>({2, kWindow}), kNumClasses),
               InvalidArgument);
}

TEST(Classifier, InitializationIsDeterministicInSeed) {
  const auto a = ClassifierModel::initialized(11), b = ClassifierModel::initialized(11);
  const auto c = ClassifierModel::initialized(12);
  const auto pa = a.graph().parameters(), pb = b.graph().parameters(), pc = c.graph().parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->values().size(), pb[i]->values().size());
    EXPECT_TRUE(std::equal(pa[i]->values().begin(), pa[i]->values().end(), pb[i]->values().begin()));
    differs = differs || !std::equal(pa[i]->values().begin(), pa[i]->values().end(), pc[i]->values().begin());
  }
  EXPECT_TRUE(differs);
}

// Full network, cross-entropy loss, every parameter block and both input
// channels, in double.
TEST(Classifier, CrossEntropyGradientMatchesFiniteDifferences) {
  const auto ds = tiny_dataset(1);
  const auto model = ClassifierModel::initialized(21).cast<double>();
  for (std::size_t y : {std::size_t{2}, std::size_t{5}}) {
    const auto& x = ds.train[y];
    nn::GradCheckOptions opt;
    opt.samples_per_block = 32;
    opt.seed = y;
    const auto report = nn::grad_check(
        model.graph(), x.to_tensor<double>(),
        [&](const nn::Tensor<double>& z) { return nn::softmax_cross_entropy(z, x.label); }, opt);
    for (const auto& b : report.blocks) {
      EXPECT_TRUE(b.pass) << b.name << " relative error " << b.max_relative_error;
      EXPECT_GT(b.checked, 0u);
    }
  }
}

TEST(Classifier, InputGradientMatchesGraphBackward) {
  const auto ds = tiny_dataset(1);
  const auto model = ClassifierModel::initialized(4).cast<double>();
  const auto x = ds.train[3].to_tensor<double>();
  const auto lg = model.loss_and_input_grad(x, 1);
  // Directional derivative along a random direction.
  Rng rng(9);
  nn::Tensor<double> v(x.shape());
  for (auto& e : v.values()) e = standard_normal(rng);
  const double h = 1e-5;
  nn::Tensor<double> up = x, down = x;
  for (std::size_t k = 0; k < x.size(); ++k) {
    up[k] += h * v[k];
    down[k] -= h * v[k];
  }
  const double numeric = (model.loss_and_input_grad(up, 1).loss - model.loss_and_input_grad(down, 1).loss) / (2 * h);
  double analytic = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) analytic += lg.input_grad[k] * v[k];
  EXPECT_LT(nn::relative_error(analytic, numeric), 1e-5);
  EXPECT_NEAR(lg.loss, -std::log(model.predict(x)[1]), 1e-9);
}

TEST(ConfusionMatrix, CountsAndAccuracies) {
  ConfusionMatrix m;
  m.add(0, 0);
  m.add(0, 1);
  m.add(1, 1);
  m.add(5, 5);
  m.add(5, 2);
  EXPECT_EQ(m.total(), 5u);
  EXPECT_EQ(m.trace(), 3u);
  EXPECT_EQ(m.row_sum(5), 2u);
  EXPECT_DOUBLE_EQ(m.accuracy(), 0.6);
  EXPECT_DOUBLE_EQ(m.class_accuracy(0), 0.5);
  EXPECT_DOUBLE_EQ(m.class_accuracy(1), 1.0);
  EXPECT_DOUBLE_EQ(m.class_accuracy(3), 0.0);
  ConfusionMatrix twice = m;
  twice += m;
  EXPECT_EQ(twice.total(), 10u);
  EXPECT_DOUBLE_EQ(twice.accuracy(), 0.6);
  EXPECT_FALSE(twice == m);
  EXPECT_THROW(m.add(6, 0), std::out_of_range);
}

TEST(Classifier, AugmentationIsASignOrReversalSymmetry) {
  const auto ds = tiny_dataset(1);
  const auto& x = ds.train[2];
  Rng rng(1);
  for (int trial = 0; trial < 16; ++trial) {
    const auto t = detail::augmented(x, rng);
    const bool rev = std::abs(t(0, 0)) != std::abs(x.i[0]) || std::abs(t(1, 0)) != std::abs(x.q[0]);
    const float si = t(0, rev ? kWindow - 1 : 0) == x.i[0] ? 1.0f : -1.0f;
    const float sq = t(1, rev ? kWindow - 1 : 0) == x.q[0] ? 1.0f : -1.0f;
    for (std::size_t k = 0; k < kWindow; ++k) {
      const std::size_t src = rev ? kWindow - 1 - k : k;
      ASSERT_EQ(t(0, k), si * x.i[src]);
      ASSERT_EQ(t(1, k), sq * x.q[src]);
    }
  }
}

TEST(Training, ShortRunReducesLossAndIsReproducible) {
  const auto ds = tiny_dataset(8);
  TrainHyper h;
  h.epochs = 4;
  h.batch_size = 8;
  h.seed = 2;
  h.target_accuracy = 0.0;
  ClassifierTrainingInfo info;
  const auto a = train_classifier(ds.train, h, &info);
  EXPECT_EQ(info.epoch_loss.size(), info.epochs_run);
  ASSERT_GE(info.epoch_loss.size(), 2u);
  EXPECT_LT(info.epoch_loss.back(), info.epoch_loss.front());
  const auto b = train_classifier(ds.train, h);
  for (const auto& x : ds.test) EXPECT_EQ(a.predict(x), b.predict(x));
}

TEST(Training, UnreachedTargetThrows) {
  const auto ds = tiny_dataset(4);
  TrainHyper h;
  h.epochs = 1;
  h.validation_fraction = 0.5;
  h.target_accuracy = 1.01;
  try {
    train_classifier(ds.train, h);
    FAIL() << "expected TrainingFailed";
  } catch (const TrainingFailed& e) {
    EXPECT_LE(e.final_accuracy(), 1.0);
  }
}

TEST(Training, RejectsBadHyperparameters) {
  const auto ds = tiny_dataset(1);
  TrainHyper h;
  h.epochs = 0;
  EXPECT_THROW(train_classifier(ds.train, h), InvalidArgument);
  h = {};
  h.validation_fraction = 1.0;
  EXPECT_THROW(train_classifier(ds.train, h), InvalidArgument);
  EXPECT_THROW(train_classifier({}, TrainHyper{}), InvalidArgument);
}

TEST(Checkpointing, ClassifierRoundTripKeepsPredictions) {
  const auto ds = tiny_dataset(1);
  const auto model = ClassifierModel::initialized(8);
  ClassifierTrainingInfo info;
  info.epochs_run = 3;
  info.final_validation_accuracy = 0.5;
  std::stringstream ss;
  io::write_checkpoint(ss, to_checkpoint(model, info));
  const auto ck = io::read_checkpoint(ss);
  EXPECT_EQ(ck.metadata.at("epochs"), 3);
  const auto back = classifier_from_checkpoint(ck);
  for (const auto& x : ds.train) EXPECT_EQ(back.predict(x), model.predict(x));

  auto wrong = to_checkpoint(model);
  wrong.metadata["labels"][0] = "pam8";
  EXPECT_THROW(classifier_from_checkpoint(wrong), FormatError);
  wrong.metadata["model"] = "vqvae";
  EXPECT_THROW(classifier_from_checkpoint(wrong), FormatError);
}
