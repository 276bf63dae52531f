#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "rfadvq/io/checkpoint.hpp"
#include "rfadvq/nn/graph.hpp"
#include "rfadvq/nn/losses.hpp"
#include "rfadvq/nn/optimizer.hpp"
#include "rfadvq/waveforms.hpp"

namespace rfadvq {

struct TrainHyper {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-2;
  bool cosine_schedule = true;  // anneal the learning rate to 0 over `epochs`
  std::uint64_t seed = 1;
  double validation_fraction = 0.1;
  double target_accuracy = 0.99;
  // Random class-preserving symmetries per draw: negation, conjugation,
  // time reversal.
  bool augment = true;

  void validate() const {
    if (epochs == 0 || batch_size == 0 || !(learning_rate > 0.0)) {
      throw InvalidArgument("training hyperparameters must be positive");
    }
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
      throw InvalidArgument("validation_fraction must be in [0, 1)");
    }
  }
};

using Probabilities = std::array<double, kNumClasses>;

template <typename T>
struct LossAndGrad {
  T loss;
  nn::Tensor<T> input_grad;  // [2, 1024]: row 0 is dJ/dI, row 1 is dJ/dQ
};

// Six-way modulation classifier over a [2, 1024] I/Q datapoint. Logit k is
// class label k (the ModulationScheme order).
template <typename T>
class BasicClassifier {
 public:
  static nn::Graph<T> architecture() {
    nn::Graph<T> g({2, kWindow});
    // Linear FIR front end, scale normalization over the whole window, a
    // per-sample nonlinear feature map, then the best of the two sample
    // phases (symbol instants land on one of them at 2 samples per symbol).
    constexpr std::size_t k = 17, f = 24, w = 32;
    g.template add<nn::Conv1d<T>>(2, f, k, 1, k / 2)
        .template add<nn::LayerNorm1d<T>>(f)
        .template add<nn::Conv1d<T>>(f, w, 1)
        .template add<nn::SiLU<T>>()
        .template add<nn::Conv1d<T>>(w, 32, 1)
        .template add<nn::SiLU<T>>()
        .template add<nn::PolyphaseMaxPool<T>>(2)
        .template add<nn::Dense<T>>(32, kNumClasses);
    return g;
  }

  BasicClassifier() : graph_(architecture()) {}

  explicit BasicClassifier(nn::Graph<T> graph) : graph_(std::move(graph)) {
    if (graph_.input_shape() != nn::Shape{2, kWindow} ||
        graph_.output_shape() != nn::Shape{kNumClasses}) {
      throw ShapeError("classifier graph must map [2,1024] to 6 logits");
    }
  }

  static BasicClassifier initialized(std::uint64_t seed) {
    BasicClassifier c;
    Rng rng(seed);
    c.graph_.initialize(rng);
    return c;
  }

  const nn::Graph<T>& graph() const noexcept { return graph_; }
  nn::Graph<T>& graph() noexcept { return graph_; }

  nn::Tensor<T> logits(const nn::Tensor<T>& x) const { return graph_.infer(x); }

  Probabilities predict(const nn::Tensor<T>& x) const {
    const auto z = logits(x);
    const auto p = nn::softmax<T>(z.values());
    Probabilities out{};
    for (std::size_t k = 0; k < kNumClasses; ++k) out[k] = double(p[k]);
    return out;
  }
  Probabilities predict(const IQDatapoint& x) const { return predict(x.template to_tensor<T>()); }

  std::size_t predict_label(const nn::Tensor<T>& x) const {
    const auto z = logits(x);
    return std::size_t(std::max_element(z.values().begin(), z.values().end()) - z.values().begin());
  }
  std::size_t predict_label(const IQDatapoint& x) const {
    return predict_label(x.template to_tensor<T>());
  }

  // Cross-entropy at label y and its gradient w.r.t. both input channels.
  LossAndGrad<T> loss_and_input_grad(const nn::Tensor<T>& x, std::size_t y) const {
    if (y >= kNumClasses) throw InvalidArgument("label out of range: " + std::to_string(y));
    nn::Tape<T> tape;
    const auto z = graph_.forward(x, tape);
    auto ce = nn::softmax_cross_entropy(z, y);
    auto scratch = graph_.zero_gradients();
    auto gx = graph_.backward(ce.grad, tape, scratch);
    return {ce.value, std::move(gx)};
  }

  template <typename U>
  BasicClassifier<U> cast() const {
    return BasicClassifier<U>(graph_.template cast<U>());
  }

 private:
  nn::Graph<T> graph_;
};

using ClassifierModel = BasicClassifier<float>;

struct ConfusionMatrix {
  // counts[true][predicted]
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};

  void add(std::size_t truth, std::size_t predicted) { ++counts.at(truth).at(predicted); }

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (const auto& r : counts) n = std::accumulate(r.begin(), r.end(), n);
    return n;
  }
  std::uint64_t trace() const {
    std::uint64_t n = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) n += counts[k][k];
    return n;
  }
  std::uint64_t row_sum(std::size_t truth) const {
    return std::accumulate(counts[truth].begin(), counts[truth].end(), std::uint64_t{0});
  }
  double accuracy() const {
    const auto n = total();
    return n ? double(trace()) / double(n) : 0.0;
  }
  double class_accuracy(std::size_t truth) const {
    const auto n = row_sum(truth);
    return n ? double(counts[truth][truth]) / double(n) : 0.0;
  }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (std::size_t a = 0; a < kNumClasses; ++a) {
      for (std::size_t b = 0; b < kNumClasses; ++b) counts[a][b] += o.counts[a][b];
    }
    return *this;
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline nlohmann::json to_json(const ConfusionMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : m.counts) rows.push_back(r);
  return rows;
}

struct Evaluation {
  double accuracy = 0.0;
  ConfusionMatrix confusion;
};

template <typename T>
Evaluation evaluate(const BasicClassifier<T>& model, std::span<const IQDatapoint> data) {
  if (data.empty()) throw InvalidArgument("evaluate: empty dataset");
  Evaluation ev;
  for (const auto& x : data) ev.confusion.add(x.label, model.predict_label(x));
  ev.accuracy = ev.confusion.accuracy();
  return ev;
}

struct ClassifierTrainingInfo {
  std::size_t epochs_run = 0;
  double final_train_accuracy = 0.0;
  double final_validation_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

// Minibatch Adam on softmax cross-entropy. A validation slice of the
// training data is held out; training stops early once both the running
// training accuracy and the validation accuracy reach 100%. Throws
// TrainingFailed if validation accuracy ends below hyper.target_accuracy.
namespace detail {

inline nn::Tensor<float> augmented(const IQDatapoint& x, Rng& rng) {
  const std::uint64_t r = rng();
  const float si = (r & 1) ? -1.0f : 1.0f;
  const float sq = (r & 2) ? -si : si;
  const bool reverse = (r & 4) != 0;
  nn::Tensor<float> t({2, kWindow});
  for (std::size_t k = 0; k < kWindow; ++k) {
    const std::size_t src = reverse ? kWindow - 1 - k : k;
    t(0, k) = si * x.i[src];
    t(1, k) = sq * x.q[src];
  }
  return t;
}

}  // namespace detail

inline ClassifierModel train_classifier(std::span<const IQDatapoint> data, const TrainHyper& hyper,
                                        ClassifierTrainingInfo* info = nullptr) {
  hyper.validate();
  std::array<std::size_t, kNumClasses> per_class{};
  for (const auto& x : data) ++per_class.at(x.label);
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    if (per_class[k] == 0) {
      throw InvalidArgument("train_classifier: class " + std::string(scheme_name(kAllSchemes[k])) +
                            " has no training datapoints");
    }
  }

  Rng rng(derive_seed(hyper.seed, 0xC1A5));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  const std::size_t nval = static_cast<std::size_t>(double(data.size()) * hyper.validation_fraction);
  std::vector<std::size_t> val(order.begin(), order.begin() + std::int64_t(nval));
  std::vector<std::size_t> train(order.begin() + std::int64_t(nval), order.end());

  auto model = ClassifierModel::initialized(derive_seed(hyper.seed, 0x1417));
  auto& graph = model.graph();
  auto params = graph.parameters();
  nn::OptState<float> opt(nn::AdamConfig{hyper.learning_rate}, params);

  ClassifierTrainingInfo local;
  nn::Tape<float> tape;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    if (hyper.cosine_schedule) {
      opt.config.learning_rate = hyper.learning_rate * 0.5 *
                                 (1.0 + std::cos(std::numbers::pi * double(epoch) / double(hyper.epochs)));
    }
    for (std::size_t i = train.size(); i > 1; --i) std::swap(train[i - 1], train[uniform_index(rng, i)]);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < train.size(); start += hyper.batch_size) {
      const std::size_t end = std::min(train.size(), start + hyper.batch_size);
      auto grads = graph.zero_gradients();
      for (std::size_t b = start; b < end; ++b) {
        const auto& x = data[train[b]];
        const auto z = graph.forward(hyper.augment ? detail::augmented(x, rng) : x.to_tensor(), tape);
        auto ce = nn::softmax_cross_entropy(z, x.label);
        if (!std::isfinite(ce.value)) throw TrainingFailed("classifier loss diverged", 0.0);
        loss_sum += ce.value;
        const auto pred = std::size_t(std::max_element(z.values().begin(), z.values().end()) -
                                      z.values().begin());
        correct += pred == x.label;
        graph.backward(ce.grad, tape, grads);
      }
      nn::optimizer_step<float>(params, grads, opt, 1.0 / double(end - start));
    }
    local.epochs_run = epoch + 1;
    local.epoch_loss.push_back(loss_sum / double(train.size()));
    local.final_train_accuracy = double(correct) / double(train.size());
    std::size_t vcorrect = 0;
    for (auto i : val) vcorrect += model.predict_label(data[i]) == data[i].label;
    local.final_validation_accuracy = val.empty() ? local.final_train_accuracy
                                                  : double(vcorrect) / double(val.size());
    if (local.final_train_accuracy == 1.0 && local.final_validation_accuracy == 1.0) break;
  }
  if (info) *info = local;
  if (local.final_validation_accuracy < hyper.target_accuracy) {
    throw TrainingFailed("classifier reached validation accuracy " +
                             std::to_string(local.final_validation_accuracy) + " < target " +
                             std::to_string(hyper.target_accuracy),
                         local.final_validation_accuracy);
  }
  return model;
}

inline io::Checkpoint to_checkpoint(const ClassifierModel& model,
                                    const ClassifierTrainingInfo& info = {}) {
  io::Checkpoint ck;
  nlohmann::json labels = nlohmann::json::array();
  for (auto s : kAllSchemes) labels.push_back(scheme_name(s));
  ck.metadata = {{"model", "classifier"},
                 {"labels", labels},
                 {"epochs", info.epochs_run},
                 {"train_accuracy", info.final_train_accuracy},
                 {"validation_accuracy", info.final_validation_accuracy}};
  ck.graphs.emplace_back("classifier", model.graph());
  return ck;
}

inline ClassifierModel classifier_from_checkpoint(const io::Checkpoint& ck) {
  if (ck.metadata.value("model", "") != "classifier") {
    throw FormatError("checkpoint is not a classifier");
  }
  const auto& labels = ck.metadata.at("labels");
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    if (labels.at(k).get<std::string>() != scheme_name(kAllSchemes[k])) {
      throw FormatError("classifier checkpoint label ordering does not match");
    }
  }
  return ClassifierModel(ck.graph("classifier"));
}

}  // namespace rfadvq
