#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "rfadvq/nn/tensor.hpp"

namespace rfadvq::nn {

template <typename T>
struct LossResult {
  T value;
  Tensor<T> grad;
};

// Softmax with log-sum-exp stabilization.
template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  const T peak = *std::max_element(logits.begin(), logits.end());
  std::vector<T> p(logits.size());
  T sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - peak);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

template <typename T>
T log_sum_exp(std::span<const T> logits) {
  const T peak = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  for (auto v : logits) sum += std::exp(v - peak);
  return peak + std::log(sum);
}

// Cross-entropy of softmax(logits) at label; gradient w.r.t. the logits.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::size_t label) {
  if (logits.rank() != 1 || label >= logits.size()) {
    throw InvalidArgument("softmax_cross_entropy: label out of range");
  }
  const T lse = log_sum_exp(logits.values());
  Tensor<T> grad(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) grad[i] = std::exp(logits[i] - lse);
  grad[label] -= T{1};
  // lse >= logit[label] analytically; clamp rounding below zero.
  return {std::max(T{0}, lse - logits[label]), std::move(grad)};
}

// Mean squared error over all elements; gradient w.r.t. prediction.
template <typename T>
LossResult<T> mean_squared_error(const Tensor<T>& prediction, const Tensor<T>& target) {
  expect_shape(prediction, target.shape(), "mean_squared_error");
  const T n = T(prediction.size());
  Tensor<T> grad(prediction.shape());
  T acc = 0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const T d = prediction[i] - target[i];
    acc += d * d;
    grad[i] = T{2} * d / n;
  }
  return {acc / n, std::move(grad)};
}

}  // namespace rfadvq::nn
