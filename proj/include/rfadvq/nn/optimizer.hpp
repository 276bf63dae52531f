#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "rfadvq/nn/tensor.hpp"

namespace rfadvq::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct OptState {
  AdamConfig config;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::size_t step = 0;

  OptState() = default;
  template <typename Params>
  OptState(AdamConfig cfg, const Params& params) : config(cfg) {
    for (const auto* p : params) {
      first_moment.emplace_back(p->shape());
      second_moment.emplace_back(p->shape());
    }
  }

  // Clears the moments of one row of a rank-2 parameter (used after a
  // codeword is reinitialized).
  void reset_row(std::size_t param, std::size_t row) {
    for (auto& v : first_moment.at(param).row(row)) v = T{0};
    for (auto& v : second_moment.at(param).row(row)) v = T{0};
  }
};

// One adaptive-moment update. Gradients are scaled by grad_scale first (e.g.
// 1/batch) so callers can hand over summed gradients.
template <typename T>
void optimizer_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads,
                    OptState<T>& state, double grad_scale = 1.0) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("optimizer_step: parameter/gradient/state count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() ||
        params[i]->shape() != state.first_moment[i].shape()) {
      throw ShapeError("optimizer_step: shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double bias1 = 1.0 - std::pow(c.beta1, double(state.step));
  const double bias2 = 1.0 - std::pow(c.beta2, double(state.step));
  const double step_size = c.learning_rate / bias1;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->values();
    auto g = grads[i].values();
    auto m = state.first_moment[i].values();
    auto v = state.second_moment[i].values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = double(g[j]) * grad_scale;
      m[j] = T(c.beta1 * double(m[j]) + (1.0 - c.beta1) * gj);
      v[j] = T(c.beta2 * double(v[j]) + (1.0 - c.beta2) * gj * gj);
      const double denom = std::sqrt(double(v[j]) / bias2) + c.epsilon;
      p[j] = T(double(p[j]) - step_size * double(m[j]) / denom);
    }
  }
}

}  // namespace rfadvq::nn
