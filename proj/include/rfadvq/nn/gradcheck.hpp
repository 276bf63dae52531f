#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rfadvq/nn/graph.hpp"
#include "rfadvq/nn/losses.hpp"

namespace rfadvq::nn {

struct GradCheckBlock {
  std::string name;
  std::size_t checked = 0;
  double max_relative_error = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;

  bool pass() const {
    return std::all_of(blocks.begin(), blocks.end(), [](const auto& b) { return b.pass; });
  }
  double worst() const {
    double w = 0.0;
    for (const auto& b : blocks) w = std::max(w, b.max_relative_error);
    return w;
  }
};

// |a - n| relative to the larger magnitude, with an absolute floor so that
// gradients that are zero up to rounding compare as equal.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::size_t samples_per_block = 24;
  std::uint64_t seed = 0;
};

// Central-difference check of `analytic` against `loss` on a random subsample
// of `vars`. `vars` is perturbed in place and restored.
inline GradCheckBlock check_block(std::string name, std::span<double> vars,
                                  std::span<const double> analytic,
                                  const std::function<double()>& loss,
                                  const GradCheckOptions& opt, Rng& rng) {
  GradCheckBlock block{std::move(name)};
  std::vector<std::size_t> idx(vars.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (idx.size() > opt.samples_per_block) {
    for (std::size_t i = 0; i < opt.samples_per_block; ++i) {
      std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
    }
    idx.resize(opt.samples_per_block);
  }
  for (std::size_t i : idx) {
    const double saved = vars[i];
    vars[i] = saved + opt.step;
    const double up = loss();
    vars[i] = saved - opt.step;
    const double down = loss();
    vars[i] = saved;
    const double numeric = (up - down) / (2.0 * opt.step);
    const double err = relative_error(analytic[i], numeric);
    block.max_relative_error = std::max(block.max_relative_error, err);
    ++block.checked;
  }
  block.pass = block.max_relative_error <= opt.tolerance;
  return block;
}

using ScalarLoss = std::function<LossResult<double>(const Tensor<double>&)>;

// Compares backward() against central differences for every parameter block
// and for the input.
inline GradCheckReport grad_check(Graph<double> graph, Tensor<double> input,
                                  const ScalarLoss& loss_of_output,
                                  const GradCheckOptions& opt = {}) {
  Rng rng(opt.seed);
  Tape<double> tape;
  const auto out = graph.forward(input, tape);
  auto grads = graph.zero_gradients();
  const auto input_grad = graph.backward(loss_of_output(out).grad, tape, grads);

  auto eval = [&] { return loss_of_output(graph.infer(input)).value; };
  GradCheckReport report;
  auto params = graph.parameters();
  auto names = graph.parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    report.blocks.push_back(
        check_block(names[i], params[i]->values(), grads[i].values(), eval, opt, rng));
  }
  report.blocks.push_back(
      check_block("input", input.values(), input_grad.values(), eval, opt, rng));
  return report;
}

}  // namespace rfadvq::nn
