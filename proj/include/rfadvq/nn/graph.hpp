#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rfadvq/nn/layers.hpp"

namespace rfadvq::nn {

// Activations recorded by one forward pass, consumed by the matching backward.
template <typename T>
struct Tape {
  std::vector<Cache<T>> caches;
  bool recorded = false;
};

// Flat list of parameter gradients in Graph::parameters() order.
template <typename T>
using Gradients = std::vector<Tensor<T>>;

// Feed-forward computation graph. Nodes are stored in topological order
// (each consumes the previous node's output), so backward is a reverse sweep.
template <typename T>
class Graph {
 public:
  Graph() = default;
  explicit Graph(Shape input_shape) : input_shape_(std::move(input_shape)) {}

  Graph(const Graph& other) : input_shape_(other.input_shape_) {
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  Graph& operator=(const Graph& other) {
    if (this != &other) {
      Graph tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  template <typename L, typename... Args>
  Graph& add(Args&&... args) {
    return push(std::make_unique<L>(std::forward<Args>(args)...));
  }

  Graph& push(std::unique_ptr<Layer<T>> layer) {
    // Validates the chain eagerly.
    Shape s = output_shape();
    layer->output_shape(s);
    layers_.push_back(std::move(layer));
    return *this;
  }

  const Shape& input_shape() const noexcept { return input_shape_; }

  Shape output_shape() const {
    Shape s = input_shape_;
    for (const auto& l : layers_) s = l->output_shape(s);
    return s;
  }

  std::size_t layer_count() const noexcept { return layers_.size(); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }

  std::vector<LayerSpec> specs() const {
    std::vector<LayerSpec> out;
    for (const auto& l : layers_) out.push_back(l->spec());
    return out;
  }

  void initialize(Rng& rng) {
    for (auto& l : layers_) l->initialize(rng);
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& l : layers_) {
      for (auto& p : l->params()) out.push_back(&p);
    }
    return out;
  }
  std::vector<const Tensor<T>*> parameters() const {
    std::vector<const Tensor<T>*> out;
    for (const auto& l : layers_) {
      for (const auto& p : l->params()) out.push_back(&p);
    }
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto n = layers_[i]->params().size();
      for (std::size_t j = 0; j < n; ++j) {
        out.push_back(std::to_string(i) + ":" + layers_[i]->spec().kind +
                      (j == 0 ? ".weight" : j == 1 ? ".bias" : "." + std::to_string(j)));
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
  }

  Gradients<T> zero_gradients() const {
    Gradients<T> g;
    for (const auto* p : parameters()) g.emplace_back(p->shape());
    return g;
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>& tape) const {
    expect_shape(x, input_shape_, "graph input");
    tape.caches.assign(layers_.size(), {});
    Tensor<T> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) h = layers_[i]->forward(h, tape.caches[i]);
    tape.recorded = true;
    return h;
  }

  // Forward without keeping activations for a caller.
  Tensor<T> infer(const Tensor<T>& x) const {
    Tape<T> tape;
    return forward(x, tape);
  }

  // Accumulates parameter gradients into grads and returns the input gradient.
  Tensor<T> backward(const Tensor<T>& grad_out, const Tape<T>& tape, Gradients<T>& grads) const {
    if (!tape.recorded || tape.caches.size() != layers_.size()) {
      throw Error("backward called before forward");
    }
    if (grads.size() != parameter_slots()) throw ShapeError("gradient buffer does not match graph");
    std::size_t slot = parameter_slots();
    Tensor<T> g = grad_out;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const std::size_t n = layers_[i]->params().size();
      slot -= n;
      g = layers_[i]->backward(g, tape.caches[i], std::span<Tensor<T>>(grads).subspan(slot, n));
    }
    return g;
  }

  template <typename U>
  Graph<U> cast() const {
    Graph<U> out(input_shape_);
    for (const auto& l : layers_) {
      auto nl = make_layer<U>(l->spec());
      for (std::size_t j = 0; j < l->params().size(); ++j) {
        nl->params()[j] = l->params()[j].template cast<U>();
      }
      out.push(std::move(nl));
    }
    return out;
  }

 private:
  std::size_t parameter_slots() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l->params().size();
    return n;
  }

  Shape input_shape_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

}  // namespace rfadvq::nn
