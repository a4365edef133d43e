#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "retina/core.hpp"

namespace retina::nn {

/// Dense row-major tensor of doubles. Feature maps are laid out C x H x W,
/// token sequences N x E.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0)
      : shape(std::move(s)), data(count(shape), fill) {}

  static std::size_t count(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
  }

  std::size_t size() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  int rank() const { return static_cast<int>(shape.size()); }
  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline void require_shape(const Tensor& t, const std::vector<int>& s, const char* what) {
  if (t.shape != s)
    fail(ErrorKind::ShapeMismatch, std::string(what) + ": expected " + shape_string(s) +
                                       ", got " + shape_string(t.shape));
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so replaying them backwards is a
/// valid topological order. Each node keeps its forward value; gradients are
/// allocated on first use. Ops read whatever they need from the values of
/// their inputs during backward instead of keeping private copies.
class Tape {
 public:
  using Id = std::size_t;
  using Backward = std::function<void(Tape&, Id)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  /// When on, kinked ops (ReLU, max-pool) fold their branch pattern into
  /// pattern(); finite-difference checks use it to reject steps that cross
  /// a kink.
  void track_pattern(bool on) { track_pattern_ = on; }
  bool tracking_pattern() const { return track_pattern_; }
  void mix_pattern(std::uint64_t v) { pattern_ = splitmix64(pattern_ ^ v); }
  std::uint64_t pattern() const { return pattern_; }

  Id constant(Tensor value) { return push(std::move(value), false, {}); }

  Id parameter(const std::string& name, Tensor value) {
    const Id id = push(std::move(value), grad_enabled_, {});
    params_.emplace_back(name, id);
    return id;
  }

  /// Adds an op output. `requires_grad` should be true iff some input needs a
  /// gradient; the backward closure is dropped otherwise.
  Id record(Tensor value, bool requires_grad, Backward backward) {
    const bool rg = grad_enabled_ && requires_grad;
    return push(std::move(value), rg, rg ? std::move(backward) : Backward{});
  }

  const Tensor& value(Id id) const { return nodes_.at(id).value; }
  bool requires_grad(Id id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(Id id) const { return !nodes_.at(id).grad.data.empty(); }

  Tensor& grad(Id id) {
    Node& n = nodes_.at(id);
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape, 0.0);
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Seeds output gradients and propagates them to every node that needs one.
  void backward(const std::vector<std::pair<Id, const Tensor*>>& seeds) {
    for (const auto& [id, g] : seeds) {
      if (!requires_grad(id)) continue;
      require_shape(*g, value(id).shape, "backward seed");
      Tensor& dst = grad(id);
      for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += g->data[i];
    }
    for (Id id = nodes_.size(); id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward && !n.grad.data.empty()) n.backward(*this, id);
    }
  }

  /// Gradients of every registered parameter (zeros when untouched).
  std::map<std::string, Tensor> parameter_grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : params_) {
      const Node& n = nodes_[id];
      out[name] = n.grad.data.empty() ? Tensor(n.value.shape, 0.0) : n.grad;
    }
    return out;
  }

  const std::vector<std::pair<std::string, Id>>& parameters() const { return params_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  Id push(Tensor value, bool rg, Backward bw) {
    nodes_.push_back(Node{std::move(value), Tensor{}, rg, std::move(bw)});
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, Id>> params_;
  bool grad_enabled_ = true;
  bool track_pattern_ = false;
  std::uint64_t pattern_ = 0;
};

}  // namespace retina::nn
