#pragma once

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ldgm/rng.hpp"
#include "ldgm/tensor.hpp"

namespace ldgm::nn {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Owns parameters with stable addresses, in registration order.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor init);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  void zero_grad();
  std::size_t scalar_count() const;
  double grad_norm() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  std::deque<Parameter> params_;
};

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
};

/// Tape-based reverse-mode graph. Nodes are appended in evaluation order,
/// so reverse creation order is a valid topological order for backward().
class Graph {
 public:
  /// out_grad is the gradient of the node; input_grads[i] is null when
  /// input i does not need a gradient.
  using BackwardFn = std::function<void(const Tensor& out_grad, std::span<Tensor* const> input_grads)>;

  explicit Graph(Precision precision = Precision::F32, bool grad_enabled = true)
      : precision_(precision), grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Precision precision() const { return precision_; }
  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  /// Leaf bound to a parameter; backward() accumulates into p.grad.
  Var param(Parameter& p);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  // Primitive ops.
  Var matmul(Var a, Var b);            // [m,k] x [k,n]
  Var add(Var a, Var b);               // same shape
  Var add_row(Var a, Var row);         // [m,n] + broadcast [1,n]
  Var mul(Var a, Var b);               // elementwise
  Var scale(Var a, double s);
  Var gelu(Var a);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  Var softmax_rows(Var a);
  Var log_softmax_rows(Var a);
  Var gather_rows(Var table, std::vector<int> index);
  Var sum(Var a);
  Var mean(Var a);
  Var mean_rows(Var a);                // [m,n] -> [1,n]
  /// -(1/m) sum_i log_probs[i, targets[i]].
  Var nll(Var log_probs, std::vector<int> targets);
  /// sum_i KL(target_i || exp(log_probs_i)).
  Var kl_divergence(Var log_probs, Tensor target);

  Var custom(std::vector<Var> inputs, Tensor value, BackwardFn backward);

  /// Populates gradients of every reachable parameter. `loss` must be 1x1.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    Tensor grad;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, std::vector<Var> inputs, BackwardFn backward);
  const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }

  Precision precision_;
  bool grad_enabled_;
  std::vector<Node> nodes_;
};

/// Zero-mean normal samples with the given standard deviation.
Tensor random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng);

}  // namespace ldgm::nn
