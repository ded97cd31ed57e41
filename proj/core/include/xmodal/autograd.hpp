#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "xmodal/tensor.hpp"

namespace xmodal {

// Ordered collection of named learnable tensors. Models keep indices into it;
// checkpoints serialize it in insertion order.
template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<T> value);

  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t size() const { return values_.size(); }
  std::size_t total_elements() const;

  const std::string& name(std::size_t i) const { return names_.at(i); }
  const Tensor<T>& value(std::size_t i) const { return values_.at(i); }
  Tensor<T>& value(std::size_t i) { return values_.at(i); }
  const Tensor<T>& at(std::string_view name) const { return values_[index(name)]; }
  Tensor<T>& at(std::string_view name) { return values_[index(name)]; }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

  bool operator==(const ParameterSet& other) const {
    return names_ == other.names_ && values_ == other.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

// Gradient accumulators laid out like a ParameterSet.
template <typename T>
class GradientSet {
 public:
  GradientSet() = default;
  explicit GradientSet(const ParameterSet<T>& params);

  std::size_t size() const { return grads_.size(); }
  Tensor<T>& at(std::size_t i) { return grads_.at(i); }
  const Tensor<T>& at(std::size_t i) const { return grads_.at(i); }

  void zero();
  void add(const GradientSet& other);
  void scale(T factor);
  bool all_finite() const;

 private:
  std::vector<Tensor<T>> grads_;
};

struct Var {
  std::uint32_t id = 0;
};

// Reverse-mode tape. Every op records its output value and a closure that
// propagates the output gradient to its inputs. Parameter leaves forward
// their gradient into the GradientSet registered with track(); parameters of
// untracked sets act as constants.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  void track(const ParameterSet<T>& params, GradientSet<T>& grads);

  Var constant(Tensor<T> value);
  // Leaf whose gradient is kept and readable through grad() after backward.
  Var variable(Tensor<T> value);
  Var param(const ParameterSet<T>& params, std::size_t index);
  Var param(const ParameterSet<T>& params, std::string_view name) {
    return param(params, params.index(name));
  }

  const Tensor<T>& value(Var v) const;
  const Tensor<T>& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].needs_grad; }
  T scalar(Var v) const { return value(v)[0]; }
  std::size_t node_count() const { return nodes_.size(); }

  // Root must hold a single element; its gradient is seeded with one.
  void backward(Var root);
  void backward(Var root, const Tensor<T>& seed);

  Var matmul(Var a, Var b);
  // a * b^T
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  // Adds a length-cols bias to every row of a rank-2 input.
  Var add_bias(Var x, Var bias);
  Var affine(Var a, T scale, T shift);
  Var tanh(Var a);
  Var gelu(Var a);
  Var sigmoid(Var a);
  Var relu(Var a);
  Var leaky_relu(Var a, T slope);
  Var exp(Var a);
  Var log(Var a);
  Var clamp(Var a, T lo, T hi);
  Var softmax_rows(Var a);
  Var layer_norm_rows(Var x, Var gain, Var bias, T eps);
  Var gather_rows(Var table, std::span<const std::size_t> rows);
  Var slice_rows(Var a, std::size_t start, std::size_t count);
  Var slice_cols(Var a, std::size_t start, std::size_t count);
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  Var reshape(Var a, Shape shape);
  Var sum(Var a);
  Var mean(Var a);
  // Cosine similarity of two equally sized tensors viewed as flat vectors.
  // Zero (with zero gradient) when either norm is below 1e-12.
  Var cosine(Var u, Var v);
  // Flat tensor divided by its L2 norm; passes through unchanged (with
  // identity gradient) when the norm is below 1e-12.
  Var l2_normalize(Var a);
  // Softmax cross-entropy of a flat logit vector against one class.
  Var cross_entropy(Var logits, std::size_t label);
  // x: [C,H,W], weight: [O,C,k,k], bias: O elements.
  Var conv2d(Var x, Var weight, Var bias, std::size_t stride, std::size_t pad);
  Var upsample_nearest(Var x, std::size_t factor);
  Var avg_pool(Var x, std::size_t cell);

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    bool needs_grad = false;
    GradientSet<T>* sink = nullptr;
    std::size_t param_index = 0;
    std::function<void(Tape&, Var)> backward;
  };
  struct Binding {
    const ParameterSet<T>* params;
    GradientSet<T>* grads;
  };

  Var push(Tensor<T> value, bool needs_grad, std::function<void(Tape&, Var)> backward);
  Tensor<T>& grad_mut(Var v);
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  template <typename F, typename DF>
  Var unary(Var a, F f, DF df);

  std::vector<Node> nodes_;
  std::vector<Binding> bindings_;
};

}  // namespace xmodal
