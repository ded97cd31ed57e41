#include "xmodal/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace xmodal {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_string(a) + " and " + shape_string(b));
}

void require_rank2(const char* op, const Shape& s) {
  if (s.size() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected rank-2 input, got " +
                                shape_string(s));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterSet / GradientSet

template <typename T>
std::size_t ParameterSet<T>::add(std::string name, Tensor<T> value) {
  if (lookup_.contains(name)) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  const std::size_t idx = values_.size();
  lookup_.emplace(name, idx);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return idx;
}

template <typename T>
std::size_t ParameterSet<T>::index(std::string_view name) const {
  auto it = lookup_.find(std::string(name));
  if (it == lookup_.end()) {
    throw std::out_of_range("unknown parameter: " + std::string(name));
  }
  return it->second;
}

template <typename T>
bool ParameterSet<T>::contains(std::string_view name) const {
  return lookup_.contains(std::string(name));
}

template <typename T>
std::size_t ParameterSet<T>::total_elements() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

template <typename T>
GradientSet<T>::GradientSet(const ParameterSet<T>& params) {
  grads_.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    grads_.emplace_back(params.value(i).shape());
  }
}

template <typename T>
void GradientSet<T>::zero() {
  for (auto& g : grads_) g.fill(T{0});
}

template <typename T>
void GradientSet<T>::add(const GradientSet& other) {
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    auto dst = grads_[i].values();
    auto src = other.grads_[i].values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

template <typename T>
void GradientSet<T>::scale(T factor) {
  for (auto& g : grads_) {
    for (auto& x : g.values()) x *= factor;
  }
}

template <typename T>
bool GradientSet<T>::all_finite() const {
  for (const auto& g : grads_) {
    for (T x : g.values()) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape plumbing

template <typename T>
void Tape<T>::track(const ParameterSet<T>& params, GradientSet<T>& grads) {
  if (grads.size() != params.size()) {
    throw std::invalid_argument("gradient set does not match parameter set");
  }
  bindings_.push_back({&params, &grads});
}

template <typename T>
Var Tape<T>::push(Tensor<T> value, bool needs_grad,
                  std::function<void(Tape&, Var)> backward) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = needs_grad;
  if (needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  return push(std::move(value), false, nullptr);
}

template <typename T>
Var Tape<T>::variable(Tensor<T> value) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = true;
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::param(const ParameterSet<T>& params, std::size_t index) {
  Node node;
  node.ref = &params.value(index);
  for (const auto& b : bindings_) {
    if (b.params == &params) {
      node.needs_grad = true;
      node.sink = b.grads;
      node.param_index = index;
      break;
    }
  }
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.ref ? *n.ref : n.value;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var v) const {
  return nodes_.at(v.id).grad;
}

template <typename T>
Tensor<T>& Tape<T>::grad_mut(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var root) {
  if (value(root).size() != 1) {
    throw std::invalid_argument("backward(root) requires a scalar root");
  }
  backward(root, Tensor<T>(value(root).shape(), T{1}));
}

template <typename T>
void Tape<T>::backward(Var root, const Tensor<T>& seed) {
  if (seed.size() != value(root).size()) {
    shape_error("backward seed", seed.shape(), value(root).shape());
  }
  if (!needs(root)) return;
  Tensor<T>& g = grad_mut(root);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, Var{static_cast<std::uint32_t>(i)});
    if (n.sink) {
      auto dst = n.sink->at(n.param_index).values();
      auto src = n.grad.values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var Tape<T>::matmul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_rank2("matmul", A.shape());
  require_rank2("matmul", B.shape());
  if (A.cols() != B.rows()) shape_error("matmul", A.shape(), B.shape());
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor<T> C({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = C.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A(i, p);
      const T* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return push(std::move(C), needs(a) || needs(b), [a, b, m, k, n](Tape& t, Var out) {
    const auto& dC = t.grad(out);
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    if (t.needs(a)) {
      auto& dA = t.grad_mut(a);
      for (std::size_t i = 0; i < m; ++i) {
        const T* drow = dC.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T* brow = B.data() + p * n;
          T acc{0};
          for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
          dA(i, p) += acc;
        }
      }
    }
    if (t.needs(b)) {
      auto& dB = t.grad_mut(b);
      for (std::size_t i = 0; i < m; ++i) {
        const T* drow = dC.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T av = A(i, p);
          T* dbrow = dB.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * drow[j];
        }
      }
    }
  });
}

template <typename T>
Var Tape<T>::matmul_nt(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_rank2("matmul_nt", A.shape());
  require_rank2("matmul_nt", B.shape());
  if (A.cols() != B.cols()) shape_error("matmul_nt", A.shape(), B.shape());
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor<T> C({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = A.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = B.data() + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      C(i, j) = acc;
    }
  }
  return push(std::move(C), needs(a) || needs(b), [a, b, m, k, n](Tape& t, Var out) {
    const auto& dC = t.grad(out);
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    if (t.needs(a)) {
      auto& dA = t.grad_mut(a);
      for (std::size_t i = 0; i < m; ++i) {
        T* darow = dA.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const T d = dC(i, j);
          const T* brow = B.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) darow[p] += d * brow[p];
        }
      }
    }
    if (t.needs(b)) {
      auto& dB = t.grad_mut(b);
      for (std::size_t i = 0; i < m; ++i) {
        const T* arow = A.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const T d = dC(i, j);
          T* dbrow = dB.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) dbrow[p] += d * arow[p];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.shape() != B.shape()) shape_error("add", A.shape(), B.shape());
  Tensor<T> C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, Var out) {
    const auto& d = t.grad(out);
    for (Var v : {a, b}) {
      if (!t.needs(v)) continue;
      auto& g = t.grad_mut(v);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    }
  });
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.shape() != B.shape()) shape_error("sub", A.shape(), B.shape());
  Tensor<T> C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] -= B[i];
  return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, Var out) {
    const auto& d = t.grad(out);
    if (t.needs(a)) {
      auto& g = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    }
    if (t.needs(b)) {
      auto& g = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= d[i];
    }
  });
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.shape() != B.shape()) shape_error("mul", A.shape(), B.shape());
  Tensor<T> C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, Var out) {
    const auto& d = t.grad(out);
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    if (t.needs(a)) {
      auto& g = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * B[i];
    }
    if (t.needs(b)) {
      auto& g = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * A[i];
    }
  });
}

template <typename T>
Var Tape<T>::add_bias(Var x, Var bias) {
  const auto& X = value(x);
  const auto& Bv = value(bias);
  require_rank2("add_bias", X.shape());
  if (Bv.size() != X.cols()) shape_error("add_bias", X.shape(), Bv.shape());
  Tensor<T> Y = X;
  const std::size_t r = X.rows(), c = X.cols();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) Y(i, j) += Bv[j];
  }
  return push(std::move(Y), needs(x) || needs(bias), [x, bias, r, c](Tape& t, Var out) {
    const auto& d = t.grad(out);
    if (t.needs(x)) {
      auto& g = t.grad_mut(x);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    }
    if (t.needs(bias)) {
      auto& g = t.grad_mut(bias);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) g[j] += d[i * c + j];
      }
    }
  });
}

template <typename T>
template <typename F, typename DF>
Var Tape<T>::unary(Var a, F f, DF df) {
  const auto& A = value(a);
  Tensor<T> Y(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) Y[i] = f(A[i]);
  return push(std::move(Y), needs(a), [a, df](Tape& t, Var out) {
    const auto& d = t.grad(out);
    const auto& X = t.value(a);
    const auto& Y = t.value(out);
    auto& g = t.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * df(X[i], Y[i]);
  });
}

template <typename T>
Var Tape<T>::affine(Var a, T scale, T shift) {
  return unary(
      a, [scale, shift](T x) { return scale * x + shift; },
      [scale](T, T) { return scale; });
}

template <typename T>
Var Tape<T>::tanh(Var a) {
  return unary(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Var Tape<T>::gelu(Var a) {
  // Exact form x * Phi(x).
  constexpr T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  constexpr T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
  return unary(
      a, [](T x) { return x * T{0.5} * (T{1} + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        const T cdf = T{0.5} * (T{1} + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(T{-0.5} * x * x);
      });
}

template <typename T>
Var Tape<T>::sigmoid(Var a) {
  return unary(
      a,
      [](T x) {
        if (x >= 0) return T{1} / (T{1} + std::exp(-x));
        const T e = std::exp(x);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var Tape<T>::relu(Var a) {
  return unary(
      a, [](T x) { return x > 0 ? x : T{0}; }, [](T x, T) { return x > 0 ? T{1} : T{0}; });
}

template <typename T>
Var Tape<T>::leaky_relu(Var a, T slope) {
  return unary(
      a, [slope](T x) { return x > 0 ? x : slope * x; },
      [slope](T x, T) { return x > 0 ? T{1} : slope; });
}

template <typename T>
Var Tape<T>::exp(Var a) {
  return unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var Tape<T>::log(Var a) {
  return unary(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <typename T>
Var Tape<T>::clamp(Var a, T lo, T hi) {
  return unary(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T{1} : T{0}; });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

template <typename T>
Var Tape<T>::softmax_rows(Var a) {
  const auto& A = value(a);
  require_rank2("softmax_rows", A.shape());
  const std::size_t r = A.rows(), c = A.cols();
  Tensor<T> Y({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    T mx = A(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, A(i, j));
    T z{0};
    for (std::size_t j = 0; j < c; ++j) {
      Y(i, j) = std::exp(A(i, j) - mx);
      z += Y(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) Y(i, j) /= z;
  }
  return push(std::move(Y), needs(a), [a, r, c](Tape& t, Var out) {
    const auto& d = t.grad(out);
    const auto& Y = t.value(out);
    auto& g = t.grad_mut(a);
    for (std::size_t i = 0; i < r; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < c; ++j) dot += d(i, j) * Y(i, j);
      for (std::size_t j = 0; j < c; ++j) g(i, j) += Y(i, j) * (d(i, j) - dot);
    }
  });
}

template <typename T>
Var Tape<T>::layer_norm_rows(Var x, Var gain, Var bias, T eps) {
  const auto& X = value(x);
  const auto& G = value(gain);
  const auto& B = value(bias);
  require_rank2("layer_norm_rows", X.shape());
  const std::size_t r = X.rows(), c = X.cols();
  if (G.size() != c || B.size() != c) shape_error("layer_norm_rows", X.shape(), G.shape());
  Tensor<T> xhat({r, c});
  std::vector<T> inv_std(r);
  Tensor<T> Y({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    T mu{0};
    for (std::size_t j = 0; j < c; ++j) mu += X(i, j);
    mu /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) var += (X(i, j) - mu) * (X(i, j) - mu);
    var /= static_cast<T>(c);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (X(i, j) - mu) * inv_std[i];
      Y(i, j) = G[j] * xhat(i, j) + B[j];
    }
  }
  const bool ng = needs(x) || needs(gain) || needs(bias);
  return push(std::move(Y), ng,
              [x, gain, bias, r, c, xhat = std::move(xhat),
               inv_std = std::move(inv_std)](Tape& t, Var out) {
                const auto& d = t.grad(out);
                const auto& G = t.value(gain);
                if (t.needs(gain)) {
                  auto& gg = t.grad_mut(gain);
                  for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gg[j] += d(i, j) * xhat(i, j);
                }
                if (t.needs(bias)) {
                  auto& gb = t.grad_mut(bias);
                  for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gb[j] += d(i, j);
                }
                if (t.needs(x)) {
                  auto& gx = t.grad_mut(x);
                  const T n = static_cast<T>(c);
                  for (std::size_t i = 0; i < r; ++i) {
                    T sum_d{0}, sum_dx{0};
                    for (std::size_t j = 0; j < c; ++j) {
                      const T dxh = d(i, j) * G[j];
                      sum_d += dxh;
                      sum_dx += dxh * xhat(i, j);
                    }
                    for (std::size_t j = 0; j < c; ++j) {
                      const T dxh = d(i, j) * G[j];
                      gx(i, j) += inv_std[i] / n * (n * dxh - sum_d - xhat(i, j) * sum_dx);
                    }
                  }
                }
              });
}

// ---------------------------------------------------------------------------
// Indexing and layout

template <typename T>
Var Tape<T>::gather_rows(Var table, std::span<const std::size_t> rows) {
  const auto& Tb = value(table);
  require_rank2("gather_rows", Tb.shape());
  const std::size_t c = Tb.cols();
  std::vector<std::size_t> ids(rows.begin(), rows.end());
  Tensor<T> Y({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= Tb.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(Tb.rows()));
    }
    std::copy_n(Tb.data() + ids[i] * c, c, Y.data() + i * c);
  }
  return push(std::move(Y), needs(table), [table, c, ids = std::move(ids)](Tape& t, Var out) {
    const auto& d = t.grad(out);
    auto& g = t.grad_mut(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* dst = g.data() + ids[i] * c;
      const T* src = d.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var Tape<T>::slice_rows(Var a, std::size_t start, std::size_t count) {
  const auto& A = value(a);
  require_rank2("slice_rows", A.shape());
  if (start + count > A.rows()) throw std::out_of_range("slice_rows out of range");
  const std::size_t c = A.cols();
  Tensor<T> Y({count, c});
  std::copy_n(A.data() + start * c, count * c, Y.data());
  return push(std::move(Y), needs(a), [a, start, count, c](Tape& t, Var out) {
    const auto& d = t.grad(out);
    auto& g = t.grad_mut(a);
    for (std::size_t i = 0; i < count * c; ++i) g[start * c + i] += d[i];
  });
}

template <typename T>
Var Tape<T>::slice_cols(Var a, std::size_t start, std::size_t count) {
  const auto& A = value(a);
  require_rank2("slice_cols", A.shape());
  if (start + count > A.cols()) throw std::out_of_range("slice_cols out of range");
  const std::size_t r = A.rows();
  Tensor<T> Y({r, count});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) Y(i, j) = A(i, start + j);
  return push(std::move(Y), needs(a), [a, start, count, r](Tape& t, Var out) {
    const auto& d = t.grad(out);
    auto& g = t.grad_mut(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) g(i, start + j) += d(i, j);
  });
}

template <typename T>
Var Tape<T>::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of nothing");
  const std::size_t c = value(parts[0]).cols();
  std::size_t total = 0;
  bool ng = false;
  for (Var p : parts) {
    const auto& P = value(p);
    require_rank2("concat_rows", P.shape());
    if (P.cols() != c) shape_error("concat_rows", value(parts[0]).shape(), P.shape());
    total += P.rows();
    ng = ng || needs(p);
  }
  Tensor<T> Y({total, c});
  std::size_t off = 0;
  for (Var p : parts) {
    const auto& P = value(p);
    std::copy_n(P.data(), P.size(), Y.data() + off);
    off += P.size();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return push(std::move(Y), ng, [ps = std::move(ps)](Tape& t, Var out) {
    const auto& d = t.grad(out);
    std::size_t off = 0;
    for (Var p : ps) {
      const std::size_t n = t.value(p).size();
      if (t.needs(p)) {
        auto& g = t.grad_mut(p);
        for (std::size_t i = 0; i < n; ++i) g[i] += d[off + i];
      }
      off += n;
    }
  });
}

template <typename T>
Var Tape<T>::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols of nothing");
  const std::size_t r = value(parts[0]).rows();
  std::size_t total = 0;
  bool ng = false;
  for (Var p : parts) {
    const auto& P = value(p);
    require_rank2("concat_cols", P.shape());
    if (P.rows() != r) shape_error("concat_cols", value(parts[0]).shape(), P.shape());
    total += P.cols();
    ng = ng || needs(p);
  }
  Tensor<T> Y({r, total});
  std::size_t off = 0;
  for (Var p : parts) {
    const auto& P = value(p);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < P.cols(); ++j) Y(i, off + j) = P(i, j);
    off += P.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return push(std::move(Y), ng, [ps = std::move(ps), r](Tape& t, Var out) {
    const auto& d = t.grad(out);
    std::size_t off = 0;
    for (Var p : ps) {
      const std::size_t c = t.value(p).cols();
      if (t.needs(p)) {
        auto& g = t.grad_mut(p);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g(i, j) += d(i, off + j);
      }
      off += c;
    }
  });
}

template <typename T>
Var Tape<T>::reshape(Var a, Shape shape) {
  Tensor<T> Y = value(a);
  Y.reshape(std::move(shape));
  return push(std::move(Y), needs(a), [a](Tape& t, Var out) {
    const auto& d = t.grad(out);
    auto& g = t.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Var Tape<T>::sum(Var a) {
  const auto& A = value(a);
  T s{0};
  for (T x : A.values()) s += x;
  return push(Tensor<T>({1, 1}, s), needs(a), [a](Tape& t, Var out) {
    const T d = t.grad(out)[0];
    auto& g = t.grad_mut(a);
    for (auto& x : g.values()) x += d;
  });
}

template <typename T>
Var Tape<T>::mean(Var a) {
  const auto& A = value(a);
  const T n = static_cast<T>(A.size());
  return affine(sum(a), T{1} / n, T{0});
}

template <typename T>
Var Tape<T>::cosine(Var u, Var v) {
  const auto& U = value(u);
  const auto& V = value(v);
  if (U.size() != V.size()) shape_error("cosine", U.shape(), V.shape());
  T dot{0}, nu{0}, nv{0};
  for (std::size_t i = 0; i < U.size(); ++i) {
    dot += U[i] * V[i];
    nu += U[i] * U[i];
    nv += V[i] * V[i];
  }
  nu = std::sqrt(nu);
  nv = std::sqrt(nv);
  const bool degenerate = nu < T(1e-12) || nv < T(1e-12);
  const T s = degenerate ? T{0} : dot / (nu * nv);
  return push(Tensor<T>({1, 1}, s), needs(u) || needs(v),
              [u, v, nu, nv, s, degenerate](Tape& t, Var out) {
                if (degenerate) return;
                const T d = t.grad(out)[0];
                const auto& U = t.value(u);
                const auto& V = t.value(v);
                if (t.needs(u)) {
                  auto& g = t.grad_mut(u);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += d * (V[i] / (nu * nv) - s * U[i] / (nu * nu));
                }
                if (t.needs(v)) {
                  auto& g = t.grad_mut(v);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += d * (U[i] / (nu * nv) - s * V[i] / (nv * nv));
                }
              });
}

template <typename T>
Var Tape<T>::l2_normalize(Var a) {
  const auto& A = value(a);
  T n2{0};
  for (T x : A.values()) n2 += x * x;
  const T norm = std::sqrt(n2);
  if (norm < T(1e-12)) {
    return push(A, needs(a), [a](Tape& t, Var out) {
      const auto& d = t.grad(out);
      auto& g = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    });
  }
  Tensor<T> Y = A;
  for (auto& x : Y.values()) x /= norm;
  return push(std::move(Y), needs(a), [a, norm](Tape& t, Var out) {
    const auto& d = t.grad(out);
    const auto& Y = t.value(out);
    T dot{0};
    for (std::size_t i = 0; i < d.size(); ++i) dot += d[i] * Y[i];
    auto& g = t.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (d[i] - dot * Y[i]) / norm;
  });
}

template <typename T>
Var Tape<T>::cross_entropy(Var logits, std::size_t label) {
  const auto& Z = value(logits);
  if (label >= Z.size()) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                            " outside " + std::to_string(Z.size()) + " classes");
  }
  T mx = Z[0];
  for (T z : Z.values()) mx = std::max(mx, z);
  std::vector<T> p(Z.size());
  T s{0};
  for (std::size_t i = 0; i < Z.size(); ++i) {
    p[i] = std::exp(Z[i] - mx);
    s += p[i];
  }
  for (auto& x : p) x /= s;
  const T loss = std::log(s) + mx - Z[label];
  return push(Tensor<T>({1, 1}, loss), needs(logits),
              [logits, label, p = std::move(p)](Tape& t, Var out) {
                const T d = t.grad(out)[0];
                auto& g = t.grad_mut(logits);
                for (std::size_t i = 0; i < g.size(); ++i)
                  g[i] += d * (p[i] - (i == label ? T{1} : T{0}));
              });
}

// ---------------------------------------------------------------------------
// Image ops

template <typename T>
Var Tape<T>::conv2d(Var x, Var weight, Var bias, std::size_t stride, std::size_t pad) {
  const auto& X = value(x);
  const auto& W = value(weight);
  const auto& Bv = value(bias);
  if (X.rank() != 3 || W.rank() != 4 || W.dim(1) != X.dim(0) || W.dim(2) != W.dim(3) ||
      Bv.size() != W.dim(0)) {
    shape_error("conv2d", X.shape(), W.shape());
  }
  const std::size_t C = X.dim(0), H = X.dim(1), Wd = X.dim(2);
  const std::size_t O = W.dim(0), K = W.dim(2);
  if (H + 2 * pad < K || Wd + 2 * pad < K) shape_error("conv2d", X.shape(), W.shape());
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1;
  const std::size_t Wo = (Wd + 2 * pad - K) / stride + 1;
  Tensor<T> Y({O, Ho, Wo});
  const auto in_at = [&](std::size_t c, long yy, long xx) -> T {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(Wd)) return T{0};
    return X[(c * H + yy) * Wd + xx];
  };
  for (std::size_t o = 0; o < O; ++o) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T acc = Bv[o];
        const long y0 = static_cast<long>(oy * stride) - static_cast<long>(pad);
        const long x0 = static_cast<long>(ox * stride) - static_cast<long>(pad);
        for (std::size_t c = 0; c < C; ++c) {
          const T* wk = W.data() + ((o * C + c) * K) * K;
          for (std::size_t ky = 0; ky < K; ++ky)
            for (std::size_t kx = 0; kx < K; ++kx)
              acc += wk[ky * K + kx] * in_at(c, y0 + static_cast<long>(ky), x0 + static_cast<long>(kx));
        }
        Y[(o * Ho + oy) * Wo + ox] = acc;
      }
    }
  }
  const bool ng = needs(x) || needs(weight) || needs(bias);
  return push(std::move(Y), ng,
              [x, weight, bias, C, H, Wd, O, K, Ho, Wo, stride, pad](Tape& t, Var out) {
                const auto& d = t.grad(out);
                const auto& X = t.value(x);
                const auto& W = t.value(weight);
                Tensor<T>* gx = t.needs(x) ? &t.grad_mut(x) : nullptr;
                Tensor<T>* gw = t.needs(weight) ? &t.grad_mut(weight) : nullptr;
                Tensor<T>* gb = t.needs(bias) ? &t.grad_mut(bias) : nullptr;
                for (std::size_t o = 0; o < O; ++o) {
                  for (std::size_t oy = 0; oy < Ho; ++oy) {
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                      const T dv = d[(o * Ho + oy) * Wo + ox];
                      if (dv == T{0}) continue;
                      if (gb) (*gb)[o] += dv;
                      const long y0 = static_cast<long>(oy * stride) - static_cast<long>(pad);
                      const long x0 = static_cast<long>(ox * stride) - static_cast<long>(pad);
                      for (std::size_t c = 0; c < C; ++c) {
                        for (std::size_t ky = 0; ky < K; ++ky) {
                          const long yy = y0 + static_cast<long>(ky);
                          if (yy < 0 || yy >= static_cast<long>(H)) continue;
                          for (std::size_t kx = 0; kx < K; ++kx) {
                            const long xx = x0 + static_cast<long>(kx);
                            if (xx < 0 || xx >= static_cast<long>(Wd)) continue;
                            const std::size_t xi = (c * H + yy) * Wd + xx;
                            const std::size_t wi = ((o * C + c) * K + ky) * K + kx;
                            if (gw) (*gw)[wi] += dv * X[xi];
                            if (gx) (*gx)[xi] += dv * W[wi];
                          }
                        }
                      }
                    }
                  }
                }
              });
}

template <typename T>
Var Tape<T>::upsample_nearest(Var x, std::size_t factor) {
  const auto& X = value(x);
  if (X.rank() != 3 || factor == 0) throw std::invalid_argument("upsample_nearest expects [C,H,W]");
  const std::size_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
  const std::size_t Ho = H * factor, Wo = W * factor;
  Tensor<T> Y({C, Ho, Wo});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx)
        Y[(c * Ho + y) * Wo + xx] = X[(c * H + y / factor) * W + xx / factor];
  return push(std::move(Y), needs(x), [x, C, H, W, Ho, Wo, factor](Tape& t, Var out) {
    const auto& d = t.grad(out);
    auto& g = t.grad_mut(x);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t xx = 0; xx < Wo; ++xx)
          g[(c * H + y / factor) * W + xx / factor] += d[(c * Ho + y) * Wo + xx];
  });
}

template <typename T>
Var Tape<T>::avg_pool(Var x, std::size_t cell) {
  const auto& X = value(x);
  if (X.rank() != 3 || cell == 0 || X.dim(1) % cell || X.dim(2) % cell) {
    throw std::invalid_argument("avg_pool: spatial size " + shape_string(X.shape()) +
                                " not divisible by cell " + std::to_string(cell));
  }
  const std::size_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
  const std::size_t Ho = H / cell, Wo = W / cell;
  const T norm = T{1} / static_cast<T>(cell * cell);
  Tensor<T> Y({C, Ho, Wo});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        Y[(c * Ho + y / cell) * Wo + xx / cell] += X[(c * H + y) * W + xx] * norm;
  return push(std::move(Y), needs(x), [x, C, H, W, Ho, Wo, cell, norm](Tape& t, Var out) {
    const auto& d = t.grad(out);
    auto& g = t.grad_mut(x);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx)
          g[(c * H + y) * W + xx] += d[(c * Ho + y / cell) * Wo + xx / cell] * norm;
  });
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class GradientSet<float>;
template class GradientSet<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace xmodal
