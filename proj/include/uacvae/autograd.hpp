#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "uacvae/errors.hpp"
#include "uacvae/params.hpp"
#include "uacvae/tensor.hpp"

namespace uacvae {

template <class T>
class Graph;

/// Handle to a node on a Graph tape.
template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// creation order is a valid topological order and accumulation is
/// deterministic.
template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

  /// recording=false builds values only (inference); no gradients.
  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }

  Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, nullptr); }

  /// Leaf that receives a gradient (used for input-gradient checks).
  Var<T> variable(Tensor<T> value) { return push("variable", std::move(value), recording_, nullptr); }

  /// One leaf per parameter name per graph; repeated use accumulates.
  Var<T> parameter(const ParamStore<T>& store, std::string_view name) {
    const std::size_t idx = store.index_of(name);
    auto it = param_nodes_.find(idx);
    if (it != param_nodes_.end()) return Var<T>{this, it->second};
    Var<T> v = push("parameter", store.entries()[idx].value, recording_, nullptr);
    param_nodes_.emplace(idx, v.id);
    return v;
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  const Tensor<T>& grad(Var<T> v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Appends a node. The finite check runs here so every op is covered.
  Var<T> push(std::string_view op, Tensor<T> value, bool requires_grad, BackwardFn fn) {
    for (T x : value.values()) {
      if (!std::isfinite(static_cast<double>(x))) {
        throw NumericError("non-finite value produced by " + std::string(op));
      }
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = recording_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  /// Gradient buffer of an input, allocated on first use.
  Tensor<T>& grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void backward(Var<T> loss) {
    if (!recording_) throw NumericError("backward on a non-recording graph");
    if (value(loss).size() != 1) {
      throw DimensionError("backward: loss must be scalar, got shape " +
                           shape_string(value(loss).shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor<T>();
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Gradients in store order; parameters not reached by the loss get zeros.
  GradList<T> parameter_grads(const ParamStore<T>& store) const {
    GradList<T> out;
    out.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto it = param_nodes_.find(i);
      const Node* n = it == param_nodes_.end() ? nullptr : &nodes_[it->second];
      if (n && !n->grad.empty()) {
        out.push_back(n->grad);
      } else {
        out.emplace_back(store.entries()[i].value.shape());
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, std::uint32_t> param_nodes_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return graph->value(*this);
}

namespace detail {

template <class T>
void same_graph(const char* op, Var<T> a, Var<T> b) {
  if (a.graph != b.graph || a.graph == nullptr) throw DimensionError(std::string(op) + ": operands on different graphs");
}

template <class T>
[[noreturn]] void shape_fail(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

template <class T>
bool needs(Graph<T>& g, Var<T> v) {
  return g.requires_grad(v);
}

// out[r x c] += a[r x k] * b[k x c]
template <class T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t r, std::size_t k, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i) {
    T* o = out + i * c;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * c;
      for (std::size_t j = 0; j < c; ++j) o[j] += av * brow[j];
    }
  }
}

// out[r x c] += a[r x k] * b[c x k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* out, std::size_t r, std::size_t k, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < c; ++j) {
      const T* brow = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * c + j] += acc;
    }
  }
}

// out[k x c] += a[r x k]^T * b[r x c]
template <class T>
void gemm_tn(const T* a, const T* b, T* out, std::size_t r, std::size_t k, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      T* o = out + p * c;
      const T* brow = b + i * c;
      for (std::size_t j = 0; j < c; ++j) o[j] += av * brow[j];
    }
  }
}

template <class T>
Tensor<T> row_softmax(const Tensor<T>& x, bool causal) {
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t valid = causal ? std::min(c, i + 1) : c;
    const T* xr = x.data() + i * c;
    T* yr = y.data() + i * c;
    T mx = *std::max_element(xr, xr + valid);
    T sum = 0;
    for (std::size_t j = 0; j < valid; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (std::size_t j = 0; j < valid; ++j) yr[j] /= sum;
  }
  return y;
}

template <class T>
Tensor<T> row_log_softmax(const Tensor<T>& x) {
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const T* xr = x.data() + i * c;
    T* yr = y.data() + i * c;
    T mx = *std::max_element(xr, xr + c);
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(xr[j] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) yr[j] = xr[j] - lse;
  }
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[r x k] * b[k x c]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_graph("matmul", a, b);
  Graph<T>& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t r = av.rows(), k = av.cols(), c = bv.cols();
  if (bv.rows() != k) detail::shape_fail("matmul", av, bv);
  Tensor<T> out = Tensor<T>::matrix(r, c);
  detail::gemm_nn(av.data(), bv.data(), out.data(), r, k, c);
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.push("matmul", std::move(out), rg, [a, b, r, k, c](Graph<T>& gr, const Tensor<T>& og) {
    if (gr.requires_grad(a)) {
      auto& ga = gr.grad_buffer(a.id);
      detail::gemm_nt(og.data(), gr.value(b).data(), ga.data(), r, c, k);
    }
    if (gr.requires_grad(b)) {
      auto& gb = gr.grad_buffer(b.id);
      detail::gemm_tn(gr.value(a).data(), og.data(), gb.data(), r, k, c);
    }
  });
}

/// a[r x k] * b[c x k]^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::same_graph("matmul_nt", a, b);
  Graph<T>& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t r = av.rows(), k = av.cols(), c = bv.rows();
  if (bv.cols() != k) detail::shape_fail("matmul_nt", av, bv);
  Tensor<T> out = Tensor<T>::matrix(r, c);
  detail::gemm_nt(av.data(), bv.data(), out.data(), r, k, c);
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.push("matmul_nt", std::move(out), rg, [a, b, r, k, c](Graph<T>& gr, const Tensor<T>& og) {
    if (gr.requires_grad(a)) {
      detail::gemm_nn(og.data(), gr.value(b).data(), gr.grad_buffer(a.id).data(), r, c, k);
    }
    if (gr.requires_grad(b)) {
      detail::gemm_tn(og.data(), gr.value(a).data(), gr.grad_buffer(b.id).data(), r, c, k);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, where b is either the same shape or a single row broadcast over a's rows.
template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_graph("add", a, b);
  Graph<T>& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool broadcast = bv.rows() == 1 && av.rows() != 1 && bv.cols() == av.cols();
  if (!broadcast && (av.rows() != bv.rows() || av.cols() != bv.cols())) detail::shape_fail("add", av, bv);
  Tensor<T> out = av;
  const std::size_t c = av.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += broadcast ? bv[i % c] : bv[i];
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.push("add", std::move(out), rg, [a, b, broadcast, c](Graph<T>& gr, const Tensor<T>& og) {
    if (gr.requires_grad(a)) {
      auto& ga = gr.grad_buffer(a.id);
      for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i];
    }
    if (gr.requires_grad(b)) {
      auto& gb = gr.grad_buffer(b.id);
      for (std::size_t i = 0; i < og.size(); ++i) gb[broadcast ? i % c : i] += og[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_graph("sub", a, b);
  Graph<T>& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) detail::shape_fail("sub", av, bv);
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.push("sub", std::move(out), rg, [a, b](Graph<T>& gr, const Tensor<T>& og) {
    if (gr.requires_grad(a)) {
      auto& ga = gr.grad_buffer(a.id);
      for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i];
    }
    if (gr.requires_grad(b)) {
      auto& gb = gr.grad_buffer(b.id);
      for (std::size_t i = 0; i < og.size(); ++i) gb[i] -= og[i];
    }
  });
}

/// Elementwise product of equal shapes.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_graph("mul", a, b);
  Graph<T>& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) detail::shape_fail("mul", av, bv);
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.push("mul", std::move(out), rg, [a, b](Graph<T>& gr, const Tensor<T>& og) {
    if (gr.requires_grad(a)) {
      auto& ga = gr.grad_buffer(a.id);
      const auto& bv = gr.value(b);
      for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i] * bv[i];
    }
    if (gr.requires_grad(b)) {
      auto& gb = gr.grad_buffer(b.id);
      const auto& av = gr.value(a);
      for (std::size_t i = 0; i < og.size(); ++i) gb[i] += og[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Graph<T>& g = *a.graph;
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x *= s;
  return g.push("scale", std::move(out), g.requires_grad(a), [a, s](Graph<T>& gr, const Tensor<T>& og) {
    auto& ga = gr.grad_buffer(a.id);
    for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i] * s;
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  Graph<T>& g = *a.graph;
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x += s;
  return g.push("add_scalar", std::move(out), g.requires_grad(a), [a](Graph<T>& gr, const Tensor<T>& og) {
    auto& ga = gr.grad_buffer(a.id);
    for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i];
  });
}

namespace detail {

template <class T, class Fwd, class Deriv>
Var<T> unary(const char* op, Var<T> a, Fwd fwd, Deriv deriv) {
  Graph<T>& g = *a.graph;
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x = fwd(x);
  return g.push(op, std::move(out), g.requires_grad(a), [a, deriv](Graph<T>& gr, const Tensor<T>& og) {
    auto& ga = gr.grad_buffer(a.id);
    const auto& x = gr.value(a);
    for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i] * deriv(x[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> tanh(Var<T> a) {
  return detail::unary(
      "tanh", a, [](T x) { return std::tanh(x); },
      [](T x) {
        const T t = std::tanh(x);
        return T(1) - t * t;
      });
}

template <class T>
Var<T> relu(Var<T> a) {
  return detail::unary(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> exp(Var<T> a) {
  return detail::unary(
      "exp", a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

/// Clamp to [lo, hi]; gradient is zero where the clamp is active.
template <class T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return detail::unary(
      "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x) { return (x > lo && x < hi) ? T(1) : T(0); });
}

/// Sum of all entries, as a 1x1 tensor.
template <class T>
Var<T> sum(Var<T> a) {
  Graph<T>& g = *a.graph;
  T s = 0;
  for (T x : a.value().values()) s += x;
  return g.push("sum", Tensor<T>::scalar(s), g.requires_grad(a), [a](Graph<T>& gr, const Tensor<T>& og) {
    auto& ga = gr.grad_buffer(a.id);
    for (auto& x : ga.values()) x += og[0];
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizers

/// Softmax over the last axis. With causal=true, entry (i, j) for j > i is
/// masked out (probability exactly zero).
template <class T>
Var<T> softmax(Var<T> a, bool causal = false) {
  Graph<T>& g = *a.graph;
  Tensor<T> y = detail::row_softmax(a.value(), causal);
  const std::uint32_t self = static_cast<std::uint32_t>(g.size());
  return g.push("softmax", std::move(y), g.requires_grad(a), [a, self](Graph<T>& gr, const Tensor<T>& og) {
    const auto& y = gr.value(Var<T>{&gr, self});
    auto& ga = gr.grad_buffer(a.id);
    const std::size_t r = y.rows(), c = y.cols();
    for (std::size_t i = 0; i < r; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += og[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[i * c + j] * (og[i * c + j] - dot);
    }
  });
}

template <class T>
Var<T> log_softmax(Var<T> a) {
  Graph<T>& g = *a.graph;
  Tensor<T> y = detail::row_log_softmax(a.value());
  const std::uint32_t self = static_cast<std::uint32_t>(g.size());
  return g.push("log_softmax", std::move(y), g.requires_grad(a), [a, self](Graph<T>& gr, const Tensor<T>& og) {
    const auto& y = gr.value(Var<T>{&gr, self});
    auto& ga = gr.grad_buffer(a.id);
    const std::size_t r = y.rows(), c = y.cols();
    for (std::size_t i = 0; i < r; ++i) {
      T s = 0;
      for (std::size_t j = 0; j < c; ++j) s += og[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += og[i * c + j] - std::exp(y[i * c + j]) * s;
    }
  });
}

/// Per-row layer normalization with learned gain and bias (each 1 x cols).
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  Graph<T>& g = *x.graph;
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gain.value().size() != c || bias.value().size() != c) detail::shape_fail("layer_norm", xv, gain.value());
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(r);
  Tensor<T> out(xv.shape());
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < r; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xv[i * c + j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T d = xv[i * c + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xv[i * c + j] - mean) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
    }
  }
  const bool rg = g.requires_grad(x) || g.requires_grad(gain) || g.requires_grad(bias);
  return g.push("layer_norm", std::move(out), rg,
                [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c](
                    Graph<T>& gr, const Tensor<T>& og) {
                  const auto& gv = gr.value(gain);
                  if (gr.requires_grad(gain)) {
                    auto& gg = gr.grad_buffer(gain.id);
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) gg[j] += og[i * c + j] * xhat[i * c + j];
                  }
                  if (gr.requires_grad(bias)) {
                    auto& gb = gr.grad_buffer(bias.id);
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) gb[j] += og[i * c + j];
                  }
                  if (gr.requires_grad(x)) {
                    auto& gx = gr.grad_buffer(x.id);
                    for (std::size_t i = 0; i < r; ++i) {
                      T mean_d = 0, mean_dx = 0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const T d = og[i * c + j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xhat[i * c + j];
                      }
                      mean_d /= static_cast<T>(c);
                      mean_dx /= static_cast<T>(c);
                      for (std::size_t j = 0; j < c; ++j) {
                        const T d = og[i * c + j] * gv[j];
                        gx[i * c + j] += inv_std[i] * (d - mean_d - xhat[i * c + j] * mean_dx);
                      }
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Indexing and reshaping

/// Rows of table[vocab x d] selected by ids.
template <class T>
Var<T> embedding(Var<T> table, const std::vector<int>& ids) {
  Graph<T>& g = *table.graph;
  const auto& tv = table.value();
  const std::size_t v = tv.rows(), d = tv.cols();
  Tensor<T> out = Tensor<T>::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " out of range for vocab " +
                           std::to_string(v));
    }
    std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  }
  return g.push("embedding", std::move(out), g.requires_grad(table), [table, ids, d](Graph<T>& gr, const Tensor<T>& og) {
    auto& gt = gr.grad_buffer(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += og[i * d + j];
  });
}

/// Mean over the rows whose mask entry is true (all rows when mask is empty).
template <class T>
Var<T> mean_pool(Var<T> x, std::vector<bool> mask = {}) {
  Graph<T>& g = *x.graph;
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (mask.empty()) mask.assign(r, true);
  if (mask.size() != r) throw DimensionError("mean_pool: mask length " + std::to_string(mask.size()) +
                                             " for " + std::to_string(r) + " rows");
  const auto count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (count == 0) throw DimensionError("mean_pool: no unmasked rows");
  Tensor<T> out = Tensor<T>::matrix(1, c);
  for (std::size_t i = 0; i < r; ++i)
    if (mask[i])
      for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
  const T inv = T(1) / static_cast<T>(count);
  for (auto& o : out.values()) o *= inv;
  return g.push("mean_pool", std::move(out), g.requires_grad(x),
                [x, mask = std::move(mask), inv, r, c](Graph<T>& gr, const Tensor<T>& og) {
                  auto& gx = gr.grad_buffer(x.id);
                  for (std::size_t i = 0; i < r; ++i)
                    if (mask[i])
                      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += og[j] * inv;
                });
}

/// Horizontal concatenation of equal-row operands.
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  Graph<T>& g = *parts.front().graph;
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.graph != &g) throw DimensionError("concat_cols: operands on different graphs");
    if (p.rows() != r) detail::shape_fail("concat_cols", parts.front().value(), p.value());
    total += p.cols();
    rg = rg || g.requires_grad(p);
  }
  Tensor<T> out = Tensor<T>::matrix(r, total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    const std::size_t c = pv.cols();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(pv.data() + i * c, c, out.data() + i * total + off);
    off += c;
  }
  return g.push("concat_cols", std::move(out), rg, [parts, r, total](Graph<T>& gr, const Tensor<T>& og) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t c = gr.value(p).cols();
      if (gr.requires_grad(p)) {
        auto& gp = gr.grad_buffer(p.id);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += og[i * total + off + j];
      }
      off += c;
    }
  });
}

/// Vertical concatenation of equal-column operands.
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  Graph<T>& g = *parts.front().graph;
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.graph != &g) throw DimensionError("concat_rows: operands on different graphs");
    if (p.cols() != c) detail::shape_fail("concat_rows", parts.front().value(), p.value());
    total += p.rows();
    rg = rg || g.requires_grad(p);
  }
  Tensor<T> out = Tensor<T>::matrix(total, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    std::copy(pv.values().begin(), pv.values().end(), out.data() + off);
    off += pv.size();
  }
  return g.push("concat_rows", std::move(out), rg, [parts](Graph<T>& gr, const Tensor<T>& og) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t n = gr.value(p).size();
      if (gr.requires_grad(p)) {
        auto& gp = gr.grad_buffer(p.id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += og[off + i];
      }
      off += n;
    }
  });
}

/// Columns [begin, end) of x.
template <class T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
  Graph<T>& g = *x.graph;
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (begin > end || end > c) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of " + std::to_string(c) + " columns");
  }
  const std::size_t w = end - begin;
  Tensor<T> out = Tensor<T>::matrix(r, w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(xv.data() + i * c + begin, w, out.data() + i * w);
  return g.push("slice_cols", std::move(out), g.requires_grad(x), [x, begin, w, r, c](Graph<T>& gr, const Tensor<T>& og) {
    auto& gx = gr.grad_buffer(x.id);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * c + begin + j] += og[i * w + j];
  });
}

// ---------------------------------------------------------------------------
// Convolution

/// 1D convolution over a channels x length signal.
/// weight: out_channels x (in_channels * kernel), laid out [o][c][k].
/// bias: 1 x out_channels. Zero padding of `padding` on both ends.
template <class T>
Var<T> conv1d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t kernel, std::size_t padding) {
  detail::same_graph("conv1d", x, weight);
  detail::same_graph("conv1d", x, bias);
  Graph<T>& g = *x.graph;
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const std::size_t cin = xv.rows(), len = xv.cols();
  const std::size_t cout = wv.rows();
  if (kernel == 0 || wv.cols() != cin * kernel || bias.value().size() != cout) {
    detail::shape_fail("conv1d", xv, wv);
  }
  if (len + 2 * padding < kernel) throw DimensionError("conv1d: kernel longer than padded input");
  const std::size_t lout = len + 2 * padding - kernel + 1;
  const auto& bv = bias.value();
  Tensor<T> out = Tensor<T>::matrix(cout, lout);
  auto at = [&](std::size_t c, std::ptrdiff_t t) -> T {
    return (t < 0 || t >= static_cast<std::ptrdiff_t>(len)) ? T(0) : xv[c * len + static_cast<std::size_t>(t)];
  };
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t t = 0; t < lout; ++t) {
      T acc = bv[o];
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t k = 0; k < kernel; ++k)
          acc += wv[o * cin * kernel + c * kernel + k] *
                 at(c, static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(padding));
      out[o * lout + t] = acc;
    }
  }
  const bool rg = g.requires_grad(x) || g.requires_grad(weight) || g.requires_grad(bias);
  return g.push("conv1d", std::move(out), rg,
                [x, weight, bias, kernel, padding, cin, len, cout, lout](Graph<T>& gr, const Tensor<T>& og) {
                  const auto& xv = gr.value(x);
                  const auto& wv = gr.value(weight);
                  Tensor<T>* gx = gr.requires_grad(x) ? &gr.grad_buffer(x.id) : nullptr;
                  Tensor<T>* gw = gr.requires_grad(weight) ? &gr.grad_buffer(weight.id) : nullptr;
                  Tensor<T>* gb = gr.requires_grad(bias) ? &gr.grad_buffer(bias.id) : nullptr;
                  for (std::size_t o = 0; o < cout; ++o) {
                    for (std::size_t t = 0; t < lout; ++t) {
                      const T d = og[o * lout + t];
                      if (gb) (*gb)[o] += d;
                      for (std::size_t c = 0; c < cin; ++c) {
                        for (std::size_t k = 0; k < kernel; ++k) {
                          const auto pos = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(padding);
                          if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(len)) continue;
                          const std::size_t xi = c * len + static_cast<std::size_t>(pos);
                          const std::size_t wi = o * cin * kernel + c * kernel + k;
                          if (gw) (*gw)[wi] += d * xv[xi];
                          if (gx) (*gx)[xi] += d * wv[wi];
                        }
                      }
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Losses

/// Summed token cross-entropy of logits[n x V] against targets; rows whose
/// target equals ignore_id contribute nothing.
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets, int ignore_id = -1) {
  Graph<T>& g = *logits.graph;
  const auto& lv = logits.value();
  const std::size_t r = lv.rows(), c = lv.cols();
  if (targets.size() != r) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(r) +
                         " rows");
  }
  Tensor<T> logp = detail::row_log_softmax(lv);
  T loss = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] == ignore_id) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
    }
    loss -= logp[i * c + targets[i]];
  }
  return g.push("cross_entropy", Tensor<T>::scalar(loss), g.requires_grad(logits),
                [logits, targets, ignore_id, logp = std::move(logp), r, c](Graph<T>& gr, const Tensor<T>& og) {
                  auto& gl = gr.grad_buffer(logits.id);
                  for (std::size_t i = 0; i < r; ++i) {
                    if (targets[i] == ignore_id) continue;
                    for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += og[0] * std::exp(logp[i * c + j]);
                    gl[i * c + targets[i]] -= og[0];
                  }
                });
}

/// -sum_t log softmax(logits)[t] over a multiset of ids, logits a single row.
template <class T>
Var<T> bag_nll(Var<T> logits, const std::vector<int>& ids) {
  Graph<T>& g = *logits.graph;
  const auto& lv = logits.value();
  if (lv.rows() != 1) throw DimensionError("bag_nll: logits must be a single row");
  const std::size_t c = lv.cols();
  Tensor<T> logp = detail::row_log_softmax(lv);
  T loss = 0;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c) throw DimensionError("bag_nll: id out of range");
    loss -= logp[id];
  }
  return g.push("bag_nll", Tensor<T>::scalar(loss), g.requires_grad(logits),
                [logits, ids, logp = std::move(logp), c](Graph<T>& gr, const Tensor<T>& og) {
                  auto& gl = gr.grad_buffer(logits.id);
                  const T n = static_cast<T>(ids.size());
                  for (std::size_t j = 0; j < c; ++j) gl[j] += og[0] * n * std::exp(logp[j]);
                  for (int id : ids) gl[id] -= og[0];
                });
}

}  // namespace uacvae
