#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "vclip/errors.hpp"
#include "vclip/tensor.hpp"

namespace vclip {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
// is already a topological order and backward walks it in reverse.
class Graph {
 public:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    Tensor aux;
    bool requires_grad = false;
    std::string name;  // set for parameter leaves
    std::function<void(Graph&, Node&)> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push_leaf("const", std::move(value), false, {}); }

  Var leaf(Tensor value, bool requires_grad, std::string name = {}) {
    return push_leaf("leaf", std::move(value), requires_grad, std::move(name));
  }

  // Named leaves are deduplicated so a parameter used many times in one
  // forward pass is a single node that accumulates every contribution.
  Var param(const std::string& name, const Tensor& value, bool trainable) {
    if (auto it = params_.find(name); it != params_.end()) return Var{this, it->second};
    Var v = leaf(value, trainable, name);
    params_.emplace(name, v.id);
    return v;
  }

  Var push(std::string op, std::vector<Var> inputs, Tensor value,
           std::function<void(Graph&, Node&)> backward, Tensor aux = {}) {
    Node n;
    n.op = std::move(op);
    for (const auto& in : inputs) {
      if (in.graph != this) throw ContractError("variable belongs to another graph");
      n.inputs.push_back(in.id);
      n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    n.value = std::move(value);
    n.aux = std::move(aux);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  // Adds `delta` into the gradient slot of input `which` of node `n`, if that
  // input takes part in differentiation.
  Tensor* grad_slot(const Node& n, std::size_t which) {
    Node& in = nodes_[n.inputs[which]];
    if (!in.requires_grad) return nullptr;
    if (in.grad.numel() == 0) in.grad = Tensor(in.value.shape(), 0.0);
    return &in.grad;
  }

  // Runs reverse accumulation from a scalar node. Returns the gradients of
  // every named leaf that requires a gradient; frozen leaves get no entry.
  std::map<std::string, Tensor> backward(Var loss) {
    if (loss.graph != this) throw ContractError("loss belongs to another graph");
    Node& root = nodes_[loss.id];
    if (root.value.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(root.value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor();
    std::map<std::string, Tensor> out;
    if (!root.requires_grad) return out;
    root.grad = Tensor(root.value.shape(), 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.numel() == 0 || !n.backward) continue;
      n.backward(*this, n);
    }
    for (const auto& [name, id] : params_) {
      const Node& n = nodes_[id];
      if (!n.requires_grad) continue;
      out.emplace(name, n.grad.numel() ? n.grad : Tensor(n.value.shape(), 0.0));
    }
    return out;
  }

  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }

 private:
  Var push_leaf(std::string op, Tensor value, bool requires_grad, std::string name) {
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
};

inline const Tensor& Var::value() const { return graph->node(id).value; }
inline bool Var::requires_grad() const { return graph->node(id).requires_grad; }

namespace detail {

inline void require_same_graph(const Var& a, const Var& b) {
  if (a.graph != b.graph) throw ContractError("variables from different graphs");
}

// c[m×n] += a[m×k] · b[k×n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m×n] += a[m×k] · b[n×k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// c[k×n] += a[m×k]^T · b[m×n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

inline void add_into(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.numel(); ++i) (*dst)[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  detail::require_same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul shape mismatch " + shape_str(A.shape()) + " x " +
                         shape_str(B.shape()));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C({m, n}, 0.0);
  detail::gemm_nn(A.data().data(), B.data().data(), C.data().data(), m, k, n);
  return a.graph->push("matmul", {a, b}, std::move(C), [m, k, n](Graph& g, Graph::Node& self) {
    const Tensor& A = g.node(self.inputs[0]).value;
    const Tensor& B = g.node(self.inputs[1]).value;
    if (Tensor* ga = g.grad_slot(self, 0)) {
      detail::gemm_nt(self.grad.data().data(), B.data().data(), ga->data().data(), m, n, k);
    }
    if (Tensor* gb = g.grad_slot(self, 1)) {
      detail::gemm_tn(A.data().data(), self.grad.data().data(), gb->data().data(), m, k, n);
    }
  });
}

// a · b^T
inline Var matmul_nt(Var a, Var b) {
  detail::require_same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1)) {
    throw DimensionError("matmul_nt shape mismatch " + shape_str(A.shape()) + " x " +
                         shape_str(B.shape()) + "^T");
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(0);
  Tensor C({m, n}, 0.0);
  detail::gemm_nt(A.data().data(), B.data().data(), C.data().data(), m, k, n);
  return a.graph->push("matmul_nt", {a, b}, std::move(C), [m, k, n](Graph& g, Graph::Node& self) {
    const Tensor& A = g.node(self.inputs[0]).value;
    const Tensor& B = g.node(self.inputs[1]).value;
    if (Tensor* ga = g.grad_slot(self, 0)) {
      detail::gemm_nn(self.grad.data().data(), B.data().data(), ga->data().data(), m, n, k);
    }
    if (Tensor* gb = g.grad_slot(self, 1)) {
      detail::gemm_tn(self.grad.data().data(), A.data().data(), gb->data().data(), m, n, k);
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& A = a.value();
  if (A.rank() != 2) throw DimensionError("transpose expects a matrix");
  const std::size_t m = A.dim(0), n = A.dim(1);
  Tensor T({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) T.at(j, i) = A.at(i, j);
  return a.graph->push("transpose", {a}, std::move(T), [m, n](Graph& g, Graph::Node& self) {
    if (Tensor* ga = g.grad_slot(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga->at(i, j) += self.grad.at(j, i);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  detail::require_same_graph(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor C = a.value();
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] += b.value()[i];
  return a.graph->push("add", {a, b}, std::move(C), [](Graph& g, Graph::Node& self) {
    detail::add_into(g.grad_slot(self, 0), self.grad);
    detail::add_into(g.grad_slot(self, 1), self.grad);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_graph(a, b);
  if (a.shape() != b.shape()) throw DimensionError("sub shape mismatch");
  Tensor C = a.value();
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] -= b.value()[i];
  return a.graph->push("sub", {a, b}, std::move(C), [](Graph& g, Graph::Node& self) {
    detail::add_into(g.grad_slot(self, 0), self.grad);
    if (Tensor* gb = g.grad_slot(self, 1)) {
      for (std::size_t i = 0; i < gb->numel(); ++i) (*gb)[i] -= self.grad[i];
    }
  });
}

// Adds a length-n vector to every row of `a` (the only broadcast we support).
inline Var add_row(Var a, Var row) {
  detail::require_same_graph(a, row);
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  if (R.numel() != A.cols()) {
    throw DimensionError("add_row: vector of " + std::to_string(R.numel()) +
                         " does not match trailing axis " + std::to_string(A.cols()));
  }
  Tensor C = A;
  const std::size_t rows = A.rows(), cols = A.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) C[r * cols + c] += R[c];
  return a.graph->push("add_row", {a, row}, std::move(C), [rows, cols](Graph& g, Graph::Node& self) {
    detail::add_into(g.grad_slot(self, 0), self.grad);
    if (Tensor* gr = g.grad_slot(self, 1)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*gr)[c] += self.grad[r * cols + c];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor C = a.value();
  for (auto& v : C.data()) v *= s;
  return a.graph->push("scale", {a}, std::move(C), [s](Graph& g, Graph::Node& self) {
    if (Tensor* ga = g.grad_slot(self, 0)) {
      for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += s * self.grad[i];
    }
  });
}

// a * s where s is a one-element tensor.
inline Var mul_scalar(Var a, Var s) {
  detail::require_same_graph(a, s);
  if (s.value().numel() != 1) throw DimensionError("mul_scalar expects a scalar");
  const double sv = s.value()[0];
  Tensor C = a.value();
  for (auto& v : C.data()) v *= sv;
  return a.graph->push("mul_scalar", {a, s}, std::move(C), [sv](Graph& g, Graph::Node& self) {
    const Tensor& A = g.node(self.inputs[0]).value;
    if (Tensor* ga = g.grad_slot(self, 0)) {
      for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += sv * self.grad[i];
    }
    if (Tensor* gs = g.grad_slot(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < A.numel(); ++i) acc += A[i] * self.grad[i];
      (*gs)[0] += acc;
    }
  });
}

inline Var exp(Var a) {
  Tensor C = a.value();
  for (auto& v : C.data()) v = std::exp(v);
  return a.graph->push("exp", {a}, std::move(C), [](Graph& g, Graph::Node& self) {
    if (Tensor* ga = g.grad_slot(self, 0)) {
      for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += self.value[i] * self.grad[i];
    }
  });
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// Tanh approximation of GELU.
inline Var gelu(Var a) {
  const Tensor& X = a.value();
  Tensor C(X.shape());
  for (std::size_t i = 0; i < X.numel(); ++i) {
    const double x = X[i];
    C[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
  }
  return a.graph->push("gelu", {a}, std::move(C), [](Graph& g, Graph::Node& self) {
    const Tensor& X = g.node(self.inputs[0]).value;
    if (Tensor* ga = g.grad_slot(self, 0)) {
      for (std::size_t i = 0; i < X.numel(); ++i) {
        const double x = X[i];
        const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
        const double d = 0.5 * (1.0 + t) +
                         0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
        (*ga)[i] += d * self.grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing

inline Var reshape(Var a, Shape shape) {
  Tensor C = a.value().reshaped(std::move(shape));
  return a.graph->push("reshape", {a}, std::move(C), [](Graph& g, Graph::Node& self) {
    detail::add_into(g.grad_slot(self, 0), self.grad);
  });
}

// Stacks row blocks of equal width. Rank-1 inputs count as one row.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require_same_graph(parts[0], p);
    if (p.value().cols() != cols) throw DimensionError("concat_rows width mismatch");
    rows += p.value().rows();
  }
  Tensor C({rows, cols});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), C.data().begin() + off);
    off += p.value().numel();
  }
  return parts[0].graph->push("concat_rows", parts, std::move(C), [](Graph& g, Graph::Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      const std::size_t n = g.node(self.inputs[i]).value.numel();
      if (Tensor* gi = g.grad_slot(self, i)) {
        for (std::size_t j = 0; j < n; ++j) (*gi)[j] += self.grad[off + j];
      }
      off += n;
    }
  });
}

// Rows [begin, end) of a matrix.
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  if (begin >= end || end > A.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + std::to_string(A.rows()) + " rows");
  }
  const std::size_t cols = A.cols();
  Tensor C({end - begin, cols},
           std::vector<double>(A.data().begin() + begin * cols, A.data().begin() + end * cols));
  return a.graph->push("slice_rows", {a}, std::move(C), [begin, cols](Graph& g, Graph::Node& self) {
    if (Tensor* ga = g.grad_slot(self, 0)) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i) (*ga)[begin * cols + i] += self.grad[i];
    }
  });
}

// Rows picked by index (repeats allowed); gradients scatter-add back.
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Tensor& A = a.value();
  const std::size_t cols = A.cols();
  if (index.empty()) throw DimensionError("gather_rows with no indices");
  Tensor C({index.size(), cols});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= A.rows()) throw DimensionError("gather_rows index out of range");
    std::copy_n(A.data().begin() + index[i] * cols, cols, C.data().begin() + i * cols);
  }
  return a.graph->push("gather_rows", {a}, std::move(C),
                       [index = std::move(index), cols](Graph& g, Graph::Node& self) {
                         if (Tensor* ga = g.grad_slot(self, 0)) {
                           for (std::size_t i = 0; i < index.size(); ++i)
                             for (std::size_t c = 0; c < cols; ++c)
                               (*ga)[index[i] * cols + c] += self.grad[i * cols + c];
                         }
                       });
}

inline Var mean_rows(Var a) {
  const Tensor& A = a.value();
  const std::size_t rows = A.rows(), cols = A.cols();
  Tensor C({1, cols}, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) C[c] += A[r * cols + c];
  for (auto& v : C.data()) v /= static_cast<double>(rows);
  return a.graph->push("mean_rows", {a}, std::move(C), [rows, cols](Graph& g, Graph::Node& self) {
    if (Tensor* ga = g.grad_slot(self, 0)) {
      const double inv = 1.0 / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += inv * self.grad[c];
    }
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph->push("sum", {a}, Tensor::scalar(s), [](Graph& g, Graph::Node& self) {
    if (Tensor* ga = g.grad_slot(self, 0)) {
      for (auto& v : ga->data()) v += self.grad[0];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention

inline constexpr double kLayerNormEps = 1e-5;

// Per-row normalization over the trailing axis followed by the affine map.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps) {
  detail::require_same_graph(x, gamma);
  detail::require_same_graph(x, beta);
  const Tensor& X = x.value();
  const std::size_t rows = X.rows(), d = X.cols();
  if (gamma.value().numel() != d || beta.value().numel() != d) {
    throw DimensionError("layer_norm: gamma/beta length does not match D=" + std::to_string(d));
  }
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  Tensor Y(X.shape());
  // aux holds x̂ per element followed by 1/σ per row.
  Tensor aux({rows * d + rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    aux[rows * d + r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (xr[c] - mean) * inv;
      aux[r * d + c] = xh;
      Y[r * d + c] = G[c] * xh + B[c];
    }
  }
  return x.graph->push(
      "layer_norm", {x, gamma, beta}, std::move(Y),
      [rows, d](Graph& g, Graph::Node& self) {
        const Tensor& G = g.node(self.inputs[1]).value;
        const Tensor& aux = self.aux;
        if (Tensor* gg = g.grad_slot(self, 1)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) (*gg)[c] += self.grad[r * d + c] * aux[r * d + c];
        }
        if (Tensor* gb = g.grad_slot(self, 2)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) (*gb)[c] += self.grad[r * d + c];
        }
        if (Tensor* gx = g.grad_slot(self, 0)) {
          for (std::size_t r = 0; r < rows; ++r) {
            const double inv = aux[rows * d + r];
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dxh = self.grad[r * d + c] * G[c];
              m1 += dxh;
              m2 += dxh * aux[r * d + c];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
              const double dxh = self.grad[r * d + c] * G[c];
              (*gx)[r * d + c] += inv * (dxh - m1 - aux[r * d + c] * m2);
            }
          }
        }
      },
      std::move(aux));
}

namespace detail {

inline void softmax_row(const double* x, double* y, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    s += y[i];
  }
  for (std::size_t i = 0; i < n; ++i) y[i] /= s;
}

}  // namespace detail

// Softmax over the trailing axis, max-shifted.
inline Var softmax(Var x) {
  const Tensor& X = x.value();
  const std::size_t rows = X.rows(), n = X.cols();
  Tensor Y(X.shape());
  for (std::size_t r = 0; r < rows; ++r)
    detail::softmax_row(X.data().data() + r * n, Y.data().data() + r * n, n);
  return x.graph->push("softmax", {x}, std::move(Y), [rows, n](Graph& g, Graph::Node& self) {
    if (Tensor* gx = g.grad_slot(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += self.grad[r * n + c] * self.value[r * n + c];
        for (std::size_t c = 0; c < n; ++c)
          (*gx)[r * n + c] += self.value[r * n + c] * (self.grad[r * n + c] - dot);
      }
    }
  });
}

// Scaled dot-product attention over `heads` equal slices of the width.
// key_mask (optional, one flag per key row) excludes keys from every query.
// The node's aux tensor holds the probabilities, shape heads×nq×nk.
inline Var attention(Var q, Var k, Var v, std::size_t heads,
                     const std::vector<char>& key_mask = {}) {
  detail::require_same_graph(q, k);
  detail::require_same_graph(q, v);
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  const std::size_t nq = Q.rows(), nk = K.rows(), d = Q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by heads=" +
                      std::to_string(heads));
  }
  if (K.cols() != d || V.cols() != d || V.rows() != nk) {
    throw DimensionError("attention q/k/v shape mismatch");
  }
  if (!key_mask.empty() && key_mask.size() != nk) throw DimensionError("key mask length");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor P({heads, nq, nk});
  Tensor O({nq, d}, 0.0);
  std::vector<double> logits(nk);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      const double* qi = Q.data().data() + i * d + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < nk; ++j) {
        if (!key_mask.empty() && !key_mask[j]) {
          logits[j] = -std::numeric_limits<double>::infinity();
          continue;
        }
        any = true;
        const double* kj = K.data().data() + j * d + h * dh;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        logits[j] = s * sc;
        // NaN logits are kept so they propagate to the loss.
        mx = std::isnan(logits[j]) ? logits[j] : std::max(mx, logits[j]);
      }
      if (!any) throw ContractError("attention row has no unmasked key");
      double z = 0.0;
      double* pi = P.data().data() + (h * nq + i) * nk;
      for (std::size_t j = 0; j < nk; ++j) {
        pi[j] = logits[j] == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(logits[j] - mx);
        z += pi[j];
      }
      double* oi = O.data().data() + i * d + h * dh;
      for (std::size_t j = 0; j < nk; ++j) {
        pi[j] /= z;
        if (pi[j] == 0.0) continue;
        const double* vj = V.data().data() + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += pi[j] * vj[c];
      }
    }
  }
  return q.graph->push(
      "attention", {q, k, v}, std::move(O),
      [heads, nq, nk, d, dh, sc](Graph& g, Graph::Node& self) {
        const Tensor& Q = g.node(self.inputs[0]).value;
        const Tensor& K = g.node(self.inputs[1]).value;
        const Tensor& V = g.node(self.inputs[2]).value;
        const Tensor& P = self.aux;
        Tensor* gq = g.grad_slot(self, 0);
        Tensor* gk = g.grad_slot(self, 1);
        Tensor* gv = g.grad_slot(self, 2);
        std::vector<double> dp(nk);
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < nq; ++i) {
            const double* pi = P.data().data() + (h * nq + i) * nk;
            const double* doi = self.grad.data().data() + i * d + h * dh;
            double dot = 0.0;
            for (std::size_t j = 0; j < nk; ++j) {
              const double* vj = V.data().data() + j * d + h * dh;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
              dp[j] = s;
              dot += s * pi[j];
              if (gv && pi[j] != 0.0) {
                double* gvj = gv->data().data() + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += pi[j] * doi[c];
              }
            }
            const double* qi = Q.data().data() + i * d + h * dh;
            for (std::size_t j = 0; j < nk; ++j) {
              if (pi[j] == 0.0) continue;
              const double ds = pi[j] * (dp[j] - dot) * sc;
              const double* kj = K.data().data() + j * d + h * dh;
              if (gq) {
                double* gqi = gq->data().data() + i * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
              }
              if (gk) {
                double* gkj = gk->data().data() + j * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      },
      std::move(P));
}

// Probabilities recorded by an attention node (heads×nq×nk).
inline const Tensor& attention_probs(Var attn_out) {
  const auto& n = attn_out.graph->node(attn_out.id);
  if (n.op != "attention") throw ContractError("not an attention node");
  return n.aux;
}

// Each row scaled to unit L2 norm. Zero rows are a degenerate input.
inline Var normalize_rows(Var x) {
  const Tensor& X = x.value();
  const std::size_t rows = X.rows(), n = X.cols();
  Tensor Y(X.shape());
  Tensor norms({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += X[r * n + c] * X[r * n + c];
    const double nr = std::sqrt(s);
    if (nr == 0.0) throw DegenerateInputError("cannot normalize a zero vector");
    norms[r] = nr;
    for (std::size_t c = 0; c < n; ++c) Y[r * n + c] = X[r * n + c] / nr;
  }
  return x.graph->push(
      "normalize_rows", {x}, std::move(Y),
      [rows, n](Graph& g, Graph::Node& self) {
        if (Tensor* gx = g.grad_slot(self, 0)) {
          for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < n; ++c) dot += self.value[r * n + c] * self.grad[r * n + c];
            for (std::size_t c = 0; c < n; ++c) {
              (*gx)[r * n + c] +=
                  (self.grad[r * n + c] - self.value[r * n + c] * dot) / self.aux[r];
            }
          }
        }
      },
      std::move(norms));
}

// mean over rows r of  -Σ_c w[r,c] · log softmax(logits[r])[c]
inline Var soft_cross_entropy(Var logits, const Tensor& weights) {
  const Tensor& X = logits.value();
  const std::size_t rows = X.rows(), n = X.cols();
  if (weights.rows() != rows || weights.cols() != n) {
    throw DimensionError("cross entropy weights shape mismatch");
  }
  Tensor P(X.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data().data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, xr[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(xr[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) {
      P[r * n + c] = std::exp(xr[c] - lse);
      loss -= weights[r * n + c] * (xr[c] - lse);
    }
  }
  loss /= static_cast<double>(rows);
  return logits.graph->push(
      "soft_cross_entropy", {logits}, Tensor::scalar(loss),
      [rows, n, weights](Graph& g, Graph::Node& self) {
        if (Tensor* gx = g.grad_slot(self, 0)) {
          const double up = self.grad[0] / static_cast<double>(rows);
          for (std::size_t r = 0; r < rows; ++r) {
            double wsum = 0.0;
            for (std::size_t c = 0; c < n; ++c) wsum += weights[r * n + c];
            for (std::size_t c = 0; c < n; ++c)
              (*gx)[r * n + c] += up * (self.aux[r * n + c] * wsum - weights[r * n + c]);
          }
        }
      },
      std::move(P));
}

}  // namespace vclip
