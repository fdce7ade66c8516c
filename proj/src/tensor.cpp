#include "msl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "msl/rng.hpp"

namespace msl {

namespace {

thread_local int g_no_grad_depth = 0;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

bool finite(double v) { return std::isfinite(v); }

void check_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                shape_str(t.shape()));
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// ===== raw gemm kernels (row-major) =====

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn_acc(double* __restrict c, const double* __restrict a,
                 const double* __restrict b, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B^T, with B stored as [n,k]
void gemm_nt_acc(double* __restrict c, const double* __restrict a,
                 const double* __restrict b, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C[k,n] += A^T * B, with A stored as [m,k], B as [m,n]
void gemm_tn_acc(double* __restrict c, const double* __restrict a,
                 const double* __restrict b, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < m; ++p) {
    const double* ap = a + p * k;
    const double* bp = b + p * n;
    for (int64_t i = 0; i < k; ++i) {
      const double av = ap[i];
      double* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

using detail::NodePtr;
using detail::TensorNode;

// Builds the result node; parents and the closure are kept only when some
// parent carries grad and grad mode is on.
Tensor make_op(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
               std::function<void(TensorNode&)> bwd) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (!NoGradGuard::active()) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || (p && p->requires_grad);
    if (needs) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward = std::move(bwd);
    }
  }
  return Tensor::wrap(std::move(node));
}

}  // namespace

// ===== shape helpers =====

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e < 1) {
      throw std::invalid_argument("shape: extents must be positive, got " +
                                  shape_str(shape));
    }
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ===== TensorNode =====

double* detail::TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad.data();
}

void detail::TensorNode::accumulate(const double* g, size_t n) {
  ensure_grad();
  for (size_t i = 0; i < n; ++i) grad[i] += g[i];
}

// ===== NoGradGuard =====

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool NoGradGuard::active() { return g_no_grad_depth > 0; }

// ===== Tensor =====

Tensor Tensor::wrap(detail::NodePtr n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(const Shape& shape) {
  auto node = std::make_shared<TensorNode>();
  node->shape = shape;
  node->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  return wrap(std::move(node));
}

Tensor Tensor::full(const Shape& shape, double fill) {
  auto node = std::make_shared<TensorNode>();
  node->shape = shape;
  node->value.assign(static_cast<size_t>(shape_numel(shape)), fill);
  return wrap(std::move(node));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  const int64_t n = shape_numel(shape);
  if (static_cast<int64_t>(values.size()) != n) {
    throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = shape;
  node->value = std::move(values);
  return wrap(std::move(node));
}

Tensor Tensor::randn(const Shape& shape, uint64_t seed, double scale) {
  const int64_t n = shape_numel(shape);
  std::vector<double> v(static_cast<size_t>(n));
  Rng rng(seed);
  for (auto& x : v) x = rng.normal() * scale;
  return from(shape, std::move(v));
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::invalid_argument("Tensor: undefined handle");
  return node_->shape;
}

int64_t Tensor::numel() const { return static_cast<int64_t>(values().size()); }

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int64_t Tensor::extent(int axis) const {
  const Shape& s = shape();
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw std::invalid_argument("Tensor::extent: axis out of range");
  }
  return s[static_cast<size_t>(axis)];
}

const std::vector<double>& Tensor::values() const {
  if (!node_) throw std::invalid_argument("Tensor: undefined handle");
  return node_->value;
}

std::vector<double>& Tensor::mutable_values() {
  if (!node_) throw std::invalid_argument("Tensor: undefined handle");
  return node_->value;
}

double Tensor::scalar() const {
  if (numel() != 1) {
    throw std::invalid_argument("Tensor::scalar: numel " + std::to_string(numel()));
  }
  return values()[0];
}

double Tensor::at(int64_t i) const {
  if (i < 0 || i >= numel()) throw std::out_of_range("Tensor::at: index");
  return values()[static_cast<size_t>(i)];
}

double Tensor::at(int64_t i, int64_t j) const {
  check_rank2(*this, "Tensor::at");
  const int64_t rows = extent(0), cols = extent(1);
  if (i < 0 || i >= rows || j < 0 || j >= cols) {
    throw std::out_of_range("Tensor::at: index out of range");
  }
  return values()[static_cast<size_t>(i * cols + j)];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw std::invalid_argument("Tensor: undefined handle");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::invalid_argument("Tensor::grad: no gradient present");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::clone() const {
  return Tensor::from(shape(), values());
}

// ===== backward =====

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(loss.shape()));
  }
  NodePtr root = loss.node();
  if (!root || !root->requires_grad) return;  // no graph reaches a leaf

  // Iterative post-order DFS; recursion would overflow on long stepwise chains.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* parent = node->parents[idx].get();
      ++idx;
      if (parent && parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ===== ops =====

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw std::invalid_argument("matmul: inner extents differ, " +
                                shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  gemm_nn_acc(out.data(), a.values().data(), b.values().data(), m, k, n);
  NodePtr an = a.node(), bn = b.node();
  return make_op({m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](TensorNode& self) {
    if (an->requires_grad) {
      gemm_nt_acc(an->ensure_grad(), self.grad.data(), bn->value.data(), m, n, k);
    }
    if (bn->requires_grad) {
      gemm_tn_acc(bn->ensure_grad(), an->value.data(), self.grad.data(), m, k, n);
    }
  });
}

Tensor transpose(const Tensor& a) {
  check_rank2(a, "transpose");
  const int64_t m = a.extent(0), n = a.extent(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  const auto& av = a.values();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out[static_cast<size_t>(j * m + i)] = av[static_cast<size_t>(i * n + j)];
  NodePtr an = a.node();
  return make_op({n, m}, std::move(out), {an}, [an, m, n](TensorNode& self) {
    if (!an->requires_grad) return;
    double* g = an->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        g[i * n + j] += self.grad[static_cast<size_t>(j * m + i)];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  NodePtr an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode& self) {
    if (an->requires_grad) an->accumulate(self.grad.data(), self.grad.size());
    if (bn->requires_grad) bn->accumulate(self.grad.data(), self.grad.size());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  NodePtr an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode& self) {
    if (an->requires_grad) an->accumulate(self.grad.data(), self.grad.size());
    if (bn->requires_grad) {
      double* g = bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  NodePtr an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      double* g = an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      double* g = bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  for (auto& v : out) v *= s;
  NodePtr an = a.node();
  return make_op(a.shape(), std::move(out), {an}, [an, s](TensorNode& self) {
    if (!an->requires_grad) return;
    double* g = an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (auto& v : out) v += c;
  NodePtr an = a.node();
  return make_op(a.shape(), std::move(out), {an}, [an](TensorNode& self) {
    if (an->requires_grad) an->accumulate(self.grad.data(), self.grad.size());
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rank() != 1) {
    throw std::invalid_argument("add_bias: bias must be rank-1, got " +
                                shape_str(bias.shape()));
  }
  const int64_t n = bias.extent(0);
  if (a.rank() < 1 || a.shape().back() != n) {
    throw std::invalid_argument("add_bias: last axis of " + shape_str(a.shape()) +
                                " does not match bias " + shape_str(bias.shape()));
  }
  const int64_t rows = a.numel() / n;
  std::vector<double> out(a.values());
  const auto& bv = bias.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(r * n + j)] += bv[static_cast<size_t>(j)];
  NodePtr an = a.node(), bn = bias.node();
  return make_op(a.shape(), std::move(out), {an, bn}, [an, bn, rows, n](TensorNode& self) {
    if (an->requires_grad) an->accumulate(self.grad.data(), self.grad.size());
    if (bn->requires_grad) {
      double* g = bn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < n; ++j) g[j] += self.grad[static_cast<size_t>(r * n + j)];
    }
  });
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (auto& v : out) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  NodePtr an = a.node();
  return make_op(a.shape(), std::move(out), {an}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    double* g = an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double x = an->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

Tensor elu1p(const Tensor& a) {
  std::vector<double> out(a.values());
  for (auto& v : out) v = v >= 0.0 ? v + 1.0 : std::exp(v);
  NodePtr an = a.node();
  return make_op(a.shape(), std::move(out), {an}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    double* g = an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double x = an->value[i];
      g[i] += self.grad[i] * (x >= 0.0 ? 1.0 : std::exp(x));
    }
  });
}

namespace {

// Shared softmax line kernel: max-subtraction, exp, normalize.
void softmax_line(const double* in, double* out, int64_t n, int64_t stride) {
  double mx = in[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i * stride]);
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double e = std::exp(in[i * stride] - mx);
    out[i * stride] = e;
    total += e;
  }
  for (int64_t i = 0; i < n; ++i) out[i * stride] /= total;
}

void softmax_line_backward(const double* y, const double* dy, double* dx, int64_t n,
                           int64_t stride) {
  double dot = 0.0;
  for (int64_t i = 0; i < n; ++i) dot += dy[i * stride] * y[i * stride];
  for (int64_t i = 0; i < n; ++i)
    dx[i * stride] += y[i * stride] * (dy[i * stride] - dot);
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  if (a.rank() < 1 || a.rank() > 2) {
    throw std::invalid_argument("softmax: supports rank 1 or 2, got " +
                                shape_str(a.shape()));
  }
  if (axis < 0 || axis >= a.rank()) throw std::invalid_argument("softmax: bad axis");
  for (double v : a.values()) {
    if (!finite(v)) throw NumericError("softmax: non-finite input");
  }
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  int64_t lines, n, stride, line_step;
  if (a.rank() == 1) {
    lines = 1; n = a.extent(0); stride = 1; line_step = 0;
  } else if (axis == 1) {
    lines = a.extent(0); n = a.extent(1); stride = 1; line_step = n;
  } else {
    lines = a.extent(1); n = a.extent(0); stride = a.extent(1); line_step = 1;
  }
  for (int64_t l = 0; l < lines; ++l) {
    softmax_line(av.data() + l * line_step, out.data() + l * line_step, n, stride);
  }
  NodePtr an = a.node();
  return make_op(a.shape(), std::move(out), {an},
                 [an, lines, n, stride, line_step](TensorNode& self) {
                   if (!an->requires_grad) return;
                   double* g = an->ensure_grad();
                   for (int64_t l = 0; l < lines; ++l) {
                     softmax_line_backward(self.value.data() + l * line_step,
                                           self.grad.data() + l * line_step,
                                           g + l * line_step, n, stride);
                   }
                 });
}

Tensor causal_softmax_rows(const Tensor& scores) {
  check_rank2(scores, "causal_softmax_rows");
  const int64_t t = scores.extent(0);
  if (scores.extent(1) != t) {
    throw std::invalid_argument("causal_softmax_rows: expected square, got " +
                                shape_str(scores.shape()));
  }
  const auto& sv = scores.values();
  std::vector<double> out(sv.size(), 0.0);
  for (int64_t i = 0; i < t; ++i) {
    const double* row = sv.data() + i * t;
    for (int64_t j = 0; j <= i; ++j) {
      if (!finite(row[j])) throw NumericError("causal_softmax_rows: non-finite input");
    }
    softmax_line(row, out.data() + i * t, i + 1, 1);
  }
  NodePtr sn = scores.node();
  return make_op(scores.shape(), std::move(out), {sn}, [sn, t](TensorNode& self) {
    if (!sn->requires_grad) return;
    double* g = sn->ensure_grad();
    for (int64_t i = 0; i < t; ++i) {
      softmax_line_backward(self.value.data() + i * t, self.grad.data() + i * t,
                            g + i * t, i + 1, 1);
    }
  });
}

Tensor causal_linear_weights(const Tensor& phi_q, const Tensor& phi_k) {
  check_rank2(phi_q, "causal_linear_weights");
  check_same_shape(phi_q, phi_k, "causal_linear_weights");
  const int64_t t = phi_q.extent(0), d = phi_q.extent(1);
  const auto& qv = phi_q.values();
  const auto& kv = phi_k.values();
  std::vector<double> out(static_cast<size_t>(t * t), 0.0);
  for (int64_t i = 0; i < t; ++i) {
    const double* qi = qv.data() + i * d;
    for (int64_t s = 0; s <= i; ++s) {
      const double* ks = kv.data() + s * d;
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += qi[j] * ks[j];
      out[static_cast<size_t>(i * t + s)] = dot;
    }
  }
  NodePtr qn = phi_q.node(), kn = phi_k.node();
  return make_op({t, t}, std::move(out), {qn, kn}, [qn, kn, t, d](TensorNode& self) {
    double* gq = qn->requires_grad ? qn->ensure_grad() : nullptr;
    double* gk = kn->requires_grad ? kn->ensure_grad() : nullptr;
    for (int64_t i = 0; i < t; ++i) {
      for (int64_t s = 0; s <= i; ++s) {
        const double g = self.grad[static_cast<size_t>(i * t + s)];
        if (g == 0.0) continue;
        if (gq) {
          const double* ks = kn->value.data() + s * d;
          for (int64_t j = 0; j < d; ++j) gq[i * d + j] += g * ks[j];
        }
        if (gk) {
          const double* qi = qn->value.data() + i * d;
          for (int64_t j = 0; j < d; ++j) gk[s * d + j] += g * qi[j];
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank >= 1 required");
  const int64_t n = x.shape().back();
  if (gain.rank() != 1 || gain.extent(0) != n || bias.rank() != 1 || bias.extent(0) != n) {
    throw std::invalid_argument("layer_norm: gain/bias must be [" + std::to_string(n) +
                                "], got " + shape_str(gain.shape()) + " and " +
                                shape_str(bias.shape()));
  }
  const int64_t rows = x.numel() / n;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<double> out(xv.size());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double iv = 1.0 / std::sqrt(var + eps);
    (*inv)[static_cast<size_t>(r)] = iv;
    for (int64_t j = 0; j < n; ++j) {
      const double xh = (xr[j] - mean) * iv;
      (*xhat)[static_cast<size_t>(r * n + j)] = xh;
      out[static_cast<size_t>(r * n + j)] = gv[static_cast<size_t>(j)] * xh + bv[static_cast<size_t>(j)];
    }
  }
  NodePtr xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_op(x.shape(), std::move(out), {xn, gn, bn},
                 [xn, gn, bn, xhat, inv, rows, n](TensorNode& self) {
    double* gx = xn->requires_grad ? xn->ensure_grad() : nullptr;
    double* gg = gn->requires_grad ? gn->ensure_grad() : nullptr;
    double* gb = bn->requires_grad ? bn->ensure_grad() : nullptr;
    std::vector<double> dxhat(static_cast<size_t>(n));
    for (int64_t r = 0; r < rows; ++r) {
      const double* dy = self.grad.data() + r * n;
      const double* xh = xhat->data() + r * n;
      if (gg || gb) {
        for (int64_t j = 0; j < n; ++j) {
          if (gg) gg[j] += dy[j] * xh[j];
          if (gb) gb[j] += dy[j];
        }
      }
      if (!gx) continue;
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        dxhat[static_cast<size_t>(j)] = dy[j] * gn->value[static_cast<size_t>(j)];
        mean_dxhat += dxhat[static_cast<size_t>(j)];
        mean_dxhat_xhat += dxhat[static_cast<size_t>(j)] * xh[j];
      }
      mean_dxhat /= static_cast<double>(n);
      mean_dxhat_xhat /= static_cast<double>(n);
      const double iv = (*inv)[static_cast<size_t>(r)];
      for (int64_t j = 0; j < n; ++j) {
        gx[r * n + j] += iv * (dxhat[static_cast<size_t>(j)] - mean_dxhat - xh[j] * mean_dxhat_xhat);
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets,
                     const std::vector<uint8_t>& mask) {
  check_rank2(logits, "cross_entropy");
  const int64_t t = logits.extent(0), v = logits.extent(1);
  if (static_cast<int64_t>(targets.size()) != t || static_cast<int64_t>(mask.size()) != t) {
    throw std::invalid_argument("cross_entropy: targets/mask length must be " +
                                std::to_string(t));
  }
  int64_t count = 0;
  for (int64_t i = 0; i < t; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    ++count;
    if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= v) {
      throw std::invalid_argument("cross_entropy: target id " +
                                  std::to_string(targets[static_cast<size_t>(i)]) +
                                  " outside vocab " + std::to_string(v));
    }
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: mask selects no positions");

  const auto& lv = logits.values();
  // Per masked row: logsumexp - target logit. Probabilities cached for backward.
  auto probs = std::make_shared<std::vector<double>>(lv.size(), 0.0);
  double loss = 0.0;
  for (int64_t i = 0; i < t; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const double* row = lv.data() + i * v;
    for (int64_t j = 0; j < v; ++j) {
      if (!finite(row[j])) throw NumericError("cross_entropy: non-finite logit");
    }
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (int64_t j = 0; j < v; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    loss += lse - row[targets[static_cast<size_t>(i)]];
    double* p = probs->data() + i * v;
    for (int64_t j = 0; j < v; ++j) p[j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<double>(count);

  NodePtr ln = logits.node();
  auto tgt = std::make_shared<std::vector<int64_t>>(targets);
  auto msk = std::make_shared<std::vector<uint8_t>>(mask);
  return make_op({1}, {loss}, {ln}, [ln, probs, tgt, msk, t, v, count](TensorNode& self) {
    if (!ln->requires_grad) return;
    double* g = ln->ensure_grad();
    const double go = self.grad[0] / static_cast<double>(count);
    for (int64_t i = 0; i < t; ++i) {
      if (!(*msk)[static_cast<size_t>(i)]) continue;  // masked-out rows get exact zero
      const double* p = probs->data() + i * v;
      double* gr = g + i * v;
      for (int64_t j = 0; j < v; ++j) gr[j] += go * p[j];
      gr[(*tgt)[static_cast<size_t>(i)]] -= go;
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  NodePtr an = a.node();
  return make_op({1}, {total}, {an}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    double* g = an->ensure_grad();
    for (size_t i = 0; i < an->value.size(); ++i) g[i] += self.grad[0];
  });
}

Tensor row_sums(const Tensor& a) {
  check_rank2(a, "row_sums");
  const int64_t m = a.extent(0), n = a.extent(1);
  std::vector<double> out(static_cast<size_t>(m), 0.0);
  const auto& av = a.values();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(i)] += av[static_cast<size_t>(i * n + j)];
  NodePtr an = a.node();
  return make_op({m}, std::move(out), {an}, [an, m, n](TensorNode& self) {
    if (!an->requires_grad) return;
    double* g = an->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) g[i * n + j] += self.grad[static_cast<size_t>(i)];
  });
}

Tensor scale_rows(const Tensor& a, const Tensor& r) {
  check_rank2(a, "scale_rows");
  const int64_t m = a.extent(0), n = a.extent(1);
  if (r.rank() != 1 || r.extent(0) != m) {
    throw std::invalid_argument("scale_rows: scales must be [" + std::to_string(m) +
                                "], got " + shape_str(r.shape()));
  }
  std::vector<double> out(a.values());
  const auto& rv = r.values();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(i * n + j)] *= rv[static_cast<size_t>(i)];
  NodePtr an = a.node(), rn = r.node();
  return make_op(a.shape(), std::move(out), {an, rn}, [an, rn, m, n](TensorNode& self) {
    if (an->requires_grad) {
      double* g = an->ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
          g[i * n + j] += self.grad[static_cast<size_t>(i * n + j)] * rn->value[static_cast<size_t>(i)];
    }
    if (rn->requires_grad) {
      double* g = rn->ensure_grad();
      for (int64_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < n; ++j)
          s += self.grad[static_cast<size_t>(i * n + j)] * an->value[static_cast<size_t>(i * n + j)];
        g[i] += s;
      }
    }
  });
}

Tensor recip_eps(const Tensor& a, double eps) {
  std::vector<double> out(a.values());
  for (auto& v : out) v = 1.0 / (v + eps);
  NodePtr an = a.node();
  return make_op(a.shape(), std::move(out), {an}, [an, eps](TensorNode& self) {
    if (!an->requires_grad) return;
    double* g = an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double d = an->value[i] + eps;
      g[i] -= self.grad[i] / (d * d);
    }
  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: numel mismatch, " + shape_str(a.shape()) +
                                " -> " + shape_str(shape));
  }
  NodePtr an = a.node();
  return make_op(shape, a.values(), {an}, [an](TensorNode& self) {
    if (an->requires_grad) an->accumulate(self.grad.data(), self.grad.size());
  });
}

Tensor slice_rows(const Tensor& a, int64_t start, int64_t len) {
  check_rank2(a, "slice_rows");
  const int64_t m = a.extent(0), n = a.extent(1);
  if (start < 0 || len < 1 || start + len > m) {
    throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") outside " + shape_str(a.shape()));
  }
  const auto& av = a.values();
  std::vector<double> out(av.begin() + start * n, av.begin() + (start + len) * n);
  NodePtr an = a.node();
  return make_op({len, n}, std::move(out), {an}, [an, start, n](TensorNode& self) {
    if (!an->requires_grad) return;
    double* g = an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      g[static_cast<size_t>(start * n) + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, int64_t start, int64_t len) {
  check_rank2(a, "slice_cols");
  const int64_t m = a.extent(0), n = a.extent(1);
  if (start < 0 || len < 1 || start + len > n) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") outside " + shape_str(a.shape()));
  }
  const auto& av = a.values();
  std::vector<double> out(static_cast<size_t>(m * len));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < len; ++j)
      out[static_cast<size_t>(i * len + j)] = av[static_cast<size_t>(i * n + start + j)];
  NodePtr an = a.node();
  return make_op({m, len}, std::move(out), {an}, [an, m, n, start, len](TensorNode& self) {
    if (!an->requires_grad) return;
    double* g = an->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < len; ++j)
        g[i * n + start + j] += self.grad[static_cast<size_t>(i * len + j)];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const int64_t n = parts[0].extent(1);
  int64_t m = 0;
  for (const auto& p : parts) {
    check_rank2(p, "concat_rows");
    if (p.extent(1) != n) {
      throw std::invalid_argument("concat_rows: column mismatch " + shape_str(p.shape()));
    }
    m += p.extent(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(m * n));
  std::vector<NodePtr> nodes;
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += p.numel();
  }
  auto parents = nodes;
  return make_op({m, n}, std::move(out), std::move(parents),
                 [nodes, offsets](TensorNode& self) {
    for (size_t i = 0; i < nodes.size(); ++i) {
      if (!nodes[i]->requires_grad) continue;
      nodes[i]->accumulate(self.grad.data() + offsets[i], nodes[i]->value.size());
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int64_t m = parts[0].extent(0);
  int64_t n = 0;
  for (const auto& p : parts) {
    check_rank2(p, "concat_cols");
    if (p.extent(0) != m) {
      throw std::invalid_argument("concat_cols: row mismatch " + shape_str(p.shape()));
    }
    n += p.extent(1);
  }
  std::vector<double> out(static_cast<size_t>(m * n));
  std::vector<NodePtr> nodes;
  std::vector<int64_t> col_off, widths;
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p.extent(1);
    const auto& pv = p.values();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j)
        out[static_cast<size_t>(i * n + off + j)] = pv[static_cast<size_t>(i * w + j)];
    nodes.push_back(p.node());
    col_off.push_back(off);
    widths.push_back(w);
    off += w;
  }
  auto parents = nodes;
  return make_op({m, n}, std::move(out), std::move(parents),
                 [nodes, col_off, widths, m, n](TensorNode& self) {
    for (size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      double* g = nodes[k]->ensure_grad();
      const int64_t w = widths[k], off = col_off[k];
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < w; ++j)
          g[i * w + j] += self.grad[static_cast<size_t>(i * n + off + j)];
    }
  });
}

Tensor embed_rows(const Tensor& table, const std::vector<int64_t>& ids) {
  check_rank2(table, "embed_rows");
  const int64_t v = table.extent(0), d = table.extent(1);
  const int64_t t = static_cast<int64_t>(ids.size());
  if (t == 0) throw std::invalid_argument("embed_rows: empty id list");
  std::vector<double> out(static_cast<size_t>(t * d), 0.0);
  const auto& tv = table.values();
  for (int64_t i = 0; i < t; ++i) {
    const int64_t id = ids[static_cast<size_t>(i)];
    if (id < -1 || id >= v) {
      throw std::invalid_argument("embed_rows: id " + std::to_string(id) +
                                  " outside table " + shape_str(table.shape()));
    }
    if (id >= 0) {
      std::memcpy(out.data() + i * d, tv.data() + id * d, sizeof(double) * static_cast<size_t>(d));
    }
    // id == -1 emits a zero row and receives no gradient.
  }
  NodePtr tn = table.node();
  auto idv = std::make_shared<std::vector<int64_t>>(ids);
  return make_op({t, d}, std::move(out), {tn}, [tn, idv, t, d](TensorNode& self) {
    if (!tn->requires_grad) return;
    double* g = tn->ensure_grad();
    for (int64_t i = 0; i < t; ++i) {
      const int64_t id = (*idv)[static_cast<size_t>(i)];
      if (id < 0) continue;
      const double* src = self.grad.data() + i * d;
      double* dst = g + id * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Tensor dropout(const Tensor& a, double rate, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return a;
  Rng rng(seed);
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(a.values().size());
  for (auto& m : *mask) m = rng.bernoulli(rate) ? 0.0 : 1.0 / keep;
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  NodePtr an = a.node();
  return make_op(a.shape(), std::move(out), {an}, [an, mask](TensorNode& self) {
    if (!an->requires_grad) return;
    double* g = an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

// ===== grad_check =====

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  std::vector<Tensor> inputs, double eps) {
  for (auto& in : inputs) in.zero_grad();
  Tensor loss = fn(inputs);
  if (loss.numel() != 1) throw std::invalid_argument("grad_check: fn must return a scalar");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    if (!in.requires_grad()) {
      analytic.emplace_back();
      continue;
    }
    analytic.push_back(in.has_grad() ? in.grad()
                                     : std::vector<double>(in.values().size(), 0.0));
  }

  double max_rel = 0.0;
  NoGradGuard ng;
  for (size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    auto& vals = inputs[k].mutable_values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double fp = fn(inputs).scalar();
      vals[i] = orig - eps;
      const double fm = fn(inputs).scalar();
      vals[i] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = analytic[k][i];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace msl
