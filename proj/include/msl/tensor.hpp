#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace msl {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);  // validates extents >= 1
std::string shape_str(const Shape& shape);

// Thrown by ops that receive non-finite values where the math forbids them.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized on first accumulation
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backward;

  double* ensure_grad();
  void accumulate(const double* g, size_t n);
};

}  // namespace detail

// Scoped switch that disables graph construction; used for inference and
// finite-difference probes. Nestable.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool active();
};

// Dense 64-bit float tensor with reverse-mode autodiff. A Tensor is a cheap
// handle onto a graph node; ops build an acyclic graph whose backward pass
// visits each node exactly once and accumulates into leaf .grad buffers.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double fill);
  static Tensor from(const Shape& shape, std::vector<double> values);
  static Tensor randn(const Shape& shape, uint64_t seed, double scale = 1.0);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int rank() const;
  int64_t extent(int axis) const;

  const std::vector<double>& values() const;
  std::vector<double>& mutable_values();  // leaf edits (optimizer updates)
  double scalar() const;                  // requires numel() == 1
  double at(int64_t i) const;
  double at(int64_t i, int64_t j) const;

  Tensor& set_requires_grad(bool on = true);
  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws when absent
  void zero_grad();

  Tensor clone() const;  // deep copy of values, fresh leaf

  detail::NodePtr node() const { return node_; }
  static Tensor wrap(detail::NodePtr n);

 private:
  detail::NodePtr node_;
};

// ===== ops =====
// All ops validate shapes and throw std::invalid_argument on mismatch.
// Broadcasting is deliberately absent except add_bias (vector over the last
// axis); everything else is explicit.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double c);
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor gelu(const Tensor& a);
Tensor elu1p(const Tensor& a);  // x >= 0 ? x + 1 : exp(x); positive, C1
Tensor softmax(const Tensor& a, int axis);
Tensor causal_softmax_rows(const Tensor& scores);  // [T,T], row i over 0..i
Tensor causal_linear_weights(const Tensor& phi_q, const Tensor& phi_k);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets,
                     const std::vector<uint8_t>& mask);
Tensor sum(const Tensor& a);
Tensor row_sums(const Tensor& a);                // [m,n] -> [m]
Tensor scale_rows(const Tensor& a, const Tensor& r);
Tensor recip_eps(const Tensor& a, double eps);   // 1 / (a + eps)
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor slice_rows(const Tensor& a, int64_t start, int64_t len);
Tensor slice_cols(const Tensor& a, int64_t start, int64_t len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor embed_rows(const Tensor& table, const std::vector<int64_t>& ids);
Tensor dropout(const Tensor& a, double rate, uint64_t seed);

// Reverse-mode pass from a scalar loss. Gradients accumulate across calls
// until zero_grad; each graph node's backward runs at most once per pass.
void backward(const Tensor& loss);

// Central-difference check of every element of every grad-carrying input.
// Returns max over elements of |analytic - fd| / max(|analytic|, |fd|, 1e-8).
double grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    std::vector<Tensor> inputs, double eps = 1e-4);

}  // namespace msl
