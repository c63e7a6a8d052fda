#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace hlora {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t numel(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // persistent, accumulated across backward sweeps
  bool requires_grad = false;
  bool needs_grad = false;  // true if this node or any ancestor requires grad
  std::uint64_t seq = 0;    // creation order; operands always precede results
  std::vector<std::shared_ptr<Node>> parents;
  // Pushes this node's cotangent into the parents' cotangent buffers.
  // A null entry means that parent does not need a gradient.
  std::function<void(const std::vector<double>&,
                     const std::vector<std::vector<double>*>&)>
      backprop;
};

}  // namespace detail

// Dense 64-bit tensor (rank 0/1/2 in practice) recorded on an implicit tape.
// Copies share the underlying node; use clone() for a detached value copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->values.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }

  std::vector<double>& values() { return node_->values; }
  const std::vector<double>& values() const { return node_->values; }
  double item() const;

  double operator()(std::size_t i, std::size_t j) const {
    return node_->values[i * cols() + j];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg);
  bool needs_grad() const { return node_->needs_grad; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Accumulated gradient; zeros if no backward sweep has touched this tensor.
  std::vector<double> grad() const;
  void zero_grad();

  // Detached copy of the values (new leaf, no history).
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Reverse sweep from a scalar loss. Gradients of requires_grad leaves are
// accumulated additively; run zero_grad between independent passes.
void backward(const Tensor& loss);

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);      // elementwise
Tensor scale(const Tensor& a, double c);           // constant scalar
Tensor scalar_mul(const Tensor& a, const Tensor& s);  // s has one element
Tensor add_rowvec(const Tensor& a, const Tensor& bias);  // bias over rows
Tensor col_scale(const Tensor& a, const Tensor& e);      // a * diag(e)
Tensor silu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor clip(const Tensor& a, double lo, double hi);
Tensor minimum(const Tensor& a, const Tensor& b);  // ties route grad to a
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor causal_softmax_rows(const Tensor& a);  // row i attends to cols <= i
Tensor layer_norm_rows(const Tensor& a, double eps = 1e-5);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor l1_norm(const Tensor& a);
// Mean cross-entropy of row-wise logits against integer targets; target -1
// is ignored (padding).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
// out[i] = a(i, idx[i])
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
// Row lookup: out row i = table row ids[i]. Gradient scatter-adds into table.
Tensor embed_rows(const Tensor& table, const std::vector<int>& ids);

// Max relative error between the analytic gradient of f at x and central
// finite differences with the given step. f must rebuild its graph from the
// current values of x on every call.
double finite_difference_check(const std::function<Tensor()>& f, Tensor x,
                               double step);

// splitmix64 over a key tuple; used for counter-based deterministic draws.
std::uint64_t mix64(std::uint64_t a, std::uint64_t b = 0x9e3779b97f4a7c15ull,
                    std::uint64_t c = 0xbf58476d1ce4e5b9ull);

}  // namespace hlora
