#include "hlora/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace hlora {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

std::atomic<std::uint64_t> g_seq{1};

NodePtr make_node(Shape shape, std::vector<double> values) {
  for (auto d : shape) {
    if (d == 0)
      throw std::invalid_argument("tensor shape " + shape_str(shape) +
                                  " has a zero extent");
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return n;
}

void check_finite(const Node& n, const char* op) {
  for (double v : n.values) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(op) + ": non-finite result");
    }
  }
}

NodePtr op_node(Shape shape, std::vector<double> values,
                std::vector<NodePtr> parents,
                std::function<void(const std::vector<double>&,
                                   const std::vector<std::vector<double>*>&)>
                    backprop,
                const char* name) {
  auto n = make_node(std::move(shape), std::move(values));
  n->needs_grad = false;
  for (const auto& p : parents) n->needs_grad = n->needs_grad || p->needs_grad;
  n->parents = std::move(parents);
  if (n->needs_grad) n->backprop = std::move(backprop);
  check_finite(*n, name);
  return n;
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined() || t.shape().size() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got " +
                                (t.defined() ? shape_str(t.shape()) : "undefined"));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull;
  z ^= b + 0x9e3779b97f4a7c15ull + (z << 6) + (z >> 2);
  z ^= c + 0x9e3779b97f4a7c15ull + (z << 6) + (z >> 2);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  std::size_t n = numel(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, fill));
  node->requires_grad = requires_grad;
  node->needs_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) +
                                " does not match " +
                                std::to_string(values.size()) + " values");
  }
  auto node = make_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  node->needs_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev,
                     bool requires_grad) {
  std::size_t n = numel(shape);
  std::vector<double> vals(n);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : vals) v = dist(rng);
  return from(std::move(shape), std::move(vals), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item: tensor has " + std::to_string(size()) +
                                " elements");
  }
  return node_->values[0];
}

void Tensor::set_requires_grad(bool rg) {
  if (!node_->parents.empty() && rg) {
    throw std::invalid_argument("set_requires_grad: only leaves may be marked");
  }
  node_->requires_grad = rg;
  node_->needs_grad = rg;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(size(), 0.0); }

Tensor Tensor::clone() const {
  return Tensor::from(shape(), values(), false);
}

// ---- backward -------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  }
  // Collect the reachable subgraph.
  std::vector<Node*> order;
  std::unordered_map<Node*, std::vector<double>> cotangent;
  {
    std::vector<Node*> stack{loss.node()};
    std::unordered_map<Node*, bool> seen;
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      if (seen[n]) continue;
      seen[n] = true;
      if (!n->needs_grad) continue;
      order.push_back(n);
      for (const auto& p : n->parents) stack.push_back(p.get());
    }
  }
  // Creation order is a topological order; sweep results before operands.
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });

  cotangent[loss.node()] = {1.0};
  for (Node* n : order) {
    auto it = cotangent.find(n);
    if (it == cotangent.end()) continue;
    const std::vector<double>& ct = it->second;
    if (n->requires_grad) {
      if (n->grad.empty()) n->grad.assign(n->values.size(), 0.0);
      for (std::size_t i = 0; i < ct.size(); ++i) n->grad[i] += ct[i];
    }
    if (!n->backprop) continue;
    std::vector<std::vector<double>*> parent_ct(n->parents.size(), nullptr);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      Node* p = n->parents[i].get();
      if (!p->needs_grad) continue;
      auto& buf = cotangent[p];
      if (buf.empty()) buf.assign(p->values.size(), 0.0);
      parent_ct[i] = &buf;
    }
    n->backprop(ct, parent_ct);
  }
}

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ, " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (n == 0 || k == 0 || m == 0) {
    throw std::invalid_argument("matmul: zero-extent dimension");
  }
  std::vector<double> out(n * m, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      const double* brow = &bv[p * m];
      double* orow = &out[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += x * brow[j];
    }
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return Tensor(op_node(
      {n, m}, std::move(out), {an, bn},
      [an, bn, n, k, m](const std::vector<double>& g,
                        const std::vector<std::vector<double>*>& pg) {
        const auto& av = an->values;
        const auto& bv = bn->values;
        if (pg[0]) {  // dA = g * B^T
          auto& da = *pg[0];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < m; ++j)
                acc += g[i * m + j] * bv[p * m + j];
              da[i * k + p] += acc;
            }
        }
        if (pg[1]) {  // dB = A^T * g
          auto& db = *pg[1];
          for (std::size_t p = 0; p < k; ++p)
            for (std::size_t i = 0; i < n; ++i) {
              const double x = av[i * k + p];
              for (std::size_t j = 0; j < m; ++j)
                db[p * m + j] += x * g[i * m + j];
            }
        }
      },
      "matmul"));
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = av[i * m + j];
  auto an = a.node_ptr();
  return Tensor(op_node(
      {m, n}, std::move(out), {an},
      [n, m](const std::vector<double>& g,
             const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& da = *pg[0];
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) da[i * m + j] += g[j * n + i];
      },
      "transpose"));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] + b.values()[i];
  return Tensor(op_node(
      a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
      [](const std::vector<double>& g,
         const std::vector<std::vector<double>*>& pg) {
        for (int s = 0; s < 2; ++s)
          if (pg[s])
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[s])[i] += g[i];
      },
      "add"));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] - b.values()[i];
  return Tensor(op_node(
      a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
      [](const std::vector<double>& g,
         const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
      },
      "sub"));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] * b.values()[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return Tensor(op_node(
      a.shape(), std::move(out), {an, bn},
      [an, bn](const std::vector<double>& g,
               const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i)
            (*pg[0])[i] += g[i] * bn->values[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i)
            (*pg[1])[i] += g[i] * an->values[i];
      },
      "mul"));
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
  return Tensor(op_node(
      a.shape(), std::move(out), {a.node_ptr()},
      [c](const std::vector<double>& g,
          const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * c;
      },
      "scale"));
}

Tensor scalar_mul(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) {
    throw std::invalid_argument("scalar_mul: scalar operand has " +
                                std::to_string(s.size()) + " elements");
  }
  const double c = s.values()[0];
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
  auto an = a.node_ptr(), sn = s.node_ptr();
  return Tensor(op_node(
      a.shape(), std::move(out), {an, sn},
      [an, c](const std::vector<double>& g,
              const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * c;
        if (pg[1]) {
          double acc = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i)
            acc += g[i] * an->values[i];
          (*pg[1])[0] += acc;
        }
      },
      "scalar_mul"));
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  require_matrix(a, "add_rowvec");
  if (bias.shape().size() != 1 || bias.size() != a.cols()) {
    throw std::invalid_argument("add_rowvec: bias " + shape_str(bias.shape()) +
                                " does not match matrix " +
                                shape_str(a.shape()));
  }
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out[i * m + j] = a.values()[i * m + j] + bias.values()[j];
  return Tensor(op_node(
      a.shape(), std::move(out), {a.node_ptr(), bias.node_ptr()},
      [n, m](const std::vector<double>& g,
             const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1])
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*pg[1])[j] += g[i * m + j];
      },
      "add_rowvec"));
}

Tensor col_scale(const Tensor& a, const Tensor& e) {
  require_matrix(a, "col_scale");
  if (e.shape().size() != 1 || e.size() != a.cols()) {
    throw std::invalid_argument("col_scale: vector " + shape_str(e.shape()) +
                                " does not match matrix " +
                                shape_str(a.shape()));
  }
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out[i * m + j] = a.values()[i * m + j] * e.values()[j];
  auto an = a.node_ptr(), en = e.node_ptr();
  return Tensor(op_node(
      a.shape(), std::move(out), {an, en},
      [an, en, n, m](const std::vector<double>& g,
                     const std::vector<std::vector<double>*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
              (*pg[0])[i * m + j] += g[i * m + j] * en->values[j];
        if (pg[1])
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
              (*pg[1])[j] += g[i * m + j] * an->values[i * m + j];
      },
      "col_scale"));
}

Tensor silu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.values()[i];
    out[i] = x / (1.0 + std::exp(-x));
  }
  auto an = a.node_ptr();
  return Tensor(op_node(
      a.shape(), std::move(out), {an},
      [an](const std::vector<double>& g,
           const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double x = an->values[i];
          const double s = 1.0 / (1.0 + std::exp(-x));
          (*pg[0])[i] += g[i] * (s + x * s * (1.0 - s));
        }
      },
      "silu"));
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::exp(a.values()[i]);
  auto result = out;
  auto an = a.node_ptr();
  Tensor t(op_node(
      a.shape(), std::move(out), {an},
      [result](const std::vector<double>& g,
               const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i)
          (*pg[0])[i] += g[i] * result[i];
      },
      "exp"));
  return t;
}

Tensor clip(const Tensor& a, double lo, double hi) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(hi, std::max(lo, a.values()[i]));
  auto an = a.node_ptr();
  return Tensor(op_node(
      a.shape(), std::move(out), {an},
      [an, lo, hi](const std::vector<double>& g,
                   const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double x = an->values[i];
          if (x > lo && x < hi) (*pg[0])[i] += g[i];
        }
      },
      "clip"));
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "minimum");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(a.values()[i], b.values()[i]);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return Tensor(op_node(
      a.shape(), std::move(out), {an, bn},
      [an, bn](const std::vector<double>& g,
               const std::vector<std::vector<double>*>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const bool first = an->values[i] <= bn->values[i];
          if (first && pg[0]) (*pg[0])[i] += g[i];
          if (!first && pg[1]) (*pg[1])[i] += g[i];
        }
      },
      "minimum"));
}

namespace {

// Shared softmax backward: dX = P .* (g - rowdot(g, P)) over an allowed span.
Tensor softmax_impl(const Tensor& a, bool causal, const char* name) {
  require_matrix(a, name);
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t span = causal ? std::min(i + 1, m) : m;
    double mx = -1e300;
    for (std::size_t j = 0; j < span; ++j)
      mx = std::max(mx, a.values()[i * m + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < span; ++j) {
      out[i * m + j] = std::exp(a.values()[i * m + j] - mx);
      z += out[i * m + j];
    }
    for (std::size_t j = 0; j < span; ++j) out[i * m + j] /= z;
  }
  auto probs = out;
  return Tensor(op_node(
      a.shape(), std::move(out), {a.node_ptr()},
      [probs, n, m, causal](const std::vector<double>& g,
                            const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t span = causal ? std::min(i + 1, m) : m;
          double dot = 0.0;
          for (std::size_t j = 0; j < span; ++j)
            dot += g[i * m + j] * probs[i * m + j];
          for (std::size_t j = 0; j < span; ++j)
            (*pg[0])[i * m + j] += probs[i * m + j] * (g[i * m + j] - dot);
        }
      },
      name));
}

}  // namespace

Tensor softmax_rows(const Tensor& a) { return softmax_impl(a, false, "softmax"); }

Tensor causal_softmax_rows(const Tensor& a) {
  return softmax_impl(a, true, "causal_softmax");
}

Tensor log_softmax_rows(const Tensor& a) {
  require_matrix(a, "log_softmax");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < m; ++j)
      mx = std::max(mx, a.values()[i * m + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      z += std::exp(a.values()[i * m + j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j)
      out[i * m + j] = a.values()[i * m + j] - lz;
  }
  auto ls = out;
  return Tensor(op_node(
      a.shape(), std::move(out), {a.node_ptr()},
      [ls, n, m](const std::vector<double>& g,
                 const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < n; ++i) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < m; ++j) gsum += g[i * m + j];
          for (std::size_t j = 0; j < m; ++j)
            (*pg[0])[i * m + j] += g[i * m + j] - std::exp(ls[i * m + j]) * gsum;
        }
      },
      "log_softmax"));
}

Tensor layer_norm_rows(const Tensor& a, double eps) {
  require_matrix(a, "layer_norm");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m), means(n), istds(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += a.values()[i * m + j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = a.values()[i * m + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(m);
    const double istd = 1.0 / std::sqrt(var + eps);
    means[i] = mu;
    istds[i] = istd;
    for (std::size_t j = 0; j < m; ++j)
      out[i * m + j] = (a.values()[i * m + j] - mu) * istd;
  }
  auto normed = out;
  return Tensor(op_node(
      a.shape(), std::move(out), {a.node_ptr()},
      [normed, istds, n, m](const std::vector<double>& g,
                            const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < n; ++i) {
          double gsum = 0.0, gysum = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            gsum += g[i * m + j];
            gysum += g[i * m + j] * normed[i * m + j];
          }
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t j = 0; j < m; ++j) {
            (*pg[0])[i * m + j] +=
                istds[i] * (g[i * m + j] - inv_m * gsum -
                            normed[i * m + j] * inv_m * gysum);
          }
        }
      },
      "layer_norm"));
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  std::size_t n = a.size();
  return Tensor(op_node(
      {1}, {acc}, {a.node_ptr()},
      [n](const std::vector<double>& g,
          const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < n; ++i) (*pg[0])[i] += g[0];
      },
      "sum"));
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor l1_norm(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += std::abs(v);
  auto an = a.node_ptr();
  return Tensor(op_node(
      {1}, {acc}, {an},
      [an](const std::vector<double>& g,
           const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < an->values.size(); ++i) {
          const double v = an->values[i];
          (*pg[0])[i] += g[0] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
        }
      },
      "l1_norm"));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.rows(), m = logits.cols();
  if (targets.size() != n) {
    throw std::invalid_argument(
        "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
        std::to_string(n) + " rows");
  }
  std::size_t counted = 0;
  for (int t : targets) {
    if (t >= static_cast<int>(m)) {
      throw std::invalid_argument("cross_entropy: target " + std::to_string(t) +
                                  " out of range for vocab " +
                                  std::to_string(m));
    }
    if (t >= 0) ++counted;
  }
  if (counted == 0) {
    throw std::invalid_argument("cross_entropy: all positions ignored");
  }
  // Row-wise log-softmax, stable.
  std::vector<double> probs(n * m);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < m; ++j)
      mx = std::max(mx, logits.values()[i * m + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      probs[i * m + j] = std::exp(logits.values()[i * m + j] - mx);
      z += probs[i * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) probs[i * m + j] /= z;
    if (targets[i] >= 0)
      loss -= std::log(probs[i * m + static_cast<std::size_t>(targets[i])]);
  }
  loss /= static_cast<double>(counted);
  return Tensor(op_node(
      {1}, {loss}, {logits.node_ptr()},
      [probs, targets, n, m, counted](
          const std::vector<double>& g,
          const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        const double c = g[0] / static_cast<double>(counted);
        for (std::size_t i = 0; i < n; ++i) {
          if (targets[i] < 0) continue;
          for (std::size_t j = 0; j < m; ++j)
            (*pg[0])[i * m + j] += c * probs[i * m + j];
          (*pg[0])[i * m + static_cast<std::size_t>(targets[i])] -= c;
        }
      },
      "cross_entropy"));
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  require_matrix(a, "slice_rows");
  if (r0 >= r1 || r1 > a.rows()) {
    throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) +
                                "," + std::to_string(r1) + ") invalid for " +
                                shape_str(a.shape()));
  }
  const std::size_t m = a.cols(), n = r1 - r0;
  std::vector<double> out(a.values().begin() + static_cast<long>(r0 * m),
                          a.values().begin() + static_cast<long>(r1 * m));
  return Tensor(op_node(
      {n, m}, std::move(out), {a.node_ptr()},
      [r0, n, m](const std::vector<double>& g,
                 const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < n * m; ++i) (*pg[0])[r0 * m + i] += g[i];
      },
      "slice_rows"));
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  require_matrix(a, "slice_cols");
  if (c0 >= c1 || c1 > a.cols()) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) +
                                "," + std::to_string(c1) + ") invalid for " +
                                shape_str(a.shape()));
  }
  const std::size_t n = a.rows(), m = a.cols(), w = c1 - c0;
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j)
      out[i * w + j] = a.values()[i * m + c0 + j];
  return Tensor(op_node(
      {n, w}, std::move(out), {a.node_ptr()},
      [n, m, w, c0](const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j)
            (*pg[0])[i * m + c0 + j] += g[i * w + j];
      },
      "slice_cols"));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
  const std::size_t n = parts[0].rows();
  std::size_t m = 0;
  std::vector<NodePtr> parents;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != n) {
      throw std::invalid_argument("concat_cols: row mismatch " +
                                  shape_str(p.shape()));
    }
    widths.push_back(p.cols());
    m += p.cols();
    parents.push_back(p.node_ptr());
  }
  std::vector<double> out(n * m);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = widths[k];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[i * m + off + j] = parts[k].values()[i * w + j];
    off += w;
  }
  return Tensor(op_node(
      {n, m}, std::move(out), std::move(parents),
      [n, m, widths](const std::vector<double>& g,
                     const std::vector<std::vector<double>*>& pg) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const std::size_t w = widths[k];
          if (pg[k]) {
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < w; ++j)
                (*pg[k])[i * w + j] += g[i * m + off + j];
          }
          off += w;
        }
      },
      "concat_cols"));
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  require_matrix(a, "gather_rows");
  const std::size_t n = a.rows(), m = a.cols();
  if (idx.size() != n) {
    throw std::invalid_argument("gather_rows: " + std::to_string(idx.size()) +
                                " indices for " + std::to_string(n) + " rows");
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] < 0 || idx[i] >= static_cast<int>(m)) {
      throw std::invalid_argument("gather_rows: index " +
                                  std::to_string(idx[i]) + " out of range");
    }
    out[i] = a.values()[i * m + static_cast<std::size_t>(idx[i])];
  }
  return Tensor(op_node(
      {n}, std::move(out), {a.node_ptr()},
      [idx, m](const std::vector<double>& g,
               const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i)
          (*pg[0])[i * m + static_cast<std::size_t>(idx[i])] += g[i];
      },
      "gather_rows"));
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
  require_matrix(table, "embed_rows");
  if (ids.empty()) throw std::invalid_argument("embed_rows: empty id list");
  const std::size_t m = table.cols(), rows = table.rows();
  std::vector<double> out(ids.size() * m);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= static_cast<int>(rows)) {
      throw std::invalid_argument("embed_rows: id " + std::to_string(ids[i]) +
                                  " out of range [0," + std::to_string(rows) +
                                  ")");
    }
    const double* src = &table.values()[static_cast<std::size_t>(ids[i]) * m];
    std::copy(src, src + m, &out[i * m]);
  }
  return Tensor(op_node(
      {ids.size(), m}, std::move(out), {table.node_ptr()},
      [ids, m](const std::vector<double>& g,
               const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < ids.size(); ++i)
          for (std::size_t j = 0; j < m; ++j)
            (*pg[0])[static_cast<std::size_t>(ids[i]) * m + j] += g[i * m + j];
      },
      "embed_rows"));
}

double finite_difference_check(const std::function<Tensor()>& f, Tensor x,
                               double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_difference_check: step must be > 0");
  x.zero_grad();
  Tensor loss = f();
  backward(loss);
  const std::vector<double> analytic = x.grad();
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x.values()[i];
    x.values()[i] = saved + step;
    const double up = f().item();
    x.values()[i] = saved - step;
    const double down = f().item();
    x.values()[i] = saved;
    const double fd = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - fd) /
                       (std::abs(analytic[i]) + std::abs(fd) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace hlora
