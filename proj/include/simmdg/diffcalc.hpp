#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices of
// doubles. Every value is a 2-D matrix; a scalar is 1x1 and a batch of
// vectors is one row per item.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "simmdg/errors.hpp"

namespace simmdg {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  friend bool operator==(const Shape&, const Shape&) = default;
  std::size_t size() const { return rows * cols; }
};

inline std::string to_string(Shape s) {
  std::ostringstream os;
  os << '[' << s.rows << 'x' << s.cols << ']';
  return os.str();
}

/// Dense row-major matrix of 64-bit floats.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape_{rows, cols}, data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : shape_{rows, cols}, data_(std::move(values)) {
    if (data_.size() != rows * cols) {
      throw DimensionError("matrix " + to_string(shape_) + " given " +
                           std::to_string(data_.size()) + " values");
    }
  }

  /// Row vector from a list of values.
  static Matrix row(std::vector<double> values) {
    const auto n = values.size();
    return Matrix(1, n, std::move(values));
  }
  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != m.cols()) throw DimensionError("ragged rows");
      std::copy(rows[r].begin(), rows[r].end(), m.row_span(r).begin());
    }
    return m;
  }
  static Matrix scalar(double v) { return Matrix(1, 1, v); }

  Shape shape() const { return shape_; }
  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.cols + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row_span(std::size_t r) { return {data_.data() + r * shape_.cols, shape_.cols}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * shape_.cols, shape_.cols};
  }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  Shape shape_{};
  std::vector<double> data_;
};

namespace ad {

namespace detail {

struct NodeData {
  Matrix data;
  Matrix grad;  // empty until first accumulation
  std::vector<std::shared_ptr<NodeData>> parents;
  std::function<void(NodeData&)> backprop;
  bool requires_grad = false;
  const char* op = "leaf";

  Matrix& grad_slot() {
    if (grad.empty() && !data.empty()) grad = Matrix(data.rows(), data.cols());
    return grad;
  }
};

}  // namespace detail

/// Handle to a value in the computation graph. Copies share the same node.
class Node {
 public:
  Node() = default;

  /// Trainable leaf.
  static Node parameter(Matrix value) { return make_leaf(std::move(value), true); }
  /// Leaf that never receives gradient.
  static Node constant(Matrix value) { return make_leaf(std::move(value), false); }

  bool valid() const { return static_cast<bool>(p_); }
  Shape shape() const { return p_->data.shape(); }
  const Matrix& value() const { return p_->data; }
  /// Mutable data; only meaningful on leaves (optimizer updates, perturbation tests).
  Matrix& mutable_value() { return p_->data; }
  bool requires_grad() const { return p_->requires_grad; }
  const char* op() const { return p_->op; }

  /// Accumulated gradient; zeros if nothing has flowed here yet.
  const Matrix& grad() const { return p_->grad_slot(); }
  void zero_grad() { p_->grad = Matrix(); }
  double item() const {
    if (shape() != Shape{1, 1}) throw ContractError("item() on non-scalar " + to_string(shape()));
    return p_->data[0];
  }

  bool same_node(const Node& other) const { return p_ == other.p_; }

  // Used by operation implementations.
  static Node make_op(Matrix value, std::vector<Node> parents, const char* op,
                      std::function<void(detail::NodeData&)> backprop) {
    Node n;
    n.p_ = std::make_shared<detail::NodeData>();
    n.p_->data = std::move(value);
    n.p_->op = op;
    for (auto& parent : parents) {
      n.p_->requires_grad = n.p_->requires_grad || parent.requires_grad();
      n.p_->parents.push_back(parent.p_);
    }
    if (n.p_->requires_grad) n.p_->backprop = std::move(backprop);
    return n;
  }
  detail::NodeData& data_ref() const { return *p_; }

 private:
  static Node make_leaf(Matrix value, bool requires_grad) {
    Node n;
    n.p_ = std::make_shared<detail::NodeData>();
    n.p_->data = std::move(value);
    n.p_->requires_grad = requires_grad;
    return n;
  }

  std::shared_ptr<detail::NodeData> p_;

  friend void backward(const Node& root);
};

namespace detail {

inline void require_same(const Node& a, const Node& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

inline Matrix& pgrad(NodeData& self, std::size_t i) { return self.parents[i]->grad_slot(); }
inline bool wants(NodeData& self, std::size_t i) { return self.parents[i]->requires_grad; }

template <typename Fwd, typename Bwd>
Node unary(const Node& a, const char* op, Fwd fwd, Bwd dfdx) {
  Matrix out(a.shape().rows, a.shape().cols);
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return Node::make_op(std::move(out), {a}, op, [dfdx](NodeData& self) {
    const auto& x = self.parents[0]->data;
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * dfdx(x[i], self.data[i]);
  });
}

}  // namespace detail

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
/// calls; call zero_grad on leaves beforehand. Interior gradients are reset
/// on every sweep.
inline void backward(const Node& root) {
  if (!root.valid() || root.shape() != Shape{1, 1}) {
    throw ContractError("backward: root must be a 1x1 scalar, got " +
                        (root.valid() ? to_string(root.shape()) : std::string("null")));
  }
  // Iterative post-order DFS; parents are visited in insertion order so the
  // resulting order depends only on how the graph was built.
  std::vector<detail::NodeData*> order;
  std::vector<std::pair<detail::NodeData*, std::size_t>> stack;
  std::unordered_set<const detail::NodeData*> visited;
  stack.emplace_back(root.p_.get(), 0);
  visited.insert(root.p_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* n : order)
    if (n->backprop) n->grad = Matrix();
  root.p_->grad_slot()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Node matmul(const Node& a, const Node& b) {
  const auto [m, k] = a.shape();
  const auto [k2, n] = b.shape();
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  Matrix out(m, n);
  const auto& A = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A(i, p);
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += aip * B(p, j);
    }
  return Node::make_op(std::move(out), {a, b}, "matmul", [m, k, n](detail::NodeData& self) {
    const auto& A = self.parents[0]->data;
    const auto& B = self.parents[1]->data;
    const auto& G = self.grad;
    if (detail::wants(self, 0)) {
      auto& gA = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += G(i, j) * B(p, j);
          gA(i, p) += s;
        }
    }
    if (detail::wants(self, 1)) {
      auto& gB = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A(i, p);
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gB(p, j) += aip * G(i, j);
        }
    }
  });
}

inline Node transpose(const Node& a) {
  const auto [r, c] = a.shape();
  Matrix out(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a.value()(i, j);
  return Node::make_op(std::move(out), {a}, "transpose", [r, c](detail::NodeData& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g(i, j) += self.grad(j, i);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Node add(const Node& a, const Node& b) {
  detail::require_same(a, b, "add");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return Node::make_op(std::move(out), {a, b}, "add", [](detail::NodeData& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::wants(self, p)) continue;
      auto& g = detail::pgrad(self, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Node sub(const Node& a, const Node& b) {
  detail::require_same(a, b, "sub");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return Node::make_op(std::move(out), {a, b}, "sub", [](detail::NodeData& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Node mul(const Node& a, const Node& b) {
  detail::require_same(a, b, "mul");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return Node::make_op(std::move(out), {a, b}, "mul", [](detail::NodeData& self) {
    const auto& A = self.parents[0]->data;
    const auto& B = self.parents[1]->data;
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A[i];
    }
  });
}

inline Node div(const Node& a, const Node& b) {
  detail::require_same(a, b, "div");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b.value()[i] == 0.0) throw DomainError("div: zero divisor");
    out[i] /= b.value()[i];
  }
  return Node::make_op(std::move(out), {a, b}, "div", [](detail::NodeData& self) {
    const auto& B = self.parents[1]->data;
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / B[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.data[i] / B[i];
    }
  });
}

inline Node scale(const Node& a, double c) {
  return detail::unary(
      a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Node add_scalar(const Node& a, double c) {
  return detail::unary(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

/// relu'(0) is 0.
inline Node relu(const Node& a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Node exp(const Node& a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Node log(const Node& a) {
  for (double x : a.value().values()) {
    if (!(x > 0.0)) throw DomainError("log: non-positive entry " + std::to_string(x));
  }
  return detail::unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// |x| with subgradient 0 at 0.
inline Node abs(const Node& a) {
  return detail::unary(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

/// a (n x c) plus a 1 x c row broadcast over every row.
inline Node add_row(const Node& a, const Node& row) {
  if (row.shape().rows != 1 || row.shape().cols != a.shape().cols) {
    throw DimensionError("add_row: cannot broadcast " + to_string(row.shape()) + " over " +
                         to_string(a.shape()));
  }
  Matrix out = a.value();
  const auto [r, c] = a.shape();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) += row.value()[j];
  return Node::make_op(std::move(out), {a, row}, "add_row", [r, c](detail::NodeData& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad(i, j);
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

/// Concatenates along the column (feature) axis.
inline Node concat(const std::vector<Node>& parts) {
  if (parts.empty()) throw DimensionError("concat: no parts");
  const std::size_t rows = parts.front().shape().rows;
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.shape().rows != rows) {
      throw DimensionError("concat: row count " + to_string(p.shape()) + " vs " +
                           to_string(parts.front().shape()));
    }
    cols += p.shape().cols;
  }
  Matrix out(rows, cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    for (std::size_t i = 0; i < rows; ++i)
      std::copy(p.value().row_span(i).begin(), p.value().row_span(i).end(),
                out.row_span(i).begin() + static_cast<std::ptrdiff_t>(off));
    off += p.shape().cols;
  }
  return Node::make_op(std::move(out), parts, "concat", [offsets, rows](detail::NodeData& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      if (!detail::wants(self, p)) continue;
      auto& g = detail::pgrad(self, p);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) g(i, j) += self.grad(i, offsets[p] + j);
    }
  });
}

/// Columns [begin, begin + count).
inline Node slice_cols(const Node& a, std::size_t begin, std::size_t count) {
  const auto [r, c] = a.shape();
  if (begin + count > c) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + to_string(a.shape()));
  }
  Matrix out(r, count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a.value()(i, begin + j);
  return Node::make_op(std::move(out), {a}, "slice_cols", [begin, count, r](detail::NodeData& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) g(i, begin + j) += self.grad(i, j);
  });
}

/// Splits the feature axis into two equal halves: (first, second).
inline std::pair<Node, Node> slice_halves(const Node& e) {
  const auto d = e.shape().cols;
  if (d % 2 != 0) throw DimensionError("slice_halves: odd width " + to_string(e.shape()));
  return {slice_cols(e, 0, d / 2), slice_cols(e, d / 2, d / 2)};
}

/// Stacks along the row axis.
inline Node vstack(const std::vector<Node>& parts) {
  if (parts.empty()) throw DimensionError("vstack: no parts");
  const std::size_t cols = parts.front().shape().cols;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.shape().cols != cols) {
      throw DimensionError("vstack: column count " + to_string(p.shape()) + " vs " +
                           to_string(parts.front().shape()));
    }
    rows += p.shape().rows;
  }
  Matrix out(rows, cols);
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(at * cols));
    at += p.shape().rows;
  }
  return Node::make_op(std::move(out), parts, "vstack", [](detail::NodeData& self) {
    std::size_t at = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const auto n = self.parents[p]->data.size();
      if (detail::wants(self, p)) {
        auto& g = detail::pgrad(self, p);
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[at + i];
      }
      at += n;
    }
  });
}

/// out row i = a row index[i]. Backward scatter-adds.
inline Node gather_rows(const Node& a, std::vector<std::size_t> index) {
  const auto [r, c] = a.shape();
  Matrix out(index.size(), c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) throw IndexError("gather_rows: row " + std::to_string(index[i]) + " of " + to_string(a.shape()));
    std::copy(a.value().row_span(index[i]).begin(), a.value().row_span(index[i]).end(),
              out.row_span(i).begin());
  }
  return Node::make_op(std::move(out), {a}, "gather_rows",
                       [index = std::move(index), c](detail::NodeData& self) {
                         auto& g = detail::pgrad(self, 0);
                         for (std::size_t i = 0; i < index.size(); ++i)
                           for (std::size_t j = 0; j < c; ++j) g(index[i], j) += self.grad(i, j);
                       });
}

// ---------------------------------------------------------------------------
// Reductions

inline Node sum(const Node& a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  return Node::make_op(Matrix::scalar(s), {a}, "sum", [](detail::NodeData& self) {
    auto& g = detail::pgrad(self, 0);
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
  });
}

inline Node mean(const Node& a) {
  if (a.value().empty()) throw DimensionError("mean: empty operand");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// Per-row sum: (n x c) -> (n x 1).
inline Node sum_rows(const Node& a) {
  const auto [r, c] = a.shape();
  Matrix out(r, 1);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += a.value()(i, j);
  return Node::make_op(std::move(out), {a}, "sum_rows", [r, c](detail::NodeData& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g(i, j) += self.grad[i];
  });
}

/// Sum of squared differences over all entries.
inline Node sq_l2(const Node& a, const Node& b) {
  detail::require_same(a, b, "sq_l2");
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const double d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return Node::make_op(Matrix::scalar(s), {a, b}, "sq_l2", [](detail::NodeData& self) {
    const auto& A = self.parents[0]->data;
    const auto& B = self.parents[1]->data;
    const double up = self.grad[0];
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * up * (A[i] - B[i]);
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= 2.0 * up * (A[i] - B[i]);
    }
  });
}

/// Per-row Euclidean norm (n x 1). Gradient at a zero row is 0.
inline Node row_norms(const Node& a) {
  const auto [r, c] = a.shape();
  Matrix out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (double x : a.value().row_span(i)) s += x * x;
    out[i] = std::sqrt(s);
  }
  return Node::make_op(std::move(out), {a}, "row_norms", [r, c](detail::NodeData& self) {
    const auto& A = self.parents[0]->data;
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i) {
      const double n = self.data[i];
      if (n == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j) g(i, j) += self.grad[i] * A(i, j) / n;
    }
  });
}

/// Scales each row to unit Euclidean norm: x / max(|x|, eps).
inline Node normalize_rows(const Node& a, double eps = 1e-12) {
  const auto [r, c] = a.shape();
  Matrix out(r, c);
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (double x : a.value().row_span(i)) s += x * x;
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < c; ++j) out(i, j) = a.value()(i, j) / norms[i];
  }
  return Node::make_op(std::move(out), {a}, "normalize_rows",
                       [r, c, eps, norms = std::move(norms)](detail::NodeData& self) {
                         auto& g = detail::pgrad(self, 0);
                         for (std::size_t i = 0; i < r; ++i) {
                           if (norms[i] <= eps) {
                             for (std::size_t j = 0; j < c; ++j) g(i, j) += self.grad(i, j) / eps;
                             continue;
                           }
                           double dot = 0.0;
                           for (std::size_t j = 0; j < c; ++j) dot += self.data(i, j) * self.grad(i, j);
                           for (std::size_t j = 0; j < c; ++j)
                             g(i, j) += (self.grad(i, j) - self.data(i, j) * dot) / norms[i];
                         }
                       });
}

/// Row-wise log-sum-exp over entries where mask is nonzero (all entries when
/// the mask is empty). Max-subtracted for stability. Every row needs at least
/// one unmasked entry.
inline Node logsumexp_rows(const Node& a, const Matrix& mask = {}) {
  const auto [r, c] = a.shape();
  const bool masked = !mask.empty();
  if (masked && mask.shape() != a.shape()) {
    throw DimensionError("logsumexp_rows: mask " + to_string(mask.shape()) + " vs " + to_string(a.shape()));
  }
  auto on = [&](std::size_t i, std::size_t j) { return !masked || mask(i, j) != 0.0; };
  Matrix out(r, 1);
  Matrix soft(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    std::size_t active = 0;
    bool nan = false;
    for (std::size_t j = 0; j < c; ++j)
      if (on(i, j)) {
        ++active;
        nan |= std::isnan(a.value()(i, j));
        m = std::max(m, a.value()(i, j));
      }
    if (active == 0) throw ContractError("logsumexp_rows: row " + std::to_string(i) + " has no active entry");
    if (nan || !std::isfinite(m)) {  // let the caller see it
      out[i] = nan ? std::numeric_limits<double>::quiet_NaN() : m;
      continue;
    }
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (on(i, j)) {
        soft(i, j) = std::exp(a.value()(i, j) - m);
        s += soft(i, j);
      }
    for (std::size_t j = 0; j < c; ++j) soft(i, j) /= s;
    out[i] = m + std::log(s);
  }
  return Node::make_op(std::move(out), {a}, "logsumexp_rows",
                       [r, c, soft = std::move(soft)](detail::NodeData& self) {
                         auto& g = detail::pgrad(self, 0);
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j) g(i, j) += self.grad[i] * soft(i, j);
                       });
}

/// Per-row softmax cross-entropy against integer targets: (n x c) -> (n x 1).
/// Computed as log(sum_j exp(x_j - x_y)) so a confident correct row keeps
/// full relative precision.
inline Node softmax_cross_entropy(const Node& logits, std::span<const std::size_t> targets) {
  const auto [r, c] = logits.shape();
  if (targets.size() != r) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + to_string(logits.shape()));
  }
  Matrix out(r, 1);
  Matrix soft(r, c);
  std::vector<std::size_t> y(targets.begin(), targets.end());
  for (std::size_t i = 0; i < r; ++i) {
    if (y[i] >= c) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(y[i]) + " with " +
                       std::to_string(c) + " classes");
    }
    const auto row = logits.value().row_span(i);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      soft(i, j) = std::exp(row[j] - m);
      s += soft(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) soft(i, j) /= s;
    // sum_j exp(x_j - x_y) = 1 + sum_{j != y} exp(x_j - x_y)
    const double ty = row[y[i]];
    if (ty == m) {
      double rest = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        if (j != y[i]) rest += std::exp(row[j] - ty);
      out[i] = std::log1p(rest);
    } else {
      out[i] = m + std::log(s) - ty;
    }
  }
  return Node::make_op(std::move(out), {logits}, "softmax_cross_entropy",
                       [r, c, y = std::move(y), soft = std::move(soft)](detail::NodeData& self) {
                         auto& g = detail::pgrad(self, 0);
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j)
                             g(i, j) += self.grad[i] * (soft(i, j) - (j == y[i] ? 1.0 : 0.0));
                       });
}

}  // namespace ad
}  // namespace simmdg
