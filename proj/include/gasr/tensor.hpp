#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Tensor is a cheap handle onto a shared graph node. Operations are free
// functions; each records its parents and a local backward rule whenever any
// input requires a gradient and grad mode is enabled on the calling thread.
// Everything is templated on the scalar type so that training runs in float
// while gradient checks run the very same code in double.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gasr/errors.hpp"

namespace gasr {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_size(const Shape& shape);

namespace detail {

template <typename Scalar>
struct Node {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array data;
  Array grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // null for leaves

  void accumulate(const Array& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
  Array& grad_buffer() {
    if (grad.size() == 0) grad = Array::Zero(data.size());
    return grad;
  }
};

}  // namespace detail

// Thread-local switch: while disabled, operations record no graph.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
class Tensor {
 public:
  using Node = detail::Node<Scalar>;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from_data(Shape shape, Array data, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);
  static Tensor from_matrix(const RowMatrix& m, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index size() const { return node_->data.size(); }
  // Rank-2 interpretation: all leading extents folded into rows.
  Index rows() const;
  Index cols() const;

  const Array& data() const { return node_->data; }
  Array& mutable_data() { return node_->data; }
  ConstMatrixMap matrix() const { return ConstMatrixMap(node_->data.data(), rows(), cols()); }
  MatrixMap mutable_matrix() { return MatrixMap(node_->data.data(), rows(), cols()); }
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_->grad.size() != 0; }
  // Zeros when no gradient has been accumulated yet.
  Array grad() const;
  ConstMatrixMap grad_matrix() const;
  void zero_grad() { node_->grad.resize(0); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Accumulates d(root)/d(t) into every reachable tensor that requires grad.
// Leaf gradients accumulate across calls; interior gradients are recomputed.
template <typename Scalar>
void backward(const Tensor<Scalar>& root);

// ---- elementwise (with suffix broadcasting: one operand's shape must equal,
// be a trailing suffix of, or be a single element relative to the other) ----
template <typename Scalar> Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor);
template <typename Scalar> Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar value);
template <typename Scalar> Tensor<Scalar> neg(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> exp(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> log(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> relu(const Tensor<Scalar>& a);
// Gradient flows to `a` where a <= b, otherwise to `b`. Shapes must match.
template <typename Scalar> Tensor<Scalar> minimum(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
// Gradient passes where lo <= a <= hi and is zero elsewhere.
template <typename Scalar> Tensor<Scalar> clamp(const Tensor<Scalar>& a, Scalar lo, Scalar hi);
// Same values, no gradient to the source.
template <typename Scalar> Tensor<Scalar> stop_gradient(const Tensor<Scalar>& a);

// ---- reductions ----
template <typename Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& a);

// ---- matrix ----
template <typename Scalar> Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> transpose(const Tensor<Scalar>& a);

// ---- along the last dimension ----
template <typename Scalar> Tensor<Scalar> softmax(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> log_softmax(const Tensor<Scalar>& a);
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          Scalar eps = Scalar(1e-5));

// ---- indexing (rank 2 unless noted) ----
// out[i] = a(i, index[i]).
template <typename Scalar> Tensor<Scalar> gather(const Tensor<Scalar>& a, std::span<const Index> index);
// Rows [begin, end) along the first dimension (any rank >= 1).
template <typename Scalar> Tensor<Scalar> slice(const Tensor<Scalar>& a, Index begin, Index end);
// Concatenation along the first dimension.
template <typename Scalar> Tensor<Scalar> concat(std::span<const Tensor<Scalar>> parts);
// out.row(i) = table.row(ids[i]); duplicate ids accumulate gradient.
template <typename Scalar> Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, std::span<const Index> ids);

// Multi-head causal self-attention over packed sequences. `q`, `k`, `v` are
// [rows x width]; `segments` lists consecutive sequence lengths summing to
// rows. Position i of a segment attends to positions 0..i of that segment.
template <typename Scalar>
Tensor<Scalar> causal_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                std::span<const Index> segments, Index heads);

}  // namespace gasr
