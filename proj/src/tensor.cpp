#include "gasr/tensor.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace gasr {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

namespace {

template <typename S>
using NodePtr = std::shared_ptr<detail::Node<S>>;
template <typename S>
using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowArr = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
Eigen::Map<const RowMat<S>> as_mat(const Arr<S>& a, Index r, Index c) {
  return Eigen::Map<const RowMat<S>>(a.data(), r, c);
}
template <typename S>
Eigen::Map<RowMat<S>> as_mat(Arr<S>& a, Index r, Index c) {
  return Eigen::Map<RowMat<S>>(a.data(), r, c);
}
template <typename S>
Eigen::Map<const RowArr<S>> as_arr2(const Arr<S>& a, Index r, Index c) {
  return Eigen::Map<const RowArr<S>>(a.data(), r, c);
}
template <typename S>
Eigen::Map<RowArr<S>> as_arr2(Arr<S>& a, Index r, Index c) {
  return Eigen::Map<RowArr<S>>(a.data(), r, c);
}

Index leading_rows(const Shape& shape) {
  if (shape.empty()) return 1;
  Index r = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
  return r;
}
Index last_extent(const Shape& shape) { return shape.empty() ? 1 : shape.back(); }

// Builds a result node, wiring parents and the backward rule only when needed.
template <typename S>
Tensor<S> make_result(Shape shape, Arr<S> data, std::vector<NodePtr<S>> parents,
                      std::function<void(detail::Node<S>&)> backward) {
  auto node = std::make_shared<detail::Node<S>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (any && grad_enabled()) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor<S>(std::move(node));
}

template <typename S>
void push_grad(const NodePtr<S>& parent, const Arr<S>& g) {
  if (parent->requires_grad) parent->accumulate(g);
}

[[noreturn]] void dimension_error(const std::string& op, const Shape& a, const Shape& b) {
  throw DimensionError(op + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}
[[noreturn]] void dimension_error(const std::string& op, const Shape& a, const std::string& why) {
  throw DimensionError(op + ": shape " + shape_string(a) + " " + why);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// How two operands of an elementwise binary op line up.
enum class Layout { kSame, kRightSmall, kLeftSmall };

Layout broadcast_layout(const std::string& op, const Shape& a, const Shape& b) {
  if (a == b) return Layout::kSame;
  if (shape_size(b) == 1 || is_suffix(b, a)) return Layout::kRightSmall;
  if (shape_size(a) == 1 || is_suffix(a, b)) return Layout::kLeftSmall;
  dimension_error(op, a, b);
}

template <typename S>
void require_rank2(const std::string& op, const Tensor<S>& t) {
  if (t.rank() != 2) dimension_error(op, t.shape(), "is not rank 2");
}

}  // namespace

// ---------------------------------------------------------------- Tensor

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), S(0), requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::full(Shape shape, S value, bool requires_grad) {
  const Index n = shape_size(shape);
  return from_data(std::move(shape), Array::Constant(n, value), requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::from_data(Shape shape, Array data, bool requires_grad) {
  if (shape_size(shape) != data.size()) {
    throw DimensionError("from_data: shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_size(shape)) + " values, got " + std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename S>
Tensor<S> Tensor<S>::scalar(S value, bool requires_grad) {
  return full({}, value, requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::from_matrix(const RowMatrix& m, bool requires_grad) {
  Array data = Eigen::Map<const Array>(m.data(), m.size());
  return from_data({m.rows(), m.cols()}, std::move(data), requires_grad);
}

template <typename S>
Index Tensor<S>::rows() const {
  return leading_rows(node_->shape);
}

template <typename S>
Index Tensor<S>::cols() const {
  return last_extent(node_->shape);
}

template <typename S>
S Tensor<S>::item() const {
  require(size() == 1, "item: tensor of shape " + shape_string(shape()) + " is not a scalar");
  return node_->data(0);
}

template <typename S>
typename Tensor<S>::Array Tensor<S>::grad() const {
  if (node_->grad.size() == 0) return Array::Zero(node_->data.size());
  return node_->grad;
}

template <typename S>
typename Tensor<S>::ConstMatrixMap Tensor<S>::grad_matrix() const {
  node_->grad_buffer();
  return ConstMatrixMap(node_->grad.data(), rows(), cols());
}

// ---------------------------------------------------------------- backward

template <typename S>
void backward(const Tensor<S>& root) {
  if (root.size() != 1) {
    throw ContractError("backward: root must be a scalar, got shape " + shape_string(root.shape()));
  }
  using N = detail::Node<S>;
  std::vector<N*> order;
  std::unordered_set<N*> visited;
  // Iterative post-order DFS over requires-grad nodes.
  std::vector<std::pair<N*, std::size_t>> stack;
  if (root.requires_grad()) stack.emplace_back(root.node(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next == 0 && !visited.insert(node).second) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      N* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (N* node : order) {
    if (node->backward) node->grad.resize(0);
  }
  if (!root.requires_grad()) return;
  root.node()->accumulate(Arr<S>::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    N* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
}

// ---------------------------------------------------------------- elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const Layout layout = broadcast_layout("add", a.shape(), b.shape());
  if (layout == Layout::kSame) {
    return make_result<S>(a.shape(), a.data() + b.data(), {a.node_ptr(), b.node_ptr()}, [](detail::Node<S>& self) {
      push_grad(self.parents[0], self.grad);
      push_grad(self.parents[1], self.grad);
    });
  }
  const bool right_small = layout == Layout::kRightSmall;
  const Tensor<S>& big = right_small ? a : b;
  const Tensor<S>& small = right_small ? b : a;
  const Index inner = small.size();
  const Index outer = big.size() / inner;
  Arr<S> out(big.size());
  as_arr2(out, outer, inner) = as_arr2(big.data(), outer, inner).rowwise() + as_arr2(small.data(), 1, inner).row(0);
  return make_result<S>(big.shape(), std::move(out), {big.node_ptr(), small.node_ptr()},
                        [outer, inner](detail::Node<S>& self) {
                          push_grad(self.parents[0], self.grad);
                          if (self.parents[1]->requires_grad) {
                            Arr<S> g = as_arr2(self.grad, outer, inner).colwise().sum().transpose();
                            self.parents[1]->accumulate(g);
                          }
                        });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  const Layout layout = broadcast_layout("mul", a.shape(), b.shape());
  if (layout == Layout::kSame) {
    return make_result<S>(a.shape(), a.data() * b.data(), {a.node_ptr(), b.node_ptr()}, [](detail::Node<S>& self) {
      const auto& pa = self.parents[0];
      const auto& pb = self.parents[1];
      if (pa->requires_grad) pa->accumulate(self.grad * pb->data);
      if (pb->requires_grad) pb->accumulate(self.grad * pa->data);
    });
  }
  const bool right_small = layout == Layout::kRightSmall;
  const Tensor<S>& big = right_small ? a : b;
  const Tensor<S>& small = right_small ? b : a;
  const Index inner = small.size();
  const Index outer = big.size() / inner;
  Arr<S> out(big.size());
  as_arr2(out, outer, inner) = as_arr2(big.data(), outer, inner).rowwise() * as_arr2(small.data(), 1, inner).row(0);
  return make_result<S>(big.shape(), std::move(out), {big.node_ptr(), small.node_ptr()},
                        [outer, inner](detail::Node<S>& self) {
                          const auto& pbig = self.parents[0];
                          const auto& psmall = self.parents[1];
                          auto g = as_arr2(self.grad, outer, inner);
                          if (pbig->requires_grad) {
                            Arr<S> gb(outer * inner);
                            as_arr2(gb, outer, inner) = g.rowwise() * as_arr2(psmall->data, 1, inner).row(0);
                            pbig->accumulate(gb);
                          }
                          if (psmall->requires_grad) {
                            Arr<S> gs = (g * as_arr2(pbig->data, outer, inner)).colwise().sum().transpose();
                            psmall->accumulate(gs);
                          }
                        });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return make_result<S>(a.shape(), a.data() * factor, {a.node_ptr()}, [factor](detail::Node<S>& self) {
    self.parents[0]->accumulate(self.grad * factor);
  });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, neg(b));
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S value) {
  return make_result<S>(a.shape(), a.data() + value, {a.node_ptr()},
                        [](detail::Node<S>& self) { self.parents[0]->accumulate(self.grad); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return make_result<S>(a.shape(), a.data().exp(), {a.node_ptr()}, [](detail::Node<S>& self) {
    self.parents[0]->accumulate(self.grad * self.data);
  });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return make_result<S>(a.shape(), a.data().log(), {a.node_ptr()}, [](detail::Node<S>& self) {
    self.parents[0]->accumulate(self.grad / self.parents[0]->data);
  });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  return make_result<S>(a.shape(), a.data().max(S(0)), {a.node_ptr()}, [](detail::Node<S>& self) {
    const auto& x = self.parents[0]->data;
    self.parents[0]->accumulate((x > S(0)).select(self.grad, S(0)));
  });
}

template <typename S>
Tensor<S> minimum(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) dimension_error("minimum", a.shape(), b.shape());
  return make_result<S>(a.shape(), a.data().min(b.data()), {a.node_ptr(), b.node_ptr()},
                        [](detail::Node<S>& self) {
                          const auto& pa = self.parents[0];
                          const auto& pb = self.parents[1];
                          const auto take_a = pa->data <= pb->data;
                          if (pa->requires_grad) pa->accumulate(take_a.select(self.grad, S(0)));
                          if (pb->requires_grad) pb->accumulate(take_a.select(S(0), self.grad));
                        });
}

template <typename S>
Tensor<S> clamp(const Tensor<S>& a, S lo, S hi) {
  require(lo <= hi, "clamp: lo > hi");
  return make_result<S>(a.shape(), a.data().max(lo).min(hi), {a.node_ptr()}, [lo, hi](detail::Node<S>& self) {
    const auto& x = self.parents[0]->data;
    self.parents[0]->accumulate((x >= lo && x <= hi).select(self.grad, S(0)));
  });
}

template <typename S>
Tensor<S> stop_gradient(const Tensor<S>& a) {
  return Tensor<S>::from_data(a.shape(), a.data(), false);
}

// ---------------------------------------------------------------- reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Arr<S> out(1);
  out(0) = a.data().sum();
  const Index n = a.size();
  return make_result<S>({}, std::move(out), {a.node_ptr()}, [n](detail::Node<S>& self) {
    self.parents[0]->accumulate(Arr<S>::Constant(n, self.grad(0)));
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  require(a.size() > 0, "mean: empty tensor");
  Arr<S> out(1);
  out(0) = a.data().mean();
  const Index n = a.size();
  return make_result<S>({}, std::move(out), {a.node_ptr()}, [n](detail::Node<S>& self) {
    self.parents[0]->accumulate(Arr<S>::Constant(n, self.grad(0) / S(n)));
  });
}

// ---------------------------------------------------------------- matrix

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const Index m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) dimension_error("matmul", a.shape(), b.shape());
  Arr<S> out(m * n);
  as_mat(out, m, n).noalias() = a.matrix() * b.matrix();
  return make_result<S>({m, n}, std::move(out), {a.node_ptr(), b.node_ptr()}, [m, k, n](detail::Node<S>& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    auto g = as_mat(std::as_const(self.grad), m, n);
    if (pa->requires_grad) {
      Arr<S> ga(m * k);
      as_mat(ga, m, k).noalias() = g * as_mat(pb->data, k, n).transpose();
      pa->accumulate(ga);
    }
    if (pb->requires_grad) {
      Arr<S> gb(k * n);
      as_mat(gb, k, n).noalias() = as_mat(pa->data, m, k).transpose() * g;
      pb->accumulate(gb);
    }
  });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  require_rank2("transpose", a);
  const Index m = a.rows(), n = a.cols();
  Arr<S> out(m * n);
  as_mat(out, n, m) = a.matrix().transpose();
  return make_result<S>({n, m}, std::move(out), {a.node_ptr()}, [m, n](detail::Node<S>& self) {
    Arr<S> g(m * n);
    as_mat(g, m, n) = as_mat(std::as_const(self.grad), n, m).transpose();
    self.parents[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------- last-dim ops

template <typename S>
Tensor<S> softmax(const Tensor<S>& a) {
  const Index r = a.rows(), c = a.cols();
  Arr<S> out(a.size());
  auto x = as_arr2(a.data(), r, c);
  auto y = as_arr2(out, r, c);
  y = (x.colwise() - x.rowwise().maxCoeff()).exp();
  y.colwise() /= y.rowwise().sum();
  return make_result<S>(a.shape(), std::move(out), {a.node_ptr()}, [r, c](detail::Node<S>& self) {
    auto y = as_arr2(std::as_const(self.data), r, c);
    auto g = as_arr2(std::as_const(self.grad), r, c);
    Arr<S> gx(r * c);
    as_arr2(gx, r, c) = y * (g.colwise() - (g * y).rowwise().sum());
    self.parents[0]->accumulate(gx);
  });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& a) {
  const Index r = a.rows(), c = a.cols();
  Arr<S> out(a.size());
  auto x = as_arr2(a.data(), r, c);
  auto y = as_arr2(out, r, c);
  y = x.colwise() - x.rowwise().maxCoeff();
  y.colwise() -= y.exp().rowwise().sum().log();
  return make_result<S>(a.shape(), std::move(out), {a.node_ptr()}, [r, c](detail::Node<S>& self) {
    auto y = as_arr2(std::as_const(self.data), r, c);
    auto g = as_arr2(std::as_const(self.grad), r, c);
    Arr<S> gx(r * c);
    as_arr2(gx, r, c) = g - y.exp().colwise() * g.rowwise().sum();
    self.parents[0]->accumulate(gx);
  });
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
  const Index r = x.rows(), c = x.cols();
  if (gain.size() != c) dimension_error("layer_norm", x.shape(), gain.shape());
  if (bias.size() != c) dimension_error("layer_norm", x.shape(), bias.shape());
  auto xin = as_arr2(x.data(), r, c);
  Arr<S> mu = xin.rowwise().mean();
  Arr<S> centered_data(r * c);
  auto centered = as_arr2(centered_data, r, c);
  centered = xin.colwise() - mu;
  Arr<S> rstd = ((centered.square().rowwise().sum() / S(c)) + eps).rsqrt();
  Arr<S> xhat_data(r * c);
  auto xhat = as_arr2(xhat_data, r, c);
  xhat = centered.colwise() * rstd;
  Arr<S> out(r * c);
  as_arr2(out, r, c) = (xhat.rowwise() * as_arr2(gain.data(), 1, c).row(0)).rowwise() +
                       as_arr2(bias.data(), 1, c).row(0);
  return make_result<S>(
      x.shape(), std::move(out), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
      [r, c, xhat_data = std::move(xhat_data), rstd = std::move(rstd)](detail::Node<S>& self) {
        auto g = as_arr2(std::as_const(self.grad), r, c);
        auto xh = as_arr2(xhat_data, r, c);
        const auto& px = self.parents[0];
        const auto& pg = self.parents[1];
        const auto& pb = self.parents[2];
        if (px->requires_grad) {
          RowArr<S> dxhat = g.rowwise() * as_arr2(pg->data, 1, c).row(0);
          Arr<S> mean_d = dxhat.rowwise().mean();
          Arr<S> mean_dx = (dxhat * xh).rowwise().mean();
          Arr<S> gx(r * c);
          auto gxm = as_arr2(gx, r, c);
          gxm = ((dxhat.colwise() - mean_d) - xh.colwise() * mean_dx).colwise() * rstd;
          px->accumulate(gx);
        }
        if (pg->requires_grad) {
          Arr<S> gg = (g * xh).colwise().sum().transpose();
          pg->accumulate(gg);
        }
        if (pb->requires_grad) {
          Arr<S> gb = g.colwise().sum().transpose();
          pb->accumulate(gb);
        }
      });
}

// ---------------------------------------------------------------- indexing

template <typename S>
Tensor<S> gather(const Tensor<S>& a, std::span<const Index> index) {
  require_rank2("gather", a);
  const Index r = a.rows(), c = a.cols();
  if (static_cast<Index>(index.size()) != r) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " + shape_string(a.shape()));
  }
  std::vector<Index> idx(index.begin(), index.end());
  Arr<S> out(r);
  for (Index i = 0; i < r; ++i) {
    if (idx[i] < 0 || idx[i] >= c) {
      throw DimensionError("gather: index " + std::to_string(idx[i]) + " out of range for shape " +
                           shape_string(a.shape()));
    }
    out(i) = a.data()(i * c + idx[i]);
  }
  return make_result<S>({r}, std::move(out), {a.node_ptr()}, [r, c, idx = std::move(idx)](detail::Node<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index i = 0; i < r; ++i) g(i * c + idx[i]) += self.grad(i);
  });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, Index begin, Index end) {
  if (a.rank() < 1) dimension_error("slice", a.shape(), "has no leading dimension");
  const Index lead = a.shape()[0];
  if (begin < 0 || end > lead || begin > end) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of bounds for shape " + shape_string(a.shape()));
  }
  const Index inner = lead == 0 ? 0 : a.size() / lead;
  Shape shape = a.shape();
  shape[0] = end - begin;
  Arr<S> out = a.data().segment(begin * inner, (end - begin) * inner);
  return make_result<S>(std::move(shape), std::move(out), {a.node_ptr()}, [begin, end, inner](detail::Node<S>& self) {
    self.parents[0]->grad_buffer().segment(begin * inner, (end - begin) * inner) += self.grad;
  });
}

template <typename S>
Tensor<S> concat(std::span<const Tensor<S>> parts) {
  require(!parts.empty(), "concat: no inputs");
  Shape tail(parts[0].shape().begin() + (parts[0].rank() > 0 ? 1 : 0), parts[0].shape().end());
  Index lead = 0;
  Index total = 0;
  std::vector<NodePtr<S>> parents;
  std::vector<Index> sizes;
  for (const auto& p : parts) {
    if (p.rank() < 1) dimension_error("concat", p.shape(), "has no leading dimension");
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) dimension_error("concat", parts[0].shape(), p.shape());
    lead += p.shape()[0];
    total += p.size();
    sizes.push_back(p.size());
    parents.push_back(p.node_ptr());
  }
  Arr<S> out(total);
  Index offset = 0;
  for (const auto& p : parts) {
    out.segment(offset, p.size()) = p.data();
    offset += p.size();
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result<S>(std::move(shape), std::move(out), std::move(parents),
                        [sizes = std::move(sizes)](detail::Node<S>& self) {
                          Index off = 0;
                          for (std::size_t i = 0; i < sizes.size(); ++i) {
                            if (self.parents[i]->requires_grad) {
                              self.parents[i]->accumulate(self.grad.segment(off, sizes[i]));
                            }
                            off += sizes[i];
                          }
                        });
}

template <typename S>
Tensor<S> embedding_lookup(const Tensor<S>& table, std::span<const Index> ids) {
  require_rank2("embedding_lookup", table);
  const Index v = table.rows(), c = table.cols();
  const Index n = static_cast<Index>(ids.size());
  std::vector<Index> rows(ids.begin(), ids.end());
  Arr<S> out(n * c);
  auto src = table.matrix();
  auto dst = as_mat(out, n, c);
  for (Index i = 0; i < n; ++i) {
    if (rows[i] < 0 || rows[i] >= v) {
      throw DimensionError("embedding_lookup: id " + std::to_string(rows[i]) + " out of range for table " +
                           shape_string(table.shape()));
    }
    dst.row(i) = src.row(rows[i]);
  }
  return make_result<S>({n, c}, std::move(out), {table.node_ptr()},
                        [v, c, n, rows = std::move(rows)](detail::Node<S>& self) {
                          auto gt = as_mat(self.parents[0]->grad_buffer(), v, c);
                          auto g = as_mat(std::as_const(self.grad), n, c);
                          for (Index i = 0; i < n; ++i) gt.row(rows[i]) += g.row(i);
                        });
}

template <typename S>
Tensor<S> causal_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                           std::span<const Index> segments, Index heads) {
  require_rank2("causal_attention", q);
  if (k.shape() != q.shape()) dimension_error("causal_attention", q.shape(), k.shape());
  if (v.shape() != q.shape()) dimension_error("causal_attention", q.shape(), v.shape());
  const Index rows = q.rows(), width = q.cols();
  if (heads < 1 || width % heads != 0) dimension_error("causal_attention", q.shape(), "width not divisible by heads");
  Index covered = 0;
  for (Index s : segments) covered += s;
  if (covered != rows) {
    throw DimensionError("causal_attention: segments cover " + std::to_string(covered) + " rows of shape " +
                         shape_string(q.shape()));
  }
  const Index dh = width / heads;
  const S scale_factor = S(1) / std::sqrt(S(dh));
  std::vector<Index> segs(segments.begin(), segments.end());
  std::vector<RowMat<S>> probs;
  probs.reserve(segs.size() * heads);
  Arr<S> out(rows * width);
  auto om = as_mat(out, rows, width);
  auto qm = q.matrix();
  auto km = k.matrix();
  auto vm = v.matrix();
  Index offset = 0;
  for (Index len : segs) {
    for (Index h = 0; h < heads; ++h) {
      RowMat<S> scores = (qm.block(offset, h * dh, len, dh) * km.block(offset, h * dh, len, dh).transpose()) *
                         scale_factor;
      for (Index i = 0; i < len; ++i) {
        const S mx = scores.row(i).head(i + 1).maxCoeff();
        scores.row(i).head(i + 1) = (scores.row(i).head(i + 1).array() - mx).exp().matrix();
        scores.row(i).head(i + 1) /= scores.row(i).head(i + 1).sum();
        scores.row(i).tail(len - i - 1).setZero();
      }
      om.block(offset, h * dh, len, dh).noalias() = scores * vm.block(offset, h * dh, len, dh);
      probs.push_back(std::move(scores));
    }
    offset += len;
  }
  return make_result<S>(
      q.shape(), std::move(out), {q.node_ptr(), k.node_ptr(), v.node_ptr()},
      [rows, width, heads, dh, scale_factor, segs = std::move(segs), probs = std::move(probs)](detail::Node<S>& self) {
        const auto& pq = self.parents[0];
        const auto& pk = self.parents[1];
        const auto& pv = self.parents[2];
        auto g = as_mat(std::as_const(self.grad), rows, width);
        auto qm = as_mat(pq->data, rows, width);
        auto km = as_mat(pk->data, rows, width);
        auto vm = as_mat(pv->data, rows, width);
        Arr<S> gq = Arr<S>::Zero(rows * width), gk = Arr<S>::Zero(rows * width), gv = Arr<S>::Zero(rows * width);
        auto gqm = as_mat(gq, rows, width);
        auto gkm = as_mat(gk, rows, width);
        auto gvm = as_mat(gv, rows, width);
        Index offset = 0;
        std::size_t p = 0;
        for (Index len : segs) {
          for (Index h = 0; h < heads; ++h, ++p) {
            const RowMat<S>& prob = probs[p];
            auto go = g.block(offset, h * dh, len, dh);
            RowMat<S> dprob = go * vm.block(offset, h * dh, len, dh).transpose();
            gvm.block(offset, h * dh, len, dh).noalias() += prob.transpose() * go;
            Eigen::Matrix<S, Eigen::Dynamic, 1> rowdot = (dprob.array() * prob.array()).rowwise().sum();
            RowMat<S> dscore = (prob.array() * (dprob.array().colwise() - rowdot.array())).matrix() * scale_factor;
            gqm.block(offset, h * dh, len, dh).noalias() += dscore * km.block(offset, h * dh, len, dh);
            gkm.block(offset, h * dh, len, dh).noalias() += dscore.transpose() * qm.block(offset, h * dh, len, dh);
          }
          offset += len;
        }
        if (pq->requires_grad) pq->accumulate(gq);
        if (pk->requires_grad) pk->accumulate(gk);
        if (pv->requires_grad) pv->accumulate(gv);
      });
}

// ---------------------------------------------------------------- instantiation

#define GASR_INSTANTIATE_TENSOR(S)                                                                           \
  template class Tensor<S>;                                                                                  \
  template void backward<S>(const Tensor<S>&);                                                               \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> scale<S>(const Tensor<S>&, S);                                                          \
  template Tensor<S> add_scalar<S>(const Tensor<S>&, S);                                                     \
  template Tensor<S> neg<S>(const Tensor<S>&);                                                               \
  template Tensor<S> exp<S>(const Tensor<S>&);                                                               \
  template Tensor<S> log<S>(const Tensor<S>&);                                                               \
  template Tensor<S> relu<S>(const Tensor<S>&);                                                              \
  template Tensor<S> minimum<S>(const Tensor<S>&, const Tensor<S>&);                                         \
  template Tensor<S> clamp<S>(const Tensor<S>&, S, S);                                                       \
  template Tensor<S> stop_gradient<S>(const Tensor<S>&);                                                     \
  template Tensor<S> sum<S>(const Tensor<S>&);                                                               \
  template Tensor<S> mean<S>(const Tensor<S>&);                                                              \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                                          \
  template Tensor<S> transpose<S>(const Tensor<S>&);                                                         \
  template Tensor<S> softmax<S>(const Tensor<S>&);                                                           \
  template Tensor<S> log_softmax<S>(const Tensor<S>&);                                                       \
  template Tensor<S> layer_norm<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);                 \
  template Tensor<S> gather<S>(const Tensor<S>&, std::span<const Index>);                                    \
  template Tensor<S> slice<S>(const Tensor<S>&, Index, Index);                                               \
  template Tensor<S> concat<S>(std::span<const Tensor<S>>);                                                  \
  template Tensor<S> embedding_lookup<S>(const Tensor<S>&, std::span<const Index>);                          \
  template Tensor<S> causal_attention<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,               \
                                         std::span<const Index>, Index);

GASR_INSTANTIATE_TENSOR(float)
GASR_INSTANTIATE_TENSOR(double)

#undef GASR_INSTANTIATE_TENSOR

}  // namespace gasr
