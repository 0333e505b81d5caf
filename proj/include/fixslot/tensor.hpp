#pragma once

// Dense tensors of rank 0..2 over a reverse-mode gradient tape.
//
// Tensors are immutable values backed by shared buffers (row-major). All
// operations are free functions; a result is recorded on a tape iff any
// operand is attached to one, so computations on detached tensors cost no
// tape nodes. operator* is elementwise; matrix products go through matmul().
//
// Broadcasting follows trailing-dimension rules only: shapes are aligned at
// the trailing axis, and an extent must match or be 1. There is no implicit
// rank expansion beyond promoting a missing leading axis to 1.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "fixslot/errors.hpp"

namespace fixslot {

using Index = Eigen::Index;

inline constexpr int kNoParam = -1;
inline constexpr int kNoAxis = -1;

// ---------------------------------------------------------------------------
// Shape
// ---------------------------------------------------------------------------

class Shape {
 public:
  Shape() = default;                                    // rank 0 (scalar)
  explicit Shape(Index n) : rank_(1) { d_[0] = n; }     // rank 1
  Shape(Index r, Index c) : rank_(2) {                  // rank 2
    d_[0] = r;
    d_[1] = c;
  }

  int rank() const { return rank_; }
  Index extent(int i) const { return d_[static_cast<std::size_t>(i)]; }
  Index numel() const {
    if (rank_ == 0) return 1;
    if (rank_ == 1) return d_[0];
    return d_[0] * d_[1];
  }

  // Logical 2-D view used for broadcasting: rank 0 -> (1,1), rank 1 -> (1,n).
  Index rows() const { return rank_ == 2 ? d_[0] : 1; }
  Index cols() const {
    if (rank_ == 0) return 1;
    return rank_ == 1 ? d_[0] : d_[1];
  }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    if (rank_ >= 1 && d_[0] != o.d_[0]) return false;
    if (rank_ == 2 && d_[1] != o.d_[1]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    if (rank_ == 0) return "[]";
    if (rank_ == 1) return "[" + std::to_string(d_[0]) + "]";
    return "[" + std::to_string(d_[0]) + "," + std::to_string(d_[1]) + "]";
  }

 private:
  std::array<Index, 2> d_{1, 1};
  int rank_ = 0;
};

template <typename S>
class Tape;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Buffer = Eigen::Array<S, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Array2 = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() = default;

  Tensor(Shape shape, Buffer data) : shape_(shape) {
    if (data.size() != shape.numel())
      throw ShapeError("tensor: buffer length " + std::to_string(data.size()) +
                       " does not match shape " + shape.str());
    buf_ = std::make_shared<const Buffer>(std::move(data));
  }

  Tensor(Shape shape, std::shared_ptr<const Buffer> data) : shape_(shape), buf_(std::move(data)) {
    if (!buf_ || buf_->size() != shape.numel())
      throw ShapeError("tensor: shared buffer does not match shape " + shape.str());
  }

  static Tensor scalar(S v) {
    Buffer b(1);
    b(0) = v;
    return Tensor(Shape(), std::move(b));
  }
  static Tensor zeros(Shape shape) { return full(shape, S(0)); }
  static Tensor ones(Shape shape) { return full(shape, S(1)); }
  static Tensor full(Shape shape, S v) {
    Buffer b = Buffer::Constant(shape.numel(), v);
    return Tensor(shape, std::move(b));
  }
  static Tensor from(Shape shape, std::initializer_list<S> values) {
    Buffer b(shape.numel());
    if (static_cast<Index>(values.size()) != shape.numel())
      throw ShapeError("tensor: initializer length does not match shape " + shape.str());
    Index i = 0;
    for (S v : values) b(i++) = v;
    return Tensor(shape, std::move(b));
  }
  static Tensor from(Shape shape, const std::vector<S>& values) {
    Buffer b(shape.numel());
    if (static_cast<Index>(values.size()) != shape.numel())
      throw ShapeError("tensor: value count does not match shape " + shape.str());
    for (Index i = 0; i < b.size(); ++i) b(i) = values[static_cast<std::size_t>(i)];
    return Tensor(shape, std::move(b));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return shape_.rank(); }
  Index size() const { return shape_.numel(); }
  bool empty() const { return !buf_; }

  const Buffer& array() const { return *buf_; }
  const std::shared_ptr<const Buffer>& buffer() const { return buf_; }
  const S* data() const { return buf_->data(); }

  S operator[](Index i) const { return (*buf_)(i); }
  S operator()(Index i, Index j) const { return (*buf_)(i * shape_.cols() + j); }
  S value() const {
    if (size() != 1) throw ContractError("value(): tensor has " + shape_.str() + " shape, not a scalar");
    return (*buf_)(0);
  }

  // Logical 2-D maps (rank 1 maps to a single row).
  Eigen::Map<const Matrix> mat() const {
    return Eigen::Map<const Matrix>(buf_->data(), shape_.rows(), shape_.cols());
  }
  Eigen::Map<const Array2> arr2() const {
    return Eigen::Map<const Array2>(buf_->data(), shape_.rows(), shape_.cols());
  }

  bool attached() const { return tape_ != nullptr; }
  Tape<S>* tape() const { return tape_; }
  int node() const { return node_; }
  bool all_finite() const { return buf_ && buf_->allFinite(); }

  Tensor detached() const {
    Tensor r = *this;
    r.tape_ = nullptr;
    r.node_ = -1;
    return r;
  }

 private:
  friend class Tape<S>;

  Shape shape_{};
  std::shared_ptr<const Buffer> buf_;
  Tape<S>* tape_ = nullptr;
  int node_ = -1;
};

template <typename S>
Tensor<S> detach(const Tensor<S>& a) {
  return a.detached();
}

// ---------------------------------------------------------------------------
// Gradients: parameter id -> gradient tensor
// ---------------------------------------------------------------------------

template <typename S>
class Gradients {
 public:
  void add(int id, const Tensor<S>& g) {
    auto it = g_.find(id);
    if (it == g_.end()) {
      g_.emplace(id, g);
    } else {
      typename Tensor<S>::Buffer sum = it->second.array() + g.array();
      it->second = Tensor<S>(g.shape(), std::move(sum));
    }
  }
  const Tensor<S>& at(int id) const {
    auto it = g_.find(id);
    if (it == g_.end()) throw ContractError("gradients: unknown parameter id " + std::to_string(id));
    return it->second;
  }
  bool contains(int id) const { return g_.count(id) != 0; }
  std::size_t size() const { return g_.size(); }

  auto begin() const { return g_.begin(); }
  auto end() const { return g_.end(); }

  // Entrywise sum over the union of ids (shard joining).
  void accumulate(const Gradients& other) {
    for (const auto& [id, g] : other.g_) add(id, g);
  }
  void scale(S factor) {
    for (auto& [id, g] : g_) {
      typename Tensor<S>::Buffer b = g.array() * factor;
      g = Tensor<S>(g.shape(), std::move(b));
    }
  }

 private:
  std::map<int, Tensor<S>> g_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

enum class OpKind : unsigned char {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kAddScalar,
  kSigmoid,
  kTanh,
  kRelu,
  kExp,
  kLog,
  kSoftplus,
  kMatmul,
  kTranspose,
  kSoftmax,
  kLayerNorm,
  kReduceSum,
  kReduceMean,
  kReshape,
  kSliceCols,
};

template <typename S>
struct TapeNode {
  OpKind kind = OpKind::kLeaf;
  std::array<int, 3> in{-1, -1, -1};
  std::array<Shape, 3> in_shape{};
  Shape shape{};
  std::array<Tensor<S>, 3> saved{};  // exactly the values backward needs
  int p0 = kNoAxis;                  // axis, or slice begin
  int p1 = 0;                        // slice count
  S c = S(0);                        // scalar operand
  int param = kNoParam;              // leaf only
};

template <typename S>
class Tape {
 public:
  using Buffer = typename Tensor<S>::Buffer;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `value` as a leaf. A non-negative param_id marks it trainable;
  // backward() reports a gradient (possibly zero) for every registered id.
  Tensor<S> leaf(const Tensor<S>& value, int param_id = kNoParam) {
    TapeNode<S> n;
    n.kind = OpKind::kLeaf;
    n.shape = value.shape();
    n.param = param_id;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(n));
    if (param_id != kNoParam) params_.emplace_back(id, param_id);
    Tensor<S> t = value.detached();
    t.tape_ = this;
    t.node_ = id;
    return t;
  }

  std::size_t size() const { return nodes_.size(); }
  const TapeNode<S>& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  TapeNode<S>& node_mut(int id) { return nodes_[static_cast<std::size_t>(id)]; }

  // Internal: record an op node and attach the result tensor.
  Tensor<S> emit(TapeNode<S>&& n, const Shape& out_shape, Buffer&& data) {
    n.shape = out_shape;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(n));
    Tensor<S> t(out_shape, std::move(data));
    t.tape_ = this;
    t.node_ = id;
    return t;
  }

  Gradients<S> backward(const Tensor<S>& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + loss.shape().str());
    Buffer seed(1);
    seed(0) = S(1);
    return backward(loss, Tensor<S>(loss.shape(), std::move(seed)));
  }

  // Reverse sweep from `output` with cotangent `seed` (shape of output).
  Gradients<S> backward(const Tensor<S>& output, const Tensor<S>& seed);

 private:
  std::vector<TapeNode<S>> nodes_;
  std::vector<std::pair<int, int>> params_;  // (node id, param id), creation order
};

// ---------------------------------------------------------------------------
// Broadcasting internals
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const Index ar = a.rows(), ac = a.cols();
  const Index br = b.rows(), bc = b.cols();
  if (!(ar == br || ar == 1 || br == 1) || !(ac == bc || ac == 1 || bc == 1))
    throw ShapeError("broadcast: incompatible shapes " + a.str() + " and " + b.str());
  const Index r = std::max(ar, br);
  const Index c = std::max(ac, bc);
  const int rank = std::max(a.rank(), b.rank());
  if (rank == 0) return Shape();
  if (rank == 1) return Shape(c);
  return Shape(r, c);
}

template <typename S>
using Arr2Map = Eigen::Map<const typename Tensor<S>::Array2>;

template <typename S>
Arr2Map<S> map2(const typename Tensor<S>::Buffer& b, const Shape& s) {
  return Arr2Map<S>(b.data(), s.rows(), s.cols());
}

struct AddT {
  template <class X, class Y>
  static auto apply(const X& x, const Y& y) {
    return x + y;
  }
};
struct SubT {
  template <class X, class Y>
  static auto apply(const X& x, const Y& y) {
    return x - y;
  }
};
struct MulT {
  template <class X, class Y>
  static auto apply(const X& x, const Y& y) {
    return x * y;
  }
};
struct DivT {
  template <class X, class Y>
  static auto apply(const X& x, const Y& y) {
    return x / y;
  }
};

template <typename S, typename Op>
typename Tensor<S>::Buffer broadcast_apply_raw(const typename Tensor<S>::Buffer& a, const Shape& as,
                                               const typename Tensor<S>::Buffer& b, const Shape& bs,
                                               const Shape& out) {
  using Buffer = typename Tensor<S>::Buffer;
  Buffer res(out.numel());
  if (as == bs) {
    res = Op::apply(a, b);
    return res;
  }
  if (bs.numel() == 1) {
    res = Op::apply(a, b(0));
    return res;
  }
  if (as.numel() == 1) {
    // Build a constant expression on the left to keep operand order.
    Buffer av = Buffer::Constant(out.numel(), a(0));
    res = Op::apply(av, b);
    return res;
  }
  const Index r = out.rows(), c = out.cols();
  auto A = map2<S>(a, as);
  auto B = map2<S>(b, bs);
  Eigen::Map<typename Tensor<S>::Array2> R(res.data(), r, c);
  R = Op::apply(A.replicate(r / A.rows(), c / A.cols()), B.replicate(r / B.rows(), c / B.cols()));
  return res;
}

template <typename S, typename Op>
typename Tensor<S>::Buffer broadcast_apply(const Tensor<S>& a, const Tensor<S>& b, const Shape& out) {
  return broadcast_apply_raw<S, Op>(a.array(), a.shape(), b.array(), b.shape(), out);
}

// Sum `g` (shaped `from`) down to `to` along broadcast-stretched axes.
template <typename S>
typename Tensor<S>::Buffer reduce_to(const typename Tensor<S>::Buffer& g, const Shape& from, const Shape& to) {
  using Buffer = typename Tensor<S>::Buffer;
  if (from == to) return g;
  const Index fr = from.rows(), fc = from.cols();
  const Index tr = to.rows(), tc = to.cols();
  auto G = map2<S>(g, from);
  Buffer res(to.numel());
  if (tr == 1 && tc == 1) {
    res(0) = G.sum();
  } else if (tr == 1 && fr > 1) {
    Eigen::Map<typename Tensor<S>::Array2> R(res.data(), 1, tc);
    R = G.colwise().sum();
  } else if (tc == 1 && fc > 1) {
    Eigen::Map<typename Tensor<S>::Array2> R(res.data(), tr, 1);
    R = G.rowwise().sum();
  } else {
    // Same logical extents, only rank differs.
    res = g;
  }
  return res;
}

template <typename S>
Tape<S>* joint_tape(std::initializer_list<const Tensor<S>*> ts) {
  Tape<S>* t = nullptr;
  for (const Tensor<S>* p : ts) {
    if (!p->attached()) continue;
    if (t != nullptr && t != p->tape())
      throw ContractError("operands are recorded on different tapes");
    t = p->tape();
  }
  return t;
}

template <typename S>
int node_on(const Tensor<S>& t) {
  return t.attached() ? t.node() : -1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary operations
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, typename Op>
Tensor<S> binary_op(OpKind kind, const Tensor<S>& a, const Tensor<S>& b, bool save_operands,
                    bool save_output) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  auto buf = broadcast_apply<S, Op>(a, b, out);
  Tape<S>* t = joint_tape<S>({&a, &b});
  if (t == nullptr) return Tensor<S>(out, std::move(buf));
  TapeNode<S> n;
  n.kind = kind;
  n.in = {node_on(a), node_on(b), -1};
  n.in_shape = {a.shape(), b.shape(), Shape()};
  if (save_operands) {
    n.saved[0] = a.detached();
    n.saved[1] = b.detached();
  }
  Tensor<S> r = t->emit(std::move(n), out, std::move(buf));
  if (save_output) {
    // Stash the (shared) result buffer after emit; div backward reads it.
    t->node_mut(r.node()).saved[2] = r.detached();
  }
  return r;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S, detail::AddT>(OpKind::kAdd, a, b, false, false);
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S, detail::SubT>(OpKind::kSub, a, b, false, false);
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S, detail::MulT>(OpKind::kMul, a, b, true, false);
}
template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S, detail::DivT>(OpKind::kDiv, a, b, true, true);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, std::type_identity_t<S> c) {
  typename Tensor<S>::Buffer buf = a.array() * c;
  Tape<S>* t = detail::joint_tape<S>({&a});
  if (t == nullptr) return Tensor<S>(a.shape(), std::move(buf));
  TapeNode<S> n;
  n.kind = OpKind::kScale;
  n.in[0] = a.node();
  n.in_shape[0] = a.shape();
  n.c = c;
  return t->emit(std::move(n), a.shape(), std::move(buf));
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, std::type_identity_t<S> c) {
  typename Tensor<S>::Buffer buf = a.array() + c;
  Tape<S>* t = detail::joint_tape<S>({&a});
  if (t == nullptr) return Tensor<S>(a.shape(), std::move(buf));
  TapeNode<S> n;
  n.kind = OpKind::kAddScalar;
  n.in[0] = a.node();
  n.in_shape[0] = a.shape();
  n.c = c;
  return t->emit(std::move(n), a.shape(), std::move(buf));
}

// ---------------------------------------------------------------------------
// Elementwise unary operations
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
Tensor<S> unary_op(OpKind kind, const Tensor<S>& a, typename Tensor<S>::Buffer&& buf, bool save_input,
                   bool save_output) {
  Tape<S>* t = joint_tape<S>({&a});
  if (t == nullptr) return Tensor<S>(a.shape(), std::move(buf));
  TapeNode<S> n;
  n.kind = kind;
  n.in[0] = a.node();
  n.in_shape[0] = a.shape();
  if (save_input) n.saved[0] = a.detached();
  Tensor<S> r = t->emit(std::move(n), a.shape(), std::move(buf));
  if (save_output) t->node_mut(r.node()).saved[0] = r.detached();
  return r;
}

}  // namespace detail

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  typename Tensor<S>::Buffer b = S(1) / (S(1) + (-a.array()).exp());
  return detail::unary_op(OpKind::kSigmoid, a, std::move(b), false, true);
}
template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
  typename Tensor<S>::Buffer b = a.array().tanh();
  return detail::unary_op(OpKind::kTanh, a, std::move(b), false, true);
}
template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  typename Tensor<S>::Buffer b = a.array().max(S(0));
  return detail::unary_op(OpKind::kRelu, a, std::move(b), true, false);
}
template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  typename Tensor<S>::Buffer b = a.array().exp();
  return detail::unary_op(OpKind::kExp, a, std::move(b), false, true);
}
template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  typename Tensor<S>::Buffer b = a.array().log();
  return detail::unary_op(OpKind::kLog, a, std::move(b), true, false);
}
template <typename S>
Tensor<S> softplus(const Tensor<S>& a) {
  typename Tensor<S>::Buffer b = a.array().max(S(0)) + (-a.array().abs()).exp().log1p();
  return detail::unary_op(OpKind::kSoftplus, a, std::move(b), true, false);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects rank-2 operands, got " + a.shape().str() + " and " + b.shape().str());
  if (a.shape().extent(1) != b.shape().extent(0))
    throw ShapeError("matmul: inner dimensions disagree: " + a.shape().str() + " vs " + b.shape().str());
  const Index m = a.shape().extent(0), k = a.shape().extent(1), nn = b.shape().extent(1);
  Shape out(m, nn);
  typename Tensor<S>::Buffer buf(out.numel());
  Eigen::Map<typename Tensor<S>::Matrix> R(buf.data(), m, nn);
  Eigen::Map<const typename Tensor<S>::Matrix> A(a.data(), m, k);
  Eigen::Map<const typename Tensor<S>::Matrix> B(b.data(), k, nn);
  R.noalias() = A * B;
  Tape<S>* t = detail::joint_tape<S>({&a, &b});
  if (t == nullptr) return Tensor<S>(out, std::move(buf));
  TapeNode<S> n;
  n.kind = OpKind::kMatmul;
  n.in = {detail::node_on(a), detail::node_on(b), -1};
  n.in_shape = {a.shape(), b.shape(), Shape()};
  n.saved[0] = a.detached();
  n.saved[1] = b.detached();
  return t->emit(std::move(n), out, std::move(buf));
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expects rank-2 operand, got " + a.shape().str());
  const Index r = a.shape().extent(0), c = a.shape().extent(1);
  Shape out(c, r);
  typename Tensor<S>::Buffer buf(out.numel());
  Eigen::Map<typename Tensor<S>::Array2> R(buf.data(), c, r);
  R = a.arr2().transpose();
  Tape<S>* t = detail::joint_tape<S>({&a});
  if (t == nullptr) return Tensor<S>(out, std::move(buf));
  TapeNode<S> n;
  n.kind = OpKind::kTranspose;
  n.in[0] = a.node();
  n.in_shape[0] = a.shape();
  return t->emit(std::move(n), out, std::move(buf));
}

// ---------------------------------------------------------------------------
// Softmax / layer norm / reductions / shape ops
// ---------------------------------------------------------------------------

namespace detail {

// axis semantics: along_rows == true means normalization runs across columns
// within each row (axis==1 for rank 2; the only choice for rank 0/1).
template <typename S>
bool softmax_along_rows(const Tensor<S>& a, int axis) {
  if (a.rank() <= 1) {
    if (axis != 0) throw ShapeError("softmax: axis out of range for " + a.shape().str());
    return true;
  }
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis out of range for " + a.shape().str());
  return axis == 1;
}

}  // namespace detail

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  const bool rows = detail::softmax_along_rows(a, axis);
  const Index r = a.shape().rows(), c = a.shape().cols();
  typename Tensor<S>::Buffer buf(a.size());
  Eigen::Map<typename Tensor<S>::Array2> Y(buf.data(), r, c);
  auto A = a.arr2();
  if (rows) {
    for (Index i = 0; i < r; ++i) {
      const S m = A.row(i).maxCoeff();
      Y.row(i) = (A.row(i) - m).exp();
      Y.row(i) /= Y.row(i).sum();
    }
  } else {
    for (Index j = 0; j < c; ++j) {
      const S m = A.col(j).maxCoeff();
      Y.col(j) = (A.col(j) - m).exp();
      Y.col(j) /= Y.col(j).sum();
    }
  }
  Tape<S>* t = detail::joint_tape<S>({&a});
  if (t == nullptr) return Tensor<S>(a.shape(), std::move(buf));
  TapeNode<S> n;
  n.kind = OpKind::kSoftmax;
  n.in[0] = a.node();
  n.in_shape[0] = a.shape();
  n.p0 = axis;
  Tensor<S> res = t->emit(std::move(n), a.shape(), std::move(buf));
  t->node_mut(res.node()).saved[0] = res.detached();
  return res;
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& a, const Tensor<S>& gain, const Tensor<S>& bias,
                     std::type_identity_t<S> eps) {
  const Index d = a.shape().cols();
  if (a.rank() == 0 || d == 0) throw ShapeError("layer_norm: empty feature axis in " + a.shape().str());
  if (gain.rank() != 1 || bias.rank() != 1 || gain.size() != d || bias.size() != d)
    throw ShapeError("layer_norm: gain/bias must be rank-1 of length " + std::to_string(d));
  const Index r = a.shape().rows();
  typename Tensor<S>::Buffer xhat(a.size());
  typename Tensor<S>::Buffer inv(r);
  typename Tensor<S>::Buffer buf(a.size());
  auto A = a.arr2();
  Eigen::Map<typename Tensor<S>::Array2> XH(xhat.data(), r, d);
  Eigen::Map<typename Tensor<S>::Array2> Y(buf.data(), r, d);
  auto G = gain.array().transpose();
  auto Bb = bias.array().transpose();
  for (Index i = 0; i < r; ++i) {
    const S mu = A.row(i).mean();
    const S var = (A.row(i) - mu).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    inv(i) = is;
    XH.row(i) = (A.row(i) - mu) * is;
    Y.row(i) = XH.row(i) * G + Bb;
  }
  Tape<S>* t = detail::joint_tape<S>({&a, &gain, &bias});
  if (t == nullptr) return Tensor<S>(a.shape(), std::move(buf));
  TapeNode<S> n;
  n.kind = OpKind::kLayerNorm;
  n.in = {detail::node_on(a), detail::node_on(gain), detail::node_on(bias)};
  n.in_shape = {a.shape(), gain.shape(), bias.shape()};
  n.saved[0] = Tensor<S>(a.shape(), std::move(xhat));
  n.saved[1] = Tensor<S>(Shape(r), std::move(inv));
  n.saved[2] = gain.detached();
  n.c = eps;
  return t->emit(std::move(n), a.shape(), std::move(buf));
}

namespace detail {

template <typename S>
Tensor<S> reduce_op(OpKind kind, const Tensor<S>& a, std::optional<int> axis) {
  const Index r = a.shape().rows(), c = a.shape().cols();
  Shape out;
  if (!axis.has_value()) {
    out = Shape();
  } else if (a.rank() == 1) {
    if (*axis != 0) throw ShapeError("reduce: axis out of range for " + a.shape().str());
    out = Shape();
  } else if (a.rank() == 2) {
    if (*axis != 0 && *axis != 1) throw ShapeError("reduce: axis out of range for " + a.shape().str());
    out = Shape(*axis == 0 ? c : r);
  } else {
    out = Shape();  // rank 0: no-op reduction
  }
  typename Tensor<S>::Buffer buf(out.numel());
  auto A = a.arr2();
  const bool mean = kind == OpKind::kReduceMean;
  if (out.rank() == 0) {
    buf(0) = mean ? A.mean() : A.sum();
  } else if (*axis == 0) {
    Eigen::Map<typename Tensor<S>::Array2> R(buf.data(), 1, c);
    if (mean)
      R = A.colwise().mean();
    else
      R = A.colwise().sum();
  } else {
    Eigen::Map<typename Tensor<S>::Array2> R(buf.data(), out.numel(), 1);
    if (mean)
      R = A.rowwise().mean();
    else
      R = A.rowwise().sum();
  }
  Tape<S>* t = joint_tape<S>({&a});
  if (t == nullptr) return Tensor<S>(out, std::move(buf));
  TapeNode<S> n;
  n.kind = kind;
  n.in[0] = a.node();
  n.in_shape[0] = a.shape();
  n.p0 = axis.has_value() ? *axis : kNoAxis;
  return t->emit(std::move(n), out, std::move(buf));
}

}  // namespace detail

template <typename S>
Tensor<S> reduce_sum(const Tensor<S>& a, std::optional<int> axis = std::nullopt) {
  return detail::reduce_op(OpKind::kReduceSum, a, axis);
}
template <typename S>
Tensor<S> reduce_mean(const Tensor<S>& a, std::optional<int> axis = std::nullopt) {
  return detail::reduce_op(OpKind::kReduceMean, a, axis);
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape.numel() != a.size())
    throw ShapeError("reshape: cannot view " + a.shape().str() + " as " + shape.str());
  Tape<S>* t = detail::joint_tape<S>({&a});
  if (t == nullptr) return Tensor<S>(shape, a.buffer());
  TapeNode<S> n;
  n.kind = OpKind::kReshape;
  n.in[0] = a.node();
  n.in_shape[0] = a.shape();
  typename Tensor<S>::Buffer buf = a.array();  // nodes own their value; cheap at our sizes
  return t->emit(std::move(n), shape, std::move(buf));
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, int begin, int count) {
  if (a.rank() != 2) throw ShapeError("slice_cols: expects rank-2 operand, got " + a.shape().str());
  const Index r = a.shape().extent(0), c = a.shape().extent(1);
  if (begin < 0 || count <= 0 || begin + count > c)
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") out of bounds for " + a.shape().str());
  Shape out(r, count);
  typename Tensor<S>::Buffer buf(out.numel());
  Eigen::Map<typename Tensor<S>::Array2> R(buf.data(), r, count);
  R = a.arr2().block(0, begin, r, count);
  Tape<S>* t = detail::joint_tape<S>({&a});
  if (t == nullptr) return Tensor<S>(out, std::move(buf));
  TapeNode<S> n;
  n.kind = OpKind::kSliceCols;
  n.in[0] = a.node();
  n.in_shape[0] = a.shape();
  n.p0 = begin;
  n.p1 = count;
  return t->emit(std::move(n), out, std::move(buf));
}

// Operator sugar. operator* is elementwise.
template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, b);
}
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
  return sub(a, b);
}
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) {
  return mul(a, b);
}
template <typename S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) {
  return div(a, b);
}
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, std::type_identity_t<S> c) {
  return scale(a, c);
}
template <typename S>
Tensor<S> operator*(std::type_identity_t<S> c, const Tensor<S>& a) {
  return scale(a, c);
}
template <typename S>
Tensor<S> operator+(const Tensor<S>& a, std::type_identity_t<S> c) {
  return add_scalar(a, c);
}
template <typename S>
Tensor<S> operator-(const Tensor<S>& a) {
  return scale(a, S(-1));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

template <typename S>
Gradients<S> Tape<S>::backward(const Tensor<S>& output, const Tensor<S>& seed) {
  if (!output.attached() || output.tape() != this)
    throw ContractError("backward: output is not attached to this tape");
  if (seed.shape().numel() != output.shape().numel())
    throw ShapeError("backward: seed shape " + seed.shape().str() + " does not match output " +
                     output.shape().str());

  std::vector<Buffer> adj(nodes_.size());
  std::vector<char> has(nodes_.size(), 0);
  auto accum = [&](int id, const Buffer& g) {
    if (id < 0) return;
    if (!has[static_cast<std::size_t>(id)]) {
      adj[static_cast<std::size_t>(id)] = g;
      has[static_cast<std::size_t>(id)] = 1;
    } else {
      adj[static_cast<std::size_t>(id)] += g;
    }
  };
  accum(output.node(), seed.array());

  using detail::map2;
  using detail::reduce_to;

  for (int id = output.node(); id >= 0; --id) {
    const std::size_t ui = static_cast<std::size_t>(id);
    if (!has[ui]) continue;
    const TapeNode<S>& n = nodes_[ui];
    const Buffer& g = adj[ui];
    switch (n.kind) {
      case OpKind::kLeaf:
        break;
      case OpKind::kAdd: {
        if (n.in[0] >= 0) accum(n.in[0], reduce_to<S>(g, n.shape, n.in_shape[0]));
        if (n.in[1] >= 0) accum(n.in[1], reduce_to<S>(g, n.shape, n.in_shape[1]));
        break;
      }
      case OpKind::kSub: {
        if (n.in[0] >= 0) accum(n.in[0], reduce_to<S>(g, n.shape, n.in_shape[0]));
        if (n.in[1] >= 0) {
          Buffer r = reduce_to<S>(g, n.shape, n.in_shape[1]);
          r = -r;
          accum(n.in[1], r);
        }
        break;
      }
      case OpKind::kMul: {
        if (n.in[0] >= 0) {
          Buffer full = detail::broadcast_apply_raw<S, detail::MulT>(g, n.shape, n.saved[1].array(),
                                                                     n.in_shape[1], n.shape);
          accum(n.in[0], reduce_to<S>(full, n.shape, n.in_shape[0]));
        }
        if (n.in[1] >= 0) {
          Buffer full = detail::broadcast_apply_raw<S, detail::MulT>(g, n.shape, n.saved[0].array(),
                                                                     n.in_shape[0], n.shape);
          accum(n.in[1], reduce_to<S>(full, n.shape, n.in_shape[1]));
        }
        break;
      }
      case OpKind::kDiv: {
        // saved[1] = denominator, saved[2] = result.
        if (n.in[0] >= 0) {
          Buffer full = detail::broadcast_apply_raw<S, detail::DivT>(g, n.shape, n.saved[1].array(),
                                                                     n.in_shape[1], n.shape);
          accum(n.in[0], reduce_to<S>(full, n.shape, n.in_shape[0]));
        }
        if (n.in[1] >= 0) {
          Buffer t1 = g * n.saved[2].array();
          Buffer full = detail::broadcast_apply_raw<S, detail::DivT>(t1, n.shape, n.saved[1].array(),
                                                                     n.in_shape[1], n.shape);
          Buffer r = reduce_to<S>(full, n.shape, n.in_shape[1]);
          r = -r;
          accum(n.in[1], r);
        }
        break;
      }
      case OpKind::kScale: {
        Buffer r = g * n.c;
        accum(n.in[0], r);
        break;
      }
      case OpKind::kAddScalar:
        accum(n.in[0], g);
        break;
      case OpKind::kSigmoid: {
        const Buffer& y = n.saved[0].array();
        Buffer r = g * y * (S(1) - y);
        accum(n.in[0], r);
        break;
      }
      case OpKind::kTanh: {
        const Buffer& y = n.saved[0].array();
        Buffer r = g * (S(1) - y.square());
        accum(n.in[0], r);
        break;
      }
      case OpKind::kRelu: {
        const Buffer& x = n.saved[0].array();
        Buffer r = g * (x > S(0)).template cast<S>();
        accum(n.in[0], r);
        break;
      }
      case OpKind::kExp: {
        Buffer r = g * n.saved[0].array();
        accum(n.in[0], r);
        break;
      }
      case OpKind::kLog: {
        Buffer r = g / n.saved[0].array();
        accum(n.in[0], r);
        break;
      }
      case OpKind::kSoftplus: {
        const Buffer& x = n.saved[0].array();
        Buffer r = g * (S(1) / (S(1) + (-x).exp()));
        accum(n.in[0], r);
        break;
      }
      case OpKind::kMatmul: {
        const Index m = n.in_shape[0].extent(0), k = n.in_shape[0].extent(1);
        const Index nn = n.in_shape[1].extent(1);
        Eigen::Map<const typename Tensor<S>::Matrix> G(g.data(), m, nn);
        Eigen::Map<const typename Tensor<S>::Matrix> A(n.saved[0].data(), m, k);
        Eigen::Map<const typename Tensor<S>::Matrix> B(n.saved[1].data(), k, nn);
        if (n.in[0] >= 0) {
          Buffer ga(m * k);
          Eigen::Map<typename Tensor<S>::Matrix> GA(ga.data(), m, k);
          GA.noalias() = G * B.transpose();
          accum(n.in[0], ga);
        }
        if (n.in[1] >= 0) {
          Buffer gb(k * nn);
          Eigen::Map<typename Tensor<S>::Matrix> GB(gb.data(), k, nn);
          GB.noalias() = A.transpose() * G;
          accum(n.in[1], gb);
        }
        break;
      }
      case OpKind::kTranspose: {
        const Index r = n.in_shape[0].extent(0), c = n.in_shape[0].extent(1);
        Buffer ga(r * c);
        Eigen::Map<typename Tensor<S>::Array2> GA(ga.data(), r, c);
        GA = map2<S>(g, n.shape).transpose();
        accum(n.in[0], ga);
        break;
      }
      case OpKind::kSoftmax: {
        const Buffer& y = n.saved[0].array();
        const Index r = n.shape.rows(), c = n.shape.cols();
        auto Y = map2<S>(y, n.shape);
        auto G = map2<S>(g, n.shape);
        Buffer ga(n.shape.numel());
        Eigen::Map<typename Tensor<S>::Array2> GA(ga.data(), r, c);
        const bool rows = n.shape.rank() <= 1 || n.p0 == 1;
        if (rows) {
          for (Index i = 0; i < r; ++i) {
            const S s = (G.row(i) * Y.row(i)).sum();
            GA.row(i) = Y.row(i) * (G.row(i) - s);
          }
        } else {
          for (Index j = 0; j < c; ++j) {
            const S s = (G.col(j) * Y.col(j)).sum();
            GA.col(j) = Y.col(j) * (G.col(j) - s);
          }
        }
        accum(n.in[0], ga);
        break;
      }
      case OpKind::kLayerNorm: {
        const Index r = n.shape.rows(), d = n.shape.cols();
        auto G = map2<S>(g, n.shape);
        auto XH = n.saved[0].arr2();
        const Buffer& inv = n.saved[1].array();
        auto Gain = n.saved[2].array().transpose();
        if (n.in[1] >= 0) {
          Buffer gg(d);
          Eigen::Map<typename Tensor<S>::Array2> GG(gg.data(), 1, d);
          GG = (G * XH).colwise().sum();
          accum(n.in[1], gg);
        }
        if (n.in[2] >= 0) {
          Buffer gb(d);
          Eigen::Map<typename Tensor<S>::Array2> GB(gb.data(), 1, d);
          GB = G.colwise().sum();
          accum(n.in[2], gb);
        }
        if (n.in[0] >= 0) {
          Buffer ga(n.shape.numel());
          Eigen::Map<typename Tensor<S>::Array2> GA(ga.data(), r, d);
          for (Index i = 0; i < r; ++i) {
            auto dxh = (G.row(i) * Gain).eval();
            const S m1 = dxh.mean();
            const S m2 = (dxh * XH.row(i)).mean();
            GA.row(i) = inv(i) * (dxh - m1 - XH.row(i) * m2);
          }
          accum(n.in[0], ga);
        }
        break;
      }
      case OpKind::kReduceSum:
      case OpKind::kReduceMean: {
        const bool mean = n.kind == OpKind::kReduceMean;
        const Shape& in = n.in_shape[0];
        const Index r = in.rows(), c = in.cols();
        Buffer ga(in.numel());
        Eigen::Map<typename Tensor<S>::Array2> GA(ga.data(), r, c);
        if (n.p0 == kNoAxis || in.rank() <= 1) {
          if (n.p0 == kNoAxis) {
            const S v = mean ? g(0) / S(in.numel()) : g(0);
            GA.setConstant(v);
          } else {
            // rank-1 axis reduction to a scalar
            const S v = mean ? g(0) / S(in.numel()) : g(0);
            GA.setConstant(v);
          }
        } else if (n.p0 == 0) {
          Eigen::Map<const typename Tensor<S>::Array2> G(g.data(), 1, c);
          GA = G.replicate(r, 1);
          if (mean) GA /= S(r);
        } else {
          Eigen::Map<const typename Tensor<S>::Array2> G(g.data(), r, 1);
          GA = G.replicate(1, c);
          if (mean) GA /= S(c);
        }
        accum(n.in[0], ga);
        break;
      }
      case OpKind::kReshape:
        accum(n.in[0], g);
        break;
      case OpKind::kSliceCols: {
        const Shape& in = n.in_shape[0];
        const Index r = in.extent(0), c = in.extent(1);
        Buffer ga = Buffer::Zero(in.numel());
        Eigen::Map<typename Tensor<S>::Array2> GA(ga.data(), r, c);
        GA.block(0, n.p0, r, n.p1) = map2<S>(g, n.shape);
        accum(n.in[0], ga);
        break;
      }
    }
  }

  Gradients<S> out;
  for (const auto& [nid, pid] : params_) {
    const std::size_t uid = static_cast<std::size_t>(nid);
    if (has[uid]) {
      out.add(pid, Tensor<S>(nodes_[uid].shape, adj[uid]));
    } else {
      out.add(pid, Tensor<S>::zeros(nodes_[uid].shape));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// vjp / jvp / small numeric helpers
// ---------------------------------------------------------------------------

// Returns v'J of `map` at z: reverse mode through one application, with any
// values captured by `map` treated as constants.
template <typename S, typename F>
Tensor<S> vjp(F&& map, const Tensor<S>& z, const Tensor<S>& v) {
  Tape<S> tape;
  Tensor<S> zl = tape.leaf(detach(z), 0);
  Tensor<S> out = map(zl);
  if (out.shape().numel() != v.shape().numel())
    throw ShapeError("vjp: cotangent shape " + v.shape().str() + " does not match output " +
                     out.shape().str());
  if (!out.attached() || out.tape() != &tape) return Tensor<S>::zeros(z.shape());
  Gradients<S> g = tape.backward(out, v);
  return g.at(0);
}

template <typename S>
double linf_norm(const Tensor<S>& a) {
  return a.size() == 0 ? 0.0 : static_cast<double>(a.array().abs().maxCoeff());
}

template <typename S>
double frob_norm(const Tensor<S>& a) {
  return std::sqrt(static_cast<double>(a.array().template cast<double>().square().sum()));
}

// Central-difference directional derivative (f(z+hv) - f(z-hv)) / 2h.
template <typename S, typename F>
Tensor<S> jvp_fd(F&& map, const Tensor<S>& z, const Tensor<S>& v, std::optional<double> step = std::nullopt) {
  double h;
  if (step.has_value()) {
    h = *step;
    if (!(h > 0)) throw ContractError("jvp_fd: step must be positive");
  } else if (std::is_same_v<S, float>) {
    h = 1e-3 * (1.0 + linf_norm(z));
  } else {
    h = 1e-5;
  }
  Tensor<S> zd = detach(z), vd = detach(v);
  Tensor<S> zp = add(zd, scale(vd, static_cast<S>(h)));
  Tensor<S> zm = sub(zd, scale(vd, static_cast<S>(h)));
  Tensor<S> fp = detach(map(zp));
  Tensor<S> fm = detach(map(zm));
  return scale(sub(fp, fm), static_cast<S>(1.0 / (2.0 * h)));
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  typename Tensor<To>::Buffer b = a.array().template cast<To>();
  return Tensor<To>(a.shape(), std::move(b));
}

}  // namespace fixslot
