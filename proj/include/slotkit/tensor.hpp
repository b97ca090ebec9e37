#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace slotkit {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Shape/dimension mismatches between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse: non-scalar loss, tensor not on the tape, mixed tapes, ...
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline void check_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename S>
class Tape;

/// Dense row-major n-d array of scalars. Copies share the underlying buffer
/// (handle semantics, like Eigen::Map); ops always allocate fresh outputs.
/// A tensor is differentiable only while it carries a handle into a live
/// Tape; plain tensors are immutable values safe to share across threads.
template <typename S>
class Tensor {
 public:
  Tensor() : shape_{0}, data_(std::make_shared<ArrayX<S>>(0)) {}

  explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)) {
    data_ = std::make_shared<ArrayX<S>>(ArrayX<S>::Constant(shape_numel(shape_), fill));
  }

  Tensor(Shape shape, std::shared_ptr<ArrayX<S>> data, Tape<S>* tape = nullptr,
         int node = -1)
      : shape_(std::move(shape)), data_(std::move(data)), tape_(tape), node_(node) {
    check_shape(shape_numel(shape_) == data_->size(),
                "tensor data length does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), S(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), S(1)); }
  static Tensor full(Shape shape, S v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(S v) { return Tensor(Shape{}, v); }

  static Tensor from(Shape shape, std::initializer_list<S> vals) {
    return from(std::move(shape), std::vector<S>(vals));
  }
  static Tensor from(Shape shape, const std::vector<S>& vals) {
    Tensor t(std::move(shape));
    check_shape(t.size() == static_cast<Index>(vals.size()),
                "initializer length does not match shape " + shape_str(t.shape()));
    std::copy(vals.begin(), vals.end(), t.data_->data());
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_->size(); }
  Index extent(Index axis) const { return shape_[static_cast<size_t>(axis)]; }

  ArrayX<S>& array() { return *data_; }
  const ArrayX<S>& array() const { return *data_; }
  const std::shared_ptr<ArrayX<S>>& buffer() const { return data_; }

  S item() const {
    if (size() != 1) throw ContractError("item() requires a single-element tensor");
    return (*data_)[0];
  }

  /// Row-major element access, mostly for tests and fixtures.
  S& at(std::initializer_list<Index> idx) { return (*data_)[flat_index(idx)]; }
  S at(std::initializer_list<Index> idx) const { return (*data_)[flat_index(idx)]; }

  bool tracked() const { return tape_ != nullptr; }
  Tape<S>* tape() const { return tape_; }
  int node() const { return node_; }

  /// Same buffer, no tape handle.
  Tensor detached() const { return Tensor(shape_, data_); }

  /// Deep copy, no tape handle.
  Tensor clone() const {
    return Tensor(shape_, std::make_shared<ArrayX<S>>(*data_));
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    out.array() = data_->template cast<T>();
    return out;
  }

 private:
  Index flat_index(std::initializer_list<Index> idx) const {
    check_shape(static_cast<Index>(idx.size()) == rank(), "index rank mismatch");
    Index flat = 0;
    size_t a = 0;
    for (Index i : idx) {
      flat = flat * shape_[a] + i;
      ++a;
    }
    return flat;
  }

  Shape shape_;
  std::shared_ptr<ArrayX<S>> data_;
  Tape<S>* tape_ = nullptr;
  int node_ = -1;

  template <typename>
  friend class Tape;
};

/// Append-only record of primitive ops for one forward pass. Single-writer:
/// never share a live tape across concurrent forward passes. Gradients are
/// accumulated into per-leaf buffers; repeated backward() calls accumulate.
template <typename S>
class Tape {
 public:
  class Sink {
   public:
    /// Gradient accumulator of parent `slot`, or nullptr if that input was
    /// not tracked.
    ArrayX<S>* get(int slot) {
      int p = parents_->at(static_cast<size_t>(slot));
      if (p < 0) return nullptr;
      auto& g = (*work_)[static_cast<size_t>(p)];
      if (g.size() == 0) g = ArrayX<S>::Zero(tape_->nodes_[static_cast<size_t>(p)].size);
      return &g;
    }

   private:
    friend class Tape;
    const std::vector<int>* parents_;
    std::vector<ArrayX<S>>* work_;
    Tape* tape_;
  };

  using BackFn = std::function<void(const ArrayX<S>& out_grad, Sink& sink)>;

  /// Registers a leaf (parameter or input). Re-watching the same tensor on
  /// the same tape is a no-op returning the existing handle.
  int watch(Tensor<S>& t) {
    if (t.tape_ == this) return t.node_;
    if (t.tape_ != nullptr) throw ContractError("tensor is already tracked on another tape");
    int id = add_node({}, t.size(), nullptr);
    t.tape_ = this;
    t.node_ = id;
    return id;
  }

  int record(std::vector<int> parents, Index size, BackFn fn) {
    return add_node(std::move(parents), size, std::move(fn));
  }

  /// Reverse sweep from a scalar loss; adds gradients for every reachable
  /// leaf into its accumulator (unreached leaves read back as zeros).
  void backward(const Tensor<S>& loss) {
    if (loss.tape_ != this) throw ContractError("backward: loss is not recorded on this tape");
    if (loss.size() != 1) throw ContractError("backward: loss must be a scalar tensor");
    std::vector<ArrayX<S>> work(nodes_.size());
    work[static_cast<size_t>(loss.node_)] = ArrayX<S>::Ones(1);
    for (int id = loss.node_; id >= 0; --id) {
      auto& node = nodes_[static_cast<size_t>(id)];
      auto& g = work[static_cast<size_t>(id)];
      if (g.size() == 0 || !node.fn) continue;
      Sink sink;
      sink.parents_ = &node.parents;
      sink.work_ = &work;
      sink.tape_ = this;
      node.fn(g, sink);
      g.resize(0);  // free as we go
    }
    for (size_t id = 0; id < nodes_.size(); ++id) {
      if (nodes_[id].fn || work[id].size() == 0) continue;
      auto& acc = acc_[id];
      if (acc.size() == 0)
        acc = std::move(work[id]);
      else
        acc += work[id];
    }
  }

  /// Accumulated gradient of a leaf, shaped like it. Zeros if unreached.
  Tensor<S> grad(const Tensor<S>& leaf) const {
    size_t id = leaf_id(leaf);
    Tensor<S> out(leaf.shape());
    if (acc_[id].size() != 0) out.array() = acc_[id];
    return out;
  }

  bool has_grad(const Tensor<S>& leaf) const { return acc_[leaf_id(leaf)].size() != 0; }

  void clear_grads() {
    for (auto& a : acc_) a.resize(0);
  }

  size_t num_nodes() const { return nodes_.size(); }

 private:
  size_t leaf_id(const Tensor<S>& leaf) const {
    if (leaf.tape_ != this) throw ContractError("tensor is not tracked on this tape");
    size_t id = static_cast<size_t>(leaf.node_);
    if (nodes_[id].fn) throw ContractError("gradients are kept for leaf tensors only");
    return id;
  }

  struct Node {
    std::vector<int> parents;
    Index size;
    BackFn fn;  // null for leaves
  };

  int add_node(std::vector<int> parents, Index size, BackFn fn) {
    nodes_.push_back(Node{std::move(parents), size, std::move(fn)});
    acc_.emplace_back();
    return static_cast<int>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<ArrayX<S>> acc_;
};

/// Free-function alias matching the "backward(tape, loss)" phrasing.
template <typename S>
void backward(Tape<S>& tape, const Tensor<S>& loss) {
  tape.backward(loss);
}

// ---------------------------------------------------------------------------
// op helpers

namespace detail {

template <typename S>
Tape<S>* common_tape(std::initializer_list<const Tensor<S>*> ts) {
  Tape<S>* tp = nullptr;
  for (const Tensor<S>* t : ts) {
    if (!t->tracked()) continue;
    if (tp && tp != t->tape()) throw ContractError("operands recorded on different tapes");
    tp = t->tape();
  }
  return tp;
}

template <typename S>
int parent_id(const Tensor<S>& t, Tape<S>* tp) {
  return (tp && t.tape() == tp) ? t.node() : -1;
}

/// Ascending-value summation. Invariant under any permutation of the inputs,
/// which is what makes softmax-over-slots and slot reductions relocate
/// bit-exactly when slots are permuted.
template <typename S>
S ordered_sum(S* buf, Index n) {
  std::sort(buf, buf + n);
  S acc = S(0);
  for (Index i = 0; i < n; ++i) acc += buf[i];
  return acc;
}

/// C[m,n] = A[m,k] * B[k,n], row-major flats.
///
/// Two paths: a per-element dot kernel for matrices with few rows or columns
/// and Eigen GEMM otherwise. The dot kernel computes every output element as
/// an independent fixed-order reduction, so permuting rows of A (or columns
/// of B) relocates outputs bit-exactly; blocked GEMM does not guarantee that
/// (verified empirically), but is ~2x faster on conv-sized operands. All
/// slot-axis matmuls have K <= 16 on one side and take the dot path.
inline constexpr Index kDotPathLimit = 16;

template <typename S>
void gemm(const S* a, const S* b, S* c, Index m, Index k, Index n) {
  using CMap = Eigen::Map<const MatRM<S>>;
  using Map = Eigen::Map<MatRM<S>>;
  if (m <= kDotPathLimit || n <= kDotPathLimit) {
    MatRM<S> bt = CMap(b, k, n).transpose();
    CMap am(a, m, k);
    Map cm(c, m, n);
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) cm(i, j) = am.row(i).dot(bt.row(j));
    return;
  }
  Map(c, m, n).noalias() = CMap(a, m, k) * CMap(b, k, n);
}

template <typename S>
void gemm_acc(const S* a, const S* b, S* c, Index m, Index k, Index n) {
  MatRM<S> tmp(m, n);
  gemm(a, b, tmp.data(), m, k, n);
  Eigen::Map<MatRM<S>>(c, m, n) += tmp;
}

// Right-aligned broadcast of b onto a's trailing axes (or vice versa), with
// unit extents expanding. Mirrors the documented tensor broadcasting rules.
struct BcastPlan {
  Shape out;
  std::vector<Index> stride_a, stride_b;  // per out-axis; 0 where broadcast
  Index numel = 0;
};

inline BcastPlan broadcast_plan(const Shape& a, const Shape& b) {
  BcastPlan plan;
  size_t rank = std::max(a.size(), b.size());
  plan.out.resize(rank);
  plan.stride_a.assign(rank, 0);
  plan.stride_b.assign(rank, 0);
  // row-major strides of the original shapes
  std::vector<Index> sa(a.size()), sb(b.size());
  Index acc = 1;
  for (size_t i = a.size(); i-- > 0;) sa[i] = acc, acc *= a[i];
  acc = 1;
  for (size_t i = b.size(); i-- > 0;) sb[i] = acc, acc *= b[i];
  for (size_t i = 0; i < rank; ++i) {
    size_t oi = rank - 1 - i;
    Index ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    Index eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    check_shape(ea == eb || ea == 1 || eb == 1,
                "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    plan.out[oi] = std::max(ea, eb);
    plan.stride_a[oi] = (ea == 1 && eb != 1) ? 0 : (i < a.size() ? sa[a.size() - 1 - i] : 0);
    plan.stride_b[oi] = (eb == 1 && ea != 1) ? 0 : (i < b.size() ? sb[b.size() - 1 - i] : 0);
  }
  plan.numel = shape_numel(plan.out);
  return plan;
}

/// Visits every output element in row-major order, passing flat offsets
/// (out, a, b) to fn.
template <typename F>
void bcast_walk(const BcastPlan& p, F&& fn) {
  size_t rank = p.out.size();
  if (p.numel == 0) return;
  if (rank == 0) {
    fn(Index(0), Index(0), Index(0));
    return;
  }
  std::vector<Index> idx(rank, 0);
  Index oa = 0, ob = 0;
  for (Index o = 0;; ++o) {
    fn(o, oa, ob);
    size_t ax = rank;
    while (ax-- > 0) {
      ++idx[ax];
      oa += p.stride_a[ax];
      ob += p.stride_b[ax];
      if (idx[ax] < p.out[ax]) break;
      oa -= p.stride_a[ax] * p.out[ax];
      ob -= p.stride_b[ax] * p.out[ax];
      idx[ax] = 0;
      if (ax == 0) return;
    }
  }
}

struct AxisSplit {
  Index outer, len, inner;
};

inline AxisSplit axis_split(const Shape& shape, Index axis) {
  check_shape(axis >= 0 && axis < static_cast<Index>(shape.size()),
              "axis out of range for shape " + shape_str(shape));
  AxisSplit s{1, shape[static_cast<size_t>(axis)], 1};
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// structural ops

template <typename S>
Tensor<S> reshape(const Tensor<S>& t, Shape shape) {
  check_shape(shape_numel(shape) == t.size(),
              "reshape " + shape_str(t.shape()) + " -> " + shape_str(shape) +
                  " changes element count");
  // Shares both the buffer and the tape node: gradients flow through untouched.
  return Tensor<S>(std::move(shape), t.buffer(), t.tape(), t.node());
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check_shape(a.rank() == 2 && b.rank() == 2,
              "matmul requires rank-2 operands, got " + shape_str(a.shape()) + " and " +
                  shape_str(b.shape()));
  check_shape(a.shape()[1] == b.shape()[0],
              "matmul inner extents differ: " + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()));
  const Index m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<S> out(Shape{m, n});
  detail::gemm(a.array().data(), b.array().data(), out.array().data(), m, k, n);
  Tape<S>* tp = detail::common_tape<S>({&a, &b});
  if (!tp) return out;
  auto da = a.buffer();
  auto db = b.buffer();
  int node = tp->record(
      {detail::parent_id(a, tp), detail::parent_id(b, tp)}, out.size(),
      [da, db, m, k, n](const ArrayX<S>& g, typename Tape<S>::Sink& sink) {
        if (auto* ga = sink.get(0)) {  // dA = G * B^T
          MatRM<S> bt = Eigen::Map<const MatRM<S>>(db->data(), k, n).transpose();
          detail::gemm_acc(g.data(), bt.data(), ga->data(), m, n, k);
        }
        if (auto* gb = sink.get(1)) {  // dB = A^T * G
          MatRM<S> at = Eigen::Map<const MatRM<S>>(da->data(), m, k).transpose();
          detail::gemm_acc(at.data(), g.data(), gb->data(), k, m, n);
        }
      });
  return Tensor<S>(out.shape(), out.buffer(), tp, node);
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& t) {
  check_shape(t.rank() == 2, "transpose requires a rank-2 tensor, got " + shape_str(t.shape()));
  const Index m = t.shape()[0], n = t.shape()[1];
  Tensor<S> out(Shape{n, m});
  Eigen::Map<MatRM<S>>(out.array().data(), n, m) =
      Eigen::Map<const MatRM<S>>(t.array().data(), m, n).transpose();
  Tape<S>* tp = detail::common_tape<S>({&t});
  if (!tp) return out;
  int node = tp->record({detail::parent_id(t, tp)}, out.size(),
                        [m, n](const ArrayX<S>& g, typename Tape<S>::Sink& sink) {
                          if (auto* gt = sink.get(0)) {
                            Eigen::Map<MatRM<S>> gm(gt->data(), m, n);
                            gm += Eigen::Map<const MatRM<S>>(g.data(), n, m).transpose();
                          }
                        });
  return Tensor<S>(out.shape(), out.buffer(), tp, node);
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& t, Shape shape) {
  auto plan = detail::broadcast_plan(t.shape(), shape);
  check_shape(plan.out == shape,
              "cannot broadcast " + shape_str(t.shape()) + " to " + shape_str(shape));
  Tensor<S> out(shape);
  const S* src = t.array().data();
  S* dst = out.array().data();
  detail::bcast_walk(plan, [&](Index o, Index oa, Index) { dst[o] = src[oa]; });
  Tape<S>* tp = detail::common_tape<S>({&t});
  if (!tp) return out;
  int node = tp->record({detail::parent_id(t, tp)}, out.size(),
                        [plan](const ArrayX<S>& g, typename Tape<S>::Sink& sink) {
                          if (auto* gt = sink.get(0)) {
                            S* gd = gt->data();
                            detail::bcast_walk(plan, [&](Index o, Index oa, Index) {
                              gd[oa] += g[o];
                            });
                          }
                        });
  return Tensor<S>(out.shape(), out.buffer(), tp, node);
}

/// Stacks equal-shaped tensors along a new leading axis.
template <typename S>
Tensor<S> stack0(const std::vector<Tensor<S>>& parts) {
  check_shape(!parts.empty(), "stack0 of zero tensors");
  const Shape& base = parts[0].shape();
  Shape out_shape;
  out_shape.push_back(static_cast<Index>(parts.size()));
  out_shape.insert(out_shape.end(), base.begin(), base.end());
  Tensor<S> out(out_shape);
  const Index block = parts[0].size();
  std::vector<const Tensor<S>*> ptrs;
  for (size_t i = 0; i < parts.size(); ++i) {
    check_shape(parts[i].shape() == base, "stack0 operands must share a shape");
    out.array().segment(static_cast<Index>(i) * block, block) = parts[i].array();
    ptrs.push_back(&parts[i]);
  }
  Tape<S>* tp = nullptr;
  for (auto* p : ptrs)
    if (p->tracked()) {
      if (tp && tp != p->tape()) throw ContractError("operands recorded on different tapes");
      tp = p->tape();
    }
  if (!tp) return out;
  std::vector<int> parents;
  for (auto* p : ptrs) parents.push_back(detail::parent_id(*p, tp));
  int node = tp->record(std::move(parents), out.size(),
                        [block, n = parts.size()](const ArrayX<S>& g,
                                                  typename Tape<S>::Sink& sink) {
                          for (size_t i = 0; i < n; ++i)
                            if (auto* gp = sink.get(static_cast<int>(i)))
                              *gp += g.segment(static_cast<Index>(i) * block, block);
                        });
  return Tensor<S>(out.shape(), out.buffer(), tp, node);
}

/// Contiguous sub-range [i0, i1) along one axis.
template <typename S>
Tensor<S> slice_axis(const Tensor<S>& t, Index axis, Index i0, Index i1) {
  auto sp = detail::axis_split(t.shape(), axis);
  check_shape(0 <= i0 && i0 < i1 && i1 <= sp.len, "slice bounds out of range");
  Shape out_shape = t.shape();
  out_shape[static_cast<size_t>(axis)] = i1 - i0;
  Tensor<S> out(out_shape);
  const Index in_block = sp.len * sp.inner, out_block = (i1 - i0) * sp.inner;
  for (Index o = 0; o < sp.outer; ++o)
    out.array().segment(o * out_block, out_block) =
        t.array().segment(o * in_block + i0 * sp.inner, out_block);
  Tape<S>* tp = detail::common_tape<S>({&t});
  if (!tp) return out;
  int node = tp->record({detail::parent_id(t, tp)}, out.size(),
                        [sp, i0, in_block, out_block](const ArrayX<S>& g,
                                                      typename Tape<S>::Sink& sink) {
                          if (auto* gt = sink.get(0))
                            for (Index o = 0; o < sp.outer; ++o)
                              gt->segment(o * in_block + i0 * sp.inner, out_block) +=
                                  g.segment(o * out_block, out_block);
                        });
  return Tensor<S>(out.shape(), out.buffer(), tp, node);
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& t, Index r0, Index r1) {
  return slice_axis(t, 0, r0, r1);
}

// ---------------------------------------------------------------------------
// softmax / reductions

template <typename S>
Tensor<S> softmax(const Tensor<S>& t, Index axis) {
  auto sp = detail::axis_split(t.shape(), axis);
  Tensor<S> out(t.shape());
  const S* x = t.array().data();
  S* y = out.array().data();
  std::vector<S> lane(static_cast<size_t>(sp.len));
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.len * sp.inner + i;
      S mx = x[base];
      for (Index j = 1; j < sp.len; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      for (Index j = 0; j < sp.len; ++j) {
        lane[static_cast<size_t>(j)] = std::exp(x[base + j * sp.inner] - mx);
        y[base + j * sp.inner] = lane[static_cast<size_t>(j)];
      }
      S denom = detail::ordered_sum(lane.data(), sp.len);
      for (Index j = 0; j < sp.len; ++j) y[base + j * sp.inner] /= denom;
    }
  }
  Tape<S>* tp = detail::common_tape<S>({&t});
  if (!tp) return out;
  auto dy = out.buffer();
  int node = tp->record({detail::parent_id(t, tp)}, out.size(),
                        [dy, sp](const ArrayX<S>& g, typename Tape<S>::Sink& sink) {
                          auto* gt = sink.get(0);
                          if (!gt) return;
                          const S* yv = dy->data();
                          for (Index o = 0; o < sp.outer; ++o)
                            for (Index i = 0; i < sp.inner; ++i) {
                              const Index base = o * sp.len * sp.inner + i;
                              S dot = S(0);
                              for (Index j = 0; j < sp.len; ++j) {
                                const Index at = base + j * sp.inner;
                                dot += g[at] * yv[at];
                              }
                              for (Index j = 0; j < sp.len; ++j) {
                                const Index at = base + j * sp.inner;
                                (*gt)[at] += yv[at] * (g[at] - dot);
                              }
                            }
                        });
  return Tensor<S>(out.shape(), out.buffer(), tp, node);
}

enum class ReduceKind { kSum, kMean, kMax };

template <typename S>
Tensor<S> reduce(const Tensor<S>& t, Index axis, ReduceKind kind, bool keepdim = false) {
  auto sp = detail::axis_split(t.shape(), axis);
  Shape out_shape;
  for (Index i = 0; i < t.rank(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
      continue;
    }
    out_shape.push_back(t.shape()[static_cast<size_t>(i)]);
  }
  Tensor<S> out(out_shape);
  const S* x = t.array().data();
  S* y = out.array().data();
  std::vector<Index> argmax;
  if (kind == ReduceKind::kMax) argmax.resize(static_cast<size_t>(sp.outer * sp.inner));
  std::vector<S> lane(static_cast<size_t>(sp.len));
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.len * sp.inner + i;
      const Index oi = o * sp.inner + i;
      if (kind == ReduceKind::kMax) {
        S best = x[base];
        Index bj = 0;
        for (Index j = 1; j < sp.len; ++j) {
          S v = x[base + j * sp.inner];
          if (v > best) best = v, bj = j;  // ties keep the lowest index
        }
        y[oi] = best;
        argmax[static_cast<size_t>(oi)] = bj;
      } else {
        for (Index j = 0; j < sp.len; ++j) lane[static_cast<size_t>(j)] = x[base + j * sp.inner];
        S s = detail::ordered_sum(lane.data(), sp.len);
        y[oi] = kind == ReduceKind::kMean ? s / S(sp.len) : s;
      }
    }
  Tape<S>* tp = detail::common_tape<S>({&t});
  if (!tp) return out;
  int node = tp->record(
      {detail::parent_id(t, tp)}, out.size(),
      [sp, kind, argmax](const ArrayX<S>& g, typename Tape<S>::Sink& sink) {
        auto* gt = sink.get(0);
        if (!gt) return;
        for (Index o = 0; o < sp.outer; ++o)
          for (Index i = 0; i < sp.inner; ++i) {
            const Index base = o * sp.len * sp.inner + i;
            const Index oi = o * sp.inner + i;
            if (kind == ReduceKind::kMax) {
              (*gt)[base + argmax[static_cast<size_t>(oi)] * sp.inner] += g[oi];
            } else {
              const S gv = kind == ReduceKind::kMean ? g[oi] / S(sp.len) : g[oi];
              for (Index j = 0; j < sp.len; ++j) (*gt)[base + j * sp.inner] += gv;
            }
          }
      });
  return Tensor<S>(out.shape(), out.buffer(), tp, node);
}

template <typename S>
Tensor<S> reduce_sum(const Tensor<S>& t, Index axis, bool keepdim = false) {
  return reduce(t, axis, ReduceKind::kSum, keepdim);
}
template <typename S>
Tensor<S> reduce_mean(const Tensor<S>& t, Index axis, bool keepdim = false) {
  return reduce(t, axis, ReduceKind::kMean, keepdim);
}
template <typename S>
Tensor<S> reduce_max(const Tensor<S>& t, Index axis, bool keepdim = false) {
  return reduce(t, axis, ReduceKind::kMax, keepdim);
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& t) {
  return reshape(reduce_sum(reshape(t, Shape{t.size()}), 0), Shape{});
}
template <typename S>
Tensor<S> mean_all(const Tensor<S>& t) {
  return reshape(reduce_mean(reshape(t, Shape{t.size()}), 0), Shape{});
}

// ---------------------------------------------------------------------------
// elementwise

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

template <typename S>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, BinaryKind kind) {
  auto plan = detail::broadcast_plan(a.shape(), b.shape());
  Tensor<S> out(plan.out);
  const S* av = a.array().data();
  const S* bv = b.array().data();
  S* ov = out.array().data();
  const bool same = a.shape() == b.shape();
  if (same) {
    switch (kind) {
      case BinaryKind::kAdd: out.array() = a.array() + b.array(); break;
      case BinaryKind::kSub: out.array() = a.array() - b.array(); break;
      case BinaryKind::kMul: out.array() = a.array() * b.array(); break;
      case BinaryKind::kDiv: out.array() = a.array() / b.array(); break;
    }
  } else {
    detail::bcast_walk(plan, [&](Index o, Index oa, Index ob) {
      switch (kind) {
        case BinaryKind::kAdd: ov[o] = av[oa] + bv[ob]; break;
        case BinaryKind::kSub: ov[o] = av[oa] - bv[ob]; break;
        case BinaryKind::kMul: ov[o] = av[oa] * bv[ob]; break;
        case BinaryKind::kDiv: ov[o] = av[oa] / bv[ob]; break;
      }
    });
  }
  Tape<S>* tp = detail::common_tape<S>({&a, &b});
  if (!tp) return out;
  auto da = a.buffer();
  auto db = b.buffer();
  int node = tp->record(
      {detail::parent_id(a, tp), detail::parent_id(b, tp)}, out.size(),
      [plan, kind, da, db, same](const ArrayX<S>& g, typename Tape<S>::Sink& sink) {
        ArrayX<S>* ga = sink.get(0);
        ArrayX<S>* gb = sink.get(1);
        if (!ga && !gb) return;
        const S* av = da->data();
        const S* bv = db->data();
        if (same) {
          switch (kind) {
            case BinaryKind::kAdd:
              if (ga) *ga += g;
              if (gb) *gb += g;
              break;
            case BinaryKind::kSub:
              if (ga) *ga += g;
              if (gb) *gb -= g;
              break;
            case BinaryKind::kMul:
              if (ga) *ga += g * Eigen::Map<const ArrayX<S>>(bv, g.size());
              if (gb) *gb += g * Eigen::Map<const ArrayX<S>>(av, g.size());
              break;
            case BinaryKind::kDiv: {
              Eigen::Map<const ArrayX<S>> bm(bv, g.size());
              if (ga) *ga += g / bm;
              if (gb)
                *gb -= g * Eigen::Map<const ArrayX<S>>(av, g.size()) / (bm * bm);
              break;
            }
          }
          return;
        }
        detail::bcast_walk(plan, [&](Index o, Index oa, Index ob) {
          switch (kind) {
            case BinaryKind::kAdd:
              if (ga) (*ga)[oa] += g[o];
              if (gb) (*gb)[ob] += g[o];
              break;
            case BinaryKind::kSub:
              if (ga) (*ga)[oa] += g[o];
              if (gb) (*gb)[ob] -= g[o];
              break;
            case BinaryKind::kMul:
              if (ga) (*ga)[oa] += g[o] * bv[ob];
              if (gb) (*gb)[ob] += g[o] * av[oa];
              break;
            case BinaryKind::kDiv:
              if (ga) (*ga)[oa] += g[o] / bv[ob];
              if (gb) (*gb)[ob] -= g[o] * av[oa] / (bv[ob] * bv[ob]);
              break;
          }
        });
      });
  return Tensor<S>(out.shape(), out.buffer(), tp, node);
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(a, b, BinaryKind::kAdd);
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(a, b, BinaryKind::kSub);
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(a, b, BinaryKind::kMul);
}
template <typename S>
Tensor<S> divide(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(a, b, BinaryKind::kDiv);
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return divide(a, b); }

enum class UnaryKind { kExp, kLog, kRelu, kSigmoid, kTanh, kSqrt, kHuber };

template <typename S>
Tensor<S> unary_op(const Tensor<S>& t, UnaryKind kind) {
  Tensor<S> out(t.shape());
  const auto& x = t.array();
  auto& y = out.array();
  switch (kind) {
    case UnaryKind::kExp: y = x.exp(); break;
    case UnaryKind::kLog: y = x.log(); break;
    case UnaryKind::kRelu: y = x.max(S(0)); break;
    case UnaryKind::kSigmoid:
      for (Index i = 0; i < x.size(); ++i) {
        S v = x[i];
        y[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                         : std::exp(v) / (S(1) + std::exp(v));
      }
      break;
    case UnaryKind::kTanh: y = x.tanh(); break;
    case UnaryKind::kSqrt: y = x.sqrt(); break;
    case UnaryKind::kHuber:
      // 0.5 x^2 inside |x|<1, |x| - 0.5 outside; C1 at the joint.
      for (Index i = 0; i < x.size(); ++i) {
        S v = x[i];
        y[i] = std::abs(v) < S(1) ? S(0.5) * v * v : std::abs(v) - S(0.5);
      }
      break;
  }
  Tape<S>* tp = detail::common_tape<S>({&t});
  if (!tp) return out;
  auto dx = t.buffer();
  auto dy = out.buffer();
  int node = tp->record(
      {detail::parent_id(t, tp)}, out.size(),
      [kind, dx, dy](const ArrayX<S>& g, typename Tape<S>::Sink& sink) {
        auto* gt = sink.get(0);
        if (!gt) return;
        const auto& x = *dx;
        const auto& y = *dy;
        switch (kind) {
          case UnaryKind::kExp: *gt += g * y; break;
          case UnaryKind::kLog: *gt += g / x; break;
          case UnaryKind::kRelu: *gt += g * (x > S(0)).template cast<S>(); break;
          case UnaryKind::kSigmoid: *gt += g * y * (S(1) - y); break;
          case UnaryKind::kTanh: *gt += g * (S(1) - y * y); break;
          case UnaryKind::kSqrt: *gt += g * S(0.5) / y; break;
          case UnaryKind::kHuber: *gt += g * x.max(S(-1)).min(S(1)); break;
        }
      });
  return Tensor<S>(out.shape(), out.buffer(), tp, node);
}

template <typename S>
Tensor<S> exp(const Tensor<S>& t) { return unary_op(t, UnaryKind::kExp); }
template <typename S>
Tensor<S> log(const Tensor<S>& t) { return unary_op(t, UnaryKind::kLog); }
template <typename S>
Tensor<S> relu(const Tensor<S>& t) { return unary_op(t, UnaryKind::kRelu); }
template <typename S>
Tensor<S> sigmoid(const Tensor<S>& t) { return unary_op(t, UnaryKind::kSigmoid); }
template <typename S>
Tensor<S> tanh(const Tensor<S>& t) { return unary_op(t, UnaryKind::kTanh); }
template <typename S>
Tensor<S> sqrt(const Tensor<S>& t) { return unary_op(t, UnaryKind::kSqrt); }
template <typename S>
Tensor<S> huber(const Tensor<S>& t) { return unary_op(t, UnaryKind::kHuber); }

/// y = a * x + b with scalar coefficients.
template <typename S>
Tensor<S> affine(const Tensor<S>& t, S a, S b) {
  Tensor<S> out(t.shape());
  out.array() = t.array() * a + b;
  Tape<S>* tp = detail::common_tape<S>({&t});
  if (!tp) return out;
  int node = tp->record({detail::parent_id(t, tp)}, out.size(),
                        [a](const ArrayX<S>& g, typename Tape<S>::Sink& sink) {
                          if (auto* gt = sink.get(0)) *gt += g * a;
                        });
  return Tensor<S>(out.shape(), out.buffer(), tp, node);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& t, S a) { return affine(t, a, S(0)); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& t, S a) { return scale(t, a); }
template <typename S>
Tensor<S> operator*(S a, const Tensor<S>& t) { return scale(t, a); }
template <typename S>
Tensor<S> operator+(const Tensor<S>& t, S b) { return affine(t, S(1), b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& t, S b) { return affine(t, S(1), -b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& t) { return scale(t, S(-1)); }
template <typename S>
Tensor<S> operator-(S a, const Tensor<S>& t) { return affine(t, S(-1), a); }

// ---------------------------------------------------------------------------
// verification

/// Worst relative error between reverse-mode and central-difference gradients
/// of a scalar-valued function, using |a-b| / max(1e-8, |a|+|b|).
template <typename S, typename F>
S grad_check(F&& f, const Tensor<S>& x, S step) {
  Tape<S> tape;
  Tensor<S> xt = x.clone();
  tape.watch(xt);
  Tensor<S> y = f(xt);
  if (y.size() != 1) throw ContractError("grad_check requires a scalar-valued function");
  tape.backward(y);
  Tensor<S> g = tape.grad(xt);
  S worst = S(0);
  for (Index i = 0; i < x.size(); ++i) {
    Tensor<S> xp = x.clone();
    xp.array()[i] += step;
    S fp = f(xp).item();
    Tensor<S> xm = x.clone();
    xm.array()[i] -= step;
    S fm = f(xm).item();
    S fd = (fp - fm) / (S(2) * step);
    S an = g.array()[i];
    S err = std::abs(an - fd) / std::max(S(1e-8), std::abs(an) + std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace slotkit
