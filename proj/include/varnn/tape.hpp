// Copyright 2026 The varnn authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "varnn/fft.hpp"
#include "varnn/param_store.hpp"
#include "varnn/tensor.hpp"

namespace varnn {

/// Handle to a tensor recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class PadMode : uint8_t { kNone, kZero, kReflect };

/// Reverse-mode autodiff over a dynamically recorded op list.
///
/// A tape and its tensors are confined to one thread. reset() keeps node
/// buffers alive, so re-recording an identically shaped graph (the TBPTT
/// steady state) allocates nothing. backward() accumulates parameter
/// gradients into the bound ParamStore until ParamStore::zero_grads().
template <typename T>
class Tape {
  enum class Op : uint8_t {
    kLeaf, kParam,
    kMatmul, kMatmulNT,
    kAdd, kSub, kMul, kDiv,
    kAddRow, kMulRow,
    kHConcat, kSliceCols, kConcatCols,
    kTanh, kSigmoid, kLeakyRelu, kAbs, kSqrt, kLogFloor,
    kScale, kShift,
    kSum, kMean,
    kFrames, kRfftRows, kCMagRows,
    kRowBundleMatvec,
  };

  struct Node {
    Op op = Op::kLeaf;
    bool rg = false;        // requires grad
    bool has_grad = false;  // grad buffer seeded during current backward
    int a = -1, b = -1;     // input ids
    int i0 = 0, i1 = 0, i2 = 0;
    T s0 = T(0);
    int pool_off = 0, pool_len = 0;  // variadic inputs (kConcatCols)
    typename ParamStore<T>::Entry* entry = nullptr;
    Tensor<T> value;
    Tensor<T> gradv;
  };

 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return n_; }

  void reset() {
    n_ = 0;
    pool_n_ = 0;
  }

  // ---- leaves ------------------------------------------------------------

  Var leaf(Tensor<T> v, bool requires_grad = false) {
    Node& nd = push(Op::kLeaf, -1, -1, requires_grad && grad_enabled_);
    assign_value(nd, v.shape);
    nd.value.data = std::move(v.data);
    return Var{cur_};
  }

  Var constant(Tensor<T> v) { return leaf(std::move(v), false); }

  Var param(ParamStore<T>& store, const std::string& name) {
    auto& e = store.get(name);
    Node& nd = push(Op::kParam, -1, -1, e.trainable && grad_enabled_);
    nd.entry = &e;
    assign_value(nd, e.value.shape);
    nd.value.data = e.value.data;  // copy: tape values are immutable snapshots
    return Var{cur_};
  }

  // ---- access ------------------------------------------------------------

  const Tensor<T>& val(Var v) const { return node(v.id).value; }
  T scalar(Var v) const {
    const Tensor<T>& t = val(v);
    if (!t.is_scalar()) throw ContractError("scalar() on tensor of shape " + shape_str(t));
    return t.data[0];
  }
  /// Gradient of the most recent backward() w.r.t. a node (zeros if the
  /// loss did not reach it).
  Tensor<T> grad(Var v) const {
    const Node& nd = node(v.id);
    if (nd.has_grad) return nd.gradv;
    return Tensor<T>::zeros(nd.value.shape);
  }

  // ---- ops ---------------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Tensor<T>&A = val(a), &B = val(b);
    require_2d(A, "matmul lhs");
    require_2d(B, "matmul rhs");
    if (A.shape[1] != B.shape[0])
      throw DimensionError("matmul inner dims disagree: " + shape_str(A) + " vs " + shape_str(B));
    Node& nd = binop(Op::kMatmul, a, b, {A.shape[0], B.shape[1]});
    mat(nd.value).noalias() = cmat(A) * cmat(B);
    return Var{cur_};
  }

  /// a * b^T without materializing the transpose; the natural layout for
  /// weights stored [out x in].
  Var matmul_nt(Var a, Var b) {
    const Tensor<T>&A = val(a), &B = val(b);
    require_2d(A, "matmul_nt lhs");
    require_2d(B, "matmul_nt rhs");
    if (A.shape[1] != B.shape[1])
      throw DimensionError("matmul_nt inner dims disagree: " + shape_str(A) + " vs " + shape_str(B));
    Node& nd = binop(Op::kMatmulNT, a, b, {A.shape[0], B.shape[0]});
    mat(nd.value).noalias() = cmat(A) * cmat(B).transpose();
    return Var{cur_};
  }

  Var add(Var a, Var b) { return ew_binary(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return ew_binary(Op::kSub, a, b); }
  Var mul(Var a, Var b) { return ew_binary(Op::kMul, a, b); }
  Var div(Var a, Var b) { return ew_binary(Op::kDiv, a, b); }

  Var add_row(Var m, Var v) { return row_op(Op::kAddRow, m, v); }
  Var mul_row(Var m, Var v) { return row_op(Op::kMulRow, m, v); }

  Var hconcat(Var a, Var b) {
    const Tensor<T>&A = val(a), &B = val(b);
    require_2d(A, "hconcat lhs");
    require_2d(B, "hconcat rhs");
    if (A.shape[0] != B.shape[0])
      throw DimensionError("hconcat row counts disagree: " + shape_str(A) + " vs " + shape_str(B));
    Node& nd = binop(Op::kHConcat, a, b, {A.shape[0], A.shape[1] + B.shape[1]});
    const int r = A.shape[0], ca = A.shape[1], cb = B.shape[1];
    for (int i = 0; i < r; ++i) {
      T* out = nd.value.data.data() + static_cast<size_t>(i) * (ca + cb);
      std::copy_n(A.data.data() + static_cast<size_t>(i) * ca, ca, out);
      std::copy_n(B.data.data() + static_cast<size_t>(i) * cb, cb, out + ca);
    }
    return Var{cur_};
  }

  Var slice_cols(Var m, int c0, int c1) {
    const Tensor<T>& M = val(m);
    require_2d(M, "slice_cols");
    if (c0 < 0 || c1 > M.shape[1] || c0 >= c1)
      throw DimensionError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) + ") out of " + shape_str(M));
    Node& nd = binop(Op::kSliceCols, m, Var{-1}, {M.shape[0], c1 - c0});
    nd.i0 = c0;
    nd.i1 = c1;
    const int r = M.shape[0], c = M.shape[1], w = c1 - c0;
    for (int i = 0; i < r; ++i)
      std::copy_n(M.data.data() + static_cast<size_t>(i) * c + c0, w, nd.value.data.data() + static_cast<size_t>(i) * w);
    return Var{cur_};
  }

  /// Concatenate equal-row matrices (or row vectors) along columns.
  Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw ContractError("concat_cols of nothing");
    const int r = val(xs[0]).rows();
    int ctot = 0;
    bool rg = false;
    for (Var v : xs) {
      const Tensor<T>& t = val(v);
      if (t.rows() != r) throw DimensionError("concat_cols row counts disagree");
      ctot += t.cols();
      rg = rg || node(v.id).rg;
    }
    Node& nd = push(Op::kConcatCols, -1, -1, rg && grad_enabled_);
    nd.pool_off = static_cast<int>(pool_n_);
    nd.pool_len = static_cast<int>(xs.size());
    for (Var v : xs) pool_push(v.id);
    assign_value(nd, r == 1 && val(xs[0]).rank() == 1 ? std::vector<int>{ctot} : std::vector<int>{r, ctot});
    int off = 0;
    for (Var v : xs) {
      const Tensor<T>& t = val(v);
      const int c = t.cols();
      for (int i = 0; i < r; ++i)
        std::copy_n(t.data.data() + static_cast<size_t>(i) * c, c, nd.value.data.data() + static_cast<size_t>(i) * ctot + off);
      off += c;
    }
    return Var{cur_};
  }

  Var tanh(Var a) {
    Node& nd = unop(Op::kTanh, a);
    arr(nd.value) = carr(val(a)).tanh();
    return Var{cur_};
  }
  Var sigmoid(Var a) {
    Node& nd = unop(Op::kSigmoid, a);
    arr(nd.value) = T(1) / (T(1) + (-carr(val(a))).exp());
    return Var{cur_};
  }
  Var leaky_relu(Var a, T slope) {
    Node& nd = unop(Op::kLeakyRelu, a);
    nd.s0 = slope;
    const auto x = carr(val(a));
    arr(nd.value) = (x > T(0)).select(x, x * slope);
    return Var{cur_};
  }
  Var abs(Var a) {
    Node& nd = unop(Op::kAbs, a);
    arr(nd.value) = carr(val(a)).abs();
    return Var{cur_};
  }
  /// sqrt with subgradient 0 at x == 0 (norms of identical signals).
  Var sqrt(Var a) {
    Node& nd = unop(Op::kSqrt, a);
    arr(nd.value) = carr(val(a)).sqrt();
    return Var{cur_};
  }
  /// log(max(x, floor)); zero slope below the floor.
  Var log_floor(Var a, T floor) {
    Node& nd = unop(Op::kLogFloor, a);
    nd.s0 = floor;
    arr(nd.value) = carr(val(a)).max(floor).log();
    return Var{cur_};
  }
  Var scale(Var a, T s) {
    Node& nd = unop(Op::kScale, a);
    nd.s0 = s;
    arr(nd.value) = carr(val(a)) * s;
    return Var{cur_};
  }
  Var shift(Var a, T s) {
    Node& nd = unop(Op::kShift, a);
    nd.s0 = s;
    arr(nd.value) = carr(val(a)) + s;
    return Var{cur_};
  }

  Var sum(Var a) {
    Node& nd = binop(Op::kSum, a, Var{-1}, {1});
    nd.value.data[0] = carr(val(a)).sum();
    return Var{cur_};
  }
  Var mean(Var a) {
    Node& nd = binop(Op::kMean, a, Var{-1}, {1});
    nd.value.data[0] = carr(val(a)).sum() / static_cast<T>(val(a).numel());
    return Var{cur_};
  }

  /// Slice [B x n] (or [n]) into analysis frames, stacked as
  /// [(B*F) x frame]. kNone frames start at 0 and stop when the window no
  /// longer fits (zero-padding only if n < frame); kZero additionally
  /// covers the tail; kReflect centers with frame/2 reflected samples.
  Var frames(Var x, int frame, int hop, PadMode pad) {
    const Tensor<T>& X = val(x);
    if (frame <= 0 || hop <= 0 || hop > frame)
      throw ConfigError("frames: need 0 < hop <= frame, got frame=" + std::to_string(frame) + " hop=" + std::to_string(hop));
    const int batch = X.rank() == 2 ? X.shape[0] : 1;
    const int n = X.cols();
    if (n < 1) throw DimensionError("frames: empty input");
    const int per = frames_per_row(n, frame, hop, pad);
    Node& nd = binop(Op::kFrames, x, Var{-1}, {batch * per, frame});
    nd.i0 = frame;
    nd.i1 = hop;
    nd.i2 = static_cast<int>(pad);
    for (int b = 0; b < batch; ++b) {
      const T* src = X.data.data() + static_cast<size_t>(b) * n;
      for (int f = 0; f < per; ++f) {
        T* dst = nd.value.data.data() + (static_cast<size_t>(b) * per + f) * frame;
        for (int j = 0; j < frame; ++j) {
          const int idx = frame_src_index(n, frame, hop, pad, f, j);
          dst[j] = idx >= 0 ? src[idx] : T(0);
        }
      }
    }
    return Var{cur_};
  }

  /// Rowwise real FFT: [r x n] -> [r x 2*(n/2+1)] interleaved (re, im).
  Var rfft_rows(Var m) {
    const Tensor<T>& M = val(m);
    require_2d(M, "rfft_rows");
    const int n = M.shape[1];
    if (!detail::is_pow2(static_cast<size_t>(n))) throw ConfigError("rfft_rows: FFT size must be a power of two, got " + std::to_string(n));
    const int nb = n / 2 + 1;
    Node& nd = binop(Op::kRfftRows, m, Var{-1}, {M.shape[0], 2 * nb});
    for (int i = 0; i < M.shape[0]; ++i)
      rfft(M.data.data() + static_cast<size_t>(i) * n, static_cast<size_t>(n), nd.value.data.data() + static_cast<size_t>(i) * 2 * nb);
    return Var{cur_};
  }

  /// Rowwise complex magnitude of interleaved (re, im) pairs. Subgradient
  /// 0 where the magnitude is exactly zero.
  Var cmag_rows(Var m) {
    const Tensor<T>& M = val(m);
    require_2d(M, "cmag_rows");
    if (M.shape[1] % 2) throw DimensionError("cmag_rows expects interleaved pairs, got " + shape_str(M));
    const int k = M.shape[1] / 2;
    Node& nd = binop(Op::kCMagRows, m, Var{-1}, {M.shape[0], k});
    const T* src = M.data.data();
    T* dst = nd.value.data.data();
    const size_t cnt = static_cast<size_t>(M.shape[0]) * k;
    for (size_t i = 0; i < cnt; ++i) dst[i] = std::sqrt(src[2 * i] * src[2 * i] + src[2 * i + 1] * src[2 * i + 1]);
    return Var{cur_};
  }

  /// Per-row generated-weight matvec: bundles [B x (out*in)], x [B x in]
  /// -> y [B x out] with y[b] = W_b x[b], W_b = bundles[b] reshaped
  /// [out x in] row-major.
  Var row_bundle_matvec(Var bundles, Var x, int out_dim) {
    const Tensor<T>&W = val(bundles), &X = val(x);
    require_2d(W, "row_bundle_matvec bundles");
    require_2d(X, "row_bundle_matvec x");
    const int batch = X.shape[0], in = X.shape[1];
    if (W.shape[0] != batch || W.shape[1] != out_dim * in)
      throw DimensionError("row_bundle_matvec: bundles " + shape_str(W) + " incompatible with x " + shape_str(X) + " out=" + std::to_string(out_dim));
    Node& nd = binop(Op::kRowBundleMatvec, bundles, x, {batch, out_dim});
    nd.i0 = out_dim;
    nd.i1 = in;
    for (int b = 0; b < batch; ++b) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Wb(W.data.data() + static_cast<size_t>(b) * out_dim * in, out_dim, in);
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xb(X.data.data() + static_cast<size_t>(b) * in, in);
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> yb(nd.value.data.data() + static_cast<size_t>(b) * out_dim, out_dim);
      yb.noalias() = Wb * xb;
    }
    return Var{cur_};
  }

  /// Copy a value off the tape (state carry between TBPTT segments).
  Tensor<T> detach(Var v) const { return val(v); }

  // ---- backward ----------------------------------------------------------

  void backward(Var loss) {
    if (n_ == 0) throw ContractError("backward on an empty tape");
    Node& L = node(loss.id);
    if (!L.value.is_scalar()) throw ContractError("backward requires a scalar loss, got " + shape_str(L.value));
    for (size_t i = 0; i < n_; ++i) nodes_[i].has_grad = false;
    if (!L.rg) return;  // loss not reachable from any trainable leaf
    ensure_grad(L);
    L.gradv.data[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& nd = nodes_[i];
      if (!nd.rg || !nd.has_grad) continue;
      backward_node(nd);
    }
  }

 private:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;
  using MapA = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
  using CMapA = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

  static MapM mat(Tensor<T>& t) { return MapM(t.data.data(), t.rows(), t.cols()); }
  static CMapM cmat(const Tensor<T>& t) { return CMapM(t.data.data(), t.rows(), t.cols()); }
  static MapA arr(Tensor<T>& t) { return MapA(t.data.data(), t.data.size()); }
  static CMapA carr(const Tensor<T>& t) { return CMapA(t.data.data(), t.data.size()); }

  static void require_2d(const Tensor<T>& t, const char* what) {
    if (t.rank() != 2) throw DimensionError(std::string(what) + " must be 2-D, got " + shape_str(t));
  }

  Node& node(int id) {
    if (id < 0 || static_cast<size_t>(id) >= n_) throw ContractError("Var does not belong to this tape");
    return nodes_[id];
  }
  const Node& node(int id) const { return const_cast<Tape*>(this)->node(id); }

  Node& push(Op op, int a, int b, bool rg) {
    if (n_ == nodes_.size()) nodes_.emplace_back();
    Node& nd = nodes_[n_];
    cur_ = static_cast<int>(n_);
    ++n_;
    nd.op = op;
    nd.rg = rg;
    nd.has_grad = false;
    nd.a = a;
    nd.b = b;
    nd.i0 = nd.i1 = nd.i2 = 0;
    nd.s0 = T(0);
    nd.pool_off = nd.pool_len = 0;
    nd.entry = nullptr;
    return nd;
  }

  void assign_value(Node& nd, std::vector<int> shape) {
    nd.value.shape = std::move(shape);
    nd.value.data.resize(Tensor<T>::numel_of(nd.value.shape));
  }

  Node& unop(Op op, Var a) {
    const Node& na = node(a.id);
    Node& nd = push(op, a.id, -1, na.rg);
    assign_value(nd, nodes_[a.id].value.shape);
    return nd;
  }

  Node& binop(Op op, Var a, Var b, std::vector<int> out_shape) {
    const bool rg = node(a.id).rg || (b.valid() && node(b.id).rg);
    Node& nd = push(op, a.id, b.valid() ? b.id : -1, rg && grad_enabled_);
    assign_value(nd, std::move(out_shape));
    return nd;
  }

  Var ew_binary(Op op, Var a, Var b) {
    const Tensor<T>&A = val(a), &B = val(b);
    const bool bs = B.is_scalar(), as = A.is_scalar();
    if (!A.same_shape(B) && !bs && !as)
      throw DimensionError("elementwise shapes disagree: " + shape_str(A) + " vs " + shape_str(B));
    Node& nd = binop(op, a, b, (as && !bs) ? B.shape : A.shape);
    const auto av = carr(A), bv = carr(B);
    auto y = arr(nd.value);
    auto apply = [&](auto&& lhs, auto&& rhs) {
      switch (op) {
        case Op::kAdd: y = lhs + rhs; break;
        case Op::kSub: y = lhs - rhs; break;
        case Op::kMul: y = lhs * rhs; break;
        case Op::kDiv: y = lhs / rhs; break;
        default: throw ContractError("not an elementwise op");
      }
    };
    if (A.same_shape(B)) apply(av, bv);
    else if (bs) apply(av, B.data[0]);
    else apply(A.data[0], bv);
    return Var{cur_};
  }

  Var row_op(Op op, Var m, Var v) {
    const Tensor<T>&M = val(m), &V = val(v);
    require_2d(M, "row op matrix");
    if (static_cast<int>(V.numel()) != M.shape[1])
      throw DimensionError("row vector length " + shape_str(V) + " does not match matrix " + shape_str(M));
    Node& nd = binop(op, m, v, M.shape);
    const int r = M.shape[0], c = M.shape[1];
    for (int i = 0; i < r; ++i) {
      const T* a = M.data.data() + static_cast<size_t>(i) * c;
      T* y = nd.value.data.data() + static_cast<size_t>(i) * c;
      if (op == Op::kAddRow)
        for (int j = 0; j < c; ++j) y[j] = a[j] + V.data[j];
      else
        for (int j = 0; j < c; ++j) y[j] = a[j] * V.data[j];
    }
    return Var{cur_};
  }

  void ensure_grad(Node& nd) {
    if (nd.has_grad) return;
    nd.gradv.shape = nd.value.shape;
    nd.gradv.data.assign(nd.value.data.size(), T(0));
    nd.has_grad = true;
  }
  // Returns the grad buffer of input `id`, creating it on first touch.
  Tensor<T>* in_grad(int id) {
    if (id < 0) return nullptr;
    Node& nd = nodes_[id];
    if (!nd.rg) return nullptr;
    ensure_grad(nd);
    return &nd.gradv;
  }

  static int frames_per_row(int n, int frame, int hop, PadMode pad) {
    switch (pad) {
      case PadMode::kNone: return n >= frame ? (n - frame) / hop + 1 : 1;
      case PadMode::kZero: return n <= frame ? 1 : static_cast<int>((n - frame + hop - 1) / hop) + 1;
      case PadMode::kReflect: {
        const int padded = n + 2 * (frame / 2);
        return (padded - frame) / hop + 1;
      }
    }
    return 1;
  }

  // Source sample index for frame element (f, j), or -1 for zero padding.
  static int frame_src_index(int n, int frame, int hop, PadMode pad, int f, int j) {
    int idx = f * hop + j;
    if (pad == PadMode::kReflect) {
      idx -= frame / 2;
      if (idx < 0) idx = -idx;
      if (idx >= n) idx = 2 * n - 2 - idx;
      if (idx < 0 || idx >= n) return -1;  // degenerate tiny inputs
      return idx;
    }
    return idx < n ? idx : -1;
  }

  void backward_node(Node& nd) {
    const Tensor<T>& g = nd.gradv;
    Tensor<T>* ga = nd.a >= 0 ? in_grad(nd.a) : nullptr;
    Tensor<T>* gb = nd.b >= 0 ? in_grad(nd.b) : nullptr;
    switch (nd.op) {
      case Op::kLeaf:
        break;
      case Op::kParam:
        // Accumulate-until-reset: sums across backward calls and segments.
        carr_add(nd.entry->grad, g);
        break;
      case Op::kMatmul: {
        const Tensor<T>&A = nodes_[nd.a].value, &B = nodes_[nd.b].value;
        if (ga) mat(*ga).noalias() += cmat(g) * cmat(B).transpose();
        if (gb) mat(*gb).noalias() += cmat(A).transpose() * cmat(g);
        break;
      }
      case Op::kMatmulNT: {
        const Tensor<T>&A = nodes_[nd.a].value, &B = nodes_[nd.b].value;
        if (ga) mat(*ga).noalias() += cmat(g) * cmat(B);
        if (gb) mat(*gb).noalias() += cmat(g).transpose() * cmat(A);
        break;
      }
      case Op::kAdd: {
        if (ga) bcast_acc(*ga, g, +1);
        if (gb) bcast_acc(*gb, g, +1);
        break;
      }
      case Op::kSub: {
        if (ga) bcast_acc(*ga, g, +1);
        if (gb) bcast_acc(*gb, g, -1);
        break;
      }
      case Op::kMul: {
        const Tensor<T>&A = nodes_[nd.a].value, &B = nodes_[nd.b].value;
        if (ga) bcast_acc_scaled(*ga, g, B);
        if (gb) bcast_acc_scaled(*gb, g, A);
        break;
      }
      case Op::kDiv: {
        const Tensor<T>&A = nodes_[nd.a].value, &B = nodes_[nd.b].value;
        if (ga) {
          if (ga->same_shape(g)) {
            if (B.is_scalar() && !g.is_scalar()) arr(*ga) += carr(g) / B.data[0];
            else arr(*ga) += carr(g) / carr(B);
          } else {  // a scalar
            ga->data[0] += (carr(g) / carr(B)).sum();
          }
        }
        if (gb) {
          const auto& y = nd.value;
          if (gb->same_shape(g)) {
            if (A.is_scalar() && !g.is_scalar()) arr(*gb) -= carr(g) * carr(y) / carr(B);
            else arr(*gb) -= carr(g) * carr(y) / carr(B);
          } else {
            gb->data[0] -= (carr(g) * carr(y) / carr(B).replicate(g.data.size(), 1)).sum();
          }
        }
        break;
      }
      case Op::kAddRow: {
        if (ga) arr(*ga) += carr(g);
        if (gb) {
          const int r = g.rows(), c = g.cols();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) gb->data[j] += g.data[static_cast<size_t>(i) * c + j];
        }
        break;
      }
      case Op::kMulRow: {
        const Tensor<T>&M = nodes_[nd.a].value, &V = nodes_[nd.b].value;
        const int r = g.rows(), c = g.cols();
        for (int i = 0; i < r; ++i) {
          const T* gi = g.data.data() + static_cast<size_t>(i) * c;
          if (ga) {
            T* o = ga->data.data() + static_cast<size_t>(i) * c;
            for (int j = 0; j < c; ++j) o[j] += gi[j] * V.data[j];
          }
          if (gb) {
            const T* mi = M.data.data() + static_cast<size_t>(i) * c;
            for (int j = 0; j < c; ++j) gb->data[j] += gi[j] * mi[j];
          }
        }
        break;
      }
      case Op::kHConcat: {
        const int r = g.rows(), ca = nodes_[nd.a].value.cols(), cb = nodes_[nd.b].value.cols();
        for (int i = 0; i < r; ++i) {
          const T* gi = g.data.data() + static_cast<size_t>(i) * (ca + cb);
          if (ga)
            for (int j = 0; j < ca; ++j) ga->data[static_cast<size_t>(i) * ca + j] += gi[j];
          if (gb)
            for (int j = 0; j < cb; ++j) gb->data[static_cast<size_t>(i) * cb + j] += gi[ca + j];
        }
        break;
      }
      case Op::kSliceCols: {
        if (ga) {
          const int r = g.rows(), w = g.cols(), c = ga->cols();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j) ga->data[static_cast<size_t>(i) * c + nd.i0 + j] += g.data[static_cast<size_t>(i) * w + j];
        }
        break;
      }
      case Op::kConcatCols: {
        const int r = g.rows(), ctot = g.cols();
        int off = 0;
        for (int p = 0; p < nd.pool_len; ++p) {
          const int id = pool_[nd.pool_off + p];
          const int c = nodes_[id].value.cols();
          if (Tensor<T>* gi = in_grad(id)) {
            for (int i = 0; i < r; ++i)
              for (int j = 0; j < c; ++j) gi->data[static_cast<size_t>(i) * c + j] += g.data[static_cast<size_t>(i) * ctot + off + j];
          }
          off += c;
        }
        break;
      }
      case Op::kTanh:
        if (ga) arr(*ga) += carr(g) * (T(1) - carr(nd.value).square());
        break;
      case Op::kSigmoid:
        if (ga) arr(*ga) += carr(g) * carr(nd.value) * (T(1) - carr(nd.value));
        break;
      case Op::kLeakyRelu:
        if (ga) {
          const auto x = carr(nodes_[nd.a].value);
          arr(*ga) += carr(g) * (x > T(0)).select(Eigen::Array<T, Eigen::Dynamic, 1>::Ones(x.size()), Eigen::Array<T, Eigen::Dynamic, 1>::Constant(x.size(), nd.s0));
        }
        break;
      case Op::kAbs:
        if (ga) arr(*ga) += carr(g) * carr(nodes_[nd.a].value).sign();
        break;
      case Op::kSqrt:
        if (ga) {
          const size_t cnt = g.data.size();
          for (size_t i = 0; i < cnt; ++i) {
            const T y = nd.value.data[i];
            if (y > T(0)) ga->data[i] += g.data[i] / (T(2) * y);
          }
        }
        break;
      case Op::kLogFloor:
        if (ga) {
          const size_t cnt = g.data.size();
          const Tensor<T>& x = nodes_[nd.a].value;
          for (size_t i = 0; i < cnt; ++i)
            if (x.data[i] > nd.s0) ga->data[i] += g.data[i] / x.data[i];
        }
        break;
      case Op::kScale:
        if (ga) arr(*ga) += carr(g) * nd.s0;
        break;
      case Op::kShift:
        if (ga) arr(*ga) += carr(g);
        break;
      case Op::kSum:
        if (ga) arr(*ga) += g.data[0];
        break;
      case Op::kMean:
        if (ga) arr(*ga) += g.data[0] / static_cast<T>(ga->numel());
        break;
      case Op::kFrames: {
        if (ga) {
          const int frame = nd.i0, hop = nd.i1;
          const PadMode pad = static_cast<PadMode>(nd.i2);
          const int n = ga->cols();
          const int batch = ga->rows();
          const int per = g.rows() / batch;
          for (int b = 0; b < batch; ++b) {
            T* dst = ga->data.data() + static_cast<size_t>(b) * n;
            for (int f = 0; f < per; ++f) {
              const T* gi = g.data.data() + (static_cast<size_t>(b) * per + f) * frame;
              for (int j = 0; j < frame; ++j) {
                const int idx = frame_src_index(n, frame, hop, pad, f, j);
                if (idx >= 0) dst[idx] += gi[j];
              }
            }
          }
        }
        break;
      }
      case Op::kRfftRows: {
        if (ga) {
          const int n = ga->cols();
          const int r = g.rows();
          std::vector<T> gx(n);
          for (int i = 0; i < r; ++i) {
            rfft_adjoint(g.data.data() + static_cast<size_t>(i) * g.cols(), static_cast<size_t>(n), gx.data());
            T* dst = ga->data.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) dst[j] += gx[j];
          }
        }
        break;
      }
      case Op::kCMagRows: {
        if (ga) {
          const Tensor<T>& x = nodes_[nd.a].value;
          const size_t cnt = g.data.size();
          for (size_t i = 0; i < cnt; ++i) {
            const T y = nd.value.data[i];
            if (y > T(0)) {
              ga->data[2 * i] += g.data[i] * x.data[2 * i] / y;
              ga->data[2 * i + 1] += g.data[i] * x.data[2 * i + 1] / y;
            }
          }
        }
        break;
      }
      case Op::kRowBundleMatvec: {
        const Tensor<T>&W = nodes_[nd.a].value, &X = nodes_[nd.b].value;
        const int batch = X.shape[0], in = nd.i1, out = nd.i0;
        for (int b = 0; b < batch; ++b) {
          const T* gb_ = g.data.data() + static_cast<size_t>(b) * out;
          if (ga) {
            T* gw = ga->data.data() + static_cast<size_t>(b) * out * in;
            const T* xb = X.data.data() + static_cast<size_t>(b) * in;
            for (int o = 0; o < out; ++o)
              for (int j = 0; j < in; ++j) gw[static_cast<size_t>(o) * in + j] += gb_[o] * xb[j];
          }
          if (gb) {
            T* gx = gb->data.data() + static_cast<size_t>(b) * in;
            const T* wb = W.data.data() + static_cast<size_t>(b) * out * in;
            for (int o = 0; o < out; ++o)
              for (int j = 0; j < in; ++j) gx[j] += gb_[o] * wb[static_cast<size_t>(o) * in + j];
          }
        }
        break;
      }
    }
  }

  static void carr_add(Tensor<T>& dst, const Tensor<T>& src) {
    MapA(dst.data.data(), dst.data.size()) += CMapA(src.data.data(), src.data.size());
  }

  // grad accumulation where dst may be the scalar side of a broadcast
  static void bcast_acc(Tensor<T>& dst, const Tensor<T>& g, int sign) {
    if (dst.data.size() == g.data.size()) {
      if (sign > 0) MapA(dst.data.data(), dst.data.size()) += CMapA(g.data.data(), g.data.size());
      else MapA(dst.data.data(), dst.data.size()) -= CMapA(g.data.data(), g.data.size());
    } else {
      dst.data[0] += static_cast<T>(sign) * CMapA(g.data.data(), g.data.size()).sum();
    }
  }
  // dst += g .* other with scalar handling on either side
  static void bcast_acc_scaled(Tensor<T>& dst, const Tensor<T>& g, const Tensor<T>& other) {
    if (dst.data.size() == g.data.size()) {
      if (other.data.size() == g.data.size()) MapA(dst.data.data(), dst.data.size()) += CMapA(g.data.data(), g.data.size()) * CMapA(other.data.data(), other.data.size());
      else MapA(dst.data.data(), dst.data.size()) += CMapA(g.data.data(), g.data.size()) * other.data[0];
    } else {
      dst.data[0] += (CMapA(g.data.data(), g.data.size()) * CMapA(other.data.data(), other.data.size())).sum();
    }
  }

  void pool_push(int id) {
    if (pool_n_ == pool_.size()) pool_.push_back(id);
    else pool_[pool_n_] = id;
    ++pool_n_;
  }

  std::vector<Node> nodes_;
  size_t n_ = 0;
  std::vector<int> pool_;
  size_t pool_n_ = 0;
  int cur_ = -1;
  bool grad_enabled_ = true;
};

}  // namespace varnn
