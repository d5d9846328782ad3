// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "moelpr/errors.hpp"
#include "moelpr/tensor.hpp"

namespace moelpr {

/// Handle to a node inside a ComputeGraph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in creation order; backward walks
/// them once in reverse, so an op's inputs are always visited after it.
/// Gradients only flow into leaves created with trainable=true and into
/// intermediate nodes on a path to such a leaf; everything else is skipped.
class ComputeGraph {
 public:
  enum class Op {
    kLeaf,
    kMatMul,
    kAdd,
    kMul,
    kMulConst,
    kScale,
    kRowSoftmax,
    kRowSum,
    kColSelect,
    kDivByCol,
    kMulByCol,
    kLog,
    kGelu,
    kLayerNorm,
    kEmbed,
    kAttention,
    kCrossEntropy,
    kFullSum,
    kGatherRows,
    kScatterRows,
  };

  // --- leaves ---

  Var constant(const Tensor& t) { return push_leaf(t, false); }

  Var param(const Tensor& t, bool trainable) { return push_leaf(t, trainable); }

  // --- ops ---

  /// C = A * B.
  Var matmul(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.cols != vb.rows)
      throw ShapeError("matmul: " + va.shape_str() + " * " + vb.shape_str());
    Node n = make_node(Op::kMatMul, a, b);
    gemm_nn(va, vb, n.value, false);
    return push(std::move(n));
  }

  Var add(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb))
      throw ShapeError("add: " + va.shape_str() + " vs " + vb.shape_str());
    Node n = make_node(Op::kAdd, a, b);
    n.value = va;
    for (int64_t i = 0; i < vb.numel(); ++i) n.value.data[i] += vb.data[i];
    return push(std::move(n));
  }

  /// Elementwise product of two graph tensors.
  Var mul(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb))
      throw ShapeError("mul: " + va.shape_str() + " vs " + vb.shape_str());
    Node n = make_node(Op::kMul, a, b);
    n.value = va;
    for (int64_t i = 0; i < vb.numel(); ++i) n.value.data[i] *= vb.data[i];
    return push(std::move(n));
  }

  /// Elementwise product with a constant matrix (no gradient into the constant).
  Var mul_const(Var a, const Tensor& m) {
    const Tensor& va = value(a);
    if (!va.same_shape(m))
      throw ShapeError("mul_const: " + va.shape_str() + " vs " + m.shape_str());
    Node n = make_node(Op::kMulConst, a);
    n.value = va;
    for (int64_t i = 0; i < m.numel(); ++i) n.value.data[i] *= m.data[i];
    n.aux0 = m;
    return push(std::move(n));
  }

  Var scale(Var a, double c) {
    Node n = make_node(Op::kScale, a);
    n.value = value(a);
    for (auto& v : n.value.data) v *= c;
    n.scalar_arg = c;
    return push(std::move(n));
  }

  Var row_softmax(Var a) {
    const Tensor& va = value(a);
    Node n = make_node(Op::kRowSoftmax, a);
    n.value = Tensor(va.rows, va.cols);
    for (int64_t r = 0; r < va.rows; ++r) {
      const double* x = va.row_ptr(r);
      double* y = n.value.row_ptr(r);
      double mx = x[0];
      for (int64_t j = 1; j < va.cols; ++j) mx = std::max(mx, x[j]);
      double denom = 0.0;
      for (int64_t j = 0; j < va.cols; ++j) {
        y[j] = std::exp(x[j] - mx);
        denom += y[j];
      }
      for (int64_t j = 0; j < va.cols; ++j) y[j] /= denom;
    }
    return push(std::move(n));
  }

  /// m x n -> m x 1 row sums.
  Var row_sum(Var a) {
    const Tensor& va = value(a);
    Node n = make_node(Op::kRowSum, a);
    n.value = Tensor(va.rows, 1);
    for (int64_t r = 0; r < va.rows; ++r) {
      double acc = 0.0;
      const double* x = va.row_ptr(r);
      for (int64_t j = 0; j < va.cols; ++j) acc += x[j];
      n.value.data[static_cast<size_t>(r)] = acc;
    }
    return push(std::move(n));
  }

  /// m x n -> m x 1 copy of column j.
  Var col_select(Var a, int64_t j) {
    const Tensor& va = value(a);
    if (j < 0 || j >= va.cols)
      throw ShapeError("col_select: column " + std::to_string(j) + " of " + va.shape_str());
    Node n = make_node(Op::kColSelect, a);
    n.int_arg0 = j;
    n.value = Tensor(va.rows, 1);
    for (int64_t r = 0; r < va.rows; ++r) n.value.data[static_cast<size_t>(r)] = va.at(r, j);
    return push(std::move(n));
  }

  /// Broadcast divide: (m x n) / (m x 1).
  Var div_by_col(Var a, Var s) {
    const Tensor& va = value(a);
    const Tensor& vs = value(s);
    if (vs.cols != 1 || vs.rows != va.rows)
      throw ShapeError("div_by_col: " + va.shape_str() + " / " + vs.shape_str());
    Node n = make_node(Op::kDivByCol, a, s);
    n.value = va;
    for (int64_t r = 0; r < va.rows; ++r) {
      const double d = vs.data[static_cast<size_t>(r)];
      double* y = n.value.row_ptr(r);
      for (int64_t j = 0; j < va.cols; ++j) y[j] /= d;
    }
    return push(std::move(n));
  }

  /// Broadcast multiply: (m x n) * (m x 1).
  Var mul_by_col(Var a, Var s) {
    const Tensor& va = value(a);
    const Tensor& vs = value(s);
    if (vs.cols != 1 || vs.rows != va.rows)
      throw ShapeError("mul_by_col: " + va.shape_str() + " * " + vs.shape_str());
    Node n = make_node(Op::kMulByCol, a, s);
    n.value = va;
    for (int64_t r = 0; r < va.rows; ++r) {
      const double m = vs.data[static_cast<size_t>(r)];
      double* y = n.value.row_ptr(r);
      for (int64_t j = 0; j < va.cols; ++j) y[j] *= m;
    }
    return push(std::move(n));
  }

  Var log_elem(Var a) {
    Node n = make_node(Op::kLog, a);
    n.value = value(a);
    for (auto& v : n.value.data) v = std::log(v);
    return push(std::move(n));
  }

  Var gelu(Var a) {
    Node n = make_node(Op::kGelu, a);
    n.value = value(a);
    for (auto& v : n.value.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    return push(std::move(n));
  }

  /// Per-row layer normalization with affine weights gamma, beta (1 x n).
  Var layer_norm(Var x, Var gamma, Var beta) {
    const Tensor& vx = value(x);
    const Tensor& vg = value(gamma);
    const Tensor& vb = value(beta);
    if (vg.rows != 1 || vg.cols != vx.cols || vb.rows != 1 || vb.cols != vx.cols)
      throw ShapeError("layer_norm: x " + vx.shape_str() + " gamma " + vg.shape_str() +
                       " beta " + vb.shape_str());
    Node n = make_node(Op::kLayerNorm, x, gamma, beta);
    const int64_t m = vx.rows, c = vx.cols;
    n.value = Tensor(m, c);
    n.aux0 = Tensor(m, c);  // normalized input
    n.aux1 = Tensor(m, 1);  // 1 / std
    for (int64_t r = 0; r < m; ++r) {
      const double* xr = vx.row_ptr(r);
      double mean = 0.0;
      for (int64_t j = 0; j < c; ++j) mean += xr[j];
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (int64_t j = 0; j < c; ++j) {
        const double d = xr[j] - mean;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double istd = 1.0 / std::sqrt(var + kLayerNormEps);
      n.aux1.data[static_cast<size_t>(r)] = istd;
      double* hat = n.aux0.row_ptr(r);
      double* y = n.value.row_ptr(r);
      for (int64_t j = 0; j < c; ++j) {
        hat[j] = (xr[j] - mean) * istd;
        y[j] = hat[j] * vg.data[static_cast<size_t>(j)] + vb.data[static_cast<size_t>(j)];
      }
    }
    return push(std::move(n));
  }

  /// Row gather from an embedding table: out[r,:] = table[ids[r],:].
  Var embed(const std::vector<int32_t>& ids, Var table) {
    const Tensor& vt = value(table);
    Node n = make_node(Op::kEmbed, table);
    n.ids = ids;
    n.value = Tensor(static_cast<int64_t>(ids.size()), vt.cols);
    for (size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] < 0 || ids[r] >= vt.rows)
        throw DataError("embed: id " + std::to_string(ids[r]) + " at row " + std::to_string(r) +
                        " outside table " + vt.shape_str());
      std::copy(vt.row_ptr(ids[r]), vt.row_ptr(ids[r]) + vt.cols,
                n.value.row_ptr(static_cast<int64_t>(r)));
    }
    return push(std::move(n));
  }

  /// Fused causal multi-head self-attention over (batch*seq) x hidden inputs.
  Var attention(Var q, Var k, Var v, int64_t batch, int64_t seq, int64_t heads) {
    const Tensor& vq = value(q);
    const Tensor& vk = value(k);
    const Tensor& vv = value(v);
    const int64_t hidden = vq.cols;
    if (!vq.same_shape(vk) || !vq.same_shape(vv))
      throw ShapeError("attention: q " + vq.shape_str() + " k " + vk.shape_str() + " v " +
                       vv.shape_str());
    if (vq.rows != batch * seq)
      throw ShapeError("attention: rows " + std::to_string(vq.rows) + " != batch*seq " +
                       std::to_string(batch * seq));
    if (hidden % heads != 0)
      throw ShapeError("attention: hidden " + std::to_string(hidden) + " not divisible by " +
                       std::to_string(heads) + " heads");
    const int64_t dh = hidden / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    Node n = make_node(Op::kAttention, q, k, v);
    n.int_arg0 = batch;
    n.int_arg1 = seq;
    n.int_arg2 = heads;
    n.value = Tensor(batch * seq, hidden);
    n.aux0 = Tensor(batch * heads * seq, seq);  // causal softmax probs
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t hd = 0; hd < heads; ++hd) {
        const int64_t off = hd * dh;
        const int64_t pbase = (b * heads + hd) * seq;
        for (int64_t i = 0; i < seq; ++i) {
          const double* qi = vq.row_ptr(b * seq + i) + off;
          double* prow = n.aux0.row_ptr(pbase + i);
          double mx = -1e300;
          for (int64_t j = 0; j <= i; ++j) {
            const double* kj = vk.row_ptr(b * seq + j) + off;
            double s = 0.0;
            for (int64_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
            s *= sc;
            prow[j] = s;
            mx = std::max(mx, s);
          }
          double denom = 0.0;
          for (int64_t j = 0; j <= i; ++j) {
            prow[j] = std::exp(prow[j] - mx);
            denom += prow[j];
          }
          double* out = n.value.row_ptr(b * seq + i) + off;
          for (int64_t j = 0; j <= i; ++j) {
            prow[j] /= denom;
            const double* vj = vv.row_ptr(b * seq + j) + off;
            const double p = prow[j];
            for (int64_t d = 0; d < dh; ++d) out[d] += p * vj[d];
          }
        }
      }
    }
    return push(std::move(n));
  }

  /// Mean cross-entropy over positions where include[r] != 0.
  /// Throws DataError when every position is excluded.
  Var cross_entropy(Var logits, const std::vector<int32_t>& targets,
                    const std::vector<uint8_t>& include) {
    const Tensor& vl = value(logits);
    if (static_cast<int64_t>(targets.size()) != vl.rows ||
        static_cast<int64_t>(include.size()) != vl.rows)
      throw ShapeError("cross_entropy: logits " + vl.shape_str() + " vs " +
                       std::to_string(targets.size()) + " targets");
    int64_t count = 0;
    for (uint8_t u : include) count += (u != 0);
    if (count == 0) throw DataError("cross_entropy: every position is excluded (all padding)");

    Node n = make_node(Op::kCrossEntropy, logits);
    n.ids = targets;
    n.mask8 = include;
    n.int_arg0 = count;
    n.aux0 = Tensor(vl.rows, vl.cols);  // softmax probs on included rows
    double total = 0.0;
    for (int64_t r = 0; r < vl.rows; ++r) {
      if (!include[static_cast<size_t>(r)]) continue;
      const int32_t t = targets[static_cast<size_t>(r)];
      if (t < 0 || t >= vl.cols)
        throw DataError("cross_entropy: target " + std::to_string(t) + " outside vocab of " +
                        std::to_string(vl.cols));
      const double* x = vl.row_ptr(r);
      double* p = n.aux0.row_ptr(r);
      double mx = x[0];
      for (int64_t j = 1; j < vl.cols; ++j) mx = std::max(mx, x[j]);
      double denom = 0.0;
      for (int64_t j = 0; j < vl.cols; ++j) {
        p[j] = std::exp(x[j] - mx);
        denom += p[j];
      }
      for (int64_t j = 0; j < vl.cols; ++j) p[j] /= denom;
      total += -(x[t] - mx - std::log(denom));
    }
    n.value = Tensor::scalar(total / static_cast<double>(count));
    return push(std::move(n));
  }

  /// Sum of all entries -> 1 x 1.
  Var full_sum(Var a) {
    Node n = make_node(Op::kFullSum, a);
    double acc = 0.0;
    for (double v : value(a).data) acc += v;
    n.value = Tensor::scalar(acc);
    return push(std::move(n));
  }

  /// out[r,:] = a[idx[r],:].
  Var gather_rows(Var a, const std::vector<int64_t>& idx) {
    const Tensor& va = value(a);
    Node n = make_node(Op::kGatherRows, a);
    n.idx = idx;
    n.value = Tensor(static_cast<int64_t>(idx.size()), va.cols);
    for (size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0 || idx[r] >= va.rows)
        throw ShapeError("gather_rows: index " + std::to_string(idx[r]) + " outside " +
                         va.shape_str());
      std::copy(va.row_ptr(idx[r]), va.row_ptr(idx[r]) + va.cols,
                n.value.row_ptr(static_cast<int64_t>(r)));
    }
    return push(std::move(n));
  }

  /// out has out_rows rows; out[idx[r],:] += a[r,:]. Duplicate indices accumulate.
  Var scatter_rows(Var a, const std::vector<int64_t>& idx, int64_t out_rows) {
    const Tensor& va = value(a);
    if (static_cast<int64_t>(idx.size()) != va.rows)
      throw ShapeError("scatter_rows: " + std::to_string(idx.size()) + " indices for " +
                       va.shape_str());
    Node n = make_node(Op::kScatterRows, a);
    n.idx = idx;
    n.value = Tensor(out_rows, va.cols);
    for (size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0 || idx[r] >= out_rows)
        throw ShapeError("scatter_rows: index " + std::to_string(idx[r]) + " outside " +
                         std::to_string(out_rows) + " rows");
      const double* src = va.row_ptr(static_cast<int64_t>(r));
      double* dst = n.value.row_ptr(idx[r]);
      for (int64_t j = 0; j < va.cols; ++j) dst[j] += src[j];
    }
    return push(std::move(n));
  }

  // --- access ---

  const Tensor& value(Var v) const { return node(v).value; }
  double scalar(Var v) const { return node(v).value.item(); }
  bool needs_grad(Var v) const { return node(v).needs_grad; }

  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  const Tensor& grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) throw Error("grad: no gradient recorded for this node");
    return n.grad;
  }

  /// Gradient if one was recorded, otherwise zeros of the value's shape.
  Tensor grad_or_zero(Var v) const {
    const Node& n = node(v);
    if (!n.grad.empty()) return n.grad;
    return Tensor(n.value.rows, n.value.cols);
  }

  size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Visits nodes in reverse creation
  /// order exactly once; gradients accumulate only along trainable paths.
  void backward(Var loss) {
    Node& ln = node(loss);
    if (ln.value.rows != 1 || ln.value.cols != 1)
      throw ShapeError("backward: loss must be a scalar, got " + ln.value.shape_str());
    if (!ln.needs_grad) return;  // fully frozen graph
    ensure_grad(loss.id);
    ln.grad.data[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.grad.empty()) continue;
      backward_node(n);
    }
  }

 private:
  static constexpr double kLayerNormEps = 1e-5;
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;

  struct Node {
    Op kind = Op::kLeaf;
    int in0 = -1, in1 = -1, in2 = -1;
    bool needs_grad = false;
    Tensor value;
    Tensor grad;
    double scalar_arg = 0.0;
    int64_t int_arg0 = 0, int_arg1 = 0, int_arg2 = 0;
    std::vector<int64_t> idx;
    std::vector<int32_t> ids;
    std::vector<uint8_t> mask8;
    Tensor aux0, aux1;
  };

  std::vector<Node> nodes_;

  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw Error("invalid Var handle");
    return nodes_[static_cast<size_t>(v.id)];
  }
  Node& node(Var v) { return const_cast<Node&>(static_cast<const ComputeGraph*>(this)->node(v)); }

  Var push_leaf(const Tensor& t, bool trainable) {
    Node n;
    n.kind = Op::kLeaf;
    n.value = t;
    n.needs_grad = trainable;
    return push(std::move(n));
  }

  Node make_node(Op kind, Var a, Var b = Var{}, Var c = Var{}) {
    Node n;
    n.kind = kind;
    n.in0 = a.id;
    n.in1 = b.id;
    n.in2 = c.id;
    n.needs_grad = node(a).needs_grad || (b.valid() && node(b).needs_grad) ||
                   (c.valid() && node(c).needs_grad);
    return n;
  }

  Var push(Node&& n) {
    nodes_.emplace_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void ensure_grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor(n.value.rows, n.value.cols);
  }

  /// Allocates and returns the gradient buffer of input `id` when it wants
  /// one; returns nullptr for frozen branches so callers skip the work.
  Tensor* sink(int id) {
    if (id < 0) return nullptr;
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad) return nullptr;
    ensure_grad(id);
    return &n.grad;
  }

  const Tensor& in_value(const Node& n, int which) const {
    const int id = which == 0 ? n.in0 : (which == 1 ? n.in1 : n.in2);
    return nodes_[static_cast<size_t>(id)].value;
  }

  void backward_node(Node& n) {
    const Tensor& g = n.grad;
    switch (n.kind) {
      case Op::kLeaf:
        break;
      case Op::kMatMul: {
        if (Tensor* da = sink(n.in0)) gemm_nt(g, in_value(n, 1), *da, true);
        if (Tensor* db = sink(n.in1)) gemm_tn(in_value(n, 0), g, *db, true);
        break;
      }
      case Op::kAdd: {
        if (Tensor* da = sink(n.in0))
          for (int64_t i = 0; i < g.numel(); ++i) da->data[i] += g.data[i];
        if (Tensor* db = sink(n.in1))
          for (int64_t i = 0; i < g.numel(); ++i) db->data[i] += g.data[i];
        break;
      }
      case Op::kMul: {
        const Tensor& a = in_value(n, 0);
        const Tensor& b = in_value(n, 1);
        if (Tensor* da = sink(n.in0))
          for (int64_t i = 0; i < g.numel(); ++i) da->data[i] += g.data[i] * b.data[i];
        if (Tensor* db = sink(n.in1))
          for (int64_t i = 0; i < g.numel(); ++i) db->data[i] += g.data[i] * a.data[i];
        break;
      }
      case Op::kMulConst: {
        if (Tensor* da = sink(n.in0))
          for (int64_t i = 0; i < g.numel(); ++i) da->data[i] += g.data[i] * n.aux0.data[i];
        break;
      }
      case Op::kScale: {
        if (Tensor* da = sink(n.in0))
          for (int64_t i = 0; i < g.numel(); ++i) da->data[i] += g.data[i] * n.scalar_arg;
        break;
      }
      case Op::kRowSoftmax: {
        if (Tensor* da = sink(n.in0)) {
          const Tensor& y = n.value;
          for (int64_t r = 0; r < y.rows; ++r) {
            const double* yr = y.row_ptr(r);
            const double* gr = g.row_ptr(r);
            double dot = 0.0;
            for (int64_t j = 0; j < y.cols; ++j) dot += gr[j] * yr[j];
            double* d = da->row_ptr(r);
            for (int64_t j = 0; j < y.cols; ++j) d[j] += yr[j] * (gr[j] - dot);
          }
        }
        break;
      }
      case Op::kRowSum: {
        if (Tensor* da = sink(n.in0)) {
          for (int64_t r = 0; r < da->rows; ++r) {
            const double gv = g.data[static_cast<size_t>(r)];
            double* d = da->row_ptr(r);
            for (int64_t j = 0; j < da->cols; ++j) d[j] += gv;
          }
        }
        break;
      }
      case Op::kColSelect: {
        if (Tensor* da = sink(n.in0)) {
          const int64_t j = n.int_arg0;
          for (int64_t r = 0; r < da->rows; ++r)
            da->at(r, j) += g.data[static_cast<size_t>(r)];
        }
        break;
      }
      case Op::kDivByCol: {
        const Tensor& a = in_value(n, 0);
        const Tensor& s = in_value(n, 1);
        Tensor* da = sink(n.in0);
        Tensor* ds = sink(n.in1);
        for (int64_t r = 0; r < a.rows; ++r) {
          const double sv = s.data[static_cast<size_t>(r)];
          const double* gr = g.row_ptr(r);
          const double* ar = a.row_ptr(r);
          if (da) {
            double* d = da->row_ptr(r);
            for (int64_t j = 0; j < a.cols; ++j) d[j] += gr[j] / sv;
          }
          if (ds) {
            double acc = 0.0;
            for (int64_t j = 0; j < a.cols; ++j) acc += gr[j] * ar[j];
            ds->data[static_cast<size_t>(r)] += -acc / (sv * sv);
          }
        }
        break;
      }
      case Op::kMulByCol: {
        const Tensor& a = in_value(n, 0);
        const Tensor& s = in_value(n, 1);
        Tensor* da = sink(n.in0);
        Tensor* ds = sink(n.in1);
        for (int64_t r = 0; r < a.rows; ++r) {
          const double sv = s.data[static_cast<size_t>(r)];
          const double* gr = g.row_ptr(r);
          const double* ar = a.row_ptr(r);
          if (da) {
            double* d = da->row_ptr(r);
            for (int64_t j = 0; j < a.cols; ++j) d[j] += gr[j] * sv;
          }
          if (ds) {
            double acc = 0.0;
            for (int64_t j = 0; j < a.cols; ++j) acc += gr[j] * ar[j];
            ds->data[static_cast<size_t>(r)] += acc;
          }
        }
        break;
      }
      case Op::kLog: {
        if (Tensor* da = sink(n.in0)) {
          const Tensor& a = in_value(n, 0);
          for (int64_t i = 0; i < g.numel(); ++i) da->data[i] += g.data[i] / a.data[i];
        }
        break;
      }
      case Op::kGelu: {
        if (Tensor* da = sink(n.in0)) {
          const Tensor& a = in_value(n, 0);
          for (int64_t i = 0; i < g.numel(); ++i) {
            const double x = a.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            da->data[i] += g.data[i] * (cdf + x * pdf);
          }
        }
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& hat = n.aux0;
        const Tensor& istd = n.aux1;
        const Tensor& gamma = in_value(n, 1);
        const int64_t c = hat.cols;
        Tensor* dx = sink(n.in0);
        Tensor* dg = sink(n.in1);
        Tensor* db = sink(n.in2);
        for (int64_t r = 0; r < hat.rows; ++r) {
          const double* gr = g.row_ptr(r);
          const double* hr = hat.row_ptr(r);
          if (dg)
            for (int64_t j = 0; j < c; ++j) dg->data[static_cast<size_t>(j)] += gr[j] * hr[j];
          if (db)
            for (int64_t j = 0; j < c; ++j) db->data[static_cast<size_t>(j)] += gr[j];
          if (dx) {
            double m1 = 0.0, m2 = 0.0;
            for (int64_t j = 0; j < c; ++j) {
              const double dyg = gr[j] * gamma.data[static_cast<size_t>(j)];
              m1 += dyg;
              m2 += dyg * hr[j];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            const double is = istd.data[static_cast<size_t>(r)];
            double* d = dx->row_ptr(r);
            for (int64_t j = 0; j < c; ++j) {
              const double dyg = gr[j] * gamma.data[static_cast<size_t>(j)];
              d[j] += is * (dyg - m1 - hr[j] * m2);
            }
          }
        }
        break;
      }
      case Op::kEmbed: {
        if (Tensor* dt = sink(n.in0)) {
          for (size_t r = 0; r < n.ids.size(); ++r) {
            const double* gr = g.row_ptr(static_cast<int64_t>(r));
            double* d = dt->row_ptr(n.ids[r]);
            for (int64_t j = 0; j < g.cols; ++j) d[j] += gr[j];
          }
        }
        break;
      }
      case Op::kAttention:
        backward_attention(n);
        break;
      case Op::kCrossEntropy: {
        if (Tensor* dl = sink(n.in0)) {
          const double gv = g.data[0] / static_cast<double>(n.int_arg0);
          for (int64_t r = 0; r < dl->rows; ++r) {
            if (!n.mask8[static_cast<size_t>(r)]) continue;
            const double* p = n.aux0.row_ptr(r);
            double* d = dl->row_ptr(r);
            for (int64_t j = 0; j < dl->cols; ++j) d[j] += gv * p[j];
            d[n.ids[static_cast<size_t>(r)]] -= gv;
          }
        }
        break;
      }
      case Op::kFullSum: {
        if (Tensor* da = sink(n.in0)) {
          const double gv = g.data[0];
          for (auto& v : da->data) v += gv;
        }
        break;
      }
      case Op::kGatherRows: {
        if (Tensor* da = sink(n.in0)) {
          for (size_t r = 0; r < n.idx.size(); ++r) {
            const double* gr = g.row_ptr(static_cast<int64_t>(r));
            double* d = da->row_ptr(n.idx[r]);
            for (int64_t j = 0; j < g.cols; ++j) d[j] += gr[j];
          }
        }
        break;
      }
      case Op::kScatterRows: {
        if (Tensor* da = sink(n.in0)) {
          for (size_t r = 0; r < n.idx.size(); ++r) {
            const double* gr = g.row_ptr(n.idx[r]);
            double* d = da->row_ptr(static_cast<int64_t>(r));
            for (int64_t j = 0; j < da->cols; ++j) d[j] += gr[j];
          }
        }
        break;
      }
    }
  }

  void backward_attention(Node& n) {
    const Tensor& g = n.grad;
    const Tensor& vq = in_value(n, 0);
    const Tensor& vk = in_value(n, 1);
    const Tensor& vv = in_value(n, 2);
    Tensor* dq = sink(n.in0);
    Tensor* dk = sink(n.in1);
    Tensor* dv = sink(n.in2);
    if (!dq && !dk && !dv) return;
    const int64_t batch = n.int_arg0, seq = n.int_arg1, heads = n.int_arg2;
    const int64_t dh = vq.cols / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> dp(static_cast<size_t>(seq));
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t hd = 0; hd < heads; ++hd) {
        const int64_t off = hd * dh;
        const int64_t pbase = (b * heads + hd) * seq;
        for (int64_t i = 0; i < seq; ++i) {
          const double* gout = g.row_ptr(b * seq + i) + off;
          const double* prow = n.aux0.row_ptr(pbase + i);
          // dP and dV
          double pdot = 0.0;
          for (int64_t j = 0; j <= i; ++j) {
            const double* vj = vv.row_ptr(b * seq + j) + off;
            double acc = 0.0;
            for (int64_t d = 0; d < dh; ++d) acc += gout[d] * vj[d];
            dp[static_cast<size_t>(j)] = acc;
            pdot += acc * prow[j];
            if (dv) {
              double* dvj = dv->row_ptr(b * seq + j) + off;
              const double p = prow[j];
              for (int64_t d = 0; d < dh; ++d) dvj[d] += p * gout[d];
            }
          }
          // dS = P * (dP - sum(dP*P)); then into dQ, dK
          const double* qi = vq.row_ptr(b * seq + i) + off;
          double* dqi = dq ? dq->row_ptr(b * seq + i) + off : nullptr;
          for (int64_t j = 0; j <= i; ++j) {
            const double ds = sc * prow[j] * (dp[static_cast<size_t>(j)] - pdot);
            if (ds == 0.0) continue;
            const double* kj = vk.row_ptr(b * seq + j) + off;
            if (dqi)
              for (int64_t d = 0; d < dh; ++d) dqi[d] += ds * kj[d];
            if (dk) {
              double* dkj = dk->row_ptr(b * seq + j) + off;
              for (int64_t d = 0; d < dh; ++d) dkj[d] += ds * qi[d];
            }
          }
        }
      }
    }
  }
};

}  // namespace moelpr
