#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lossforge/errors.hpp"
#include "lossforge/tensor.hpp"

namespace lossforge::ad {

class Graph;

struct Var {
  Graph* g = nullptr;
  int id = -1;
  bool valid() const { return g != nullptr && id >= 0; }
};

enum class Op {
  kValue,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kExp,
  kLog,
  kSigmoid,
  kRelu,
  kReluMask,
  kAbs,
  kSignMask,
  kScale,
  kAddConst,
  kMatMul,
  kMatVec,
  kOuter,
  kTranspose,
  kSumAll,
  kRowSums,
  kColSums,
  kBroadcastRow,
  kBroadcastCol,
  kLogSumExpRows,
  kMaxRows,
  kArgmaxMaskRows,
  kReshape,
  kSlice,
  kEmbedSlice,
  kGatherRows,
  kScatterAddRows,
  kGather,
  kScatterAdd,
  kTakePerRow,
  kScatterPerRow,
  kScaleRows,
  kSMul,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kValue: return "value";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSigmoid: return "sigmoid";
    case Op::kRelu: return "relu";
    case Op::kReluMask: return "relu_mask";
    case Op::kAbs: return "abs";
    case Op::kSignMask: return "sign_mask";
    case Op::kScale: return "scale";
    case Op::kAddConst: return "add_const";
    case Op::kMatMul: return "matmul";
    case Op::kMatVec: return "matvec";
    case Op::kOuter: return "outer";
    case Op::kTranspose: return "transpose";
    case Op::kSumAll: return "sum_all";
    case Op::kRowSums: return "row_sums";
    case Op::kColSums: return "col_sums";
    case Op::kBroadcastRow: return "broadcast_row";
    case Op::kBroadcastCol: return "broadcast_col";
    case Op::kLogSumExpRows: return "logsumexp_rows";
    case Op::kMaxRows: return "max_rows";
    case Op::kArgmaxMaskRows: return "argmax_mask_rows";
    case Op::kReshape: return "reshape";
    case Op::kSlice: return "slice";
    case Op::kEmbedSlice: return "embed_slice";
    case Op::kGatherRows: return "gather_rows";
    case Op::kScatterAddRows: return "scatter_add_rows";
    case Op::kGather: return "gather";
    case Op::kScatterAdd: return "scatter_add";
    case Op::kTakePerRow: return "take_per_row";
    case Op::kScatterPerRow: return "scatter_per_row";
    case Op::kScaleRows: return "scale_rows";
    case Op::kSMul: return "smul";
  }
  return "?";
}

struct GradBundle {
  std::vector<std::pair<int, Tensor>> items;

  const Tensor& at(Var leaf) const {
    for (const auto& [id, t] : items)
      if (id == leaf.id) return t;
    throw UnknownLeaf("GradBundle: no gradient recorded for leaf " + std::to_string(leaf.id));
  }
};

// Append-only expression tape. Nodes record the op, its inputs and static
// attributes; values are computed on demand and cached per input version, so
// updating a leaf (set_value) and re-evaluating recomputes only downstream
// nodes. Backward passes append adjoint nodes to the same tape, which keeps
// the whole construction differentiable (second backward = HVP / mixed VJP).
class Graph {
 public:
  Var value(const Tensor& t) { return push_value(t, /*requires_grad=*/true); }
  Var constant(const Tensor& t) { return push_value(t, /*requires_grad=*/false); }

  void set_value(Var v, const Tensor& t) {
    const Node& n = node_checked(v);
    if (n.op != Op::kValue) throw UnknownLeaf("set_value: node is not a leaf");
    if (nodes_[v.id].shape != t.shape)
      throw ShapeError("set_value: shape mismatch, expected " + shape_str(nodes_[v.id].shape) +
                       " got " + shape_str(t.shape));
    val_[v.id] = t;
    ver_[v.id] = ++counter_;
  }

  int size() const { return static_cast<int>(nodes_.size()); }

  const std::vector<int>& shape_of(Var v) const { return node_checked(v).shape; }

  Tensor eval(Var v) {
    evaluate_upto(v);
    return val_[v.id];
  }

  double eval_scalar(Var v) {
    evaluate_upto(v);
    return val_[v.id].scalar_value();
  }

  // Builds adjoint nodes for d(root)/d(leaf) on this tape and returns them
  // unevaluated. Leaves the root does not depend on get a zero constant.
  std::vector<Var> grad_vars(Var root, const std::vector<Var>& leaves) {
    const Node& rn = node_checked(root);
    if (!rn.shape.empty()) throw ShapeError("grad: root must be a scalar");
    for (Var l : leaves) {
      const Node& ln = node_checked(l);
      if (ln.op != Op::kValue || !ln.requires_grad)
        throw UnknownLeaf("grad: node " + std::to_string(l.id) + " is not a differentiable leaf");
    }

    int n = root.id + 1;
    std::vector<char> infl(static_cast<size_t>(n), 0);
    for (Var l : leaves)
      if (l.id < n) infl[l.id] = 1;
    for (int i = 0; i < n; ++i) {
      if (infl[i]) continue;
      const Node& nd = nodes_[i];
      if ((nd.a >= 0 && infl[nd.a]) || (nd.b >= 0 && infl[nd.b])) infl[i] = 1;
    }

    std::vector<int> adj(static_cast<size_t>(n), -1);
    if (infl[root.id]) adj[root.id] = constant(Tensor::scalar(1.0)).id;
    for (int i = root.id; i >= 0; --i) {
      if (adj[i] < 0 || !infl[i]) continue;
      const Node nd = nodes_[i];  // copy: vjp() appends and may reallocate
      Var d{this, adj[i]};
      if (nd.a >= 0 && infl[nd.a]) accumulate(adj, nd.a, vjp(i, 0, d));
      if (nd.b >= 0 && infl[nd.b]) accumulate(adj, nd.b, vjp(i, 1, d));
    }

    std::vector<Var> out;
    out.reserve(leaves.size());
    for (Var l : leaves) {
      if (l.id < n && adj[l.id] >= 0)
        out.push_back(Var{this, adj[l.id]});
      else
        out.push_back(constant(Tensor::zeros(nodes_[l.id].shape)));
    }
    return out;
  }

  GradBundle grad(Var root, const std::vector<Var>& leaves) {
    auto gs = grad_vars(root, leaves);
    GradBundle out;
    for (size_t i = 0; i < leaves.size(); ++i) out.items.emplace_back(leaves[i].id, eval(gs[i]));
    return out;
  }

  // ----- op constructors -----

  Var add(Var a, Var b) { return push_same_shape(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return push_same_shape(Op::kSub, a, b); }
  Var mul(Var a, Var b) { return push_same_shape(Op::kMul, a, b); }
  Var div(Var a, Var b) { return push_same_shape(Op::kDiv, a, b); }

  Var neg(Var a) { return push_unary(Op::kNeg, a); }
  Var exp_(Var a) { return push_unary(Op::kExp, a); }
  Var log_(Var a) { return push_unary(Op::kLog, a); }
  Var sigmoid(Var a) { return push_unary(Op::kSigmoid, a); }
  Var relu(Var a) { return push_unary(Op::kRelu, a); }
  Var relu_mask(Var a) { return push_unary(Op::kReluMask, a); }
  Var abs_(Var a) { return push_unary(Op::kAbs, a); }
  Var sign_mask(Var a) { return push_unary(Op::kSignMask, a); }

  Var scale(Var a, double c) {
    Node n = unary_node(Op::kScale, a);
    n.c = c;
    return push(std::move(n));
  }
  Var add_const(Var a, double c) {
    Node n = unary_node(Op::kAddConst, a);
    n.c = c;
    return push(std::move(n));
  }

  Var matmul(Var a, Var b) {
    const Node& na = node_checked(a);
    const Node& nb = node_checked(b);
    if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0])
      throw ShapeError(std::string("matmul: incompatible shapes ") + shape_str(na.shape) + " x " +
                       shape_str(nb.shape));
    Node n;
    n.op = Op::kMatMul;
    n.a = a.id;
    n.b = b.id;
    n.shape = {na.shape[0], nb.shape[1]};
    return push(std::move(n));
  }

  Var matvec(Var m, Var v) {
    const Node& nm = node_checked(m);
    const Node& nv = node_checked(v);
    if (nm.shape.size() != 2 || nv.shape.size() != 1 || nm.shape[1] != nv.shape[0])
      throw ShapeError("matvec: incompatible shapes");
    Node n;
    n.op = Op::kMatVec;
    n.a = m.id;
    n.b = v.id;
    n.shape = {nm.shape[0]};
    return push(std::move(n));
  }

  Var outer(Var u, Var v) {
    const Node& nu = node_checked(u);
    const Node& nv = node_checked(v);
    if (nu.shape.size() != 1 || nv.shape.size() != 1) throw ShapeError("outer: expects vectors");
    Node n;
    n.op = Op::kOuter;
    n.a = u.id;
    n.b = v.id;
    n.shape = {nu.shape[0], nv.shape[0]};
    return push(std::move(n));
  }

  Var transpose(Var a) {
    const Node& na = node_checked(a);
    if (na.shape.size() != 2) throw ShapeError("transpose: expects a matrix");
    Node n = unary_node(Op::kTranspose, a);
    n.shape = {na.shape[1], na.shape[0]};
    return push(std::move(n));
  }

  Var sum_all(Var a) {
    Node n = unary_node(Op::kSumAll, a);
    n.shape = {};
    return push(std::move(n));
  }

  Var row_sums(Var a) { return push_row_reduce(Op::kRowSums, a); }
  Var col_sums(Var a) { return push_col_reduce(Op::kColSums, a); }

  Var broadcast_row(Var v, int rows) {
    const Node& nv = node_checked(v);
    if (nv.shape.size() != 1) throw ShapeError("broadcast_row: expects a vector");
    if (rows <= 0) throw ShapeError("broadcast_row: rows must be positive");
    Node n = unary_node(Op::kBroadcastRow, v);
    n.m = rows;
    n.shape = {rows, nv.shape[0]};
    return push(std::move(n));
  }

  Var broadcast_col(Var v, int cols) {
    const Node& nv = node_checked(v);
    if (nv.shape.size() != 1) throw ShapeError("broadcast_col: expects a vector");
    if (cols <= 0) throw ShapeError("broadcast_col: cols must be positive");
    Node n = unary_node(Op::kBroadcastCol, v);
    n.m = cols;
    n.shape = {nv.shape[0], cols};
    return push(std::move(n));
  }

  Var logsumexp_rows(Var a) { return push_col_reduce(Op::kLogSumExpRows, a); }
  Var max_rows(Var a) { return push_col_reduce(Op::kMaxRows, a); }

  Var argmax_mask_rows(Var a) {
    const Node& na = node_checked(a);
    if (na.shape.size() != 2) throw ShapeError("argmax_mask_rows: expects a matrix");
    Node n = unary_node(Op::kArgmaxMaskRows, a);
    return push(std::move(n));
  }

  Var reshape(Var a, std::vector<int> shape) {
    const Node& na = node_checked(a);
    if (Tensor::numel_of(shape) != Tensor::numel_of(na.shape))
      throw ShapeError("reshape: numel mismatch " + shape_str(na.shape) + " -> " +
                       shape_str(shape));
    Node n = unary_node(Op::kReshape, a);
    n.shape = std::move(shape);
    return push(std::move(n));
  }

  Var slice(Var a, int offset, int len) {
    const Node& na = node_checked(a);
    if (na.shape.size() != 1) throw ShapeError("slice: expects a vector");
    if (offset < 0 || len < 0 || offset + len > na.shape[0])
      throw ShapeError("slice: out of range");
    Node n = unary_node(Op::kSlice, a);
    n.m = offset;
    n.shape = {len};
    return push(std::move(n));
  }

  Var embed_slice(Var a, int offset, int total) {
    const Node& na = node_checked(a);
    if (na.shape.size() != 1) throw ShapeError("embed_slice: expects a vector");
    if (offset < 0 || offset + na.shape[0] > total) throw ShapeError("embed_slice: out of range");
    Node n = unary_node(Op::kEmbedSlice, a);
    n.m = offset;
    n.shape = {total};
    return push(std::move(n));
  }

  Var gather_rows(Var m, std::vector<int> idx) {
    const Node& nm = node_checked(m);
    if (nm.shape.size() != 2) throw ShapeError("gather_rows: expects a matrix");
    for (int i : idx)
      if (i < 0 || i >= nm.shape[0]) throw ShapeError("gather_rows: index out of range");
    Node n = unary_node(Op::kGatherRows, m);
    n.shape = {static_cast<int>(idx.size()), nm.shape[1]};
    n.idx = std::move(idx);
    return push(std::move(n));
  }

  Var scatter_add_rows(Var s, std::vector<int> idx, int rows) {
    const Node& ns = node_checked(s);
    if (ns.shape.size() != 2) throw ShapeError("scatter_add_rows: expects a matrix");
    if (static_cast<int>(idx.size()) != ns.shape[0])
      throw ShapeError("scatter_add_rows: index count must match rows of input");
    for (int i : idx)
      if (i < 0 || i >= rows) throw ShapeError("scatter_add_rows: index out of range");
    Node n = unary_node(Op::kScatterAddRows, s);
    n.m = rows;
    n.shape = {rows, ns.shape[1]};
    n.idx = std::move(idx);
    return push(std::move(n));
  }

  Var gather(Var v, std::vector<int> idx) {
    const Node& nv = node_checked(v);
    if (nv.shape.size() != 1) throw ShapeError("gather: expects a vector");
    for (int i : idx)
      if (i < 0 || i >= nv.shape[0]) throw ShapeError("gather: index out of range");
    Node n = unary_node(Op::kGather, v);
    n.shape = {static_cast<int>(idx.size())};
    n.idx = std::move(idx);
    return push(std::move(n));
  }

  Var scatter_add(Var s, std::vector<int> idx, int size) {
    const Node& ns = node_checked(s);
    if (ns.shape.size() != 1) throw ShapeError("scatter_add: expects a vector");
    if (static_cast<int>(idx.size()) != ns.shape[0])
      throw ShapeError("scatter_add: index count must match input length");
    for (int i : idx)
      if (i < 0 || i >= size) throw ShapeError("scatter_add: index out of range");
    Node n = unary_node(Op::kScatterAdd, s);
    n.m = size;
    n.shape = {size};
    n.idx = std::move(idx);
    return push(std::move(n));
  }

  Var take_per_row(Var m, std::vector<int> idx) {
    const Node& nm = node_checked(m);
    if (nm.shape.size() != 2) throw ShapeError("take_per_row: expects a matrix");
    if (static_cast<int>(idx.size()) != nm.shape[0])
      throw ShapeError("take_per_row: one index per row required");
    for (int i : idx)
      if (i < 0 || i >= nm.shape[1]) throw ShapeError("take_per_row: index out of range");
    Node n = unary_node(Op::kTakePerRow, m);
    n.shape = {nm.shape[0]};
    n.idx = std::move(idx);
    return push(std::move(n));
  }

  Var scatter_per_row(Var v, std::vector<int> idx, int cols) {
    const Node& nv = node_checked(v);
    if (nv.shape.size() != 1) throw ShapeError("scatter_per_row: expects a vector");
    if (static_cast<int>(idx.size()) != nv.shape[0])
      throw ShapeError("scatter_per_row: one index per element required");
    for (int i : idx)
      if (i < 0 || i >= cols) throw ShapeError("scatter_per_row: index out of range");
    Node n = unary_node(Op::kScatterPerRow, v);
    n.m = cols;
    n.shape = {nv.shape[0], cols};
    n.idx = std::move(idx);
    return push(std::move(n));
  }

  Var scale_rows(Var v, Var m) {
    const Node& nv = node_checked(v);
    const Node& nm = node_checked(m);
    if (nv.shape.size() != 1 || nm.shape.size() != 2 || nv.shape[0] != nm.shape[0])
      throw ShapeError("scale_rows: expects (m-vector, m x n matrix)");
    Node n;
    n.op = Op::kScaleRows;
    n.a = v.id;
    n.b = m.id;
    n.shape = nm.shape;
    return push(std::move(n));
  }

  Var smul(Var s, Var a) {
    const Node& ns = node_checked(s);
    const Node& na = node_checked(a);
    if (!ns.shape.empty()) throw ShapeError("smul: first argument must be a scalar");
    Node n;
    n.op = Op::kSMul;
    n.a = s.id;
    n.b = a.id;
    n.shape = na.shape;
    return push(std::move(n));
  }

 private:
  struct Node {
    Op op = Op::kValue;
    int a = -1, b = -1;
    double c = 0.0;
    int m = 0;
    std::vector<int> idx;
    std::vector<int> shape;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> val_;
  std::vector<std::uint64_t> ver_;      // version of the cached value
  std::vector<std::uint64_t> dep_ver_;  // max input version at last compute (0 = never)
  std::uint64_t counter_ = 1;
  std::unordered_map<int, std::vector<int>> ancestors_cache_;

  const Node& node_checked(Var v) const {
    if (v.g != this) throw UnknownLeaf("variable does not belong to this tape");
    if (v.id < 0 || v.id >= size()) throw UnknownLeaf("variable id out of range");
    return nodes_[v.id];
  }

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    val_.emplace_back();
    ver_.push_back(0);
    dep_ver_.push_back(0);
    return Var{this, size() - 1};
  }

  Var push_value(const Tensor& t, bool requires_grad) {
    Node n;
    n.op = Op::kValue;
    n.shape = t.shape;
    n.requires_grad = requires_grad;
    Var v = push(std::move(n));
    val_[v.id] = t;
    ver_[v.id] = ++counter_;
    return v;
  }

  Node unary_node(Op op, Var a) {
    const Node& na = node_checked(a);
    Node n;
    n.op = op;
    n.a = a.id;
    n.shape = na.shape;
    return n;
  }

  Var push_unary(Op op, Var a) { return push(unary_node(op, a)); }

  Var push_same_shape(Op op, Var a, Var b) {
    const Node& na = node_checked(a);
    const Node& nb = node_checked(b);
    if (na.shape != nb.shape)
      throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(na.shape) +
                       " vs " + shape_str(nb.shape));
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.shape = na.shape;
    return push(std::move(n));
  }

  // reduce m x n -> n
  Var push_row_reduce(Op op, Var a) {
    const Node& na = node_checked(a);
    if (na.shape.size() != 2) throw ShapeError(std::string(op_name(op)) + ": expects a matrix");
    Node n = unary_node(op, a);
    n.shape = {na.shape[1]};
    return push(std::move(n));
  }

  // reduce m x n -> m
  Var push_col_reduce(Op op, Var a) {
    const Node& na = node_checked(a);
    if (na.shape.size() != 2) throw ShapeError(std::string(op_name(op)) + ": expects a matrix");
    Node n = unary_node(op, a);
    n.shape = {na.shape[0]};
    return push(std::move(n));
  }

  void accumulate(std::vector<int>& adj, int target, Var contribution) {
    if (!contribution.valid()) return;
    if (adj[target] < 0)
      adj[target] = contribution.id;
    else
      adj[target] = add(Var{this, adj[target]}, contribution).id;
  }

  void evaluate_upto(Var root) {
    node_checked(root);
    auto it = ancestors_cache_.find(root.id);
    if (it == ancestors_cache_.end()) {
      std::vector<int> order;
      std::vector<char> seen(static_cast<size_t>(root.id) + 1, 0);
      std::vector<int> stack{root.id};
      seen[root.id] = 1;
      while (!stack.empty()) {
        int i = stack.back();
        stack.pop_back();
        order.push_back(i);
        const Node& n = nodes_[i];
        if (n.a >= 0 && !seen[n.a]) {
          seen[n.a] = 1;
          stack.push_back(n.a);
        }
        if (n.b >= 0 && !seen[n.b]) {
          seen[n.b] = 1;
          stack.push_back(n.b);
        }
      }
      std::sort(order.begin(), order.end());
      it = ancestors_cache_.emplace(root.id, std::move(order)).first;
    }
    for (int i : it->second) {
      const Node& n = nodes_[i];
      if (n.op == Op::kValue) continue;
      std::uint64_t dv = 0;
      if (n.a >= 0) dv = std::max(dv, ver_[n.a]);
      if (n.b >= 0) dv = std::max(dv, ver_[n.b]);
      if (dep_ver_[i] == dv && dv != 0) continue;
      compute(i);
      dep_ver_[i] = dv;
      ver_[i] = dv;
    }
  }

  void compute(int i) {
    const Node& n = nodes_[i];
    const Tensor* A = n.a >= 0 ? &val_[n.a] : nullptr;
    const Tensor* B = n.b >= 0 ? &val_[n.b] : nullptr;
    Tensor out = Tensor::zeros(n.shape);
    switch (n.op) {
      case Op::kValue:
        return;
      case Op::kAdd:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = A->data[k] + B->data[k];
        break;
      case Op::kSub:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = A->data[k] - B->data[k];
        break;
      case Op::kMul:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = A->data[k] * B->data[k];
        break;
      case Op::kDiv:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = A->data[k] / B->data[k];
        break;
      case Op::kNeg:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = -A->data[k];
        break;
      case Op::kExp:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = std::exp(A->data[k]);
        break;
      case Op::kLog:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = std::log(A->data[k]);
        break;
      case Op::kSigmoid:
        for (size_t k = 0; k < out.data.size(); ++k) {
          double x = A->data[k];
          out.data[k] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                 : std::exp(x) / (1.0 + std::exp(x));
        }
        break;
      case Op::kRelu:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = A->data[k] > 0.0 ? A->data[k] : 0.0;
        break;
      case Op::kReluMask:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = A->data[k] > 0.0 ? 1.0 : 0.0;
        break;
      case Op::kAbs:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = std::fabs(A->data[k]);
        break;
      case Op::kSignMask:
        for (size_t k = 0; k < out.data.size(); ++k)
          out.data[k] = A->data[k] > 0.0 ? 1.0 : (A->data[k] < 0.0 ? -1.0 : 0.0);
        break;
      case Op::kScale:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = n.c * A->data[k];
        break;
      case Op::kAddConst:
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = n.c + A->data[k];
        break;
      case Op::kMatMul: {
        int m = A->shape[0], kk = A->shape[1], nn = B->shape[1];
        for (int r = 0; r < m; ++r)
          for (int p = 0; p < kk; ++p) {
            double a = A->at(r, p);
            if (a == 0.0) continue;
            const double* brow = &B->data[static_cast<size_t>(p) * nn];
            double* orow = &out.data[static_cast<size_t>(r) * nn];
            for (int cidx = 0; cidx < nn; ++cidx) orow[cidx] += a * brow[cidx];
          }
        break;
      }
      case Op::kMatVec: {
        int m = A->shape[0], kk = A->shape[1];
        for (int r = 0; r < m; ++r) {
          double s = 0.0;
          const double* arow = &A->data[static_cast<size_t>(r) * kk];
          for (int p = 0; p < kk; ++p) s += arow[p] * B->data[p];
          out.data[r] = s;
        }
        break;
      }
      case Op::kOuter: {
        int m = A->shape[0], nn = B->shape[0];
        for (int r = 0; r < m; ++r)
          for (int cidx = 0; cidx < nn; ++cidx) out.at(r, cidx) = A->data[r] * B->data[cidx];
        break;
      }
      case Op::kTranspose: {
        int m = A->shape[0], nn = A->shape[1];
        for (int r = 0; r < m; ++r)
          for (int cidx = 0; cidx < nn; ++cidx) out.at(cidx, r) = A->at(r, cidx);
        break;
      }
      case Op::kSumAll: {
        double s = 0.0;
        for (double v : A->data) s += v;
        out.data[0] = s;
        break;
      }
      case Op::kRowSums: {
        int m = A->shape[0], nn = A->shape[1];
        for (int r = 0; r < m; ++r)
          for (int cidx = 0; cidx < nn; ++cidx) out.data[cidx] += A->at(r, cidx);
        break;
      }
      case Op::kColSums: {
        int m = A->shape[0], nn = A->shape[1];
        for (int r = 0; r < m; ++r) {
          double s = 0.0;
          for (int cidx = 0; cidx < nn; ++cidx) s += A->at(r, cidx);
          out.data[r] = s;
        }
        break;
      }
      case Op::kBroadcastRow: {
        int m = n.m, nn = A->shape[0];
        for (int r = 0; r < m; ++r)
          for (int cidx = 0; cidx < nn; ++cidx) out.at(r, cidx) = A->data[cidx];
        break;
      }
      case Op::kBroadcastCol: {
        int m = A->shape[0], nn = n.m;
        for (int r = 0; r < m; ++r)
          for (int cidx = 0; cidx < nn; ++cidx) out.at(r, cidx) = A->data[r];
        break;
      }
      case Op::kLogSumExpRows: {
        int m = A->shape[0], nn = A->shape[1];
        for (int r = 0; r < m; ++r) {
          const double* row = &A->data[static_cast<size_t>(r) * nn];
          double mx = row[0];
          for (int cidx = 1; cidx < nn; ++cidx) mx = std::max(mx, row[cidx]);
          double s = 0.0;
          for (int cidx = 0; cidx < nn; ++cidx) s += std::exp(row[cidx] - mx);
          out.data[r] = mx + std::log(s);
        }
        break;
      }
      case Op::kMaxRows: {
        int m = A->shape[0], nn = A->shape[1];
        for (int r = 0; r < m; ++r) {
          const double* row = &A->data[static_cast<size_t>(r) * nn];
          double mx = row[0];
          for (int cidx = 1; cidx < nn; ++cidx) mx = std::max(mx, row[cidx]);
          out.data[r] = mx;
        }
        break;
      }
      case Op::kArgmaxMaskRows: {
        int m = A->shape[0], nn = A->shape[1];
        for (int r = 0; r < m; ++r) {
          const double* row = &A->data[static_cast<size_t>(r) * nn];
          int arg = 0;
          for (int cidx = 1; cidx < nn; ++cidx)
            if (row[cidx] > row[arg]) arg = cidx;
          out.at(r, arg) = 1.0;
        }
        break;
      }
      case Op::kReshape:
        out.data = A->data;
        break;
      case Op::kSlice:
        for (int k = 0; k < n.shape[0]; ++k) out.data[k] = A->data[n.m + k];
        break;
      case Op::kEmbedSlice:
        for (size_t k = 0; k < A->data.size(); ++k) out.data[n.m + k] = A->data[k];
        break;
      case Op::kGatherRows: {
        int nn = A->shape[1];
        for (size_t r = 0; r < n.idx.size(); ++r)
          for (int cidx = 0; cidx < nn; ++cidx)
            out.data[r * nn + cidx] = A->at(n.idx[r], cidx);
        break;
      }
      case Op::kScatterAddRows: {
        int nn = A->shape[1];
        for (size_t r = 0; r < n.idx.size(); ++r)
          for (int cidx = 0; cidx < nn; ++cidx)
            out.at(n.idx[r], cidx) += A->data[r * nn + cidx];
        break;
      }
      case Op::kGather:
        for (size_t k = 0; k < n.idx.size(); ++k) out.data[k] = A->data[n.idx[k]];
        break;
      case Op::kScatterAdd:
        for (size_t k = 0; k < n.idx.size(); ++k) out.data[n.idx[k]] += A->data[k];
        break;
      case Op::kTakePerRow: {
        int nn = A->shape[1];
        for (size_t r = 0; r < n.idx.size(); ++r) out.data[r] = A->data[r * nn + n.idx[r]];
        break;
      }
      case Op::kScatterPerRow: {
        for (size_t r = 0; r < n.idx.size(); ++r) out.at(static_cast<int>(r), n.idx[r]) = A->data[r];
        break;
      }
      case Op::kScaleRows: {
        int m = B->shape[0], nn = B->shape[1];
        for (int r = 0; r < m; ++r)
          for (int cidx = 0; cidx < nn; ++cidx) out.at(r, cidx) = A->data[r] * B->at(r, cidx);
        break;
      }
      case Op::kSMul: {
        double s = A->data[0];
        for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = s * B->data[k];
        break;
      }
    }
    if (!out.all_finite())
      throw NumericalError(std::string("non-finite value produced by op '") + op_name(n.op) +
                           "' at node " + std::to_string(i));
    val_[i] = std::move(out);
  }

  // Adjoint of input slot `slot` of node i given upstream adjoint d.
  // Invalid Var means no gradient flows (zero-derivative masks).
  Var vjp(int i, int slot, Var d) {
    Node n = nodes_[i];  // copy: we append below
    Var self{this, i};
    Var a{this, n.a};
    Var b = n.b >= 0 ? Var{this, n.b} : Var{};
    switch (n.op) {
      case Op::kValue:
        return {};
      case Op::kAdd:
        return d;
      case Op::kSub:
        return slot == 0 ? d : neg(d);
      case Op::kMul:
        return slot == 0 ? mul(d, b) : mul(d, a);
      case Op::kDiv:
        return slot == 0 ? div(d, b) : neg(mul(d, div(self, b)));
      case Op::kNeg:
        return neg(d);
      case Op::kExp:
        return mul(d, self);
      case Op::kLog:
        return div(d, a);
      case Op::kSigmoid:
        // d * s * (1 - s)
        return mul(d, mul(self, add_const(neg(self), 1.0)));
      case Op::kRelu:
        return mul(d, relu_mask(a));
      case Op::kReluMask:
        return {};
      case Op::kAbs:
        return mul(d, sign_mask(a));
      case Op::kSignMask:
        return {};
      case Op::kScale:
        return scale(d, n.c);
      case Op::kAddConst:
        return d;
      case Op::kMatMul:
        return slot == 0 ? matmul(d, transpose(b)) : matmul(transpose(a), d);
      case Op::kMatVec:
        return slot == 0 ? outer(d, b) : matvec(transpose(a), d);
      case Op::kOuter:
        return slot == 0 ? matvec(d, b) : matvec(transpose(d), a);
      case Op::kTranspose:
        return transpose(d);
      case Op::kSumAll:
        return smul(d, constant(Tensor::ones(nodes_[n.a].shape)));
      case Op::kRowSums:
        return broadcast_row(d, nodes_[n.a].shape[0]);
      case Op::kColSums:
        return broadcast_col(d, nodes_[n.a].shape[1]);
      case Op::kBroadcastRow:
        return row_sums(d);
      case Op::kBroadcastCol:
        return col_sums(d);
      case Op::kLogSumExpRows: {
        Var softmax = exp_(sub(a, broadcast_col(self, nodes_[n.a].shape[1])));
        return scale_rows(d, softmax);
      }
      case Op::kMaxRows:
        return scale_rows(d, argmax_mask_rows(a));
      case Op::kArgmaxMaskRows:
        return {};
      case Op::kReshape:
        return reshape(d, nodes_[n.a].shape);
      case Op::kSlice:
        return embed_slice(d, n.m, nodes_[n.a].shape[0]);
      case Op::kEmbedSlice:
        return slice(d, n.m, nodes_[n.a].shape[0]);
      case Op::kGatherRows:
        return scatter_add_rows(d, n.idx, nodes_[n.a].shape[0]);
      case Op::kScatterAddRows:
        return gather_rows(d, n.idx);
      case Op::kGather:
        return scatter_add(d, n.idx, nodes_[n.a].shape[0]);
      case Op::kScatterAdd:
        return gather(d, n.idx);
      case Op::kTakePerRow:
        return scatter_per_row(d, n.idx, nodes_[n.a].shape[1]);
      case Op::kScatterPerRow:
        return take_per_row(d, n.idx);
      case Op::kScaleRows:
        return slot == 0 ? col_sums(mul(d, b)) : scale_rows(a, d);
      case Op::kSMul:
        return slot == 0 ? sum_all(mul(d, b)) : smul(a, d);
    }
    return {};
  }
};

// Infix sugar for same-shape elementwise ops.
inline Var operator+(Var a, Var b) { return a.g->add(a, b); }
inline Var operator-(Var a, Var b) { return a.g->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.g->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.g->div(a, b); }
inline Var operator-(Var a) { return a.g->neg(a); }

}  // namespace lossforge::ad
