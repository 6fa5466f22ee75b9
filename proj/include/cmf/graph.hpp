#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <string>
#include <vector>

#include "cmf/tensor.hpp"
#include "cmf/util.hpp"

namespace cmf {

// The closed op set. Reverse-mode differentiation covers every op except
// kInput; there is no general broadcasting.
enum class Op {
  kInput,
  kConv2d,
  kDense,
  kRelu,
  kSigmoid,
  kMaxPool2,
  kGlobalMaxPool,
  kSetMean,
  kChannelScale,
  kChannelShift,
  kAdd,
  kAddConst,
  kL2NormRows,
  kClassMean,
  kReshape,
  kSoftmaxXent,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConv2d: return "conv2d";
    case Op::kDense: return "dense";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kMaxPool2: return "max_pool2";
    case Op::kGlobalMaxPool: return "global_max_pool";
    case Op::kSetMean: return "set_mean";
    case Op::kChannelScale: return "channel_scale";
    case Op::kChannelShift: return "channel_shift";
    case Op::kAdd: return "add";
    case Op::kAddConst: return "add_const";
    case Op::kL2NormRows: return "l2_normalize_rows";
    case Op::kClassMean: return "class_mean";
    case Op::kReshape: return "reshape";
    case Op::kSoftmaxXent: return "softmax_cross_entropy";
  }
  return "?";
}

struct Var {
  int i = -1;
  bool valid() const { return i >= 0; }
};

namespace detail {

// Row-major im2col: each row is one (c_in, ky, kx) source, each column one
// output position. Out-of-bounds taps are zero.
template <class S>
void im2col(const S* x, int64_t c_in, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, S* cols) {
  const int64_t positions = oh * ow;
  for (int64_t c = 0; c < c_in; ++c) {
    const S* plane = x + c * h * w;
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        S* row = cols + ((c * kh + ky) * kw + kx) * positions;
        for (int64_t oy = 0; oy < oh; ++oy) {
          int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            for (int64_t ox = 0; ox < ow; ++ox) row[oy * ow + ox] = S(0);
            continue;
          }
          const S* src = plane + iy * w;
          for (int64_t ox = 0; ox < ow; ++ox) {
            int64_t ix = ox * stride - pad + kx;
            row[oy * ow + ox] = (ix < 0 || ix >= w) ? S(0) : src[ix];
          }
        }
      }
    }
  }
}

template <class S>
void col2im_add(const S* cols, int64_t c_in, int64_t h, int64_t w, int64_t kh,
                int64_t kw, int64_t stride, int64_t pad, int64_t oh, int64_t ow,
                S* x) {
  const int64_t positions = oh * ow;
  for (int64_t c = 0; c < c_in; ++c) {
    S* plane = x + c * h * w;
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        const S* row = cols + ((c * kh + ky) * kw + kx) * positions;
        for (int64_t oy = 0; oy < oh; ++oy) {
          int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          S* dst = plane + iy * w;
          for (int64_t ox = 0; ox < ow; ++ox) {
            int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

template <class S>
std::vector<S>& conv_scratch() {
  thread_local std::vector<S> buf;
  return buf;
}

}  // namespace detail

// Tape-style computation graph. Nodes are appended in execution order, so the
// node list is already a topological order and every input index precedes its
// consumer. Values are computed eagerly on construction; recompute() re-runs
// the tape after leaf values change (used by the finite-difference checks).
template <class S>
class Graph {
 public:
  struct Node {
    Op op = Op::kInput;
    std::array<int, 3> in{-1, -1, -1};
    int n_in = 0;
    Tensor<S> value;
    Tensor<S> grad;          // allocated during backward
    bool has_grad = false;
    bool needs_grad = false;
    bool trainable = false;  // leaves only
    std::string name;        // leaves and marked outputs
    // op attributes
    int stride = 1;
    int pad = 0;
    double cval = 0.0;
    int groups = 0;
    std::vector<int> labels;
    Shape new_shape;
    // forward scratch consumed by backward
    Tensor<S> aux;
    std::vector<int32_t> arg;
  };

  bool check_finite = false;

  int size() const { return static_cast<int>(nodes_.size()); }
  const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.i)]; }
  Node& node(Var v) { return nodes_[static_cast<size_t>(v.i)]; }

  Var input(const std::string& name, Tensor<S> value) {
    return add_leaf(name, std::move(value), false);
  }
  Var parameter(const std::string& name, Tensor<S> value) {
    return add_leaf(name, std::move(value), true);
  }
  Var constant(Tensor<S> value) { return add_leaf("", std::move(value), false); }

  const Tensor<S>& value(Var v) const { return node(v).value; }

  void set_value(Var v, const Tensor<S>& t) {
    Node& n = node(v);
    if (n.op != Op::kInput) fail("Graph::set_value: node #", v.i, " is not a leaf");
    if (!n.value.same_shape(t))
      fail("Graph::set_value: leaf '", n.name, "' expects shape ",
           shape_str(n.value.shape()), ", got ", shape_str(t.shape()));
    n.value = t;
  }

  Var leaf(const std::string& name) const {
    for (int i = 0; i < size(); ++i)
      if (nodes_[static_cast<size_t>(i)].op == Op::kInput &&
          nodes_[static_cast<size_t>(i)].name == name)
        return Var{i};
    fail("Graph: no leaf named '", name, "'");
  }

  void mark_output(const std::string& name, Var v) { outputs_[name] = v; }
  const std::map<std::string, Var>& outputs() const { return outputs_; }

  // Re-executes every non-leaf node in tape order.
  void recompute() {
    for (int i = 0; i < size(); ++i)
      if (nodes_[static_cast<size_t>(i)].op != Op::kInput) eval_node(i);
  }

  // Reverse sweep from a scalar loss. Returns one gradient per trainable
  // leaf, keyed by name; a parameter the loss does not depend on gets a zero
  // gradient. Node gradients stay readable through grad() afterwards.
  std::map<std::string, Tensor<S>> backward(Var loss) {
    Node& ln = node(loss);
    if (ln.value.size() != 1)
      fail("backward: loss node #", loss.i, " (", op_name(ln.op),
           ") is not scalar, shape ", shape_str(ln.value.shape()));
    // reachability: a node needs a gradient iff a trainable leaf feeds it
    for (auto& n : nodes_) {
      n.has_grad = false;
      if (n.op == Op::kInput) {
        n.needs_grad = n.trainable;
      } else {
        n.needs_grad = false;
        for (int k = 0; k < n.n_in; ++k)
          if (nodes_[static_cast<size_t>(n.in[static_cast<size_t>(k)])].needs_grad)
            n.needs_grad = true;
      }
    }
    ensure_grad(loss.i);
    node(loss).grad[0] = S(1);
    for (int i = loss.i; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.op == Op::kInput || !n.has_grad || !n.needs_grad) continue;
      backprop_node(i);
    }
    std::map<std::string, Tensor<S>> grads;
    for (auto& n : nodes_) {
      if (!n.trainable) continue;
      grads[n.name] = n.has_grad ? n.grad : Tensor<S>::zeros(n.value.shape());
    }
    return grads;
  }

  const Tensor<S>& grad(Var v) const {
    const Node& n = node(v);
    if (!n.has_grad) fail("Graph::grad: node #", v.i, " has no gradient");
    return n.grad;
  }

  // -- op builders ---------------------------------------------------------

  Var conv2d(Var x, Var k, int stride = 1, int pad = 0) {
    if (stride < 1 || pad < 0)
      fail("conv2d: stride must be >= 1 and pad >= 0, got stride=", stride,
           " pad=", pad);
    Node n;
    n.op = Op::kConv2d;
    n.stride = stride;
    n.pad = pad;
    return add_op(n, {x, k});
  }
  Var dense(Var x, Var w, Var b) {
    Node n;
    n.op = Op::kDense;
    return add_op(n, {x, w, b});
  }
  Var relu(Var x) {
    Node n;
    n.op = Op::kRelu;
    return add_op(n, {x});
  }
  Var sigmoid(Var x) {
    Node n;
    n.op = Op::kSigmoid;
    return add_op(n, {x});
  }
  Var max_pool2(Var x) {
    Node n;
    n.op = Op::kMaxPool2;
    return add_op(n, {x});
  }
  Var global_max_pool(Var x) {
    Node n;
    n.op = Op::kGlobalMaxPool;
    return add_op(n, {x});
  }
  Var set_mean(Var x) {
    Node n;
    n.op = Op::kSetMean;
    return add_op(n, {x});
  }
  Var channel_scale(Var x, Var s) {
    Node n;
    n.op = Op::kChannelScale;
    return add_op(n, {x, s});
  }
  Var channel_shift(Var x, Var t) {
    Node n;
    n.op = Op::kChannelShift;
    return add_op(n, {x, t});
  }
  Var add(Var a, Var b) {
    Node n;
    n.op = Op::kAdd;
    return add_op(n, {a, b});
  }
  Var add_const(Var x, double c) {
    Node n;
    n.op = Op::kAddConst;
    n.cval = c;
    return add_op(n, {x});
  }
  Var l2_normalize_rows(Var x) {
    Node n;
    n.op = Op::kL2NormRows;
    return add_op(n, {x});
  }
  Var class_mean(Var x, std::vector<int> labels, int groups) {
    Node n;
    n.op = Op::kClassMean;
    n.labels = std::move(labels);
    n.groups = groups;
    return add_op(n, {x});
  }
  Var reshape(Var x, Shape shape) {
    Node n;
    n.op = Op::kReshape;
    n.new_shape = std::move(shape);
    return add_op(n, {x});
  }
  Var softmax_cross_entropy(Var logits, std::vector<int> labels) {
    Node n;
    n.op = Op::kSoftmaxXent;
    n.labels = std::move(labels);
    return add_op(n, {logits});
  }

 private:
  std::vector<Node> nodes_;
  std::map<std::string, Var> outputs_;

  Var add_leaf(const std::string& name, Tensor<S> value, bool trainable) {
    Node n;
    n.op = Op::kInput;
    n.name = name;
    n.value = std::move(value);
    n.trainable = trainable;
    nodes_.push_back(std::move(n));
    return Var{size() - 1};
  }

  Var add_op(Node& n, std::initializer_list<Var> ins) {
    n.n_in = 0;
    for (Var v : ins) {
      if (!v.valid() || v.i >= size())
        fail(op_name(n.op), ": input var out of range");
      n.in[static_cast<size_t>(n.n_in++)] = v.i;
    }
    nodes_.push_back(std::move(n));
    int idx = size() - 1;
    eval_node(idx);
    return Var{idx};
  }

  const Tensor<S>& in_val(const Node& n, int k) const {
    return nodes_[static_cast<size_t>(n.in[static_cast<size_t>(k)])].value;
  }

  void ensure_grad(int i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.has_grad) {
      n.grad = Tensor<S>::zeros(n.value.shape());
      n.has_grad = true;
    }
  }

  [[noreturn]] void shape_error(int i, const std::string& detail) const {
    const Node& n = nodes_[static_cast<size_t>(i)];
    std::string who = n.name.empty() ? cat("node #", i) : cat("node '", n.name, "'");
    fail(op_name(n.op), " at ", who, ": ", detail);
  }

  void eval_node(int i);
  void backprop_node(int i);
};

// -- forward implementations -----------------------------------------------

template <class S>
void Graph<S>::eval_node(int i) {
  Node& n = nodes_[static_cast<size_t>(i)];
  using MatMap = typename Tensor<S>::MatMap;
  using ConstMatMap = typename Tensor<S>::ConstMatMap;
  switch (n.op) {
    case Op::kInput:
      break;
    case Op::kConv2d: {
      const Tensor<S>& x = in_val(n, 0);
      const Tensor<S>& k = in_val(n, 1);
      if (x.rank() != 4 || k.rank() != 4)
        shape_error(i, cat("expects 4-d input and kernel, got ",
                           shape_str(x.shape()), " and ", shape_str(k.shape())));
      const int64_t nn = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
      const int64_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
      if (k.dim(1) != ci)
        shape_error(i, cat("kernel expects ", k.dim(1), " input channels, image has ", ci));
      const int64_t oh = (h + 2 * n.pad - kh) / n.stride + 1;
      const int64_t ow = (w + 2 * n.pad - kw) / n.stride + 1;
      if (oh < 1 || ow < 1)
        shape_error(i, cat("kernel ", kh, "x", kw, " does not fit ", h, "x", w,
                           " with pad ", n.pad));
      if (n.value.shape() != Shape{nn, co, oh, ow})
        n.value = Tensor<S>::zeros({nn, co, oh, ow});
      const int64_t ckk = ci * kh * kw, pos = oh * ow;
      auto& cols = detail::conv_scratch<S>();
      cols.resize(static_cast<size_t>(ckk * pos));
      ConstMatMap km(k.data(), co, ckk);
      for (int64_t im = 0; im < nn; ++im) {
        detail::im2col(x.data() + im * ci * h * w, ci, h, w, kh, kw, n.stride,
                       n.pad, oh, ow, cols.data());
        ConstMatMap cm(cols.data(), ckk, pos);
        MatMap om(n.value.data() + im * co * pos, co, pos);
        om.noalias() = km * cm;
      }
      break;
    }
    case Op::kDense: {
      const Tensor<S>& x = in_val(n, 0);
      const Tensor<S>& w = in_val(n, 1);
      const Tensor<S>& b = in_val(n, 2);
      if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
        shape_error(i, cat("expects x[N,in] w[out,in] b[out], got ",
                           shape_str(x.shape()), " ", shape_str(w.shape()), " ",
                           shape_str(b.shape())));
      if (x.dim(1) != w.dim(1) || b.dim(0) != w.dim(0))
        shape_error(i, cat("inconsistent dims: x ", shape_str(x.shape()), " w ",
                           shape_str(w.shape()), " b ", shape_str(b.shape())));
      const int64_t rows = x.dim(0), out = w.dim(0);
      if (n.value.shape() != Shape{rows, out}) n.value = Tensor<S>::zeros({rows, out});
      // One matrix-vector product per row, so a row's rounding never depends
      // on its position in the batch.
      for (int64_t r = 0; r < rows; ++r)
        n.value.mat2().row(r).noalias() =
            (w.mat2() * x.mat2().row(r).transpose()).transpose() +
            b.vec().transpose();
      break;
    }
    case Op::kRelu: {
      const Tensor<S>& x = in_val(n, 0);
      if (!n.value.same_shape(x)) n.value = Tensor<S>::zeros(x.shape());
      n.value.vec() = x.vec().cwiseMax(S(0));
      break;
    }
    case Op::kSigmoid: {
      const Tensor<S>& x = in_val(n, 0);
      if (!n.value.same_shape(x)) n.value = Tensor<S>::zeros(x.shape());
      for (int64_t j = 0; j < x.size(); ++j)
        n.value[j] = S(1) / (S(1) + std::exp(-x[j]));
      break;
    }
    case Op::kMaxPool2: {
      const Tensor<S>& x = in_val(n, 0);
      if (x.rank() != 4) shape_error(i, cat("expects 4-d input, got ", shape_str(x.shape())));
      const int64_t nn = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
      if (h < 2 || w < 2) shape_error(i, cat("spatial dims too small: ", h, "x", w));
      const int64_t oh = h / 2, ow = w / 2;
      if (n.value.shape() != Shape{nn, c, oh, ow}) n.value = Tensor<S>::zeros({nn, c, oh, ow});
      n.arg.assign(static_cast<size_t>(n.value.size()), 0);
      int64_t o = 0;
      for (int64_t im = 0; im < nn; ++im)
        for (int64_t ch = 0; ch < c; ++ch) {
          const S* plane = x.data() + (im * c + ch) * h * w;
          for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox, ++o) {
              int64_t base = (2 * oy) * w + 2 * ox;
              int64_t best = base;
              S bv = plane[base];
              const int64_t cand[3] = {base + 1, base + w, base + w + 1};
              for (int64_t cd : cand)
                if (plane[cd] > bv) {
                  bv = plane[cd];
                  best = cd;
                }
              n.value[o] = bv;
              n.arg[static_cast<size_t>(o)] =
                  static_cast<int32_t>((im * c + ch) * h * w + best);
            }
        }
      break;
    }
    case Op::kGlobalMaxPool: {
      const Tensor<S>& x = in_val(n, 0);
      if (x.rank() != 4) shape_error(i, cat("expects 4-d input, got ", shape_str(x.shape())));
      const int64_t nn = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
      if (n.value.shape() != Shape{nn, c}) n.value = Tensor<S>::zeros({nn, c});
      n.arg.assign(static_cast<size_t>(nn * c), 0);
      for (int64_t j = 0; j < nn * c; ++j) {
        const S* plane = x.data() + j * hw;
        int64_t best = 0;
        for (int64_t p = 1; p < hw; ++p)
          if (plane[p] > plane[best]) best = p;
        n.value[j] = plane[best];
        n.arg[static_cast<size_t>(j)] = static_cast<int32_t>(j * hw + best);
      }
      break;
    }
    case Op::kSetMean: {
      const Tensor<S>& x = in_val(n, 0);
      if (x.rank() < 2) shape_error(i, cat("expects rank >= 2, got ", shape_str(x.shape())));
      const int64_t nn = x.dim(0), rest = x.size() / nn;
      Shape os(x.shape().begin() + 1, x.shape().end());
      if (n.value.shape() != os) n.value = Tensor<S>::zeros(os);
      // Summands are sorted before accumulation so the result is bit-exactly
      // invariant under permutation of the set axis.
      std::vector<S> col(static_cast<size_t>(nn));
      for (int64_t j = 0; j < rest; ++j) {
        for (int64_t r = 0; r < nn; ++r) col[static_cast<size_t>(r)] = x[r * rest + j];
        std::sort(col.begin(), col.end());
        S acc = S(0);
        for (S v : col) acc += v;
        n.value[j] = acc / static_cast<S>(nn);
      }
      break;
    }
    case Op::kChannelScale:
    case Op::kChannelShift: {
      const Tensor<S>& x = in_val(n, 0);
      const Tensor<S>& v = in_val(n, 1);
      if (x.rank() != 4 || v.rank() != 1 || v.dim(0) != x.dim(1))
        shape_error(i, cat("expects x[N,C,H,W] and vector[C], got ",
                           shape_str(x.shape()), " and ", shape_str(v.shape())));
      const int64_t nn = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
      if (!n.value.same_shape(x)) n.value = Tensor<S>::zeros(x.shape());
      for (int64_t im = 0; im < nn; ++im)
        for (int64_t ch = 0; ch < c; ++ch) {
          const S* src = x.data() + (im * c + ch) * hw;
          S* dst = n.value.data() + (im * c + ch) * hw;
          const S f = v[ch];
          if (n.op == Op::kChannelScale)
            for (int64_t p = 0; p < hw; ++p) dst[p] = src[p] * f;
          else
            for (int64_t p = 0; p < hw; ++p) dst[p] = src[p] + f;
        }
      break;
    }
    case Op::kAdd: {
      const Tensor<S>& a = in_val(n, 0);
      const Tensor<S>& b = in_val(n, 1);
      if (!a.same_shape(b))
        shape_error(i, cat("shape mismatch ", shape_str(a.shape()), " vs ",
                           shape_str(b.shape())));
      if (!n.value.same_shape(a)) n.value = Tensor<S>::zeros(a.shape());
      n.value.vec() = a.vec() + b.vec();
      break;
    }
    case Op::kAddConst: {
      const Tensor<S>& x = in_val(n, 0);
      if (!n.value.same_shape(x)) n.value = Tensor<S>::zeros(x.shape());
      n.value.vec() = x.vec().array() + static_cast<S>(n.cval);
      break;
    }
    case Op::kL2NormRows: {
      const Tensor<S>& x = in_val(n, 0);
      if (x.rank() != 2) shape_error(i, cat("expects 2-d input, got ", shape_str(x.shape())));
      const int64_t rows = x.dim(0), d = x.dim(1);
      if (!n.value.same_shape(x)) n.value = Tensor<S>::zeros(x.shape());
      if (n.aux.shape() != Shape{rows}) n.aux = Tensor<S>::zeros({rows});
      for (int64_t r = 0; r < rows; ++r) {
        const S* src = x.data() + r * d;
        S sq = S(0);
        for (int64_t j = 0; j < d; ++j) sq += src[j] * src[j];
        S norm = std::sqrt(sq + S(1e-12));
        n.aux[r] = norm;
        S* dst = n.value.data() + r * d;
        for (int64_t j = 0; j < d; ++j) dst[j] = src[j] / norm;
      }
      break;
    }
    case Op::kClassMean: {
      const Tensor<S>& x = in_val(n, 0);
      if (x.rank() != 2) shape_error(i, cat("expects 2-d input, got ", shape_str(x.shape())));
      const int64_t rows = x.dim(0), d = x.dim(1);
      if (static_cast<int64_t>(n.labels.size()) != rows)
        shape_error(i, cat(n.labels.size(), " labels for ", rows, " rows"));
      std::vector<int64_t> counts(static_cast<size_t>(n.groups), 0);
      for (int lb : n.labels) {
        if (lb < 0 || lb >= n.groups)
          shape_error(i, cat("label ", lb, " outside [0,", n.groups, ")"));
        ++counts[static_cast<size_t>(lb)];
      }
      for (int g = 0; g < n.groups; ++g)
        if (counts[static_cast<size_t>(g)] == 0)
          shape_error(i, cat("class ", g, " has zero support samples"));
      if (n.value.shape() != Shape{n.groups, d})
        n.value = Tensor<S>::zeros({n.groups, d});
      else
        n.value.vec().setZero();
      for (int64_t r = 0; r < rows; ++r) {
        const int g = n.labels[static_cast<size_t>(r)];
        S* dst = n.value.data() + g * d;
        const S* src = x.data() + r * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
      for (int g = 0; g < n.groups; ++g) {
        S inv = S(1) / static_cast<S>(counts[static_cast<size_t>(g)]);
        S* dst = n.value.data() + g * d;
        for (int64_t j = 0; j < d; ++j) dst[j] *= inv;
      }
      break;
    }
    case Op::kReshape: {
      const Tensor<S>& x = in_val(n, 0);
      if (numel(n.new_shape) != x.size())
        shape_error(i, cat("cannot view ", shape_str(x.shape()), " as ",
                           shape_str(n.new_shape)));
      n.value = x.reshaped(n.new_shape);
      break;
    }
    case Op::kSoftmaxXent: {
      const Tensor<S>& x = in_val(n, 0);
      if (x.rank() != 2) shape_error(i, cat("expects 2-d logits, got ", shape_str(x.shape())));
      const int64_t rows = x.dim(0), c = x.dim(1);
      if (static_cast<int64_t>(n.labels.size()) != rows)
        shape_error(i, cat(n.labels.size(), " labels for ", rows, " logit rows"));
      if (!n.aux.same_shape(x)) n.aux = Tensor<S>::zeros(x.shape());
      if (n.value.shape() != Shape{1}) n.value = Tensor<S>::zeros({1});
      double total = 0.0;
      for (int64_t r = 0; r < rows; ++r) {
        const int lb = n.labels[static_cast<size_t>(r)];
        if (lb < 0 || lb >= c) shape_error(i, cat("label ", lb, " outside [0,", c, ")"));
        const S* src = x.data() + r * c;
        S m = src[0];
        for (int64_t j = 1; j < c; ++j) m = std::max(m, src[j]);
        double z = 0.0;
        S* p = n.aux.data() + r * c;
        for (int64_t j = 0; j < c; ++j) {
          p[j] = std::exp(src[j] - m);
          z += static_cast<double>(p[j]);
        }
        for (int64_t j = 0; j < c; ++j) p[j] = static_cast<S>(p[j] / z);
        total += -std::log(std::max(static_cast<double>(p[lb]), 1e-300));
      }
      n.value[0] = static_cast<S>(total / static_cast<double>(rows));
      break;
    }
  }
  if (check_finite && n.op != Op::kInput) {
    int64_t bad = n.value.first_non_finite();
    if (bad >= 0)
      fail("non-finite output in op ", op_name(n.op), " at node #", i,
           ", flat index ", bad);
  }
}

// -- backward implementations ----------------------------------------------

template <class S>
void Graph<S>::backprop_node(int i) {
  Node& n = nodes_[static_cast<size_t>(i)];
  using MatMap = typename Tensor<S>::MatMap;
  using ConstMatMap = typename Tensor<S>::ConstMatMap;
  auto in_node = [&](int k) -> Node& {
    return nodes_[static_cast<size_t>(n.in[static_cast<size_t>(k)])];
  };
  auto wants = [&](int k) { return in_node(k).needs_grad; };
  auto grad_of = [&](int k) -> Tensor<S>& {
    ensure_grad(n.in[static_cast<size_t>(k)]);
    return in_node(k).grad;
  };
  const Tensor<S>& gy = n.grad;
  switch (n.op) {
    case Op::kInput:
      break;
    case Op::kConv2d: {
      const Tensor<S>& x = in_val(n, 0);
      const Tensor<S>& k = in_val(n, 1);
      const int64_t nn = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
      const int64_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
      const int64_t oh = n.value.dim(2), ow = n.value.dim(3);
      const int64_t ckk = ci * kh * kw, pos = oh * ow;
      auto& cols = detail::conv_scratch<S>();
      cols.resize(static_cast<size_t>(ckk * pos));
      const bool wx = wants(0), wk = wants(1);
      ConstMatMap km(k.data(), co, ckk);
      if (wk) grad_of(1);
      if (wx) grad_of(0);
      std::vector<S> dcols(wx ? static_cast<size_t>(ckk * pos) : 0);
      for (int64_t im = 0; im < nn; ++im) {
        ConstMatMap gym(gy.data() + im * co * pos, co, pos);
        if (wk) {
          detail::im2col(x.data() + im * ci * h * w, ci, h, w, kh, kw, n.stride,
                         n.pad, oh, ow, cols.data());
          ConstMatMap cm(cols.data(), ckk, pos);
          MatMap gkm(in_node(1).grad.data(), co, ckk);
          gkm.noalias() += gym * cm.transpose();
        }
        if (wx) {
          MatMap dcm(dcols.data(), ckk, pos);
          dcm.noalias() = km.transpose() * gym;
          detail::col2im_add(dcols.data(), ci, h, w, kh, kw, n.stride, n.pad, oh,
                             ow, in_node(0).grad.data() + im * ci * h * w);
        }
      }
      break;
    }
    case Op::kDense: {
      const Tensor<S>& x = in_val(n, 0);
      const Tensor<S>& w = in_val(n, 1);
      if (wants(0)) grad_of(0).mat2().noalias() += gy.mat2() * w.mat2();
      if (wants(1)) grad_of(1).mat2().noalias() += gy.mat2().transpose() * x.mat2();
      if (wants(2)) grad_of(2).vec() += gy.mat2().colwise().sum().transpose();
      break;
    }
    case Op::kRelu: {
      if (!wants(0)) break;
      const Tensor<S>& x = in_val(n, 0);
      Tensor<S>& gx = grad_of(0);
      for (int64_t j = 0; j < x.size(); ++j)
        if (x[j] > S(0)) gx[j] += gy[j];
      break;
    }
    case Op::kSigmoid: {
      if (!wants(0)) break;
      Tensor<S>& gx = grad_of(0);
      for (int64_t j = 0; j < n.value.size(); ++j)
        gx[j] += gy[j] * n.value[j] * (S(1) - n.value[j]);
      break;
    }
    case Op::kMaxPool2:
    case Op::kGlobalMaxPool: {
      if (!wants(0)) break;
      Tensor<S>& gx = grad_of(0);
      for (int64_t j = 0; j < n.value.size(); ++j)
        gx[n.arg[static_cast<size_t>(j)]] += gy[j];
      break;
    }
    case Op::kSetMean: {
      if (!wants(0)) break;
      const Tensor<S>& x = in_val(n, 0);
      const int64_t nn = x.dim(0), rest = x.size() / nn;
      const S inv = S(1) / static_cast<S>(nn);
      grad_of(0).mat(nn, rest).rowwise() += (gy.vec() * inv).transpose();
      break;
    }
    case Op::kChannelScale: {
      const Tensor<S>& x = in_val(n, 0);
      const Tensor<S>& v = in_val(n, 1);
      const int64_t nn = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
      const bool wx = wants(0), wv = wants(1);
      if (wx) grad_of(0);
      if (wv) grad_of(1);
      for (int64_t im = 0; im < nn; ++im)
        for (int64_t ch = 0; ch < c; ++ch) {
          const int64_t off = (im * c + ch) * hw;
          if (wx) {
            S* gx = in_node(0).grad.data() + off;
            const S f = v[ch];
            const S* g = gy.data() + off;
            for (int64_t p = 0; p < hw; ++p) gx[p] += g[p] * f;
          }
          if (wv) {
            const S* g = gy.data() + off;
            const S* xs = x.data() + off;
            S acc = S(0);
            for (int64_t p = 0; p < hw; ++p) acc += g[p] * xs[p];
            in_node(1).grad[ch] += acc;
          }
        }
      break;
    }
    case Op::kChannelShift: {
      const Tensor<S>& x = in_val(n, 0);
      const int64_t nn = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
      if (wants(0)) grad_of(0).vec() += gy.vec();
      if (wants(1)) {
        Tensor<S>& gv = grad_of(1);
        for (int64_t im = 0; im < nn; ++im)
          for (int64_t ch = 0; ch < c; ++ch) {
            const S* g = gy.data() + (im * c + ch) * hw;
            S acc = S(0);
            for (int64_t p = 0; p < hw; ++p) acc += g[p];
            gv[ch] += acc;
          }
      }
      break;
    }
    case Op::kAdd: {
      if (wants(0)) grad_of(0).vec() += gy.vec();
      if (wants(1)) grad_of(1).vec() += gy.vec();
      break;
    }
    case Op::kAddConst:
    case Op::kReshape: {
      if (wants(0)) grad_of(0).vec() += gy.vec();
      break;
    }
    case Op::kL2NormRows: {
      if (!wants(0)) break;
      const Tensor<S>& x = in_val(n, 0);
      const int64_t rows = x.dim(0), d = x.dim(1);
      Tensor<S>& gx = grad_of(0);
      for (int64_t r = 0; r < rows; ++r) {
        const S* xs = x.data() + r * d;
        const S* g = gy.data() + r * d;
        S* dst = gx.data() + r * d;
        const S norm = n.aux[r];
        S dot = S(0);
        for (int64_t j = 0; j < d; ++j) dot += xs[j] * g[j];
        const S n3 = norm * norm * norm;
        for (int64_t j = 0; j < d; ++j) dst[j] += g[j] / norm - xs[j] * dot / n3;
      }
      break;
    }
    case Op::kClassMean: {
      if (!wants(0)) break;
      const Tensor<S>& x = in_val(n, 0);
      const int64_t rows = x.dim(0), d = x.dim(1);
      std::vector<int64_t> counts(static_cast<size_t>(n.groups), 0);
      for (int lb : n.labels) ++counts[static_cast<size_t>(lb)];
      Tensor<S>& gx = grad_of(0);
      for (int64_t r = 0; r < rows; ++r) {
        const int g = n.labels[static_cast<size_t>(r)];
        const S inv = S(1) / static_cast<S>(counts[static_cast<size_t>(g)]);
        const S* src = gy.data() + g * d;
        S* dst = gx.data() + r * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j] * inv;
      }
      break;
    }
    case Op::kSoftmaxXent: {
      if (!wants(0)) break;
      const Tensor<S>& x = in_val(n, 0);
      const int64_t rows = x.dim(0), c = x.dim(1);
      const S scale = gy[0] / static_cast<S>(rows);
      Tensor<S>& gx = grad_of(0);
      for (int64_t r = 0; r < rows; ++r) {
        const S* p = n.aux.data() + r * c;
        S* dst = gx.data() + r * c;
        for (int64_t j = 0; j < c; ++j) dst[j] += p[j] * scale;
        dst[n.labels[static_cast<size_t>(r)]] -= scale;
      }
      break;
    }
  }
}

// Sets named leaf values, re-runs the tape, returns the marked outputs.
template <class S>
std::map<std::string, Tensor<S>> forward(Graph<S>& g,
                                         const std::map<std::string, Tensor<S>>& inputs) {
  for (const auto& [name, t] : inputs) g.set_value(g.leaf(name), t);
  g.recompute();
  std::map<std::string, Tensor<S>> out;
  for (const auto& [name, v] : g.outputs()) out[name] = g.value(v);
  return out;
}

}  // namespace cmf
