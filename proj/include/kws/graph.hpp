#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kws/common.hpp"
#include "kws/tensor.hpp"

namespace kws::nd {

class Graph;

// Lightweight handle to a node owned by a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Tensor& grad() const;
};

// Reverse-mode tape. Nodes are appended in construction order, which is a
// topological order by definition; values are computed eagerly and checked
// for finiteness, so a NaN/Inf surfaces at the op that produced it.
class Graph {
 public:
  Var param(Tensor t) { return push("param", std::move(t), {}, nullptr, true); }

  Var constant(Tensor t) { return push("const", std::move(t), {}, nullptr, false); }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  size_t size() const { return nodes_.size(); }

  // Gradients of all ancestors of `root` (a scalar). Each reachable node's
  // backward fires exactly once, in reverse construction order; grads of
  // shared subexpressions accumulate additively.
  void backward(Var root) {
    if (root.graph != this || root.id < 0)
      throw Error("ndmath", "backward: root does not belong to this graph");
    Node& r = nodes_[root.id];
    if (r.value.numel() != 1)
      throw Error("ndmath", "backward: root must be scalar, got shape " + shape_str(r.value.shape));

    std::vector<char> reachable(nodes_.size(), 0);
    std::vector<int> stack{root.id};
    reachable[root.id] = 1;
    while (!stack.empty()) {
      int id = stack.back();
      stack.pop_back();
      for (int in : nodes_[id].inputs) {
        if (!reachable[in]) {
          reachable[in] = 1;
          stack.push_back(in);
        }
      }
    }

    // Params always get an (at least zero) gradient so callers can read
    // them uniformly; unreachable non-params keep empty grads.
    for (size_t i = 0; i < nodes_.size(); ++i) {
      if (reachable[i] || nodes_[i].is_param)
        nodes_[i].grad = Tensor(nodes_[i].value.shape);
      else if (!nodes_[i].grad.data.empty())
        nodes_[i].grad = Tensor{};
    }
    nodes_[root.id].grad.data[0] = 1.0;

    for (int id = root.id; id >= 0; --id) {
      if (reachable[id] && nodes_[id].back) nodes_[id].back(*this, id);
    }
  }

 private:
  friend struct Var;
  friend struct OpBuilder;

  struct Node {
    const char* op;
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    std::function<void(Graph&, int)> back;
    bool is_param;
  };

  Var push(const char* op, Tensor value, std::vector<int> inputs,
           std::function<void(Graph&, int)> back, bool is_param) {
    if (!value.all_finite())
      throw Error("ndmath", std::string("non-finite value produced by op '") + op + "'");
    nodes_.push_back(Node{op, std::move(value), Tensor{}, std::move(inputs), std::move(back), is_param});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int id) { return nodes_[id]; }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(*this); }
inline const Tensor& Var::grad() const { return graph->grad(*this); }

// Shared plumbing for op definitions.
struct OpBuilder {
  static Var make(Graph& g, const char* op, Tensor value, std::vector<Var> ins,
                  std::function<void(Graph&, int)> back) {
    std::vector<int> ids;
    ids.reserve(ins.size());
    for (Var v : ins) {
      if (v.graph != &g) throw Error("ndmath", "op inputs must belong to one graph");
      ids.push_back(v.id);
    }
    return g.push(op, std::move(value), std::move(ids), std::move(back), false);
  }

  static Tensor& grad_of(Graph& g, int id) { return g.node(id).grad; }
  static const Tensor& value_of(Graph& g, int id) { return g.node(id).value; }
  static const std::vector<int>& inputs_of(Graph& g, int id) { return g.node(id).inputs; }
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error("ndmath", msg);
}

inline void require_matrix(const Tensor& t, const char* who) {
  require(t.rank() == 2, std::string(who) + ": expected a matrix, got shape " + shape_str(t.shape));
}

}  // namespace detail

// ---- elementwise ----

inline Var add(Var a, Var b) {
  const Tensor& ta = a.value();
  const Tensor& tb = b.value();
  detail::require(ta.same_shape(tb),
                  "add: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Tensor out = ta;
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] += tb.data[i];
  return OpBuilder::make(*a.graph, "add", std::move(out), {a, b}, [](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    auto& ins = OpBuilder::inputs_of(g, id);
    Tensor& ga = OpBuilder::grad_of(g, ins[0]);
    Tensor& gb = OpBuilder::grad_of(g, ins[1]);
    for (size_t i = 0; i < go.numel(); ++i) {
      ga.data[i] += go.data[i];
      gb.data[i] += go.data[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  const Tensor& ta = a.value();
  const Tensor& tb = b.value();
  detail::require(ta.same_shape(tb),
                  "sub: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Tensor out = ta;
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] -= tb.data[i];
  return OpBuilder::make(*a.graph, "sub", std::move(out), {a, b}, [](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    auto& ins = OpBuilder::inputs_of(g, id);
    Tensor& ga = OpBuilder::grad_of(g, ins[0]);
    Tensor& gb = OpBuilder::grad_of(g, ins[1]);
    for (size_t i = 0; i < go.numel(); ++i) {
      ga.data[i] += go.data[i];
      gb.data[i] -= go.data[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  const Tensor& ta = a.value();
  const Tensor& tb = b.value();
  detail::require(ta.same_shape(tb),
                  "mul: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Tensor out = ta;
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] *= tb.data[i];
  return OpBuilder::make(*a.graph, "mul", std::move(out), {a, b}, [](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    auto& ins = OpBuilder::inputs_of(g, id);
    const Tensor& va = OpBuilder::value_of(g, ins[0]);
    const Tensor& vb = OpBuilder::value_of(g, ins[1]);
    Tensor& ga = OpBuilder::grad_of(g, ins[0]);
    Tensor& gb = OpBuilder::grad_of(g, ins[1]);
    for (size_t i = 0; i < go.numel(); ++i) {
      ga.data[i] += go.data[i] * vb.data[i];
      gb.data[i] += go.data[i] * va.data[i];
    }
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v *= c;
  return OpBuilder::make(*a.graph, "scale", std::move(out), {a}, [c](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (size_t i = 0; i < go.numel(); ++i) ga.data[i] += c * go.data[i];
  });
}

inline Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v += c;
  return OpBuilder::make(*a.graph, "add_scalar", std::move(out), {a}, [](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
  });
}

inline Var sigmoid(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return OpBuilder::make(*a.graph, "sigmoid", std::move(out), {a}, [](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    const Tensor& y = OpBuilder::value_of(g, id);
    Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i] * y.data[i] * (1.0 - y.data[i]);
  });
}

inline Var tanh(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) v = std::tanh(v);
  return OpBuilder::make(*a.graph, "tanh", std::move(out), {a}, [](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    const Tensor& y = OpBuilder::value_of(g, id);
    Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i] * (1.0 - y.data[i] * y.data[i]);
  });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return OpBuilder::make(*a.graph, "relu", std::move(out), {a}, [](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    const Tensor& x = OpBuilder::value_of(g, OpBuilder::inputs_of(g, id)[0]);
    Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (size_t i = 0; i < go.numel(); ++i)
      if (x.data[i] > 0.0) ga.data[i] += go.data[i];
  });
}

// ---- matrix products ----

inline Var matmul(Var a, Var b) {
  const Tensor& ta = a.value();
  const Tensor& tb = b.value();
  detail::require_matrix(ta, "matmul");
  detail::require_matrix(tb, "matmul");
  detail::require(ta.shape[1] == tb.shape[0],
                  "matmul: inner dimensions differ, " + shape_str(ta.shape) + " * " + shape_str(tb.shape));
  size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
  Tensor out({m, n});
  gemm(ta.data.data(), m, k, tb.data.data(), n, out.data.data());
  return OpBuilder::make(*a.graph, "matmul", std::move(out), {a, b}, [m, k, n](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    auto& ins = OpBuilder::inputs_of(g, id);
    const Tensor& va = OpBuilder::value_of(g, ins[0]);
    const Tensor& vb = OpBuilder::value_of(g, ins[1]);
    Tensor da({m, k}), db({k, n});
    gemm_nt(go.data.data(), m, n, vb.data.data(), k, da.data.data());  // dA = dC * B^T
    gemm_tn(va.data.data(), m, k, go.data.data(), n, db.data.data());  // dB = A^T * dC
    Tensor& ga = OpBuilder::grad_of(g, ins[0]);
    Tensor& gb = OpBuilder::grad_of(g, ins[1]);
    for (size_t i = 0; i < ga.numel(); ++i) ga.data[i] += da.data[i];
    for (size_t i = 0; i < gb.numel(); ++i) gb.data[i] += db.data[i];
  });
}

// a[MxK] * b[NxK]^T -> [MxN]; the layout used for weight matrices stored
// as [out x in].
inline Var matmul_nt(Var a, Var b) {
  const Tensor& ta = a.value();
  const Tensor& tb = b.value();
  detail::require_matrix(ta, "matmul_nt");
  detail::require_matrix(tb, "matmul_nt");
  detail::require(ta.shape[1] == tb.shape[1],
                  "matmul_nt: inner dimensions differ, " + shape_str(ta.shape) + " * " +
                      shape_str(tb.shape) + "^T");
  size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[0];
  Tensor out({m, n});
  gemm_nt(ta.data.data(), m, k, tb.data.data(), n, out.data.data());
  return OpBuilder::make(*a.graph, "matmul_nt", std::move(out), {a, b}, [m, k, n](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    auto& ins = OpBuilder::inputs_of(g, id);
    const Tensor& va = OpBuilder::value_of(g, ins[0]);
    const Tensor& vb = OpBuilder::value_of(g, ins[1]);
    Tensor da({m, k}), db({n, k});
    gemm(go.data.data(), m, n, vb.data.data(), k, da.data.data());     // dA = dC * B
    gemm_tn(go.data.data(), m, n, va.data.data(), k, db.data.data());  // dB = dC^T * A
    Tensor& ga = OpBuilder::grad_of(g, ins[0]);
    Tensor& gb = OpBuilder::grad_of(g, ins[1]);
    for (size_t i = 0; i < ga.numel(); ++i) ga.data[i] += da.data[i];
    for (size_t i = 0; i < gb.numel(); ++i) gb.data[i] += db.data[i];
  });
}

// m[RxC] + row vector v[C], broadcast over rows.
inline Var add_row(Var m, Var v) {
  const Tensor& tm = m.value();
  const Tensor& tv = v.value();
  detail::require_matrix(tm, "add_row");
  detail::require(tv.rank() == 1 && tv.shape[0] == tm.shape[1],
                  "add_row: vector length must equal matrix columns");
  Tensor out = tm;
  size_t r = tm.shape[0], c = tm.shape[1];
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < c; ++j) out.data[i * c + j] += tv.data[j];
  return OpBuilder::make(*m.graph, "add_row", std::move(out), {m, v}, [r, c](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    auto& ins = OpBuilder::inputs_of(g, id);
    Tensor& gm = OpBuilder::grad_of(g, ins[0]);
    Tensor& gv = OpBuilder::grad_of(g, ins[1]);
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < c; ++j) {
        gm.data[i * c + j] += go.data[i * c + j];
        gv.data[j] += go.data[i * c + j];
      }
  });
}

// ---- reductions ----

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return OpBuilder::make(*a.graph, "sum", Tensor::scalar(s), {a}, [](Graph& g, int id) {
    double go = OpBuilder::grad_of(g, id).data[0];
    Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (double& v : ga.data) v += go;
  });
}

inline Var mean(Var a) {
  const Tensor& ta = a.value();
  detail::require(ta.numel() > 0, "mean: empty tensor");
  double s = 0.0;
  for (double v : ta.data) s += v;
  double inv = 1.0 / static_cast<double>(ta.numel());
  return OpBuilder::make(*a.graph, "mean", Tensor::scalar(s * inv), {a}, [inv](Graph& g, int id) {
    double go = OpBuilder::grad_of(g, id).data[0];
    Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (double& v : ga.data) v += go * inv;
  });
}

// [RxC] -> [1xC] mean over rows.
inline Var row_mean(Var a) {
  const Tensor& ta = a.value();
  detail::require_matrix(ta, "row_mean");
  size_t r = ta.shape[0], c = ta.shape[1];
  Tensor out({1, c});
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < c; ++j) out.data[j] += ta.data[i * c + j];
  double inv = 1.0 / static_cast<double>(r);
  for (double& v : out.data) v *= inv;
  return OpBuilder::make(*a.graph, "row_mean", std::move(out), {a}, [r, c, inv](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < c; ++j) ga.data[i * c + j] += go.data[j] * inv;
  });
}

// [G*g x C] -> [G x C]: mean over each consecutive group of g rows.
inline Var group_row_mean(Var a, size_t group) {
  const Tensor& ta = a.value();
  detail::require_matrix(ta, "group_row_mean");
  detail::require(group >= 1 && ta.shape[0] % group == 0,
                  "group_row_mean: row count not divisible by group size");
  size_t groups = ta.shape[0] / group, c = ta.shape[1];
  Tensor out({groups, c});
  for (size_t gi = 0; gi < groups; ++gi)
    for (size_t k = 0; k < group; ++k)
      for (size_t j = 0; j < c; ++j) out.data[gi * c + j] += ta.data[(gi * group + k) * c + j];
  double inv = 1.0 / static_cast<double>(group);
  for (double& v : out.data) v *= inv;
  return OpBuilder::make(*a.graph, "group_row_mean", std::move(out), {a},
                         [groups, group, c, inv](Graph& g, int id) {
                           const Tensor& go = OpBuilder::grad_of(g, id);
                           Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
                           for (size_t gi = 0; gi < groups; ++gi)
                             for (size_t k = 0; k < group; ++k)
                               for (size_t j = 0; j < c; ++j)
                                 ga.data[(gi * group + k) * c + j] += go.data[gi * c + j] * inv;
                         });
}

// ---- shape surgery ----

inline Var slice_rows(Var a, size_t r0, size_t r1) {
  const Tensor& ta = a.value();
  detail::require_matrix(ta, "slice_rows");
  detail::require(r0 < r1 && r1 <= ta.shape[0], "slice_rows: range out of bounds");
  size_t c = ta.shape[1];
  Tensor out({r1 - r0, c});
  std::copy(ta.data.begin() + r0 * c, ta.data.begin() + r1 * c, out.data.begin());
  return OpBuilder::make(*a.graph, "slice_rows", std::move(out), {a}, [r0, c](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (size_t i = 0; i < go.numel(); ++i) ga.data[r0 * c + i] += go.data[i];
  });
}

inline Var slice_cols(Var a, size_t c0, size_t c1) {
  const Tensor& ta = a.value();
  detail::require_matrix(ta, "slice_cols");
  detail::require(c0 < c1 && c1 <= ta.shape[1], "slice_cols: range out of bounds");
  size_t r = ta.shape[0], c = ta.shape[1], w = c1 - c0;
  Tensor out({r, w});
  for (size_t i = 0; i < r; ++i)
    std::copy(ta.data.begin() + i * c + c0, ta.data.begin() + i * c + c1, out.data.begin() + i * w);
  return OpBuilder::make(*a.graph, "slice_cols", std::move(out), {a}, [r, c, c0, w](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < w; ++j) ga.data[i * c + c0 + j] += go.data[i * w + j];
  });
}

// 1-D range slice.
inline Var slice(Var a, size_t i0, size_t i1) {
  const Tensor& ta = a.value();
  detail::require(ta.rank() == 1, "slice: expected a vector");
  detail::require(i0 < i1 && i1 <= ta.shape[0], "slice: range out of bounds");
  Tensor out({i1 - i0});
  std::copy(ta.data.begin() + i0, ta.data.begin() + i1, out.data.begin());
  return OpBuilder::make(*a.graph, "slice", std::move(out), {a}, [i0](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (size_t i = 0; i < go.numel(); ++i) ga.data[i0 + i] += go.data[i];
  });
}

// Gather rows by index; duplicate indices accumulate on backward.
inline Var select_rows(Var a, std::vector<size_t> idx) {
  const Tensor& ta = a.value();
  detail::require_matrix(ta, "select_rows");
  detail::require(!idx.empty(), "select_rows: empty index list");
  size_t c = ta.shape[1];
  for (size_t i : idx) detail::require(i < ta.shape[0], "select_rows: index out of bounds");
  Tensor out({idx.size(), c});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(ta.data.begin() + idx[i] * c, ta.data.begin() + (idx[i] + 1) * c, out.data.begin() + i * c);
  return OpBuilder::make(*a.graph, "select_rows", std::move(out), {a},
                         [idx = std::move(idx), c](Graph& g, int id) {
                           const Tensor& go = OpBuilder::grad_of(g, id);
                           Tensor& ga = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
                           for (size_t i = 0; i < idx.size(); ++i)
                             for (size_t j = 0; j < c; ++j) ga.data[idx[i] * c + j] += go.data[i * c + j];
                         });
}

inline Var concat(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat: no inputs");
  size_t total = 0;
  for (Var p : parts) {
    detail::require(p.value().rank() <= 1 || p.value().numel() == 1, "concat: expected vectors or scalars");
    total += p.value().numel();
  }
  Tensor out({total});
  size_t off = 0;
  for (Var p : parts) {
    const Tensor& t = p.value();
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + off);
    off += t.numel();
  }
  return OpBuilder::make(*parts[0].graph, "concat", std::move(out), parts, [](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    size_t off = 0;
    for (int in : OpBuilder::inputs_of(g, id)) {
      Tensor& gi = OpBuilder::grad_of(g, in);
      for (size_t i = 0; i < gi.numel(); ++i) gi.data[i] += go.data[off + i];
      off += gi.numel();
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  size_t c = parts[0].value().cols(), rows = 0;
  for (Var p : parts) {
    detail::require_matrix(p.value(), "concat_rows");
    detail::require(p.value().shape[1] == c, "concat_rows: column counts differ");
    rows += p.value().shape[0];
  }
  Tensor out({rows, c});
  size_t off = 0;
  for (Var p : parts) {
    const Tensor& t = p.value();
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + off);
    off += t.numel();
  }
  return OpBuilder::make(*parts[0].graph, "concat_rows", std::move(out), parts, [](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    size_t off = 0;
    for (int in : OpBuilder::inputs_of(g, id)) {
      Tensor& gi = OpBuilder::grad_of(g, in);
      for (size_t i = 0; i < gi.numel(); ++i) gi.data[i] += go.data[off + i];
      off += gi.numel();
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  size_t r = parts[0].value().rows(), cols = 0;
  for (Var p : parts) {
    detail::require_matrix(p.value(), "concat_cols");
    detail::require(p.value().shape[0] == r, "concat_cols: row counts differ");
    cols += p.value().shape[1];
  }
  Tensor out({r, cols});
  size_t coff = 0;
  for (Var p : parts) {
    const Tensor& t = p.value();
    size_t w = t.shape[1];
    for (size_t i = 0; i < r; ++i)
      std::copy(t.data.begin() + i * w, t.data.begin() + (i + 1) * w, out.data.begin() + i * cols + coff);
    coff += w;
  }
  return OpBuilder::make(*parts[0].graph, "concat_cols", std::move(out), parts, [r, cols](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    size_t coff = 0;
    for (int in : OpBuilder::inputs_of(g, id)) {
      Tensor& gi = OpBuilder::grad_of(g, in);
      size_t w = gi.shape[1];
      for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < w; ++j) gi.data[i * w + j] += go.data[i * cols + coff + j];
      coff += w;
    }
  });
}

// ---- normalization & attention ----

inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor& tx = x.value();
  detail::require_matrix(tx, "layer_norm");
  size_t r = tx.shape[0], c = tx.shape[1];
  detail::require(gamma.value().rank() == 1 && gamma.value().shape[0] == c &&
                      beta.value().rank() == 1 && beta.value().shape[0] == c,
                  "layer_norm: gamma/beta must be vectors of the feature width");
  Tensor out({r, c});
  Tensor xhat({r, c});
  Tensor inv_sigma({r});
  const Tensor& tg = gamma.value();
  const Tensor& tb = beta.value();
  for (size_t i = 0; i < r; ++i) {
    const double* row = tx.data.data() + i * c;
    double mu = 0.0;
    for (size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma.data[i] = is;
    for (size_t j = 0; j < c; ++j) {
      double xh = (row[j] - mu) * is;
      xhat.data[i * c + j] = xh;
      out.data[i * c + j] = tg.data[j] * xh + tb.data[j];
    }
  }
  return OpBuilder::make(
      *x.graph, "layer_norm", std::move(out), {x, gamma, beta},
      [r, c, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Graph& g, int id) {
        const Tensor& go = OpBuilder::grad_of(g, id);
        auto& ins = OpBuilder::inputs_of(g, id);
        const Tensor& tg = OpBuilder::value_of(g, ins[1]);
        Tensor& gx = OpBuilder::grad_of(g, ins[0]);
        Tensor& gg = OpBuilder::grad_of(g, ins[1]);
        Tensor& gb = OpBuilder::grad_of(g, ins[2]);
        std::vector<double> dxh(c);
        for (size_t i = 0; i < r; ++i) {
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (size_t j = 0; j < c; ++j) {
            double u = go.data[i * c + j];
            double xh = xhat.data[i * c + j];
            gg.data[j] += u * xh;
            gb.data[j] += u;
            dxh[j] = u * tg.data[j];
            sum_dxh += dxh[j];
            sum_dxh_xh += dxh[j] * xh;
          }
          double is = inv_sigma.data[i];
          double invc = 1.0 / static_cast<double>(c);
          for (size_t j = 0; j < c; ++j) {
            double xh = xhat.data[i * c + j];
            gx.data[i * c + j] += is * (dxh[j] - invc * sum_dxh - xh * invc * sum_dxh_xh);
          }
        }
      });
}

inline Var softmax_rows(Var x) {
  const Tensor& tx = x.value();
  detail::require_matrix(tx, "softmax_rows");
  size_t r = tx.shape[0], c = tx.shape[1];
  Tensor out({r, c});
  for (size_t i = 0; i < r; ++i) {
    const double* row = tx.data.data() + i * c;
    double m = row[0];
    for (size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (size_t j = 0; j < c; ++j) {
      double e = std::exp(row[j] - m);
      out.data[i * c + j] = e;
      s += e;
    }
    double inv = 1.0 / s;
    for (size_t j = 0; j < c; ++j) out.data[i * c + j] *= inv;
  }
  return OpBuilder::make(*x.graph, "softmax_rows", std::move(out), {x}, [r, c](Graph& g, int id) {
    const Tensor& go = OpBuilder::grad_of(g, id);
    const Tensor& y = OpBuilder::value_of(g, id);
    Tensor& gx = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (size_t j = 0; j < c; ++j) dot += go.data[i * c + j] * y.data[i * c + j];
      for (size_t j = 0; j < c; ++j)
        gx.data[i * c + j] += y.data[i * c + j] * (go.data[i * c + j] - dot);
    }
  });
}

// ---- similarity & log-sum-exp ----

// Pairwise cosine similarity between rows of a[PxD] and b[QxD].
// Denominator is max(|a_p| * |b_q|, eps), so zero rows give ~0 scores
// instead of NaN; at clamped pairs the gradient treats eps as constant.
inline Var cosine_matrix(Var a, Var b, double eps = 1e-8) {
  const Tensor& ta = a.value();
  const Tensor& tb = b.value();
  detail::require_matrix(ta, "cosine_matrix");
  detail::require_matrix(tb, "cosine_matrix");
  detail::require(ta.shape[1] == tb.shape[1], "cosine_matrix: feature dimensions differ, " +
                                                  shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  detail::require(eps > 0.0, "cosine_matrix: eps must be positive");
  size_t p = ta.shape[0], q = tb.shape[0], d = ta.shape[1];
  Tensor na({p}), nb({q});
  for (size_t i = 0; i < p; ++i) {
    double s = 0.0;
    for (size_t k = 0; k < d; ++k) s += ta.at(i, k) * ta.at(i, k);
    na.data[i] = std::sqrt(s);
  }
  for (size_t j = 0; j < q; ++j) {
    double s = 0.0;
    for (size_t k = 0; k < d; ++k) s += tb.at(j, k) * tb.at(j, k);
    nb.data[j] = std::sqrt(s);
  }
  Tensor out({p, q});
  gemm_nt(ta.data.data(), p, d, tb.data.data(), q, out.data.data());
  for (size_t i = 0; i < p; ++i)
    for (size_t j = 0; j < q; ++j) out.at(i, j) /= std::max(na.data[i] * nb.data[j], eps);
  return OpBuilder::make(
      *a.graph, "cosine_matrix", std::move(out), {a, b},
      [p, q, d, eps, na = std::move(na), nb = std::move(nb)](Graph& g, int id) {
        const Tensor& go = OpBuilder::grad_of(g, id);
        const Tensor& s = OpBuilder::value_of(g, id);
        auto& ins = OpBuilder::inputs_of(g, id);
        const Tensor& va = OpBuilder::value_of(g, ins[0]);
        const Tensor& vb = OpBuilder::value_of(g, ins[1]);
        Tensor& ga = OpBuilder::grad_of(g, ins[0]);
        Tensor& gb = OpBuilder::grad_of(g, ins[1]);
        for (size_t i = 0; i < p; ++i) {
          for (size_t j = 0; j < q; ++j) {
            double u = go.at(i, j);
            if (u == 0.0) continue;
            double prod = na.data[i] * nb.data[j];
            if (prod > eps) {
              double inv = 1.0 / prod;
              double sij = s.at(i, j);
              double inv_na2 = 1.0 / (na.data[i] * na.data[i]);
              double inv_nb2 = 1.0 / (nb.data[j] * nb.data[j]);
              for (size_t k = 0; k < d; ++k) {
                ga.at(i, k) += u * (vb.at(j, k) * inv - sij * va.at(i, k) * inv_na2);
                gb.at(j, k) += u * (va.at(i, k) * inv - sij * vb.at(j, k) * inv_nb2);
              }
            } else {
              double inv = 1.0 / eps;
              for (size_t k = 0; k < d; ++k) {
                ga.at(i, k) += u * vb.at(j, k) * inv;
                gb.at(j, k) += u * va.at(i, k) * inv;
              }
            }
          }
        }
      });
}

// log(sum(exp(x))) over all elements with max-subtraction stabilization.
inline Var log_sum_exp(Var x) {
  const Tensor& tx = x.value();
  detail::require(tx.numel() >= 1, "log_sum_exp: empty input");
  double m = tx.data[0];
  for (double v : tx.data) m = std::max(m, v);
  double s = 0.0;
  for (double v : tx.data) s += std::exp(v - m);
  double out = m + std::log(s);
  return OpBuilder::make(*x.graph, "log_sum_exp", Tensor::scalar(out), {x}, [m, s](Graph& g, int id) {
    double go = OpBuilder::grad_of(g, id).data[0];
    const Tensor& vx = OpBuilder::value_of(g, OpBuilder::inputs_of(g, id)[0]);
    Tensor& gx = OpBuilder::grad_of(g, OpBuilder::inputs_of(g, id)[0]);
    for (size_t i = 0; i < vx.numel(); ++i) gx.data[i] += go * std::exp(vx.data[i] - m) / s;
  });
}

// Depthwise 1-D convolution over time: x[TxC], w[KxC] (K odd), bias[C],
// zero padding keeps the output length T.
inline Var depthwise_conv1d(Var x, Var w, Var b) {
  const Tensor& tx = x.value();
  const Tensor& tw = w.value();
  const Tensor& tb = b.value();
  detail::require_matrix(tx, "depthwise_conv1d");
  detail::require_matrix(tw, "depthwise_conv1d");
  detail::require(tw.shape[0] % 2 == 1, "depthwise_conv1d: kernel width must be odd");
  detail::require(tw.shape[1] == tx.shape[1], "depthwise_conv1d: channel counts differ");
  detail::require(tb.rank() == 1 && tb.shape[0] == tx.shape[1],
                  "depthwise_conv1d: bias length must equal channels");
  size_t t = tx.shape[0], c = tx.shape[1], k = tw.shape[0];
  size_t pad = (k - 1) / 2;
  Tensor out({t, c});
  for (size_t ti = 0; ti < t; ++ti)
    for (size_t j = 0; j < c; ++j) {
      double acc = tb.data[j];
      for (size_t ki = 0; ki < k; ++ki) {
        ptrdiff_t src = static_cast<ptrdiff_t>(ti + ki) - static_cast<ptrdiff_t>(pad);
        if (src >= 0 && src < static_cast<ptrdiff_t>(t)) acc += tw.at(ki, j) * tx.at(static_cast<size_t>(src), j);
      }
      out.at(ti, j) = acc;
    }
  return OpBuilder::make(*x.graph, "depthwise_conv1d", std::move(out), {x, w, b},
                         [t, c, k, pad](Graph& g, int id) {
                           const Tensor& go = OpBuilder::grad_of(g, id);
                           auto& ins = OpBuilder::inputs_of(g, id);
                           const Tensor& vx = OpBuilder::value_of(g, ins[0]);
                           const Tensor& vw = OpBuilder::value_of(g, ins[1]);
                           Tensor& gx = OpBuilder::grad_of(g, ins[0]);
                           Tensor& gw = OpBuilder::grad_of(g, ins[1]);
                           Tensor& gb = OpBuilder::grad_of(g, ins[2]);
                           for (size_t ti = 0; ti < t; ++ti)
                             for (size_t j = 0; j < c; ++j) {
                               double u = go.at(ti, j);
                               gb.data[j] += u;
                               for (size_t ki = 0; ki < k; ++ki) {
                                 ptrdiff_t src = static_cast<ptrdiff_t>(ti + ki) - static_cast<ptrdiff_t>(pad);
                                 if (src >= 0 && src < static_cast<ptrdiff_t>(t)) {
                                   gw.at(ki, j) += u * vx.at(static_cast<size_t>(src), j);
                                   gx.at(static_cast<size_t>(src), j) += u * vw.at(ki, j);
                                 }
                               }
                             }
                         });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }

// ---- gradient checking ----

using GraphFn = std::function<Var(Graph&, const std::vector<Var>&)>;

inline double eval_fn(const GraphFn& f, const std::vector<Tensor>& params) {
  Graph g;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(g.param(p));
  Var root = f(g, leaves);
  if (root.value().numel() != 1) throw Error("ndmath", "finite_diff_check: f must return a scalar");
  return root.value().data[0];
}

// Worst relative error between reverse-mode gradients and central
// differences, over every coordinate of every parameter tensor.
inline double finite_diff_check(const GraphFn& f, const std::vector<Tensor>& params, double h = 1e-5) {
  if (h <= 0.0) throw Error("ndmath", "finite_diff_check: h must be positive");
  Graph g;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(g.param(p));
  Var root = f(g, leaves);
  if (root.value().numel() != 1) throw Error("ndmath", "finite_diff_check: f must return a scalar");
  g.backward(root);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Var v : leaves) analytic.push_back(v.grad());

  double worst = 0.0;
  std::vector<Tensor> probe = params;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    for (size_t i = 0; i < params[pi].numel(); ++i) {
      double orig = probe[pi].data[i];
      probe[pi].data[i] = orig + h;
      double fp = eval_fn(f, probe);
      probe[pi].data[i] = orig - h;
      double fm = eval_fn(f, probe);
      probe[pi].data[i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[pi].data[i];
      double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace kws::nd
