#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>

#include "dacal/tensor.hpp"

// Reverse-mode autodiff on dense tensors. Every vjp is itself built from
// primitive ops, so gradients stay differentiable and the hinge gradient
// penalty can backprop through a gradient norm.

namespace dacal {

class Node;
using Var = std::shared_ptr<Node>;
using IndexTable = std::shared_ptr<const std::vector<int64_t>>;

class Node {
 public:
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  // Maps the upstream gradient to per-input gradients. Null for leaves.
  std::function<std::vector<Var>(const Var&)> vjp;
  // Filled in by backward() on leaves; training reads it, tape ops never do.
  Var grad;

  explicit Node(Tensor v) : value(std::move(v)) {}
};

inline Var constant(Tensor t) { return std::make_shared<Node>(std::move(t)); }

inline Var leaf(Tensor t) {
  Var v = std::make_shared<Node>(std::move(t));
  v->requires_grad = true;
  return v;
}

inline Var make_op(Tensor out, std::vector<Var> inputs,
                   std::function<std::vector<Var>(const Var&)> vjp) {
  Var v = std::make_shared<Node>(std::move(out));
  for (const Var& in : inputs)
    if (in->requires_grad) v->requires_grad = true;
  if (v->requires_grad) {
    v->inputs = std::move(inputs);
    v->vjp = std::move(vjp);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
}

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divide(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_op(std::move(out), {a, b},
                 [](const Var& g) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_op(std::move(out), {a, b},
                 [](const Var& g) { return std::vector<Var>{g, scale(g, -1.0)}; });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{mul(g, b), mul(g, a)};
  });
}

inline Var divide(const Var& a, const Var& b) {
  check_same_shape(a, b, "divide");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](const Var& g) {
    Var ga = divide(g, b);
    Var gb = scale(divide(mul(g, a), mul(b, b)), -1.0);
    return std::vector<Var>{ga, gb};
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return make_op(std::move(out), {a},
                 [s](const Var& g) { return std::vector<Var>{scale(g, s)}; });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
  return make_op(std::move(out), {a},
                 [](const Var& g) { return std::vector<Var>{g}; });
}

inline Var exp_v(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  return make_op(std::move(out), {a}, [a](const Var& g) {
    return std::vector<Var>{mul(g, exp_v(a))};
  });
}

inline Var sqrt_v(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
  return make_op(std::move(out), {a}, [a](const Var& g) {
    return std::vector<Var>{scale(divide(g, sqrt_v(a)), 0.5)};
  });
}

// Masks are piecewise constant, so treating them as constants in the vjp
// gives the correct (a.e.) second derivative as well.
inline Var relu(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return make_op(std::move(out), {a}, [a](const Var& g) {
    Tensor mask = a->value;
    for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = mask[i] > 0.0 ? 1.0 : 0.0;
    return std::vector<Var>{mul(g, constant(std::move(mask)))};
  });
}

inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;

inline Var selu(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) {
    double x = out[i];
    out[i] = x > 0.0 ? kSeluLambda * x : kSeluLambda * kSeluAlpha * (std::exp(x) - 1.0);
  }
  return make_op(std::move(out), {a}, [a](const Var& g) {
    Tensor pos = a->value, neg = a->value;
    for (int64_t i = 0; i < pos.numel(); ++i) {
      bool p = pos[i] > 0.0;
      pos[i] = p ? 1.0 : 0.0;
      neg[i] = p ? 0.0 : 1.0;
    }
    Var negmask = constant(std::move(neg));
    // lambda on the positive side, lambda*alpha*exp(x) on the negative side;
    // exp is evaluated on x*negmask so the masked side cannot overflow.
    Var factor = add(scale(constant(std::move(pos)), kSeluLambda),
                     scale(mul(exp_v(mul(a, negmask)), negmask), kSeluLambda * kSeluAlpha));
    return std::vector<Var>{mul(g, factor)};
  });
}

inline Var clamp01(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], 0.0, 1.0);
  return make_op(std::move(out), {a}, [a](const Var& g) {
    Tensor mask = a->value;
    for (int64_t i = 0; i < mask.numel(); ++i)
      mask[i] = (mask[i] > 0.0 && mask[i] < 1.0) ? 1.0 : 0.0;
    return std::vector<Var>{mul(g, constant(std::move(mask)))};
  });
}

// ---------------------------------------------------------------------------
// Shape primitives
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, Shape s) {
  Tensor out = a->value.reshaped(std::move(s));
  Shape back = a->value.shape();
  return make_op(std::move(out), {a}, [back](const Var& g) {
    return std::vector<Var>{reshape(g, back)};
  });
}

Var scatter_add(const Var& a, const IndexTable& table, Shape out_shape);

/// y[i] = table[i] < 0 ? 0 : x[table[i]]. Covers im2col, padding, upsampling,
/// broadcasting and permutation; its transpose is scatter_add.
inline Var gather(const Var& a, const IndexTable& table, Shape out_shape) {
  Tensor out(out_shape);
  const auto& t = *table;
  if (static_cast<int64_t>(t.size()) != out.numel())
    throw std::invalid_argument("gather: table size does not match output shape");
  const double* src = a->value.data();
  for (size_t i = 0; i < t.size(); ++i) out[i] = t[i] < 0 ? 0.0 : src[t[i]];
  Shape in_shape = a->value.shape();
  return make_op(std::move(out), {a}, [table, in_shape](const Var& g) {
    return std::vector<Var>{scatter_add(g, table, in_shape)};
  });
}

inline Var scatter_add(const Var& a, const IndexTable& table, Shape out_shape) {
  Tensor out(out_shape);
  const auto& t = *table;
  if (static_cast<int64_t>(t.size()) != a->value.numel())
    throw std::invalid_argument("scatter_add: table size does not match input shape");
  for (size_t i = 0; i < t.size(); ++i)
    if (t[i] >= 0) out[t[i]] += a->value[i];
  Shape in_shape = a->value.shape();
  return make_op(std::move(out), {a}, [table, in_shape](const Var& g) {
    return std::vector<Var>{gather(g, table, in_shape)};
  });
}

Var slice_last(const Var& a, int64_t start, int64_t count);

/// Concatenate along the last axis.
inline Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
  Shape s = parts[0]->value.shape();
  int64_t last = 0;
  for (const Var& p : parts) {
    const Shape& ps = p->value.shape();
    if (ps.size() != s.size())
      throw std::invalid_argument("concat_last: rank mismatch");
    for (size_t i = 0; i + 1 < s.size(); ++i)
      if (ps[i] != s[i]) throw std::invalid_argument("concat_last: leading shape mismatch");
    last += ps.back();
  }
  Shape out_shape = s;
  out_shape.back() = last;
  Tensor out(out_shape);
  int64_t rows = out.numel() / last;
  int64_t off = 0;
  std::vector<int64_t> widths;
  for (const Var& p : parts) {
    int64_t w = p->value.shape().back();
    widths.push_back(w);
    const double* src = p->value.data();
    for (int64_t r = 0; r < rows; ++r)
      std::copy(src + r * w, src + (r + 1) * w, out.data() + r * last + off);
    off += w;
  }
  return make_op(std::move(out), parts, [widths](const Var& g) {
    std::vector<Var> grads;
    int64_t start = 0;
    for (int64_t w : widths) {
      grads.push_back(slice_last(g, start, w));
      start += w;
    }
    return grads;
  });
}

inline Var slice_last(const Var& a, int64_t start, int64_t count) {
  const Shape& s = a->value.shape();
  int64_t last = s.back();
  if (start < 0 || count < 1 || start + count > last)
    throw std::invalid_argument("slice_last: range out of bounds");
  Shape out_shape = s;
  out_shape.back() = count;
  Tensor out(out_shape);
  int64_t rows = a->value.numel() / last;
  const double* src = a->value.data();
  for (int64_t r = 0; r < rows; ++r)
    std::copy(src + r * last + start, src + r * last + start + count, out.data() + r * count);
  return make_op(std::move(out), {a}, [start, count, s, last](const Var& g) {
    // Transpose of slicing: scatter the gradient back into a zero tensor.
    auto table = std::make_shared<std::vector<int64_t>>(shape_numel(s), -1);
    int64_t rows = shape_numel(s) / last;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < count; ++c)
        (*table)[r * last + start + c] = r * count + c;
    return std::vector<Var>{gather(g, table, s)};
  });
}

// ---------------------------------------------------------------------------
// Matrix multiply (Eigen GEMM)
// ---------------------------------------------------------------------------

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRowMat = Eigen::Map<EigenRowMat>;
using ConstMapRowMat = Eigen::Map<const EigenRowMat>;

Var matmul(const Var& a, const Var& b);
Var transpose2(const Var& a);

inline Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw std::invalid_argument("matmul: bad shapes " + shape_str(sa) + " x " + shape_str(sb));
  Tensor out(Shape{sa[0], sb[1]});
  ConstMapRowMat A(a->value.data(), sa[0], sa[1]);
  ConstMapRowMat B(b->value.data(), sb[0], sb[1]);
  MapRowMat C(out.data(), sa[0], sb[1]);
  C.noalias() = A * B;
  return make_op(std::move(out), {a, b}, [a, b](const Var& g) {
    Var ga = matmul(g, transpose2(b));
    Var gb = matmul(transpose2(a), g);
    return std::vector<Var>{ga, gb};
  });
}

inline Var transpose2(const Var& a) {
  const Shape& s = a->value.shape();
  if (s.size() != 2) throw std::invalid_argument("transpose2: rank != 2");
  Tensor out(Shape{s[1], s[0]});
  ConstMapRowMat A(a->value.data(), s[0], s[1]);
  MapRowMat T(out.data(), s[1], s[0]);
  T = A.transpose();
  return make_op(std::move(out), {a},
                 [](const Var& g) { return std::vector<Var>{transpose2(g)}; });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts (built on matmul so they stay differentiable)
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  int64_t n = a->value.numel();
  Var flat = reshape(a, Shape{1, n});
  return reshape(matmul(flat, constant(Tensor(Shape{n, 1}, 1.0))), Shape{1});
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / a->value.numel()); }

/// Row sums of an [m, n] matrix -> [m, 1].
inline Var row_sum(const Var& a) {
  const Shape& s = a->value.shape();
  if (s.size() != 2) throw std::invalid_argument("row_sum: rank != 2");
  return matmul(a, constant(Tensor(Shape{s[1], 1}, 1.0)));
}

/// Row sums with strict left-to-right accumulation, bit-compatible with a
/// plain scalar loop (GEMM reorders the summation).
inline Var row_sum_seq(const Var& a) {
  const Shape& s = a->value.shape();
  if (s.size() != 2) throw std::invalid_argument("row_sum_seq: rank != 2");
  Tensor out(Shape{s[0], 1});
  for (int64_t r = 0; r < s[0]; ++r) {
    double acc = 0.0;
    for (int64_t c = 0; c < s[1]; ++c) acc += a->value.at2(r, c);
    out[r] = acc;
  }
  int64_t cols = s[1];
  return make_op(std::move(out), {a}, [cols](const Var& g) {
    return std::vector<Var>{matmul(g, constant(Tensor(Shape{1, cols}, 1.0)))};
  });
}

/// Column sums of an [m, n] matrix -> [1, n].
inline Var col_sum(const Var& a) {
  const Shape& s = a->value.shape();
  if (s.size() != 2) throw std::invalid_argument("col_sum: rank != 2");
  return matmul(constant(Tensor(Shape{1, s[0]}, 1.0)), a);
}

inline Var col_mean(const Var& a) { return scale(col_sum(a), 1.0 / a->value.dim(0)); }

/// Repeat a [1, n] row m times -> [m, n].
inline Var broadcast_rows(const Var& a, int64_t m) {
  const Shape& s = a->value.shape();
  if (s.size() != 2 || s[0] != 1) throw std::invalid_argument("broadcast_rows: need [1, n]");
  return matmul(constant(Tensor(Shape{m, 1}, 1.0)), a);
}

/// Broadcast a scalar [1] to an arbitrary shape.
inline Var broadcast_scalar(const Var& a, const Shape& s) {
  int64_t n = shape_numel(s);
  return reshape(matmul(constant(Tensor(Shape{n, 1}, 1.0)), reshape(a, Shape{1, 1})), s);
}

// ---------------------------------------------------------------------------
// backward / grad
// ---------------------------------------------------------------------------

inline std::vector<Node*> topo_order(const Var& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen{root.get()};
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (!seen.count(child) && child->requires_grad) {
        seen.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // children before parents
}

/// Gradients of a scalar output w.r.t. `wrt`. Returned vars carry the graph,
/// so they can be differentiated again (create-graph semantics).
inline std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt) {
  if (output->value.numel() != 1)
    throw std::invalid_argument("grad: output must be a scalar");
  std::unordered_map<Node*, Var> gm;
  gm[output.get()] = constant(Tensor(output->value.shape(), 1.0));
  std::vector<Node*> order = topo_order(output);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = gm.find(node);
    if (found == gm.end() || !node->vjp) continue;
    std::vector<Var> input_grads = node->vjp(found->second);
    for (size_t i = 0; i < node->inputs.size(); ++i) {
      const Var& in = node->inputs[i];
      if (!in->requires_grad) continue;
      auto cur = gm.find(in.get());
      if (cur == gm.end())
        gm[in.get()] = input_grads[i];
      else
        cur->second = add(cur->second, input_grads[i]);
    }
  }
  std::vector<Var> result;
  for (const Var& w : wrt) {
    auto found = gm.find(w.get());
    result.push_back(found != gm.end() ? found->second
                                       : constant(Tensor(w->value.shape(), 0.0)));
  }
  return result;
}

/// Accumulates gradients of a scalar loss into param->grad.
inline void backward(const Var& loss, const std::vector<Var>& params) {
  std::vector<Var> gs = grad(loss, params);
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->grad)
      params[i]->grad = gs[i];
    else
      params[i]->grad = add(params[i]->grad, gs[i]);
  }
}

inline void zero_grad(const std::vector<Var>& params) {
  for (const Var& p : params) p->grad.reset();
}

}  // namespace dacal
