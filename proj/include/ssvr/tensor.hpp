#ifndef SSVR_TENSOR_HPP
#define SSVR_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ssvr/errors.hpp"

namespace ssvr {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense n-dimensional double array. Values are immutable once the tensor is
// placed in a graph; grad is filled by Graph::backward for requires_grad
// nodes.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v, bool rg = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
    if (values.size() != ssvr::numel(shape))
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
  }
  static Tensor zeros(Shape s, bool rg = false) {
    std::vector<double> v(ssvr::numel(s), 0.0);
    return Tensor(std::move(s), std::move(v), rg);
  }
  static Tensor full(Shape s, double fill, bool rg = false) {
    std::vector<double> v(ssvr::numel(s), fill);
    return Tensor(std::move(s), std::move(v), rg);
  }
  static Tensor scalar(double v, bool rg = false) {
    return Tensor({1}, {v}, rg);
  }
  std::size_t numel() const { return values.size(); }
};

enum class OpKind {
  Leaf,
  Add,
  Mul,
  Matmul,
  Conv2d,
  Conv2dTranspose,
  Relu,
  Sigmoid,
  AvgPool2d,
  Reshape,
  Sum,
  Mean,
  Exp,
  Log,
  Square,
  Concat,
  Affine,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Matmul: return "matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Conv2dTranspose: return "conv2d_transpose";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::AvgPool2d: return "avg_pool2d";
    case OpKind::Reshape: return "reshape";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Square: return "square";
    case OpKind::Concat: return "concat";
    case OpKind::Affine: return "affine";
  }
  return "?";
}

struct OpAttrs {
  int stride = 1;
  int pad = 0;
  int kernel = 0;   // avg_pool2d window
  int axis = 0;     // concat
  Shape target;     // reshape
};

namespace detail {

// --- shared convolution kernels -------------------------------------------
//
// Convolution is cross-correlation with explicit zero padding. All three
// kernels below share the index convention
//   y[co, oi, oj] = sum_{ci,a,b} w[co, ci, a, b] * xpad[ci, oi*s + a, oj*s + b]
// so conv2d forward, its input/weight gradients, and conv2d_transpose are
// exact adjoints of each other by construction.

inline std::vector<double> pad2d(const double* x, std::size_t c,
                                 std::size_t h, std::size_t w, int p) {
  const std::size_t hp = h + 2 * p, wp = w + 2 * p;
  std::vector<double> out(c * hp * wp, 0.0);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(x + (ci * h + i) * w, w,
                  out.data() + (ci * hp + i + p) * wp + p);
  return out;
}

inline void unpad2d_add(const std::vector<double>& xp, std::size_t c,
                        std::size_t h, std::size_t w, int p, double* out) {
  const std::size_t hp = h + 2 * p, wp = w + 2 * p;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < h; ++i) {
      const double* src = xp.data() + (ci * hp + i + p) * wp + p;
      double* dst = out + (ci * h + i) * w;
      for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
    }
}

// y[Co,Ho,Wo] += corr(x[Ci,H,W], w[Co,Ci,kh,kw]); y must be zeroed by caller.
inline void corr2d(const double* x, std::size_t ci_n, std::size_t h,
                   std::size_t w, const double* wt, std::size_t co_n,
                   std::size_t kh, std::size_t kw, int s, int p, double* y,
                   std::size_t ho, std::size_t wo) {
  const std::vector<double> xp = pad2d(x, ci_n, h, w, p);
  const std::size_t hp = h + 2 * p, wp = w + 2 * p;
  for (std::size_t co = 0; co < co_n; ++co) {
    double* ybase = y + co * ho * wo;
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      const double* xbase = xp.data() + ci * hp * wp;
      for (std::size_t a = 0; a < kh; ++a)
        for (std::size_t b = 0; b < kw; ++b) {
          const double wv = wt[((co * ci_n + ci) * kh + a) * kw + b];
          if (wv == 0.0) continue;
          for (std::size_t oi = 0; oi < ho; ++oi) {
            const double* xrow = xbase + (oi * s + a) * wp + b;
            double* yrow = ybase + oi * wo;
            if (s == 1) {
              for (std::size_t oj = 0; oj < wo; ++oj) yrow[oj] += wv * xrow[oj];
            } else {
              for (std::size_t oj = 0; oj < wo; ++oj)
                yrow[oj] += wv * xrow[oj * s];
            }
          }
        }
    }
  }
}

// Adjoint of corr2d: x[Ci,H,W] += scatter(y[Co,Ho,Wo], w[Co,Ci,kh,kw]).
// x must be zeroed by caller.
inline void scatter2d(const double* y, std::size_t co_n, std::size_t ho,
                      std::size_t wo, const double* wt, std::size_t ci_n,
                      std::size_t kh, std::size_t kw, int s, int p, double* x,
                      std::size_t h, std::size_t w) {
  const std::size_t hp = h + 2 * p, wp = w + 2 * p;
  std::vector<double> xp(ci_n * hp * wp, 0.0);
  for (std::size_t co = 0; co < co_n; ++co) {
    const double* ybase = y + co * ho * wo;
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      double* xbase = xp.data() + ci * hp * wp;
      for (std::size_t a = 0; a < kh; ++a)
        for (std::size_t b = 0; b < kw; ++b) {
          const double wv = wt[((co * ci_n + ci) * kh + a) * kw + b];
          if (wv == 0.0) continue;
          for (std::size_t oi = 0; oi < ho; ++oi) {
            const double* yrow = ybase + oi * wo;
            double* xrow = xbase + (oi * s + a) * wp + b;
            if (s == 1) {
              for (std::size_t oj = 0; oj < wo; ++oj) xrow[oj] += wv * yrow[oj];
            } else {
              for (std::size_t oj = 0; oj < wo; ++oj)
                xrow[oj * s] += wv * yrow[oj];
            }
          }
        }
    }
  }
  unpad2d_add(xp, ci_n, h, w, p, x);
}

// dw[Co,Ci,kh,kw] += sum over output positions of g * xpad.
inline void corr2d_wgrad(const double* x, std::size_t ci_n, std::size_t h,
                         std::size_t w, const double* g, std::size_t co_n,
                         std::size_t ho, std::size_t wo, std::size_t kh,
                         std::size_t kw, int s, int p, double* dw) {
  const std::vector<double> xp = pad2d(x, ci_n, h, w, p);
  const std::size_t hp = h + 2 * p, wp = w + 2 * p;
  for (std::size_t co = 0; co < co_n; ++co) {
    const double* gbase = g + co * ho * wo;
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      const double* xbase = xp.data() + ci * hp * wp;
      for (std::size_t a = 0; a < kh; ++a)
        for (std::size_t b = 0; b < kw; ++b) {
          double acc = 0.0;
          for (std::size_t oi = 0; oi < ho; ++oi) {
            const double* grow = gbase + oi * wo;
            const double* xrow = xbase + (oi * s + a) * wp + b;
            if (s == 1) {
              for (std::size_t oj = 0; oj < wo; ++oj) acc += grow[oj] * xrow[oj];
            } else {
              for (std::size_t oj = 0; oj < wo; ++oj)
                acc += grow[oj] * xrow[oj * s];
            }
          }
          dw[((co * ci_n + ci) * kh + a) * kw + b] += acc;
        }
    }
  }
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// Dynamic computation graph (tape). Nodes are appended in topological order
// by construction; one backward pass consumes the graph.
class Graph {
 public:
  NodeId leaf(Tensor t) { return push(OpKind::Leaf, {}, {}, std::move(t)); }

  NodeId constant(Shape s, double fill) {
    return leaf(Tensor::full(std::move(s), fill, false));
  }

  NodeId add(NodeId a, NodeId b) {
    const Tensor &ta = tensor(a), &tb = tensor(b);
    if (ta.shape != tb.shape)
      throw ShapeError(std::string("add: shape mismatch ") +
                       shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out(ta.shape, ta.values);
    for (std::size_t i = 0; i < out.values.size(); ++i)
      out.values[i] += tb.values[i];
    return push(OpKind::Add, {}, {a, b}, std::move(out));
  }

  NodeId mul(NodeId a, NodeId b) {
    const Tensor &ta = tensor(a), &tb = tensor(b);
    if (ta.shape != tb.shape)
      throw ShapeError(std::string("mul: shape mismatch ") +
                       shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out(ta.shape, ta.values);
    for (std::size_t i = 0; i < out.values.size(); ++i)
      out.values[i] *= tb.values[i];
    return push(OpKind::Mul, {}, {a, b}, std::move(out));
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor &ta = tensor(a), &tb = tensor(b);
    if (ta.shape.size() != 2 || tb.shape.size() != 2)
      throw ShapeError(std::string("matmul: expects rank-2 inputs, got ") +
                       shape_str(ta.shape) + " and " + shape_str(tb.shape));
    const std::size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
    if (tb.shape[0] != k)
      throw ShapeError("matmul: inner dimensions differ, " +
                       shape_str(ta.shape) + " x " + shape_str(tb.shape));
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        const double av = ta.values[i * k + l];
        if (av == 0.0) continue;
        const double* brow = tb.values.data() + l * n;
        double* orow = out.values.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    return push(OpKind::Matmul, {}, {a, b}, std::move(out));
  }

  // x: [Cin,H,W], w: [Cout,Cin,kh,kw]. Cross-correlation, zero padding.
  NodeId conv2d(NodeId x, NodeId w, int stride = 1, int pad = 0) {
    const Tensor &tx = tensor(x), &tw = tensor(w);
    check_conv_args("conv2d", tx, tw, stride, pad);
    const std::size_t ci = tx.shape[0], h = tx.shape[1], wd = tx.shape[2];
    const std::size_t co = tw.shape[0], kh = tw.shape[2], kw = tw.shape[3];
    if (tw.shape[1] != ci)
      throw ShapeError("conv2d: input channels " + std::to_string(ci) +
                       " != weight channels " + std::to_string(tw.shape[1]) +
                       " (x " + shape_str(tx.shape) + ", w " +
                       shape_str(tw.shape) + ")");
    if (h + 2 * pad < kh || wd + 2 * pad < kw)
      throw ShapeError("conv2d: kernel " + shape_str({kh, kw}) +
                       " larger than padded input " + shape_str(tx.shape));
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
    Tensor out = Tensor::zeros({co, ho, wo});
    detail::corr2d(tx.values.data(), ci, h, wd, tw.values.data(), co, kh, kw,
                   stride, pad, out.values.data(), ho, wo);
    OpAttrs at;
    at.stride = stride;
    at.pad = pad;
    return push(OpKind::Conv2d, at, {x, w}, std::move(out));
  }

  // x: [C1,H,W], w: [C1,C2,kh,kw] -> [C2,(H-1)*s+kh-2p,...]. Adjoint of
  // conv2d with the same weight tensor.
  NodeId conv2d_transpose(NodeId x, NodeId w, int stride = 1, int pad = 0) {
    const Tensor &tx = tensor(x), &tw = tensor(w);
    check_conv_args("conv2d_transpose", tx, tw, stride, pad);
    const std::size_t c1 = tx.shape[0], h = tx.shape[1], wd = tx.shape[2];
    const std::size_t c2 = tw.shape[1], kh = tw.shape[2], kw = tw.shape[3];
    if (tw.shape[0] != c1)
      throw ShapeError("conv2d_transpose: input channels " +
                       std::to_string(c1) + " != weight channels " +
                       std::to_string(tw.shape[0]) + " (x " +
                       shape_str(tx.shape) + ", w " + shape_str(tw.shape) +
                       ")");
    const std::ptrdiff_t ho_s =
        static_cast<std::ptrdiff_t>((h - 1) * stride + kh) - 2 * pad;
    const std::ptrdiff_t wo_s =
        static_cast<std::ptrdiff_t>((wd - 1) * stride + kw) - 2 * pad;
    if (ho_s <= 0 || wo_s <= 0)
      throw ShapeError("conv2d_transpose: empty output for x " +
                       shape_str(tx.shape) + ", w " + shape_str(tw.shape));
    const std::size_t ho = static_cast<std::size_t>(ho_s);
    const std::size_t wo = static_cast<std::size_t>(wo_s);
    Tensor out = Tensor::zeros({c2, ho, wo});
    detail::scatter2d(tx.values.data(), c1, h, wd, tw.values.data(), c2, kh,
                      kw, stride, pad, out.values.data(), ho, wo);
    OpAttrs at;
    at.stride = stride;
    at.pad = pad;
    return push(OpKind::Conv2dTranspose, at, {x, w}, std::move(out));
  }

  NodeId relu(NodeId a) {
    Tensor out(tensor(a).shape, tensor(a).values);
    for (auto& v : out.values) v = v > 0.0 ? v : 0.0;
    return push(OpKind::Relu, {}, {a}, std::move(out));
  }

  NodeId sigmoid(NodeId a) {
    Tensor out(tensor(a).shape, tensor(a).values);
    for (auto& v : out.values) v = detail::stable_sigmoid(v);
    return push(OpKind::Sigmoid, {}, {a}, std::move(out));
  }

  NodeId avg_pool2d(NodeId a, int kernel, int stride = 0) {
    if (stride == 0) stride = kernel;
    const Tensor& tx = tensor(a);
    if (tx.shape.size() != 3)
      throw ShapeError("avg_pool2d: expects [C,H,W], got " +
                       shape_str(tx.shape));
    if (kernel < 1 || stride < 1)
      throw ShapeError("avg_pool2d: kernel and stride must be positive");
    const std::size_t c = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
    if (h < static_cast<std::size_t>(kernel) ||
        w < static_cast<std::size_t>(kernel))
      throw ShapeError("avg_pool2d: kernel " + std::to_string(kernel) +
                       " larger than input " + shape_str(tx.shape));
    const std::size_t ho = (h - kernel) / stride + 1;
    const std::size_t wo = (w - kernel) / stride + 1;
    Tensor out = Tensor::zeros({c, ho, wo});
    const double inv = 1.0 / (static_cast<double>(kernel) * kernel);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oi = 0; oi < ho; ++oi)
        for (std::size_t oj = 0; oj < wo; ++oj) {
          double acc = 0.0;
          for (int a2 = 0; a2 < kernel; ++a2)
            for (int b2 = 0; b2 < kernel; ++b2)
              acc += tx.values[(ci * h + oi * stride + a2) * w + oj * stride +
                               b2];
          out.values[(ci * ho + oi) * wo + oj] = acc * inv;
        }
    OpAttrs at;
    at.kernel = kernel;
    at.stride = stride;
    return push(OpKind::AvgPool2d, at, {a}, std::move(out));
  }

  NodeId reshape(NodeId a, Shape target) {
    const Tensor& tx = tensor(a);
    if (ssvr::numel(target) != tx.numel())
      throw ShapeError("reshape: cannot view " + shape_str(tx.shape) + " as " +
                       shape_str(target));
    Tensor out(target, tx.values);
    OpAttrs at;
    at.target = std::move(target);
    return push(OpKind::Reshape, at, {a}, std::move(out));
  }

  NodeId sum(NodeId a) {
    double acc = 0.0;
    for (double v : tensor(a).values) acc += v;
    return push(OpKind::Sum, {}, {a}, Tensor::scalar(acc));
  }

  NodeId mean(NodeId a) {
    double acc = 0.0;
    for (double v : tensor(a).values) acc += v;
    return push(OpKind::Mean, {}, {a},
                Tensor::scalar(acc / static_cast<double>(tensor(a).numel())));
  }

  NodeId exp(NodeId a) {
    Tensor out(tensor(a).shape, tensor(a).values);
    for (auto& v : out.values) v = std::exp(v);
    return push(OpKind::Exp, {}, {a}, std::move(out));
  }

  NodeId log(NodeId a) {
    Tensor out(tensor(a).shape, tensor(a).values);
    for (auto& v : out.values) v = std::log(v);
    return push(OpKind::Log, {}, {a}, std::move(out));
  }

  NodeId square(NodeId a) {
    Tensor out(tensor(a).shape, tensor(a).values);
    for (auto& v : out.values) v *= v;
    return push(OpKind::Square, {}, {a}, std::move(out));
  }

  NodeId concat(const std::vector<NodeId>& parts, int axis = 0) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    if (axis != 0)
      throw ShapeError("concat: only axis 0 is supported, got " +
                       std::to_string(axis));
    const Shape& first = tensor(parts[0]).shape;
    Shape out_shape = first;
    std::size_t total0 = first[0];
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const Shape& s = tensor(parts[i]).shape;
      if (s.size() != first.size() ||
          !std::equal(s.begin() + 1, s.end(), first.begin() + 1))
        throw ShapeError("concat: incompatible shapes " + shape_str(first) +
                         " vs " + shape_str(s));
      total0 += s[0];
    }
    out_shape[0] = total0;
    Tensor out = Tensor::zeros(out_shape);
    std::size_t off = 0;
    for (NodeId p : parts) {
      const auto& v = tensor(p).values;
      std::copy(v.begin(), v.end(), out.values.begin() + off);
      off += v.size();
    }
    OpAttrs at;
    at.axis = axis;
    return push(OpKind::Concat, at, parts, std::move(out));
  }

  // y = w . x + b with x rank-1 [n_in], w [n_out,n_in], b [n_out].
  NodeId affine(NodeId x, NodeId w, NodeId b) {
    const Tensor &tx = tensor(x), &tw = tensor(w), &tb = tensor(b);
    if (tx.shape.size() != 1 || tw.shape.size() != 2 || tb.shape.size() != 1)
      throw ShapeError(std::string("affine: expects x rank-1, w rank-2, b "
                                   "rank-1, got x ") +
                       shape_str(tx.shape) + ", w " + shape_str(tw.shape) +
                       ", b " + shape_str(tb.shape));
    const std::size_t n_out = tw.shape[0], n_in = tw.shape[1];
    if (tx.shape[0] != n_in || tb.shape[0] != n_out)
      throw ShapeError("affine: dimensions disagree, x " +
                       shape_str(tx.shape) + ", w " + shape_str(tw.shape) +
                       ", b " + shape_str(tb.shape));
    Tensor out = Tensor::zeros({n_out});
    for (std::size_t i = 0; i < n_out; ++i) {
      double acc = tb.values[i];
      const double* wrow = tw.values.data() + i * n_in;
      for (std::size_t j = 0; j < n_in; ++j) acc += wrow[j] * tx.values[j];
      out.values[i] = acc;
    }
    return push(OpKind::Affine, {}, {x, w, b}, std::move(out));
  }

  // Uniform dispatch over the op vocabulary. Used by tests and generic
  // drivers; typed methods above are the normal entry points.
  NodeId forward(OpKind kind, const std::vector<NodeId>& in,
                 const OpAttrs& at = {}) {
    switch (kind) {
      case OpKind::Add: need(kind, in, 2); return add(in[0], in[1]);
      case OpKind::Mul: need(kind, in, 2); return mul(in[0], in[1]);
      case OpKind::Matmul: need(kind, in, 2); return matmul(in[0], in[1]);
      case OpKind::Conv2d:
        need(kind, in, 2);
        return conv2d(in[0], in[1], at.stride, at.pad);
      case OpKind::Conv2dTranspose:
        need(kind, in, 2);
        return conv2d_transpose(in[0], in[1], at.stride, at.pad);
      case OpKind::Relu: need(kind, in, 1); return relu(in[0]);
      case OpKind::Sigmoid: need(kind, in, 1); return sigmoid(in[0]);
      case OpKind::AvgPool2d:
        need(kind, in, 1);
        return avg_pool2d(in[0], at.kernel, at.stride);
      case OpKind::Reshape: need(kind, in, 1); return reshape(in[0], at.target);
      case OpKind::Sum: need(kind, in, 1); return sum(in[0]);
      case OpKind::Mean: need(kind, in, 1); return mean(in[0]);
      case OpKind::Exp: need(kind, in, 1); return exp(in[0]);
      case OpKind::Log: need(kind, in, 1); return log(in[0]);
      case OpKind::Square: need(kind, in, 1); return square(in[0]);
      case OpKind::Concat: return concat(in, at.axis);
      case OpKind::Affine:
        need(kind, in, 3);
        return affine(in[0], in[1], in[2]);
      case OpKind::Leaf: break;
    }
    throw UnknownOpError("forward: unknown op kind " +
                         std::to_string(static_cast<int>(kind)));
  }

  const Tensor& tensor(NodeId id) const { return nodes_.at(id).t; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  double value(NodeId id) const {
    const Tensor& t = tensor(id);
    if (t.numel() != 1)
      throw GraphError("value: node is not scalar, shape " +
                       shape_str(t.shape));
    return t.values[0];
  }

  // Reverse-mode accumulation from a scalar output. Fills tensor(id).grad
  // for every node with requires_grad. Single use: the graph is consumed.
  void backward(NodeId output) {
    if (consumed_) throw GraphError("backward: graph already consumed");
    if (tensor(output).numel() != 1)
      throw GraphError("backward: output must be scalar, got shape " +
                       shape_str(tensor(output).shape));
    consumed_ = true;
    std::vector<std::vector<double>> g(nodes_.size());
    g[output] = {1.0};
    for (NodeId id = output + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (g[id].empty()) continue;
      if (node.t.requires_grad) backprop(id, g);
      if (node.t.requires_grad) node.t.grad = std::move(g[id]);
      g[id].clear();
    }
  }

  const std::vector<double>& grad(NodeId id) const {
    const Tensor& t = tensor(id);
    if (!t.grad)
      throw GraphError("grad: node has no gradient (requires_grad off or "
                       "backward not run)");
    return *t.grad;
  }

 private:
  struct Node {
    OpKind op;
    OpAttrs attrs;
    std::vector<NodeId> inputs;
    Tensor t;
  };

  NodeId push(OpKind op, OpAttrs at, std::vector<NodeId> inputs, Tensor t) {
    if (consumed_)
      throw GraphError("graph already consumed by backward; build a new one");
    if (op != OpKind::Leaf) {
      bool rg = false;
      for (NodeId i : inputs) rg = rg || nodes_[i].t.requires_grad;
      t.requires_grad = rg;
    }
    nodes_.push_back(Node{op, std::move(at), std::move(inputs), std::move(t)});
    return nodes_.size() - 1;
  }

  static void need(OpKind k, const std::vector<NodeId>& in, std::size_t n) {
    if (in.size() != n)
      throw ShapeError(std::string(op_name(k)) + ": expects " +
                       std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
  }

  static void check_conv_args(const char* name, const Tensor& tx,
                              const Tensor& tw, int stride, int pad) {
    if (tx.shape.size() != 3)
      throw ShapeError(std::string(name) + ": expects input [C,H,W], got " +
                       shape_str(tx.shape));
    if (tw.shape.size() != 4)
      throw ShapeError(std::string(name) +
                       ": expects weight rank-4, got " + shape_str(tw.shape));
    if (stride < 1 || pad < 0)
      throw ShapeError(std::string(name) + ": stride must be >= 1 and pad "
                                           ">= 0");
  }

  void accumulate(std::vector<std::vector<double>>& g, NodeId id,
                  const std::vector<double>& contrib) {
    if (!nodes_[id].t.requires_grad) return;
    auto& slot = g[id];
    if (slot.empty()) {
      slot = contrib;
    } else {
      for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += contrib[i];
    }
  }

  void backprop(NodeId id, std::vector<std::vector<double>>& g) {
    Node& node = nodes_[id];
    const std::vector<double>& go = g[id];
    switch (node.op) {
      case OpKind::Leaf:
        return;
      case OpKind::Add: {
        accumulate(g, node.inputs[0], go);
        accumulate(g, node.inputs[1], go);
        return;
      }
      case OpKind::Mul: {
        const auto& a = nodes_[node.inputs[0]].t.values;
        const auto& b = nodes_[node.inputs[1]].t.values;
        if (nodes_[node.inputs[0]].t.requires_grad) {
          std::vector<double> da(go.size());
          for (std::size_t i = 0; i < go.size(); ++i) da[i] = go[i] * b[i];
          accumulate(g, node.inputs[0], da);
        }
        if (nodes_[node.inputs[1]].t.requires_grad) {
          std::vector<double> db(go.size());
          for (std::size_t i = 0; i < go.size(); ++i) db[i] = go[i] * a[i];
          accumulate(g, node.inputs[1], db);
        }
        return;
      }
      case OpKind::Matmul: {
        const Tensor& ta = nodes_[node.inputs[0]].t;
        const Tensor& tb = nodes_[node.inputs[1]].t;
        const std::size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
        if (ta.requires_grad) {
          std::vector<double> da(m * k, 0.0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              double acc = 0.0;
              const double* grow = go.data() + i * n;
              const double* brow = tb.values.data() + l * n;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              da[i * k + l] = acc;
            }
          accumulate(g, node.inputs[0], da);
        }
        if (tb.requires_grad) {
          std::vector<double> db(k * n, 0.0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              const double av = ta.values[i * k + l];
              if (av == 0.0) continue;
              const double* grow = go.data() + i * n;
              double* drow = db.data() + l * n;
              for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
            }
          accumulate(g, node.inputs[1], db);
        }
        return;
      }
      case OpKind::Conv2d: {
        const Tensor& tx = nodes_[node.inputs[0]].t;
        const Tensor& tw = nodes_[node.inputs[1]].t;
        const std::size_t ci = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
        const std::size_t co = tw.shape[0], kh = tw.shape[2], kw = tw.shape[3];
        const std::size_t ho = node.t.shape[1], wo = node.t.shape[2];
        const int s = node.attrs.stride, p = node.attrs.pad;
        if (tx.requires_grad) {
          std::vector<double> dx(tx.numel(), 0.0);
          detail::scatter2d(go.data(), co, ho, wo, tw.values.data(), ci, kh,
                            kw, s, p, dx.data(), h, w);
          accumulate(g, node.inputs[0], dx);
        }
        if (tw.requires_grad) {
          std::vector<double> dw(tw.numel(), 0.0);
          detail::corr2d_wgrad(tx.values.data(), ci, h, w, go.data(), co, ho,
                               wo, kh, kw, s, p, dw.data());
          accumulate(g, node.inputs[1], dw);
        }
        return;
      }
      case OpKind::Conv2dTranspose: {
        const Tensor& tx = nodes_[node.inputs[0]].t;
        const Tensor& tw = nodes_[node.inputs[1]].t;
        const std::size_t c1 = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
        const std::size_t kh = tw.shape[2], kw = tw.shape[3];
        const std::size_t c2 = node.t.shape[0], ho = node.t.shape[1],
                          wo = node.t.shape[2];
        const int s = node.attrs.stride, p = node.attrs.pad;
        if (tx.requires_grad) {
          // Gradient w.r.t. the transpose input is a plain correlation of
          // the output gradient with the same weights.
          std::vector<double> dx(tx.numel(), 0.0);
          detail::corr2d(go.data(), c2, ho, wo, tw.values.data(), c1, kh, kw,
                         s, p, dx.data(), h, w);
          accumulate(g, node.inputs[0], dx);
        }
        if (tw.requires_grad) {
          std::vector<double> dw(tw.numel(), 0.0);
          detail::corr2d_wgrad(go.data(), c2, ho, wo, tx.values.data(), c1, h,
                               w, kh, kw, s, p, dw.data());
          accumulate(g, node.inputs[1], dw);
        }
        return;
      }
      case OpKind::Relu: {
        const auto& x = nodes_[node.inputs[0]].t.values;
        std::vector<double> dx(go.size());
        for (std::size_t i = 0; i < go.size(); ++i)
          dx[i] = x[i] > 0.0 ? go[i] : 0.0;
        accumulate(g, node.inputs[0], dx);
        return;
      }
      case OpKind::Sigmoid: {
        const auto& y = node.t.values;
        std::vector<double> dx(go.size());
        for (std::size_t i = 0; i < go.size(); ++i)
          dx[i] = go[i] * y[i] * (1.0 - y[i]);
        accumulate(g, node.inputs[0], dx);
        return;
      }
      case OpKind::AvgPool2d: {
        const Tensor& tx = nodes_[node.inputs[0]].t;
        const std::size_t c = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
        const std::size_t ho = node.t.shape[1], wo = node.t.shape[2];
        const int k = node.attrs.kernel, s = node.attrs.stride;
        std::vector<double> dx(tx.numel(), 0.0);
        const double inv = 1.0 / (static_cast<double>(k) * k);
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t oi = 0; oi < ho; ++oi)
            for (std::size_t oj = 0; oj < wo; ++oj) {
              const double gv = go[(ci * ho + oi) * wo + oj] * inv;
              for (int a = 0; a < k; ++a)
                for (int b = 0; b < k; ++b)
                  dx[(ci * h + oi * s + a) * w + oj * s + b] += gv;
            }
        accumulate(g, node.inputs[0], dx);
        return;
      }
      case OpKind::Reshape: {
        accumulate(g, node.inputs[0], go);
        return;
      }
      case OpKind::Sum: {
        const Tensor& tx = nodes_[node.inputs[0]].t;
        accumulate(g, node.inputs[0],
                   std::vector<double>(tx.numel(), go[0]));
        return;
      }
      case OpKind::Mean: {
        const Tensor& tx = nodes_[node.inputs[0]].t;
        accumulate(
            g, node.inputs[0],
            std::vector<double>(tx.numel(),
                                go[0] / static_cast<double>(tx.numel())));
        return;
      }
      case OpKind::Exp: {
        const auto& y = node.t.values;
        std::vector<double> dx(go.size());
        for (std::size_t i = 0; i < go.size(); ++i) dx[i] = go[i] * y[i];
        accumulate(g, node.inputs[0], dx);
        return;
      }
      case OpKind::Log: {
        const auto& x = nodes_[node.inputs[0]].t.values;
        std::vector<double> dx(go.size());
        for (std::size_t i = 0; i < go.size(); ++i) dx[i] = go[i] / x[i];
        accumulate(g, node.inputs[0], dx);
        return;
      }
      case OpKind::Square: {
        const auto& x = nodes_[node.inputs[0]].t.values;
        std::vector<double> dx(go.size());
        for (std::size_t i = 0; i < go.size(); ++i)
          dx[i] = go[i] * 2.0 * x[i];
        accumulate(g, node.inputs[0], dx);
        return;
      }
      case OpKind::Concat: {
        std::size_t off = 0;
        for (NodeId in : node.inputs) {
          const Tensor& ti = nodes_[in].t;
          if (ti.requires_grad) {
            std::vector<double> d(go.begin() + off,
                                  go.begin() + off + ti.numel());
            accumulate(g, in, d);
          }
          off += ti.numel();
        }
        return;
      }
      case OpKind::Affine: {
        const Tensor& tx = nodes_[node.inputs[0]].t;
        const Tensor& tw = nodes_[node.inputs[1]].t;
        const std::size_t n_out = tw.shape[0], n_in = tw.shape[1];
        if (tx.requires_grad) {
          std::vector<double> dx(n_in, 0.0);
          for (std::size_t i = 0; i < n_out; ++i) {
            const double gv = go[i];
            const double* wrow = tw.values.data() + i * n_in;
            for (std::size_t j = 0; j < n_in; ++j) dx[j] += gv * wrow[j];
          }
          accumulate(g, node.inputs[0], dx);
        }
        if (tw.requires_grad) {
          std::vector<double> dw(n_out * n_in);
          for (std::size_t i = 0; i < n_out; ++i)
            for (std::size_t j = 0; j < n_in; ++j)
              dw[i * n_in + j] = go[i] * tx.values[j];
          accumulate(g, node.inputs[1], dw);
        }
        if (nodes_[node.inputs[2]].t.requires_grad)
          accumulate(g, node.inputs[2], go);
        return;
      }
    }
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Central-difference gradient estimate, (f(x+eps*e_k) - f(x-eps*e_k))/(2 eps)
// per coordinate. Independent of the tape; serves as the validation oracle
// for backward().
inline std::vector<double> finite_diff_grad(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double epsilon) {
  if (!(epsilon > 0.0))
    throw std::invalid_argument("finite_diff_grad: epsilon must be positive");
  std::vector<double> grad(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = x[k];
    x[k] = orig + epsilon;
    const double fp = f(x);
    x[k] = orig - epsilon;
    const double fm = f(x);
    x[k] = orig;
    grad[k] = (fp - fm) / (2.0 * epsilon);
  }
  return grad;
}

}  // namespace ssvr

#endif  // SSVR_TENSOR_HPP
