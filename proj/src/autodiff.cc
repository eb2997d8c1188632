#include "offtarget/autodiff.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "offtarget/linalg.h"

namespace offtarget::ad {

std::string_view op_name(OpCode op) {
  switch (op) {
    case OpCode::kLeaf: return "leaf";
    case OpCode::kAdd: return "add";
    case OpCode::kSubtract: return "subtract";
    case OpCode::kMultiply: return "multiply";
    case OpCode::kScale: return "scale";
    case OpCode::kMatMul: return "matmul";
    case OpCode::kTransposeLast2: return "transpose";
    case OpCode::kReshape: return "reshape";
    case OpCode::kConcatLast: return "concat";
    case OpCode::kSlice: return "slice";
    case OpCode::kEmbedding: return "embedding";
    case OpCode::kSoftmax: return "softmax";
    case OpCode::kLogSoftmax: return "log_softmax";
    case OpCode::kLog: return "log";
    case OpCode::kExp: return "exp";
    case OpCode::kGelu: return "gelu";
    case OpCode::kLayerNorm: return "layer_norm";
    case OpCode::kCausalMask: return "causal_mask";
    case OpCode::kSum: return "sum";
    case OpCode::kMean: return "mean";
    case OpCode::kGather: return "gather";
    case OpCode::kClampMax: return "clamp_max";
    case OpCode::kLog1mExp: return "log1mexp";
  }
  return "unknown";
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

[[noreturn]] void shape_fail(OpCode op, std::string_view what, std::initializer_list<Shape> shapes) {
  std::ostringstream os;
  os << op_name(op) << ": " << what << " (shapes";
  for (const auto& s : shapes) os << ' ' << shape_str(s);
  os << ')';
  throw ShapeError(os.str());
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// Geometry of a matmul: batch count, m, k, n, and whether B is shared across the batch.
struct MatMulDims {
  std::size_t batch, m, k, n;
  bool shared_rhs;
};

MatMulDims matmul_dims(const Shape& a, const Shape& b) {
  if (a.size() == 2 && b.size() == 2 && a[1] == b[0]) return {1, a[0], a[1], b[1], true};
  if (a.size() == 3 && b.size() == 2 && a[2] == b[0]) return {1, a[0] * a[1], a[2], b[1], true};
  if (a.size() == 3 && b.size() == 3 && a[0] == b[0] && a[2] == b[1]) return {a[0], a[1], a[2], b[2], false};
  shape_fail(OpCode::kMatMul, "inner dimensions or ranks do not conform", {a, b});
}

// Decomposes a shape around `axis` into (outer, dim, inner) extents.
void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& dim, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  dim = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

template <typename T>
std::span<const T> GradMap<T>::at(NodeId id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw IndexError("no gradient recorded for node " + std::to_string(id));
  return it->second;
}

template <typename T>
Tensor<T> Graph<T>::leaf(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) shape_fail(OpCode::kLeaf, "zero-sized dimension", {shape});
  if (shape.empty() || numel(shape) != values.size())
    shape_fail(OpCode::kLeaf, "value count " + std::to_string(values.size()) + " does not match shape", {shape});
  Node node;
  node.shape = std::move(shape);
  node.values = std::move(values);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Tensor<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T> Graph<T>::apply(OpCode op, std::span<const Tensor<T>> operands, const OpAttrs& attrs) {
  if (op == OpCode::kLeaf) throw std::invalid_argument("apply: leaves are created with Graph::leaf");
  Node node;
  node.op = op;
  node.attrs = attrs;
  for (const auto& t : operands) {
    if (t.graph_ != this) throw std::invalid_argument(std::string(op_name(op)) + ": operand belongs to another graph");
    node.inputs.push_back(t.id());
    node.requires_grad = node.requires_grad || nodes_[t.id()].requires_grad;
  }

  auto expect_arity = [&](std::size_t n) {
    if (operands.size() != n)
      throw std::invalid_argument(std::string(op_name(op)) + ": expected " + std::to_string(n) + " operands, got " +
                                  std::to_string(operands.size()));
  };
  switch (op) {
    case OpCode::kConcatLast:
      if (operands.empty()) expect_arity(1);
      break;
    case OpCode::kAdd:
    case OpCode::kSubtract:
    case OpCode::kMultiply:
    case OpCode::kMatMul:
      expect_arity(2);
      break;
    case OpCode::kLayerNorm:
      expect_arity(3);
      break;
    default:
      expect_arity(1);
  }

  forward(node);
  nodes_.push_back(std::move(node));
  return Tensor<T>(this, nodes_.size() - 1);
}

template <typename T>
void Graph<T>::forward(Node& node) const {
  const OpCode op = node.op;
  const Node& a = nodes_[node.inputs[0]];
  const Shape& as = a.shape;
  const auto& av = a.values;
  auto& out = node.values;

  switch (op) {
    case OpCode::kLeaf:
      break;

    case OpCode::kAdd:
    case OpCode::kMultiply: {
      const Node& b = nodes_[node.inputs[1]];
      if (!is_suffix(b.shape, as)) shape_fail(op, "right operand must match or be a trailing suffix", {as, b.shape});
      node.shape = as;
      out.resize(av.size());
      const std::size_t inner = b.values.size();
      if (op == OpCode::kAdd)
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + b.values[i % inner];
      else
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * b.values[i % inner];
      break;
    }

    case OpCode::kSubtract: {
      const Node& b = nodes_[node.inputs[1]];
      if (b.shape != as) shape_fail(op, "operands must have identical shapes", {as, b.shape});
      node.shape = as;
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - b.values[i];
      break;
    }

    case OpCode::kScale: {
      node.shape = as;
      out.resize(av.size());
      const T s = static_cast<T>(node.attrs.scalar);
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
      break;
    }

    case OpCode::kMatMul: {
      const Node& b = nodes_[node.inputs[1]];
      const MatMulDims d = matmul_dims(as, b.shape);
      node.shape = as.size() == 3 ? Shape{as[0], as[1], d.n} : Shape{d.m, d.n};
      out.assign(d.batch * d.m * d.n, T(0));
      for (std::size_t bi = 0; bi < d.batch; ++bi) {
        const T* bp = b.values.data() + (d.shared_rhs ? 0 : bi * d.k * d.n);
        linalg::gemm_nn(d.m, d.k, d.n, av.data() + bi * d.m * d.k, bp, out.data() + bi * d.m * d.n);
      }
      break;
    }

    case OpCode::kTransposeLast2: {
      if (as.size() < 2) shape_fail(op, "rank must be at least 2", {as});
      const std::size_t r = as[as.size() - 2], c = as.back(), batch = av.size() / (r * c);
      node.shape = as;
      std::swap(node.shape[as.size() - 2], node.shape[as.size() - 1]);
      out.resize(av.size());
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) out[bi * r * c + j * r + i] = av[bi * r * c + i * c + j];
      break;
    }

    case OpCode::kReshape: {
      const Shape& target = node.attrs.shape;
      if (target.empty() || numel(target) != av.size() ||
          std::any_of(target.begin(), target.end(), [](std::size_t d) { return d == 0; }))
        shape_fail(op, "element count differs", {as, target});
      node.shape = target;
      out = av;
      break;
    }

    case OpCode::kConcatLast: {
      std::size_t total = 0;
      for (auto id : node.inputs) {
        const Shape& s = nodes_[id].shape;
        if (s.size() != as.size() || !std::equal(s.begin(), s.end() - 1, as.begin()))
          shape_fail(op, "leading dimensions differ", {as, s});
        total += s.back();
      }
      node.shape = as;
      node.shape.back() = total;
      const std::size_t rows = av.size() / as.back();
      out.resize(rows * total);
      std::size_t offset = 0;
      for (auto id : node.inputs) {
        const Node& p = nodes_[id];
        const std::size_t w = p.shape.back();
        for (std::size_t r = 0; r < rows; ++r)
          std::copy_n(p.values.begin() + r * w, w, out.begin() + r * total + offset);
        offset += w;
      }
      break;
    }

    case OpCode::kSlice: {
      const auto& at = node.attrs;
      if (at.axis >= as.size()) shape_fail(op, "axis " + std::to_string(at.axis) + " out of range", {as});
      if (at.begin >= at.end || at.end > as[at.axis])
        throw IndexError("slice: range [" + std::to_string(at.begin) + "," + std::to_string(at.end) +
                         ") invalid for axis of size " + std::to_string(as[at.axis]));
      std::size_t outer, dim, inner;
      split_axis(as, at.axis, outer, dim, inner);
      const std::size_t w = at.end - at.begin;
      node.shape = as;
      node.shape[at.axis] = w;
      out.resize(outer * w * inner);
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(av.begin() + (o * dim + at.begin) * inner, w * inner, out.begin() + o * w * inner);
      break;
    }

    case OpCode::kEmbedding: {
      if (as.size() != 2) shape_fail(op, "table must be 2-D", {as});
      const std::size_t rows = as[0], d = as[1];
      const auto& idx = node.attrs.indices;
      if (idx.empty()) throw IndexError("embedding: empty index list");
      node.shape = {idx.size(), d};
      out.resize(idx.size() * d);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= rows)
          throw IndexError("embedding: index " + std::to_string(idx[i]) + " outside table of " + std::to_string(rows) +
                           " rows");
        std::copy_n(av.begin() + idx[i] * d, d, out.begin() + i * d);
      }
      break;
    }

    case OpCode::kSoftmax:
    case OpCode::kLogSoftmax: {
      const std::size_t n = as.back(), rows = av.size() / n;
      node.shape = as;
      out.resize(av.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const T* x = av.data() + r * n;
        T* y = out.data() + r * n;
        const T mx = *std::max_element(x, x + n);
        T z = 0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
        if (op == OpCode::kSoftmax) {
          for (std::size_t j = 0; j < n; ++j) y[j] = std::exp(x[j] - mx) / z;
        } else {
          const T lz = std::log(z) + mx;
          for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lz;
        }
      }
      break;
    }

    case OpCode::kLog: {
      node.shape = as;
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::log(std::max(av[i], static_cast<T>(kLogFloor)));
      break;
    }

    case OpCode::kExp: {
      node.shape = as;
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
      break;
    }

    case OpCode::kGelu: {
      node.shape = as;
      out.resize(av.size());
      node.aux.resize(av.size());  // tanh(u)
      for (std::size_t i = 0; i < av.size(); ++i) {
        const T x = av[i];
        const T th = std::tanh(static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x));
        node.aux[i] = th;
        out[i] = T(0.5) * x * (T(1) + th);
      }
      break;
    }

    case OpCode::kLayerNorm: {
      const Node& g = nodes_[node.inputs[1]];
      const Node& b = nodes_[node.inputs[2]];
      const std::size_t n = as.back(), rows = av.size() / n;
      if (g.shape != Shape{n} || b.shape != Shape{n}) shape_fail(op, "gain/bias must be 1-D over the last axis", {as, g.shape, b.shape});
      node.shape = as;
      out.resize(av.size());
      node.aux.resize(2 * rows);  // mean, rstd per row
      const T eps = static_cast<T>(node.attrs.eps);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* x = av.data() + r * n;
        T mu = 0;
        for (std::size_t j = 0; j < n; ++j) mu += x[j];
        mu /= static_cast<T>(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<T>(n);
        const T rstd = T(1) / std::sqrt(var + eps);
        node.aux[2 * r] = mu;
        node.aux[2 * r + 1] = rstd;
        T* y = out.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) y[j] = (x[j] - mu) * rstd * g.values[j] + b.values[j];
      }
      break;
    }

    case OpCode::kCausalMask: {
      if (as.size() < 2 || as[as.size() - 1] != as[as.size() - 2]) shape_fail(op, "last two axes must be square", {as});
      const std::size_t t = as.back(), batch = av.size() / (t * t);
      const auto& km = node.attrs.key_mask;
      // Key masks are given per batch row; extra leading axes (heads) share a row.
      if (!km.empty() && (km.size() % t != 0 || batch % (km.size() / t) != 0))
        shape_fail(op, "key mask of " + std::to_string(km.size()) + " entries does not tile the batch", {as});
      const std::size_t mask_rows = km.empty() ? 1 : km.size() / t;
      const std::size_t per_row = batch / mask_rows;
      node.shape = as;
      out = av;
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const std::uint8_t* keys = km.empty() ? nullptr : km.data() + (bi / per_row) * t;
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < t; ++j)
            if (j > i || (keys && keys[j])) out[bi * t * t + i * t + j] = static_cast<T>(kMaskedScore);
      }
      break;
    }

    case OpCode::kSum:
    case OpCode::kMean: {
      node.shape = {1};
      T s = 0;
      for (auto v : av) s += v;
      if (op == OpCode::kMean) s /= static_cast<T>(av.size());
      out = {s};
      break;
    }

    case OpCode::kGather: {
      const std::size_t n = as.back(), rows = av.size() / n;
      const auto& idx = node.attrs.indices;
      if (idx.size() != rows) shape_fail(op, "index count " + std::to_string(idx.size()) + " differs from row count", {as});
      node.shape = Shape(as.begin(), as.end() - 1);
      if (node.shape.empty()) node.shape = {1};
      out.resize(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= n)
          throw IndexError("gather: index " + std::to_string(idx[r]) + " outside axis of size " + std::to_string(n));
        out[r] = av[r * n + idx[r]];
      }
      break;
    }

    case OpCode::kClampMax: {
      node.shape = as;
      out.resize(av.size());
      const T c = static_cast<T>(node.attrs.scalar);
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::min(av[i], c);
      break;
    }

    case OpCode::kLog1mExp: {
      node.shape = as;
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) {
        if (av[i] >= T(0)) throw std::domain_error("log1mexp: argument must be negative");  // NaN propagates
        out[i] = static_cast<T>(log1mexp_scalar(static_cast<double>(av[i])));
      }
      break;
    }
  }
}

template <typename T>
void Graph<T>::backward_node(NodeId id, const std::vector<T>& gy, std::vector<std::vector<T>>& grads) const {
  const Node& node = nodes_[id];
  auto grad_of = [&](std::size_t input) -> std::vector<T>* {
    const NodeId in = node.inputs[input];
    if (!nodes_[in].requires_grad) return nullptr;
    auto& g = grads[in];
    if (g.empty()) g.assign(nodes_[in].values.size(), T(0));
    return &g;
  };
  const Node& a = nodes_[node.inputs[0]];
  const auto& av = a.values;
  const auto& y = node.values;

  switch (node.op) {
    case OpCode::kLeaf:
      break;

    case OpCode::kAdd:
    case OpCode::kMultiply: {
      const Node& b = nodes_[node.inputs[1]];
      const std::size_t inner = b.values.size();
      const bool is_add = node.op == OpCode::kAdd;
      if (auto* ga = grad_of(0))
        for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += is_add ? gy[i] : gy[i] * b.values[i % inner];
      if (auto* gb = grad_of(1))
        for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i % inner] += is_add ? gy[i] : gy[i] * av[i];
      break;
    }

    case OpCode::kSubtract: {
      if (auto* ga = grad_of(0))
        for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i];
      if (auto* gb = grad_of(1))
        for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i] -= gy[i];
      break;
    }

    case OpCode::kScale: {
      const T s = static_cast<T>(node.attrs.scalar);
      if (auto* ga = grad_of(0))
        for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i] * s;
      break;
    }

    case OpCode::kMatMul: {
      const Node& b = nodes_[node.inputs[1]];
      const MatMulDims d = matmul_dims(a.shape, b.shape);
      auto* ga = grad_of(0);
      auto* gb = grad_of(1);
      for (std::size_t bi = 0; bi < d.batch; ++bi) {
        const std::size_t boff = d.shared_rhs ? 0 : bi * d.k * d.n;
        const T* g = gy.data() + bi * d.m * d.n;
        if (ga) linalg::gemm_nt(d.m, d.n, d.k, g, b.values.data() + boff, ga->data() + bi * d.m * d.k);
        if (gb) linalg::gemm_tn(d.k, d.m, d.n, av.data() + bi * d.m * d.k, g, gb->data() + boff);
      }
      break;
    }

    case OpCode::kTransposeLast2: {
      if (auto* ga = grad_of(0)) {
        const std::size_t r = a.shape[a.shape.size() - 2], c = a.shape.back(), batch = av.size() / (r * c);
        for (std::size_t bi = 0; bi < batch; ++bi)
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*ga)[bi * r * c + i * c + j] += gy[bi * r * c + j * r + i];
      }
      break;
    }

    case OpCode::kReshape: {
      if (auto* ga = grad_of(0))
        for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i];
      break;
    }

    case OpCode::kConcatLast: {
      const std::size_t total = node.shape.back(), rows = y.size() / total;
      std::size_t offset = 0;
      for (std::size_t p = 0; p < node.inputs.size(); ++p) {
        const std::size_t w = nodes_[node.inputs[p]].shape.back();
        if (auto* gp = grad_of(p))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) (*gp)[r * w + j] += gy[r * total + offset + j];
        offset += w;
      }
      break;
    }

    case OpCode::kSlice: {
      if (auto* ga = grad_of(0)) {
        const auto& at = node.attrs;
        std::size_t outer, dim, inner;
        split_axis(a.shape, at.axis, outer, dim, inner);
        const std::size_t w = at.end - at.begin;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < w * inner; ++i) (*ga)[(o * dim + at.begin) * inner + i] += gy[o * w * inner + i];
      }
      break;
    }

    case OpCode::kEmbedding: {
      if (auto* ga = grad_of(0)) {
        const std::size_t d = a.shape[1];
        const auto& idx = node.attrs.indices;
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) (*ga)[idx[i] * d + j] += gy[i * d + j];
      }
      break;
    }

    case OpCode::kSoftmax: {
      if (auto* ga = grad_of(0)) {
        const std::size_t n = node.shape.back(), rows = y.size() / n;
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += gy[r * n + j] * y[r * n + j];
          for (std::size_t j = 0; j < n; ++j) (*ga)[r * n + j] += y[r * n + j] * (gy[r * n + j] - dot);
        }
      }
      break;
    }

    case OpCode::kLogSoftmax: {
      if (auto* ga = grad_of(0)) {
        const std::size_t n = node.shape.back(), rows = y.size() / n;
        for (std::size_t r = 0; r < rows; ++r) {
          T gsum = 0;
          for (std::size_t j = 0; j < n; ++j) gsum += gy[r * n + j];
          for (std::size_t j = 0; j < n; ++j) (*ga)[r * n + j] += gy[r * n + j] - std::exp(y[r * n + j]) * gsum;
        }
      }
      break;
    }

    case OpCode::kLog: {
      if (auto* ga = grad_of(0))
        for (std::size_t i = 0; i < gy.size(); ++i)
          if (av[i] >= static_cast<T>(kLogFloor)) (*ga)[i] += gy[i] / av[i];
      break;
    }

    case OpCode::kExp: {
      if (auto* ga = grad_of(0))
        for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i] * y[i];
      break;
    }

    case OpCode::kGelu: {
      if (auto* ga = grad_of(0))
        for (std::size_t i = 0; i < gy.size(); ++i) {
          const T x = av[i], th = node.aux[i];
          const T du = static_cast<T>(kGeluC) * (T(1) + T(3) * static_cast<T>(kGeluA) * x * x);
          (*ga)[i] += gy[i] * (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du);
        }
      break;
    }

    case OpCode::kLayerNorm: {
      const Node& g = nodes_[node.inputs[1]];
      const std::size_t n = node.shape.back(), rows = y.size() / n;
      auto* ga = grad_of(0);
      auto* gg = grad_of(1);
      auto* gb = grad_of(2);
      std::vector<T> dxhat(n);
      for (std::size_t r = 0; r < rows; ++r) {
        const T mu = node.aux[2 * r], rstd = node.aux[2 * r + 1];
        const T* x = av.data() + r * n;
        const T* dy = gy.data() + r * n;
        T m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const T xhat = (x[j] - mu) * rstd;
          if (gg) (*gg)[j] += dy[j] * xhat;
          if (gb) (*gb)[j] += dy[j];
          dxhat[j] = dy[j] * g.values[j];
          m1 += dxhat[j];
          m2 += dxhat[j] * xhat;
        }
        if (ga) {
          m1 /= static_cast<T>(n);
          m2 /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T xhat = (x[j] - mu) * rstd;
            (*ga)[r * n + j] += rstd * (dxhat[j] - m1 - xhat * m2);
          }
        }
      }
      break;
    }

    case OpCode::kCausalMask: {
      if (auto* ga = grad_of(0)) {
        const std::size_t t = node.shape.back(), batch = y.size() / (t * t);
        const auto& km = node.attrs.key_mask;
        const std::size_t per_row = km.empty() ? batch : batch / (km.size() / t);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const std::uint8_t* keys = km.empty() ? nullptr : km.data() + (bi / per_row) * t;
          for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j <= i; ++j)
              if (!(keys && keys[j])) (*ga)[bi * t * t + i * t + j] += gy[bi * t * t + i * t + j];
        }
      }
      break;
    }

    case OpCode::kSum:
    case OpCode::kMean: {
      if (auto* ga = grad_of(0)) {
        const T g0 = node.op == OpCode::kMean ? gy[0] / static_cast<T>(av.size()) : gy[0];
        for (auto& v : *ga) v += g0;
      }
      break;
    }

    case OpCode::kGather: {
      if (auto* ga = grad_of(0)) {
        const std::size_t n = a.shape.back();
        const auto& idx = node.attrs.indices;
        for (std::size_t r = 0; r < idx.size(); ++r) (*ga)[r * n + idx[r]] += gy[r];
      }
      break;
    }

    case OpCode::kClampMax: {
      if (auto* ga = grad_of(0)) {
        const T c = static_cast<T>(node.attrs.scalar);
        for (std::size_t i = 0; i < gy.size(); ++i)
          if (av[i] <= c) (*ga)[i] += gy[i];
      }
      break;
    }

    case OpCode::kLog1mExp: {
      // d/dx log(1 - e^x) = -1 / expm1(-x)
      if (auto* ga = grad_of(0))
        for (std::size_t i = 0; i < gy.size(); ++i)
          (*ga)[i] += gy[i] * static_cast<T>(-1.0 / std::expm1(-static_cast<double>(av[i])));
      break;
    }
  }
}

template <typename T>
GradMap<T> Graph<T>::backward(const Tensor<T>& loss) const {
  if (loss.graph_ != this) throw std::invalid_argument("backward: loss belongs to another graph");
  const Node& root = nodes_[loss.id()];
  if (root.values.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_str(root.shape));

  std::vector<std::vector<T>> grads(nodes_.size());
  if (root.requires_grad) grads[loss.id()] = {T(1)};
  for (NodeId id = loss.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (grads[id].empty() || node.op == OpCode::kLeaf) continue;
    backward_node(id, grads[id], grads);
    if (id != loss.id()) std::vector<T>().swap(grads[id]);
  }

  GradMap<T> out;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node& node = nodes_[id];
    if (node.op != OpCode::kLeaf || !node.requires_grad) continue;
    if (grads[id].empty())
      out.entries_[id].assign(node.values.size(), T(0));
    else
      out.entries_[id] = std::move(grads[id]);
  }
  return out;
}

std::vector<std::vector<double>> finite_difference_grad(
    const std::function<double(const std::vector<std::vector<double>>&)>& f, std::vector<std::vector<double>> params,
    double eps, std::span<const Coord> coords) {
  if (!(eps > 0)) throw std::invalid_argument("finite_difference_grad: eps must be positive");
  std::vector<std::vector<double>> grad(params.size());
  for (std::size_t t = 0; t < params.size(); ++t) grad[t].assign(params[t].size(), 0.0);

  auto probe = [&](std::size_t t, std::size_t i) {
    const double saved = params[t][i];
    params[t][i] = saved + eps;
    const double hi = f(params);
    params[t][i] = saved - eps;
    const double lo = f(params);
    params[t][i] = saved;
    if (!std::isfinite(hi) || !std::isfinite(lo))
      throw std::domain_error("finite_difference_grad: non-finite function value at tensor " + std::to_string(t) +
                              " index " + std::to_string(i));
    grad[t][i] = (hi - lo) / (2 * eps);
  };

  if (coords.empty()) {
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t].size(); ++i) probe(t, i);
  } else {
    for (const auto& c : coords) {
      if (c.tensor >= params.size() || c.index >= params[c.tensor].size())
        throw IndexError("finite_difference_grad: coordinate out of range");
      probe(c.tensor, c.index);
    }
  }
  return grad;
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template class Graph<float>;
template class Graph<double>;
template class GradMap<float>;
template class GradMap<double>;

}  // namespace offtarget::ad
