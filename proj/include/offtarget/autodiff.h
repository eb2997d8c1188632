#pragma once

// Taped reverse-mode differentiation over dense row-major arrays.
//
// A Graph owns every node created through it. Forward values are computed
// eagerly when an op is applied; backward() walks the tape in reverse
// creation order, which is a valid reverse topological order because an op
// may only reference nodes that already exist.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace offtarget::ad {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

enum class OpCode {
  kLeaf,
  kAdd,
  kSubtract,
  kMultiply,
  kScale,
  kMatMul,
  kTransposeLast2,
  kReshape,
  kConcatLast,
  kSlice,
  kEmbedding,
  kSoftmax,
  kLogSoftmax,
  kLog,
  kExp,
  kGelu,
  kLayerNorm,
  kCausalMask,
  kSum,
  kMean,
  kGather,
  kClampMax,
  kLog1mExp,
};

std::string_view op_name(OpCode op);
std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Value fill used for masked attention scores.
inline constexpr double kMaskedScore = -1e9;
// Lower clamp applied to the argument of log.
inline constexpr double kLogFloor = 1e-12;

struct OpAttrs {
  double scalar = 0.0;     // scale factor, clamp bound
  double eps = 1e-5;       // layer-norm epsilon
  std::size_t axis = 0;    // slice axis
  std::size_t begin = 0;   // slice range [begin, end)
  std::size_t end = 0;
  Shape shape;             // reshape target
  std::vector<std::int64_t> indices;   // embedding rows / gather columns
  std::vector<std::uint8_t> key_mask;  // causal mask: 1 marks a padded key, laid out [batch, key]
};

template <typename T>
class Graph;

// Lightweight handle to a node in a Graph. The graph must outlive the handle.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  NodeId id() const { return id_; }
  Graph<T>& graph() const { return *graph_; }
  const Shape& shape() const;
  std::span<const T> values() const;
  bool requires_grad() const;
  T item() const;
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph<T>;
  Tensor(Graph<T>* g, NodeId id) : graph_(g), id_(id) {}
  Graph<T>* graph_ = nullptr;
  NodeId id_ = 0;
};

// Gradients of a scalar loss with respect to the requires-grad leaves of a graph.
template <typename T>
class GradMap {
 public:
  bool contains(NodeId id) const { return entries_.count(id) != 0; }
  std::span<const T> at(NodeId id) const;
  std::span<const T> at(const Tensor<T>& t) const { return at(t.id()); }
  const std::map<NodeId, std::vector<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  friend class Graph<T>;
  std::map<NodeId, std::vector<T>> entries_;
};

template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor<T> leaf(Shape shape, std::vector<T> values, bool requires_grad = false);
  Tensor<T> scalar(T value) { return leaf({1}, {value}, false); }

  Tensor<T> apply(OpCode op, std::span<const Tensor<T>> operands, const OpAttrs& attrs = {});
  Tensor<T> apply(OpCode op, std::initializer_list<Tensor<T>> operands, const OpAttrs& attrs = {}) {
    return apply(op, std::span<const Tensor<T>>(operands.begin(), operands.size()), attrs);
  }

  GradMap<T> backward(const Tensor<T>& loss) const;

  std::size_t size() const { return nodes_.size(); }
  const Shape& shape_of(NodeId id) const { return nodes_.at(id).shape; }
  std::span<const T> values_of(NodeId id) const { return nodes_.at(id).values; }
  bool requires_grad_of(NodeId id) const { return nodes_.at(id).requires_grad; }
  OpCode op_of(NodeId id) const { return nodes_.at(id).op; }
  std::span<const NodeId> inputs_of(NodeId id) const { return nodes_.at(id).inputs; }

 private:
  struct Node {
    OpCode op = OpCode::kLeaf;
    Shape shape;
    std::vector<T> values;
    std::vector<NodeId> inputs;
    OpAttrs attrs;
    std::vector<T> aux;  // op-specific saved quantities
    bool requires_grad = false;
  };

  void forward(Node& node) const;
  void backward_node(NodeId id, const std::vector<T>& grad_out, std::vector<std::vector<T>>& grads) const;

  std::deque<Node> nodes_;
};

template <typename T>
const Shape& Tensor<T>::shape() const {
  return graph_->shape_of(id_);
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  return graph_->values_of(id_);
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return graph_->requires_grad_of(id_);
}

template <typename T>
T Tensor<T>::item() const {
  auto v = values();
  if (v.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return v[0];
}

// Op helpers. Each is a thin wrapper over Graph::apply.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return a.graph().apply(OpCode::kAdd, {a, b});
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return a.graph().apply(OpCode::kSubtract, {a, b});
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return a.graph().apply(OpCode::kMultiply, {a, b});
}
template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  OpAttrs at;
  at.scalar = s;
  return a.graph().apply(OpCode::kScale, {a}, at);
}
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return a.graph().apply(OpCode::kMatMul, {a, b});
}
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  return a.graph().apply(OpCode::kTransposeLast2, {a});
}
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return a.graph().apply(OpCode::kReshape, {a}, at);
}
template <typename T>
Tensor<T> concat_last(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  return parts.front().graph().apply(OpCode::kConcatLast, parts);
}
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  OpAttrs at;
  at.axis = axis;
  at.begin = begin;
  at.end = end;
  return a.graph().apply(OpCode::kSlice, {a}, at);
}
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::vector<std::int64_t> rows) {
  OpAttrs at;
  at.indices = std::move(rows);
  return table.graph().apply(OpCode::kEmbedding, {table}, at);
}
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  return a.graph().apply(OpCode::kSoftmax, {a});
}
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  return a.graph().apply(OpCode::kLogSoftmax, {a});
}
template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return a.graph().apply(OpCode::kLog, {a});
}
template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return a.graph().apply(OpCode::kExp, {a});
}
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  return a.graph().apply(OpCode::kGelu, {a});
}
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps = 1e-5) {
  OpAttrs at;
  at.eps = eps;
  return x.graph().apply(OpCode::kLayerNorm, {x, gain, bias}, at);
}
template <typename T>
Tensor<T> causal_mask(const Tensor<T>& scores, std::vector<std::uint8_t> key_mask = {}) {
  OpAttrs at;
  at.key_mask = std::move(key_mask);
  return scores.graph().apply(OpCode::kCausalMask, {scores}, at);
}
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  return a.graph().apply(OpCode::kSum, {a});
}
template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return a.graph().apply(OpCode::kMean, {a});
}
template <typename T>
Tensor<T> gather(const Tensor<T>& a, std::vector<std::int64_t> columns) {
  OpAttrs at;
  at.indices = std::move(columns);
  return a.graph().apply(OpCode::kGather, {a}, at);
}
template <typename T>
Tensor<T> clamp_max(const Tensor<T>& a, double bound) {
  OpAttrs at;
  at.scalar = bound;
  return a.graph().apply(OpCode::kClampMax, {a}, at);
}
// log(1 - exp(x)) for x < 0, evaluated without cancellation.
template <typename T>
Tensor<T> log1mexp(const Tensor<T>& a) {
  return a.graph().apply(OpCode::kLog1mExp, {a});
}

// Scalar log(1 - exp(x)) for x < 0.
inline double log1mexp_scalar(double x) {
  return x > -0.6931471805599453 ? std::log(-std::expm1(x)) : std::log1p(-std::exp(x));
}

// One coordinate of a flattened parameter list: params[tensor][index].
struct Coord {
  std::size_t tensor = 0;
  std::size_t index = 0;
};

// Central-difference gradient of a scalar function of several parameter
// arrays. With `coords` empty every coordinate is differenced; otherwise
// only the listed ones are, and the result holds zeros elsewhere.
std::vector<std::vector<double>> finite_difference_grad(
    const std::function<double(const std::vector<std::vector<double>>&)>& f,
    std::vector<std::vector<double>> params, double eps = 1e-5, std::span<const Coord> coords = {});

// Per-coordinate |a-b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor = 1e-8);

extern template class Graph<float>;
extern template class Graph<double>;
extern template class GradMap<float>;
extern template class GradMap<double>;

}  // namespace offtarget::ad
