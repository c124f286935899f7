#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "otface/errors.hpp"

namespace otface {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Floor below which a vector norm is treated as degenerate.
inline constexpr double kNormFloor = 1e-12;

// Dense row-major array of doubles. Value type; cheap to move.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor filled(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  // 2-D accessors; no bounds checks beyond the debug assertions of vector.
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  double item() const;
  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Non-differentiable helpers used by the miner, the solver and eval.
double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);
Tensor l2_normalize(const Tensor& v);
// Clamped to [-1, 1].
double cosine_similarity(std::span<const double> a, std::span<const double> b);
double cosine_distance(std::span<const double> a, std::span<const double> b);

// Target-class margin applied by Tape::margin_logits.
enum class MarginVariant { kPlain, kAdditiveCosine, kAdditiveAngular };

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

// Reverse-mode autodiff tape. Nodes are appended in evaluation order, which
// is a topological order, so backward() simply walks the node list in reverse.
// Single writer: a tape must not be mutated from two threads at once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);      // differentiable input
  Var constant(Tensor value);  // no gradient tracked

  const Tensor& value(Var v) const;
  // Gradient from the last backward(); zeros for unreached nodes.
  Tensor grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Fills gradients of `root` (must be scalar) with respect to every node.
  void backward(Var root);

  // --- elementwise (operands of identical shape) ---
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var relu(Var a);
  Var exp(Var a);
  Var log(Var a);

  // --- reductions and shape ---
  Var sum(Var a);
  Var mean(Var a);
  Var reshape(Var a, Shape shape);
  Var transpose(Var a);  // 2-D only
  Var gather(Var a, std::vector<std::size_t> indices);  // flat indices
  Var stack(const std::vector<Var>& rows);  // equal-shape inputs -> [k, ...]

  // --- linear algebra ---
  Var matmul(Var a, Var b);
  // input [c_in, h, w], kernels [c_out, c_in, kh, kw], optional bias [c_out].
  Var conv2d(Var input, Var kernels, Var bias, std::size_t stride, std::size_t padding);
  // 1-D: whole vector. 2-D: axis 1 normalizes each row, axis 0 each column.
  Var normalize(Var a, int axis = 1);

  // --- fused loss primitives, each with a hand-written backward ---
  // cos: [N, C] cosines; returns logits with the class margin applied to the
  // target entry of each row (see losses.hpp for the variants).
  Var margin_logits(Var cos, std::vector<std::size_t> labels,
                    MarginVariant variant, double scale, double margin);
  // logits [N, C] -> [N] of -log softmax(row)[label].
  Var cross_entropy_rows(Var logits, std::vector<std::size_t> labels);
  // Elementwise (1 - exp(-l))^gamma * l.
  Var focal(Var losses, double gamma);
  // Gibbs kernel K [n, n] -> diag(u) K diag(v) after `iterations` scaling
  // updates from u = 1. Backward differentiates through every iterate.
  Var sinkhorn_plan(Var kernel, std::size_t iterations);
  // sum P log P with 0 log 0 = 0.
  Var xlogx_sum(Var p);

 private:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn);
  const Node& node(Var v) const;
  Tensor& grad_buffer(std::size_t id);
  bool needs(Var v) const { return nodes_[v.id].requires_grad; }
  void require_same_shape(Var a, Var b, const char* op) const;

  std::vector<Node> nodes_;
};

}  // namespace otface
