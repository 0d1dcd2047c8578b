#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "memlab/error.hpp"

namespace memlab::ad {

/// Dense row-major matrix of doubles. Vectors are 1 x n, scalars 1 x 1.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> v);

  static Tensor scalar(double x) { return Tensor(1, 1, x); }

  std::size_t size() const { return values.size(); }
  std::array<std::size_t, 2> shape() const { return {rows, cols}; }
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double* row(std::size_t r) { return values.data() + r * cols; }
  const double* row(std::size_t r) const { return values.data() + r * cols; }
  double item() const;

  bool operator==(const Tensor&) const = default;
};

std::string shape_string(const Tensor& t);

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  MatMul,
  Transpose,
  Add,
  AddRowwise,
  Mul,
  Scale,
  Sum,
  Mean,
  Softmax,
  CausalSoftmax,
  LayerNorm,
  Gelu,
  Gather,
  SelectRows,
  ReplaceRow,
  CrossEntropy,
  KlDivergence,
};

const char* op_name(Op op);

class Tape;

/// Handle to a node recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
};

/// Gradients of requires-grad leaves, keyed by leaf node id.
class Gradients {
 public:
  void set(NodeId id, Tensor g);
  const Tensor& at(NodeId id) const;
  bool contains(NodeId id) const;
  std::size_t size() const { return ids_.size(); }
  std::span<const NodeId> ids() const { return ids_; }

 private:
  std::vector<NodeId> ids_;
  std::vector<Tensor> grads_;
};

/// Records primitive applications in topological order (inputs always
/// precede consumers). Single-threaded; independent tapes share no state.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  Op op(NodeId id) const { return nodes_.at(id).op; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Intermediate gradients are retained
  /// and readable through grad() until the next backward call.
  Gradients backward(Var loss);

  /// Gradient of any node after backward; nullptr when the node did not
  /// participate (treat as zero).
  const Tensor* grad(NodeId id) const;

  /// Recomputes every non-leaf node from its recorded inputs and returns
  /// true iff all values come out bit-identical.
  bool replay_matches() const;

  // Recording entry point used by the primitive functions below.
  struct Node {
    Op op = Op::Leaf;
    std::array<NodeId, 3> inputs{};
    std::uint8_t n_inputs = 0;
    bool requires_grad = false;
    double scalar = 0.0;
    std::vector<std::size_t> indices;
    Tensor value;
    std::vector<double> saved;
  };
  Var record(Node node);
  const Node& node(NodeId id) const { return nodes_.at(id); }

  /// Test hook: replaces the backward rule of one op. Used to build the
  /// negative-control fixture for gradcheck.
  using BackwardOverride = std::function<void(const Tape&, NodeId, const Tensor& upstream,
                                              std::vector<Tensor>& input_grads)>;
  void override_backward(Op op, BackwardOverride fn);

 private:
  void evaluate(Node& node) const;
  void accumulate(NodeId id, const Tensor& g);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<bool> has_grad_;
  std::vector<std::pair<Op, BackwardOverride>> overrides_;
};

// Primitives. All of them throw ShapeError on incompatible shapes and
// NumericError when a result is not finite.

/// a[n x k] * b[k x m]
Var matmul(Var a, Var b);
Var transpose(Var a);
/// Elementwise sum of equal shapes.
Var add(Var a, Var b);
/// a[n x m] + row[1 x m] applied to every row.
Var add_rowwise(Var a, Var row);
/// Elementwise (Hadamard) product of equal shapes.
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var sum(Var a);
Var mean(Var a);
/// Softmax over the last dimension.
Var softmax(Var a);
/// Row i only sees columns 0..i; masked entries are exactly zero. Square input.
Var causal_softmax(Var a);
Var layer_norm(Var x, Var gain, Var offset);
Var gelu(Var a);
/// Rows of table[V x d] at ids -> [ids.size() x d].
Var embedding(Var table, std::span<const int> ids);
Var select_rows(Var a, std::span<const std::size_t> rows);
/// Copy of a with row r replaced by a constant vector (activation patching).
Var replace_row(Var a, std::size_t r, std::span<const double> values);
/// Per-row negative log-softmax at the target id -> [n x 1].
Var cross_entropy(Var logits, std::span<const int> targets);
/// Per-row D(softmax(p) || softmax(q)) -> [n x 1]. Both arguments are logits.
Var kl_divergence(Var p_logits, Var q_logits);

}  // namespace memlab::ad
