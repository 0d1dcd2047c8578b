#include "memlab/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

#include "memlab/kernels.hpp"

namespace memlab::ad {

Tensor::Tensor(std::size_t r, std::size_t c, std::vector<double> v)
    : rows(r), cols(c), values(std::move(v)) {
  if (values.size() != rows * cols) {
    std::ostringstream msg;
    msg << "tensor value count " << values.size() << " does not match shape [" << rows << " x "
        << cols << "]";
    throw ShapeError(msg.str());
  }
}

double Tensor::item() const {
  if (values.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(*this));
  return values[0];
}

std::string shape_string(const Tensor& t) {
  return "[" + std::to_string(t.rows) + " x " + std::to_string(t.cols) + "]";
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::AddRowwise: return "add_rowwise";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Softmax: return "softmax";
    case Op::CausalSoftmax: return "causal_softmax";
    case Op::LayerNorm: return "layer_norm";
    case Op::Gelu: return "gelu";
    case Op::Gather: return "embedding";
    case Op::SelectRows: return "select_rows";
    case Op::ReplaceRow: return "replace_row";
    case Op::CrossEntropy: return "cross_entropy";
    case Op::KlDivergence: return "kl_divergence";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape->value(id); }

void Gradients::set(NodeId id, Tensor g) {
  ids_.push_back(id);
  grads_.push_back(std::move(g));
}

const Tensor& Gradients::at(NodeId id) const {
  for (std::size_t i = 0; i < ids_.size(); ++i)
    if (ids_[i] == id) return grads_[i];
  throw ContractError("no gradient recorded for node " + std::to_string(id));
}

bool Gradients::contains(NodeId id) const {
  return std::find(ids_.begin(), ids_.end(), id) != ids_.end();
}

namespace {

void check_finite(const Tensor& t, const char* what) {
  for (double v : t.values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

Tensor transposed(const Tensor& a) {
  Tensor t(a.cols, a.rows);
  for (std::size_t r = 0; r < a.rows; ++r)
    for (std::size_t c = 0; c < a.cols; ++c) t(c, r) = a(r, c);
  return t;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.values.size(); ++i) dst.values[i] += src.values[i];
}

Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ContractError("variables live on different tapes");
  return *a.tape;
}

}  // namespace

Var Tape::leaf(Tensor value, bool requires_grad) {
  check_finite(value, "leaf input");
  Node n;
  n.op = Op::Leaf;
  n.requires_grad = requires_grad;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<NodeId>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  check_finite(value, "constant input");
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<NodeId>(nodes_.size() - 1)};
}

Var Tape::record(Node node) {
  for (std::uint8_t i = 0; i < node.n_inputs; ++i) {
    if (node.inputs[i] >= nodes_.size()) throw ContractError("input node recorded after consumer");
    node.requires_grad = node.requires_grad || nodes_[node.inputs[i]].requires_grad;
  }
  evaluate(node);
  check_finite(node.value, op_name(node.op));
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<NodeId>(nodes_.size() - 1)};
}

void Tape::evaluate(Node& n) const {
  auto in = [&](int i) -> const Tensor& { return nodes_[n.inputs[i]].value; };
  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      return;
    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      n.value = Tensor(a.rows, b.cols);
      kernels::matmul(a.values.data(), b.values.data(), n.value.values.data(), a.rows, a.cols,
                      b.cols);
      return;
    }
    case Op::Transpose:
      n.value = transposed(in(0));
      return;
    case Op::Add: {
      n.value = in(0);
      add_into(n.value, in(1));
      return;
    }
    case Op::AddRowwise: {
      n.value = in(0);
      const Tensor& row = in(1);
      for (std::size_t r = 0; r < n.value.rows; ++r) {
        double* dst = n.value.row(r);
        for (std::size_t c = 0; c < n.value.cols; ++c) dst[c] += row.values[c];
      }
      return;
    }
    case Op::Mul: {
      n.value = in(0);
      const Tensor& b = in(1);
      for (std::size_t i = 0; i < n.value.values.size(); ++i) n.value.values[i] *= b.values[i];
      return;
    }
    case Op::Scale: {
      n.value = in(0);
      for (double& v : n.value.values) v *= n.scalar;
      return;
    }
    case Op::Sum:
    case Op::Mean: {
      double total = 0.0;
      for (double v : in(0).values) total += v;
      if (n.op == Op::Mean) total /= static_cast<double>(in(0).values.size());
      n.value = Tensor::scalar(total);
      return;
    }
    case Op::Softmax: {
      const Tensor& a = in(0);
      n.value = Tensor(a.rows, a.cols);
      for (std::size_t r = 0; r < a.rows; ++r) kernels::softmax_row(a.row(r), n.value.row(r), a.cols);
      return;
    }
    case Op::CausalSoftmax: {
      const Tensor& a = in(0);
      n.value = Tensor(a.rows, a.cols);
      for (std::size_t r = 0; r < a.rows; ++r) kernels::softmax_row(a.row(r), n.value.row(r), r + 1);
      return;
    }
    case Op::LayerNorm: {
      const Tensor& x = in(0);
      const Tensor& gain = in(1);
      const Tensor& offset = in(2);
      n.value = Tensor(x.rows, x.cols);
      // saved: xhat (rows * cols) followed by rstd per row
      n.saved.assign(x.rows * x.cols + x.rows, 0.0);
      for (std::size_t r = 0; r < x.rows; ++r) {
        n.saved[x.rows * x.cols + r] =
            kernels::layer_norm_row(x.row(r), gain.values.data(), offset.values.data(),
                                    n.value.row(r), n.saved.data() + r * x.cols, x.cols,
                                    kernels::kLayerNormEps);
      }
      return;
    }
    case Op::Gelu: {
      n.value = in(0);
      for (double& v : n.value.values) v = kernels::gelu(v);
      return;
    }
    case Op::Gather: {
      const Tensor& table = in(0);
      n.value = Tensor(n.indices.size(), table.cols);
      for (std::size_t r = 0; r < n.indices.size(); ++r)
        std::copy_n(table.row(n.indices[r]), table.cols, n.value.row(r));
      return;
    }
    case Op::SelectRows: {
      const Tensor& a = in(0);
      n.value = Tensor(n.indices.size(), a.cols);
      for (std::size_t r = 0; r < n.indices.size(); ++r)
        std::copy_n(a.row(n.indices[r]), a.cols, n.value.row(r));
      return;
    }
    case Op::ReplaceRow: {
      n.value = in(0);
      std::copy(n.saved.begin(), n.saved.end(), n.value.row(n.indices[0]));
      return;
    }
    case Op::CrossEntropy: {
      const Tensor& logits = in(0);
      n.value = Tensor(logits.rows, 1);
      n.saved.assign(logits.values.size(), 0.0);
      for (std::size_t r = 0; r < logits.rows; ++r) {
        double* p = n.saved.data() + r * logits.cols;
        kernels::softmax_row(logits.row(r), p, logits.cols);
        const double lse = kernels::log_sum_exp(logits.row(r), logits.cols);
        n.value(r, 0) = lse - logits(r, n.indices[r]);
      }
      return;
    }
    case Op::KlDivergence: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t sz = a.values.size();
      n.value = Tensor(a.rows, 1);
      // saved: p, q, log p - log q
      n.saved.assign(3 * sz, 0.0);
      for (std::size_t r = 0; r < a.rows; ++r) {
        double* p = n.saved.data() + r * a.cols;
        double* q = n.saved.data() + sz + r * a.cols;
        double* diff = n.saved.data() + 2 * sz + r * a.cols;
        kernels::softmax_row(a.row(r), p, a.cols);
        kernels::softmax_row(b.row(r), q, a.cols);
        const double lse_a = kernels::log_sum_exp(a.row(r), a.cols);
        const double lse_b = kernels::log_sum_exp(b.row(r), a.cols);
        double total = 0.0;
        for (std::size_t c = 0; c < a.cols; ++c) {
          diff[c] = (a(r, c) - lse_a) - (b(r, c) - lse_b);
          total += p[c] * diff[c];
        }
        n.value(r, 0) = total;
      }
      return;
    }
  }
}

void Tape::accumulate(NodeId id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  if (!has_grad_[id]) {
    grads_[id] = g;
    has_grad_[id] = true;
  } else {
    add_into(grads_[id], g);
  }
}

void Tape::override_backward(Op op, BackwardOverride fn) { overrides_.emplace_back(op, std::move(fn)); }

Gradients Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("loss belongs to another tape");
  const Tensor& lv = value(loss.id);
  if (lv.values.size() != 1) throw ContractError("backward requires a scalar loss, got " + shape_string(lv));

  grads_.assign(nodes_.size(), Tensor());
  has_grad_.assign(nodes_.size(), false);
  if (nodes_[loss.id].requires_grad) {
    grads_[loss.id] = Tensor::scalar(1.0);
    has_grad_[loss.id] = true;
  }

  std::vector<Tensor> input_grads;
  for (std::size_t idx = loss.id + 1; idx-- > 0;) {
    const auto id = static_cast<NodeId>(idx);
    Node& n = nodes_[id];
    if (!has_grad_[id] || n.op == Op::Leaf || n.op == Op::Constant) continue;
    const Tensor& up = grads_[id];
    auto in = [&](int i) -> const Tensor& { return nodes_[n.inputs[i]].value; };
    auto wants = [&](int i) { return nodes_[n.inputs[i]].requires_grad; };
    input_grads.assign(n.n_inputs, Tensor());

    bool overridden = false;
    for (const auto& [op, fn] : overrides_) {
      if (op == n.op) {
        fn(*this, id, up, input_grads);
        overridden = true;
        break;
      }
    }

    if (!overridden) {
      switch (n.op) {
        case Op::Leaf:
        case Op::Constant:
          break;
        case Op::MatMul: {
          const Tensor& a = in(0);
          const Tensor& b = in(1);
          if (wants(0)) {
            const Tensor bt = transposed(b);
            input_grads[0] = Tensor(a.rows, a.cols);
            kernels::matmul(up.values.data(), bt.values.data(), input_grads[0].values.data(),
                            a.rows, b.cols, a.cols);
          }
          if (wants(1)) {
            const Tensor at = transposed(a);
            input_grads[1] = Tensor(b.rows, b.cols);
            kernels::matmul(at.values.data(), up.values.data(), input_grads[1].values.data(),
                            b.rows, a.rows, b.cols);
          }
          break;
        }
        case Op::Transpose:
          input_grads[0] = transposed(up);
          break;
        case Op::Add:
          input_grads[0] = up;
          input_grads[1] = up;
          break;
        case Op::AddRowwise: {
          input_grads[0] = up;
          if (wants(1)) {
            Tensor g(1, up.cols);
            for (std::size_t r = 0; r < up.rows; ++r)
              for (std::size_t c = 0; c < up.cols; ++c) g.values[c] += up(r, c);
            input_grads[1] = std::move(g);
          }
          break;
        }
        case Op::Mul: {
          if (wants(0)) {
            input_grads[0] = up;
            for (std::size_t i = 0; i < up.values.size(); ++i) input_grads[0].values[i] *= in(1).values[i];
          }
          if (wants(1)) {
            input_grads[1] = up;
            for (std::size_t i = 0; i < up.values.size(); ++i) input_grads[1].values[i] *= in(0).values[i];
          }
          break;
        }
        case Op::Scale:
          input_grads[0] = up;
          for (double& v : input_grads[0].values) v *= n.scalar;
          break;
        case Op::Sum:
        case Op::Mean: {
          const Tensor& a = in(0);
          double g = up.item();
          if (n.op == Op::Mean) g /= static_cast<double>(a.values.size());
          input_grads[0] = Tensor(a.rows, a.cols, g);
          break;
        }
        case Op::Softmax:
        case Op::CausalSoftmax: {
          const Tensor& y = n.value;
          Tensor g(y.rows, y.cols);
          for (std::size_t r = 0; r < y.rows; ++r) {
            const std::size_t len = n.op == Op::CausalSoftmax ? r + 1 : y.cols;
            double inner = 0.0;
            for (std::size_t c = 0; c < len; ++c) inner += y(r, c) * up(r, c);
            for (std::size_t c = 0; c < len; ++c) g(r, c) = y(r, c) * (up(r, c) - inner);
          }
          input_grads[0] = std::move(g);
          break;
        }
        case Op::LayerNorm: {
          const Tensor& x = in(0);
          const Tensor& gain = in(1);
          const std::size_t d = x.cols;
          const double* xhat = n.saved.data();
          const double* rstd = n.saved.data() + x.rows * d;
          if (wants(0)) {
            Tensor g(x.rows, d);
            std::vector<double> dxhat(d);
            for (std::size_t r = 0; r < x.rows; ++r) {
              double mean_d = 0.0;
              double mean_dx = 0.0;
              for (std::size_t c = 0; c < d; ++c) {
                dxhat[c] = up(r, c) * gain.values[c];
                mean_d += dxhat[c];
                mean_dx += dxhat[c] * xhat[r * d + c];
              }
              mean_d /= static_cast<double>(d);
              mean_dx /= static_cast<double>(d);
              for (std::size_t c = 0; c < d; ++c)
                g(r, c) = rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
            }
            input_grads[0] = std::move(g);
          }
          if (wants(1) || wants(2)) {
            Tensor gg(1, d);
            Tensor go(1, d);
            for (std::size_t r = 0; r < x.rows; ++r) {
              for (std::size_t c = 0; c < d; ++c) {
                gg.values[c] += up(r, c) * xhat[r * d + c];
                go.values[c] += up(r, c);
              }
            }
            input_grads[1] = std::move(gg);
            input_grads[2] = std::move(go);
          }
          break;
        }
        case Op::Gelu: {
          const Tensor& x = in(0);
          input_grads[0] = up;
          for (std::size_t i = 0; i < x.values.size(); ++i)
            input_grads[0].values[i] *= kernels::gelu_derivative(x.values[i]);
          break;
        }
        case Op::Gather: {
          const Tensor& table = in(0);
          Tensor g(table.rows, table.cols);
          for (std::size_t r = 0; r < n.indices.size(); ++r) {
            double* dst = g.row(n.indices[r]);
            for (std::size_t c = 0; c < table.cols; ++c) dst[c] += up(r, c);
          }
          input_grads[0] = std::move(g);
          break;
        }
        case Op::SelectRows: {
          const Tensor& a = in(0);
          Tensor g(a.rows, a.cols);
          for (std::size_t r = 0; r < n.indices.size(); ++r) {
            double* dst = g.row(n.indices[r]);
            for (std::size_t c = 0; c < a.cols; ++c) dst[c] += up(r, c);
          }
          input_grads[0] = std::move(g);
          break;
        }
        case Op::ReplaceRow: {
          input_grads[0] = up;
          std::fill_n(input_grads[0].row(n.indices[0]), up.cols, 0.0);
          break;
        }
        case Op::CrossEntropy: {
          const Tensor& logits = in(0);
          Tensor g(logits.rows, logits.cols);
          for (std::size_t r = 0; r < logits.rows; ++r) {
            const double u = up(r, 0);
            const double* p = n.saved.data() + r * logits.cols;
            for (std::size_t c = 0; c < logits.cols; ++c) g(r, c) = u * p[c];
            g(r, n.indices[r]) -= u;
          }
          input_grads[0] = std::move(g);
          break;
        }
        case Op::KlDivergence: {
          const Tensor& a = in(0);
          const std::size_t sz = a.values.size();
          const double* p = n.saved.data();
          const double* q = n.saved.data() + sz;
          const double* diff = n.saved.data() + 2 * sz;
          if (wants(0)) {
            Tensor g(a.rows, a.cols);
            for (std::size_t r = 0; r < a.rows; ++r) {
              const double u = up(r, 0);
              const double kl = n.value(r, 0);
              for (std::size_t c = 0; c < a.cols; ++c) {
                const std::size_t i = r * a.cols + c;
                g.values[i] = u * p[i] * (diff[i] - kl);
              }
            }
            input_grads[0] = std::move(g);
          }
          if (wants(1)) {
            Tensor g(a.rows, a.cols);
            for (std::size_t r = 0; r < a.rows; ++r) {
              const double u = up(r, 0);
              for (std::size_t c = 0; c < a.cols; ++c) {
                const std::size_t i = r * a.cols + c;
                g.values[i] = u * (q[i] - p[i]);
              }
            }
            input_grads[1] = std::move(g);
          }
          break;
        }
      }
    }

    for (std::uint8_t i = 0; i < n.n_inputs; ++i) {
      if (!input_grads[i].values.empty()) accumulate(n.inputs[i], input_grads[i]);
    }
  }

  Gradients out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op != Op::Leaf || !n.requires_grad) continue;
    if (has_grad_[id]) {
      out.set(static_cast<NodeId>(id), grads_[id]);
    } else {
      out.set(static_cast<NodeId>(id), Tensor(n.value.rows, n.value.cols));
    }
  }
  return out;
}

const Tensor* Tape::grad(NodeId id) const {
  if (id >= has_grad_.size() || !has_grad_[id]) return nullptr;
  return &grads_[id];
}

bool Tape::replay_matches() const {
  for (const Node& n : nodes_) {
    if (n.op == Op::Leaf || n.op == Op::Constant) continue;
    Node copy;
    copy.op = n.op;
    copy.inputs = n.inputs;
    copy.n_inputs = n.n_inputs;
    copy.scalar = n.scalar;
    copy.indices = n.indices;
    if (n.op == Op::ReplaceRow) copy.saved = n.saved;
    evaluate(copy);
    if (copy.value.rows != n.value.rows || copy.value.cols != n.value.cols) return false;
    for (std::size_t i = 0; i < n.value.values.size(); ++i) {
      if (std::bit_cast<std::uint64_t>(copy.value.values[i]) !=
          std::bit_cast<std::uint64_t>(n.value.values[i]))
        return false;
    }
  }
  return true;
}

// --- primitives -------------------------------------------------------------

namespace {

Tape::Node make_node(Op op, std::initializer_list<NodeId> inputs) {
  Tape::Node n;
  n.op = op;
  std::uint8_t i = 0;
  for (NodeId id : inputs) n.inputs[i++] = id;
  n.n_inputs = i;
  return n;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.value().cols != b.value().rows) shape_mismatch("matmul", a.value(), b.value());
  return t.record(make_node(Op::MatMul, {a.id, b.id}));
}

Var transpose(Var a) { return a.tape->record(make_node(Op::Transpose, {a.id})); }

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.value().shape() != b.value().shape()) shape_mismatch("add", a.value(), b.value());
  return t.record(make_node(Op::Add, {a.id, b.id}));
}

Var add_rowwise(Var a, Var row) {
  Tape& t = same_tape(a, row);
  if (row.value().rows != 1 || row.value().cols != a.value().cols)
    shape_mismatch("add_rowwise", a.value(), row.value());
  return t.record(make_node(Op::AddRowwise, {a.id, row.id}));
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.value().shape() != b.value().shape()) shape_mismatch("mul", a.value(), b.value());
  return t.record(make_node(Op::Mul, {a.id, b.id}));
}

Var scale(Var a, double c) {
  if (!std::isfinite(c)) throw NumericError("scale factor is not finite");
  auto n = make_node(Op::Scale, {a.id});
  n.scalar = c;
  return a.tape->record(std::move(n));
}

Var sum(Var a) { return a.tape->record(make_node(Op::Sum, {a.id})); }

Var mean(Var a) {
  if (a.value().values.empty()) throw ShapeError("mean of empty tensor " + shape_string(a.value()));
  return a.tape->record(make_node(Op::Mean, {a.id}));
}

Var softmax(Var a) {
  if (a.value().cols == 0) throw ShapeError("softmax over empty rows " + shape_string(a.value()));
  return a.tape->record(make_node(Op::Softmax, {a.id}));
}

Var causal_softmax(Var a) {
  if (a.value().rows != a.value().cols) throw ShapeError("causal_softmax needs a square input, got " + shape_string(a.value()));
  return a.tape->record(make_node(Op::CausalSoftmax, {a.id}));
}

Var layer_norm(Var x, Var gain, Var offset) {
  Tape& t = same_tape(x, gain);
  same_tape(x, offset);
  const std::size_t d = x.value().cols;
  if (gain.value().rows != 1 || gain.value().cols != d) shape_mismatch("layer_norm", x.value(), gain.value());
  if (offset.value().rows != 1 || offset.value().cols != d)
    shape_mismatch("layer_norm", x.value(), offset.value());
  return t.record(make_node(Op::LayerNorm, {x.id, gain.id, offset.id}));
}

Var gelu(Var a) { return a.tape->record(make_node(Op::Gelu, {a.id})); }

Var embedding(Var table, std::span<const int> ids) {
  auto n = make_node(Op::Gather, {table.id});
  n.indices.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.value().rows)
      throw InputError("token id " + std::to_string(id) + " outside table of " +
                       std::to_string(table.value().rows) + " rows");
    n.indices.push_back(static_cast<std::size_t>(id));
  }
  return table.tape->record(std::move(n));
}

Var select_rows(Var a, std::span<const std::size_t> rows) {
  auto n = make_node(Op::SelectRows, {a.id});
  for (std::size_t r : rows) {
    if (r >= a.value().rows)
      throw ShapeError("select_rows: row " + std::to_string(r) + " outside " + shape_string(a.value()));
  }
  n.indices.assign(rows.begin(), rows.end());
  return a.tape->record(std::move(n));
}

Var replace_row(Var a, std::size_t r, std::span<const double> values) {
  if (r >= a.value().rows || values.size() != a.value().cols) {
    throw ShapeError("replace_row: row " + std::to_string(r) + " with " + std::to_string(values.size()) +
                     " values does not fit " + shape_string(a.value()));
  }
  for (double v : values)
    if (!std::isfinite(v)) throw NumericError("replace_row: non-finite replacement value");
  auto n = make_node(Op::ReplaceRow, {a.id});
  n.indices = {r};
  n.saved.assign(values.begin(), values.end());
  return a.tape->record(std::move(n));
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor& l = logits.value();
  if (targets.size() != l.rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(l));
  }
  auto n = make_node(Op::CrossEntropy, {logits.id});
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= l.cols)
      throw InputError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(l.cols));
    n.indices.push_back(static_cast<std::size_t>(t));
  }
  return logits.tape->record(std::move(n));
}

Var kl_divergence(Var p_logits, Var q_logits) {
  Tape& t = same_tape(p_logits, q_logits);
  if (p_logits.value().shape() != q_logits.value().shape())
    shape_mismatch("kl_divergence", p_logits.value(), q_logits.value());
  return t.record(make_node(Op::KlDivergence, {p_logits.id, q_logits.id}));
}

}  // namespace memlab::ad
