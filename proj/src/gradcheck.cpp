#include "memlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "memlab/rng.hpp"

namespace memlab::ad {
namespace {

struct Case {
  std::vector<Tensor> inputs;
  std::function<Var(std::vector<Var>&)> build;
};

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double spread = 1.0) {
  Tensor t(r, c);
  for (double& v : t.values) v = spread * (2.0 * rng.uniform() - 1.0);
  return t;
}

Case make_case(Op op, Rng& rng, std::size_t n, std::size_t k, std::size_t m) {
  Case c;
  switch (op) {
    case Op::MatMul:
      c.inputs = {random_tensor(rng, n, k), random_tensor(rng, k, m)};
      c.build = [](std::vector<Var>& v) { return matmul(v[0], v[1]); };
      break;
    case Op::Transpose:
      c.inputs = {random_tensor(rng, n, k)};
      c.build = [](std::vector<Var>& v) { return transpose(v[0]); };
      break;
    case Op::Add:
      c.inputs = {random_tensor(rng, n, k), random_tensor(rng, n, k)};
      c.build = [](std::vector<Var>& v) { return add(v[0], v[1]); };
      break;
    case Op::AddRowwise:
      c.inputs = {random_tensor(rng, n, k), random_tensor(rng, 1, k)};
      c.build = [](std::vector<Var>& v) { return add_rowwise(v[0], v[1]); };
      break;
    case Op::Mul:
      c.inputs = {random_tensor(rng, n, k), random_tensor(rng, n, k)};
      c.build = [](std::vector<Var>& v) { return mul(v[0], v[1]); };
      break;
    case Op::Scale:
      c.inputs = {random_tensor(rng, n, k)};
      c.build = [](std::vector<Var>& v) { return scale(v[0], -1.7); };
      break;
    case Op::Sum:
      c.inputs = {random_tensor(rng, n, k)};
      c.build = [](std::vector<Var>& v) { return sum(v[0]); };
      break;
    case Op::Mean:
      c.inputs = {random_tensor(rng, n, k)};
      c.build = [](std::vector<Var>& v) { return mean(v[0]); };
      break;
    case Op::Softmax:
      c.inputs = {random_tensor(rng, n, k, 2.0)};
      c.build = [](std::vector<Var>& v) { return softmax(v[0]); };
      break;
    case Op::CausalSoftmax:
      c.inputs = {random_tensor(rng, n, n, 2.0)};
      c.build = [](std::vector<Var>& v) { return causal_softmax(v[0]); };
      break;
    case Op::LayerNorm: {
      const std::size_t d = std::max<std::size_t>(k, 2);
      Tensor gain = random_tensor(rng, 1, d);
      for (double& g : gain.values) g += 1.5;
      c.inputs = {random_tensor(rng, n, d, 2.0), gain, random_tensor(rng, 1, d)};
      c.build = [](std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); };
      break;
    }
    case Op::Gelu:
      c.inputs = {random_tensor(rng, n, k, 3.0)};
      c.build = [](std::vector<Var>& v) { return gelu(v[0]); };
      break;
    case Op::Gather: {
      const std::size_t vocab = n + 2;
      std::vector<int> ids(n);
      for (int& id : ids) id = static_cast<int>(rng.below(vocab));
      c.inputs = {random_tensor(rng, vocab, k)};
      c.build = [ids](std::vector<Var>& v) { return embedding(v[0], ids); };
      break;
    }
    case Op::SelectRows: {
      std::vector<std::size_t> rows(m);
      for (auto& r : rows) r = rng.below(n);
      c.inputs = {random_tensor(rng, n, k)};
      c.build = [rows](std::vector<Var>& v) { return select_rows(v[0], rows); };
      break;
    }
    case Op::ReplaceRow: {
      const std::size_t r = rng.below(n);
      std::vector<double> row(k);
      for (double& x : row) x = rng.uniform();
      c.inputs = {random_tensor(rng, n, k)};
      c.build = [r, row](std::vector<Var>& v) { return replace_row(v[0], r, row); };
      break;
    }
    case Op::CrossEntropy: {
      std::vector<int> targets(n);
      for (int& t : targets) t = static_cast<int>(rng.below(k));
      c.inputs = {random_tensor(rng, n, k, 2.0)};
      c.build = [targets](std::vector<Var>& v) { return cross_entropy(v[0], targets); };
      break;
    }
    case Op::KlDivergence:
      c.inputs = {random_tensor(rng, n, k, 2.0), random_tensor(rng, n, k, 2.0)};
      c.build = [](std::vector<Var>& v) { return kl_divergence(v[0], v[1]); };
      break;
    case Op::Leaf:
    case Op::Constant:
      throw ContractError("gradcheck: leaf/constant are not primitives");
  }
  return c;
}

// loss = sum(f(inputs) * weights); weights fixed per case.
double loss_value(const Case& c, const std::vector<Tensor>& inputs, const Tensor& weights) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  Var out = c.build(vars);
  return sum(mul(out, tape.constant(weights))).value().item();
}

}  // namespace

bool GradcheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.passed; });
}

std::vector<Op> differentiable_primitives() {
  return {Op::MatMul,     Op::Transpose,  Op::Add,         Op::AddRowwise,    Op::Mul,
          Op::Scale,      Op::Sum,        Op::Mean,        Op::Softmax,       Op::CausalSoftmax,
          Op::LayerNorm,  Op::Gelu,       Op::Gather,      Op::SelectRows,    Op::ReplaceRow,
          Op::CrossEntropy, Op::KlDivergence};
}

GradcheckEntry gradcheck(Op op, std::uint64_t seed, const GradcheckOptions& options) {
  Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(op));
  std::size_t n, k, m;
  if (options.dims) {
    std::tie(n, k, m) = std::tuple((*options.dims)[0], (*options.dims)[1], (*options.dims)[2]);
  } else {
    n = 1 + rng.below(options.max_dim);
    k = 1 + rng.below(options.max_dim);
    m = 1 + rng.below(options.max_dim);
  }
  const Case c = make_case(op, rng, n, k, m);

  Tape tape;
  if (options.backward_override) tape.override_backward(options.backward_override->first, options.backward_override->second);
  std::vector<Var> vars;
  for (const Tensor& t : c.inputs) vars.push_back(tape.leaf(t));
  Var out = c.build(vars);
  const Tensor weights = random_tensor(rng, out.rows(), out.cols());
  Var loss = sum(mul(out, tape.constant(weights)));
  const Gradients grads = tape.backward(loss);

  GradcheckEntry entry;
  entry.primitive = op_name(op);
  constexpr double kFloor = 1e-6;
  std::vector<Tensor> probe = c.inputs;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    const Tensor& analytic = grads.at(vars[i].id);
    for (std::size_t e = 0; e < probe[i].values.size(); ++e) {
      const double x0 = probe[i].values[e];
      probe[i].values[e] = x0 + options.step;
      const double up = loss_value(c, probe, weights);
      probe[i].values[e] = x0 - options.step;
      const double down = loss_value(c, probe, weights);
      probe[i].values[e] = x0;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic.values[e];
      const double denom = std::max({std::abs(a), std::abs(numeric), kFloor});
      entry.max_relative_error = std::max(entry.max_relative_error, std::abs(a - numeric) / denom);
      ++entry.n_checked;
    }
  }
  entry.passed = entry.max_relative_error < options.tolerance;
  return entry;
}

GradcheckReport gradcheck_all(std::uint64_t seed, const GradcheckOptions& options) {
  GradcheckReport report;
  report.tolerance = options.tolerance;
  for (Op op : differentiable_primitives()) report.entries.push_back(gradcheck(op, seed, options));
  return report;
}

}  // namespace memlab::ad
