#include "memlab/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "memlab/error.hpp"
#include "memlab/parallel.hpp"
#include "memlab/rng.hpp"
#include "memlab/train.hpp"

namespace memlab {

GradientStore::GradientStore(const ModelConfig& config) : layout_(config), values_(layout_.total_size(), 0.0) {}

GradientStore::GradientStore(const ModelConfig& config, std::span<const double> flat) : GradientStore(config) {
  if (flat.size() != values_.size())
    throw ShapeError("gradient of size " + std::to_string(flat.size()) + " does not match parameter count " +
                     std::to_string(values_.size()));
  for (std::size_t i = 0; i < layout_.slots().size(); ++i) {
    if (excluded(i)) continue;
    const ParamSlot& s = layout_.slot(i);
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(),
                values_.begin() + static_cast<std::ptrdiff_t>(s.offset));
  }
}

std::span<const double> GradientStore::slot(std::size_t i) const {
  if (excluded(i)) throw ContractError("slot " + layout_.slot(i).name + " is excluded from attribution");
  const ParamSlot& s = layout_.slot(i);
  return std::span<const double>(values_).subspan(s.offset, s.size());
}

std::span<double> GradientStore::mutable_slot(std::size_t i) {
  if (excluded(i)) throw ContractError("slot " + layout_.slot(i).name + " is excluded from attribution");
  const ParamSlot& s = layout_.slot(i);
  return std::span<double>(values_).subspan(s.offset, s.size());
}

std::span<const double> GradientStore::component(const ComponentId& id) const {
  return slot(layout_.component_slot(id));
}

std::vector<std::size_t> GradientStore::eligible_coordinates() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layout_.slots().size(); ++i) {
    if (excluded(i)) continue;
    const ParamSlot& s = layout_.slot(i);
    for (std::size_t k = 0; k < s.size(); ++k) out.push_back(s.offset + k);
  }
  return out;
}

GradientStore& GradientStore::operator+=(const GradientStore& other) {
  if (!(layout_.config() == other.layout_.config())) throw ShapeError("adding gradient stores of different models");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

GradientStore& GradientStore::operator*=(double c) {
  for (double& v : values_) v *= c;
  return *this;
}

std::vector<double> AttributionMap::layer_fractions() const {
  std::vector<double> out(n_layers, 0.0);
  double total = 0.0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t c = 0; c < n_components; ++c) out[l] += at(l, c);
    total += out[l];
  }
  if (total > 0.0)
    for (double& v : out) v /= total;
  return out;
}

AttributionMap pool_attribution(const GradientStore& store) {
  const ModelConfig& config = store.layout().config();
  AttributionMap map;
  map.n_layers = config.n_layers;
  map.n_components = config.components_per_layer();
  for (const ComponentId& id : all_components(config)) {
    double best = 0.0;
    for (double g : store.component(id)) best = std::max(best, std::abs(g));
    map.scores.push_back(best);
  }
  return map;
}

GradientStore nll_param_gradients(const Parameters& params, const std::vector<std::span<const int>>& batch,
                                  std::size_t prefix_len, std::size_t threads) {
  const auto flat = batch_gradient(params, batch, prefix_len, nullptr, threads, GradPolicy::ComponentsOnly);
  return GradientStore(params.config(), flat);
}

const char* kl_direction_name(KlDirection d) {
  return d == KlDirection::CurrentFirst ? "current_first" : "original_first";
}

namespace {

std::vector<std::size_t> continuation_rows(std::size_t prefix_len, std::size_t length) {
  std::vector<std::size_t> rows;
  for (std::size_t i = prefix_len - 1; i + 1 < length; ++i) rows.push_back(i);
  return rows;
}

ad::Var objective(const BoundParameters& bound, const std::vector<std::span<const int>>& targets,
                  const std::vector<const ControlSequence*>& controls, const ContrastSpec& spec, ad::Var* nll_out,
                  ad::Var* kl_out) {
  if (targets.empty()) throw ContractError("contrastive objective needs at least one target paragraph");
  ad::Tape& tape = *bound.slots.front().tape;
  std::optional<ad::Var> nll;
  for (const auto& t : targets) {
    ad::Var term = sequence_nll(bound, t, spec.prefix_len);
    nll = nll ? ad::add(*nll, term) : term;
  }
  ad::Var nll_mean = ad::scale(*nll, 1.0 / static_cast<double>(targets.size()));

  ad::Var kl = tape.constant(ad::Tensor::scalar(0.0));
  if (!controls.empty()) {
    std::optional<ad::Var> total;
    for (const ControlSequence* c : controls) {
      ForwardOptions options;
      options.logit_rows = continuation_rows(spec.prefix_len, c->tokens.size());
      const TapedForward fwd = forward_taped(bound, c->tokens, options);
      ad::Var original = tape.constant(c->original_logits);
      ad::Var rows = spec.direction == KlDirection::CurrentFirst ? ad::kl_divergence(fwd.logits, original)
                                                                 : ad::kl_divergence(original, fwd.logits);
      ad::Var term = ad::mean(rows);
      total = total ? ad::add(*total, term) : term;
    }
    kl = ad::scale(*total, 1.0 / static_cast<double>(controls.size()));
  }
  *nll_out = nll_mean;
  *kl_out = kl;
  return ad::add(ad::scale(nll_mean, spec.nll_sign), kl);
}

}  // namespace

ControlSequence make_control(const Parameters& original, const Corpus& corpus, std::size_t id) {
  const std::size_t prefix_len = corpus.config().prefix_len;
  ControlSequence c;
  c.paragraph_id = id;
  const auto prefix = corpus.prefix(id);
  c.tokens.assign(prefix.begin(), prefix.end());
  const auto cont = greedy_decode(original, prefix, corpus.config().continuation_len);
  c.tokens.insert(c.tokens.end(), cont.begin(), cont.end());
  ad::Tape tape;
  const BoundParameters bound = bind(tape, original, GradPolicy::None);
  ForwardOptions options;
  options.logit_rows = continuation_rows(prefix_len, c.tokens.size());
  c.original_logits = forward_taped(bound, c.tokens, options).logits.value();
  return c;
}

std::vector<ControlSequence> make_controls(const Parameters& original, const Corpus& corpus,
                                           const std::vector<std::size_t>& ids, std::size_t threads) {
  std::vector<ControlSequence> out(ids.size());
  parallel_for(ids.size(), threads, [&](std::size_t i) { out[i] = make_control(original, corpus, ids[i]); });
  return out;
}

ContrastResult contrastive_gradient(const Parameters& params, const std::vector<std::span<const int>>& targets,
                                    const std::vector<const ControlSequence*>& controls, const ContrastSpec& spec) {
  ad::Tape tape;
  const BoundParameters bound = bind(tape, params, GradPolicy::ComponentsOnly);
  ad::Var nll, kl;
  ad::Var value = objective(bound, targets, controls, spec, &nll, &kl);
  ContrastResult r{GradientStore(params.config(), gather_gradients(bound, tape.backward(value)))};
  r.value = value.value().item();
  r.nll = nll.value().item();
  r.kl = kl.value().item();
  return r;
}

double contrastive_value(const Parameters& params, const std::vector<std::span<const int>>& targets,
                         const std::vector<const ControlSequence*>& controls, const ContrastSpec& spec) {
  ad::Tape tape;
  const BoundParameters bound = bind(tape, params, GradPolicy::None);
  ad::Var nll, kl;
  return objective(bound, targets, controls, spec, &nll, &kl).value().item();
}

std::vector<std::size_t> sample_controls(const std::vector<std::size_t>& pool, std::size_t n, std::uint64_t seed,
                                         std::uint64_t key) {
  std::vector<std::size_t> order = pool;
  Rng rng = Rng::derive(seed, key);
  const std::size_t take = std::min(n, order.size());
  for (std::size_t i = 0; i < take; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
  order.resize(take);
  return order;
}

AggregateResult aggregate_contrastive(const Parameters& params, const std::vector<std::vector<int>>& targets,
                                      const std::vector<std::size_t>& target_keys,
                                      const std::vector<ControlSequence>& control_pool, std::size_t batch_size,
                                      std::uint64_t seed, const ContrastSpec& spec, std::size_t threads) {
  if (targets.empty()) throw ContractError("aggregate_contrastive needs at least one target");
  if (targets.size() != target_keys.size()) throw ContractError("one key per target required");
  std::vector<std::size_t> pool(control_pool.size());
  std::iota(pool.begin(), pool.end(), 0);

  std::vector<ContrastResult> parts(targets.size(), ContrastResult{GradientStore(params.config())});
  parallel_for(targets.size(), threads, [&](std::size_t k) {
    std::vector<const ControlSequence*> controls;
    for (std::size_t i : sample_controls(pool, batch_size, seed, target_keys[k])) controls.push_back(&control_pool[i]);
    parts[k] = contrastive_gradient(params, {std::span<const int>(targets[k])}, controls, spec);
  });

  // Reduce in key order so the result does not depend on the input order.
  std::vector<std::size_t> order(targets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return target_keys[a] < target_keys[b]; });
  AggregateResult out{GradientStore(params.config()), {}, 0.0};
  for (std::size_t k : order) {
    out.total += parts[k].grads;
    out.objective_sum += parts[k].value;
  }
  out.map = pool_attribution(out.total);
  return out;
}

ActivationAttribution activation_gradients(const Parameters& params, const std::vector<std::span<const int>>& batch,
                                           std::size_t prefix_len, std::size_t threads) {
  if (batch.empty()) throw ContractError("activation_gradients needs a non-empty batch");
  const ModelConfig& config = params.config();
  const std::size_t n_positions = batch.front().size();
  for (const auto& t : batch)
    if (t.size() != n_positions) throw ContractError("activation_gradients needs equal paragraph lengths");
  const auto components = all_components(config);

  std::vector<std::vector<double>> per(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t n) {
    ad::Tape tape;
    const BoundParameters bound = bind(tape, params, GradPolicy::ComponentsOnly);
    ForwardOptions options;
    options.logit_rows = continuation_rows(prefix_len, n_positions);
    const TapedForward fwd = forward_taped(bound, batch[n], options);
    ad::Var loss = ad::mean(ad::cross_entropy(fwd.logits, batch[n].subspan(prefix_len)));
    tape.backward(loss);
    std::vector<double>& scores = per[n];
    scores.assign(components.size() * n_positions, 0.0);
    for (std::size_t k = 0; k < components.size(); ++k) {
      const ad::Tensor* g = tape.grad(fwd.site_nodes[site_index(config, site_for(components[k]))]);
      if (!g) continue;
      for (std::size_t i = 0; i < n_positions; ++i) {
        double best = 0.0;
        for (std::size_t d = 0; d < g->cols; ++d) best = std::max(best, std::abs((*g)(i, d)));
        scores[k * n_positions + i] = best;
      }
    }
  });

  ActivationAttribution out;
  out.n_layers = config.n_layers;
  out.n_components = config.components_per_layer();
  out.n_positions = n_positions;
  out.scores.assign(components.size() * n_positions, 0.0);
  for (const auto& s : per)
    for (std::size_t i = 0; i < s.size(); ++i) out.scores[i] += s[i];
  for (double& v : out.scores) v /= static_cast<double>(batch.size());
  return out;
}

}  // namespace memlab
