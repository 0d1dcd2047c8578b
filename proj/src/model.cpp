#include "memlab/model.hpp"

#include <algorithm>
#include <cmath>

#include "memlab/error.hpp"
#include "memlab/rng.hpp"

namespace memlab {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_mlp < 1 || vocab_size < 1 ||
      max_seq_len < 1)
    throw ConfigError("model dimensions must all be >= 1");
  if (d_model != n_heads * d_head) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must equal n_heads * d_head (" +
                      std::to_string(n_heads) + " * " + std::to_string(d_head) + ")");
  }
}

std::string ComponentId::label() const {
  switch (kind) {
    case ComponentKind::Key: return "W_K H" + std::to_string(head);
    case ComponentKind::Query: return "W_Q H" + std::to_string(head);
    case ComponentKind::Value: return "W_V H" + std::to_string(head);
    case ComponentKind::Output: return "W_O H" + std::to_string(head);
    case ComponentKind::MlpIn: return "W_in";
    case ComponentKind::MlpOut: return "W_out";
  }
  return "?";
}

std::size_t component_index(const ModelConfig& config, const ComponentId& id) {
  const std::size_t h = config.n_heads;
  switch (id.kind) {
    case ComponentKind::Key: return id.head;
    case ComponentKind::Query: return h + id.head;
    case ComponentKind::Value: return 2 * h + id.head;
    case ComponentKind::Output: return 3 * h + id.head;
    case ComponentKind::MlpIn: return 4 * h;
    case ComponentKind::MlpOut: return 4 * h + 1;
  }
  return 0;
}

ComponentId component_at(const ModelConfig& config, std::size_t layer, std::size_t index) {
  const std::size_t h = config.n_heads;
  if (index >= config.components_per_layer()) throw ContractError("component index out of range");
  if (index == 4 * h) return {layer, ComponentKind::MlpIn, 0};
  if (index == 4 * h + 1) return {layer, ComponentKind::MlpOut, 0};
  return {layer, static_cast<ComponentKind>(index / h), index % h};
}

std::vector<ComponentId> all_components(const ModelConfig& config) {
  std::vector<ComponentId> out;
  out.reserve(config.n_layers * config.components_per_layer());
  for (std::size_t l = 0; l < config.n_layers; ++l)
    for (std::size_t c = 0; c < config.components_per_layer(); ++c) out.push_back(component_at(config, l, c));
  return out;
}

// --- layout --------------------------------------------------------------------

std::size_t ParamLayout::add(std::string name, SlotRole role, std::size_t rows, std::size_t cols,
                             std::optional<ComponentId> component) {
  ParamSlot s;
  s.name = std::move(name);
  s.role = role;
  s.component = component;
  s.offset = total_;
  s.rows = rows;
  s.cols = cols;
  total_ += rows * cols;
  slots_.push_back(std::move(s));
  return slots_.size() - 1;
}

ParamLayout::ParamLayout(const ModelConfig& config) : config_(config) {
  config.validate();
  const std::size_t d = config.d_model, dh = config.d_head, h = config.n_heads;
  token_embed = add("embed", SlotRole::TokenEmbed, config.vocab_size, d);
  pos_embed = add("pos_embed", SlotRole::PosEmbed, config.max_seq_len, d);
  component_slots_.resize(config.n_layers * config.components_per_layer());
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    LayerSlots ls;
    ls.ln1_gain = add(p + "ln1.w", SlotRole::LayerNormGain, 1, d);
    ls.ln1_offset = add(p + "ln1.b", SlotRole::LayerNormOffset, 1, d);
    for (std::size_t c = 0; c < config.components_per_layer(); ++c) {
      const ComponentId id = component_at(config, l, c);
      std::size_t rows = d, cols = dh;
      if (id.kind == ComponentKind::Output) std::tie(rows, cols) = std::pair(dh, d);
      if (id.kind == ComponentKind::MlpIn) std::tie(rows, cols) = std::pair(d, config.d_mlp);
      if (id.kind == ComponentKind::MlpOut) std::tie(rows, cols) = std::pair(config.d_mlp, d);
      const std::size_t s = add(p + id.label(), SlotRole::Component, rows, cols, id);
      component_slots_[l * config.components_per_layer() + c] = s;
      switch (id.kind) {
        case ComponentKind::Key: ls.key.push_back(s); break;
        case ComponentKind::Query: ls.query.push_back(s); break;
        case ComponentKind::Value: ls.value.push_back(s); break;
        case ComponentKind::Output: ls.output.push_back(s); break;
        case ComponentKind::MlpIn: ls.mlp_in = s; break;
        case ComponentKind::MlpOut: ls.mlp_out = s; break;
      }
    }
    for (std::size_t i = 0; i < h; ++i) ls.key_bias.push_back(add(p + "b_K H" + std::to_string(i), SlotRole::Bias, 1, dh));
    for (std::size_t i = 0; i < h; ++i) ls.query_bias.push_back(add(p + "b_Q H" + std::to_string(i), SlotRole::Bias, 1, dh));
    for (std::size_t i = 0; i < h; ++i) ls.value_bias.push_back(add(p + "b_V H" + std::to_string(i), SlotRole::Bias, 1, dh));
    ls.output_bias = add(p + "b_O", SlotRole::Bias, 1, d);
    ls.mlp_in_bias = add(p + "b_in", SlotRole::Bias, 1, config.d_mlp);
    ls.mlp_out_bias = add(p + "b_out", SlotRole::Bias, 1, d);
    ls.ln2_gain = add(p + "ln2.w", SlotRole::LayerNormGain, 1, d);
    ls.ln2_offset = add(p + "ln2.b", SlotRole::LayerNormOffset, 1, d);
    layers_.push_back(std::move(ls));
  }
  final_ln_gain = add("ln_final.w", SlotRole::LayerNormGain, 1, d);
  final_ln_offset = add("ln_final.b", SlotRole::LayerNormOffset, 1, d);
  unembed = add("unembed", SlotRole::Unembed, d, config.vocab_size);
  unembed_bias = add("b_U", SlotRole::UnembedBias, 1, config.vocab_size);
}

std::size_t ParamLayout::component_slot(const ComponentId& id) const {
  if (id.layer >= config_.n_layers) throw ContractError("component layer out of range");
  return component_slots_[id.layer * config_.components_per_layer() + component_index(config_, id)];
}

Parameters::Parameters(const ModelConfig& config)
    : layout_(std::make_shared<const ParamLayout>(config)), values_(layout_->total_size(), 0.0) {}

std::span<double> Parameters::slot(std::size_t i) {
  const ParamSlot& s = layout_->slot(i);
  return std::span<double>(values_).subspan(s.offset, s.size());
}

std::span<const double> Parameters::slot(std::size_t i) const {
  const ParamSlot& s = layout_->slot(i);
  return std::span<const double>(values_).subspan(s.offset, s.size());
}

ad::Tensor Parameters::tensor(std::size_t i) const {
  const ParamSlot& s = layout_->slot(i);
  auto v = slot(i);
  return ad::Tensor(s.rows, s.cols, std::vector<double>(v.begin(), v.end()));
}

Parameters init_parameters(const ModelConfig& config) {
  Parameters params(config);
  Rng rng(config.seed);
  const ParamLayout& layout = params.layout();
  for (std::size_t i = 0; i < layout.slots().size(); ++i) {
    auto values = params.slot(i);
    switch (layout.slot(i).role) {
      case SlotRole::LayerNormGain:
        std::fill(values.begin(), values.end(), 1.0);
        break;
      case SlotRole::LayerNormOffset:
      case SlotRole::Bias:
      case SlotRole::UnembedBias:
        std::fill(values.begin(), values.end(), 0.0);
        break;
      default:
        for (double& v : values) v = 0.02 * rng.normal();
    }
  }
  return params;
}

// --- activation sites ----------------------------------------------------------

std::string ActivationSite::label() const {
  const std::string prefix = "L" + std::to_string(layer) + " ";
  switch (kind) {
    case SiteKind::Key: return prefix + "k H" + std::to_string(head);
    case SiteKind::Query: return prefix + "q H" + std::to_string(head);
    case SiteKind::Value: return prefix + "v H" + std::to_string(head);
    case SiteKind::HeadOutput: return prefix + "o H" + std::to_string(head);
    case SiteKind::MlpIn: return prefix + "mlp_in";
    case SiteKind::MlpOut: return prefix + "mlp_out";
    case SiteKind::Residual: return prefix + "resid_post";
  }
  return "?";
}

ActivationSite site_for(const ComponentId& id) {
  switch (id.kind) {
    case ComponentKind::Key: return {id.layer, SiteKind::Key, id.head};
    case ComponentKind::Query: return {id.layer, SiteKind::Query, id.head};
    case ComponentKind::Value: return {id.layer, SiteKind::Value, id.head};
    case ComponentKind::Output: return {id.layer, SiteKind::HeadOutput, id.head};
    case ComponentKind::MlpIn: return {id.layer, SiteKind::MlpIn, 0};
    case ComponentKind::MlpOut: return {id.layer, SiteKind::MlpOut, 0};
  }
  return {};
}

std::size_t sites_per_layer(const ModelConfig& config) { return 4 * config.n_heads + 3; }

std::size_t site_index(const ModelConfig& config, const ActivationSite& site) {
  if (site.layer >= config.n_layers) throw ContractError("activation site layer out of range");
  const std::size_t h = config.n_heads;
  std::size_t within = 0;
  switch (site.kind) {
    case SiteKind::Key:
    case SiteKind::Query:
    case SiteKind::Value:
    case SiteKind::HeadOutput:
      if (site.head >= h) throw ContractError("activation site head out of range");
      within = static_cast<std::size_t>(site.kind) * h + site.head;
      break;
    case SiteKind::MlpIn: within = 4 * h; break;
    case SiteKind::MlpOut: within = 4 * h + 1; break;
    case SiteKind::Residual: within = 4 * h + 2; break;
  }
  return site.layer * sites_per_layer(config) + within;
}

std::vector<ActivationSite> all_sites(const ModelConfig& config) {
  std::vector<ActivationSite> out;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (SiteKind k : {SiteKind::Key, SiteKind::Query, SiteKind::Value, SiteKind::HeadOutput})
      for (std::size_t h = 0; h < config.n_heads; ++h) out.push_back({l, k, h});
    out.push_back({l, SiteKind::MlpIn, 0});
    out.push_back({l, SiteKind::MlpOut, 0});
    out.push_back({l, SiteKind::Residual, 0});
  }
  return out;
}

std::size_t site_width(const ModelConfig& config, SiteKind kind) {
  switch (kind) {
    case SiteKind::Key:
    case SiteKind::Query:
    case SiteKind::Value: return config.d_head;
    case SiteKind::MlpIn: return config.d_mlp;
    default: return config.d_model;
  }
}

ActivationCache::ActivationCache(const ModelConfig& config, std::size_t n_positions)
    : config_(config), n_positions_(n_positions) {
  for (const ActivationSite& s : all_sites(config)) sites_.emplace_back(n_positions, site_width(config, s.kind));
  attention_.assign(config.n_layers * config.n_heads, ad::Tensor(n_positions, n_positions));
}

const ad::Tensor& ActivationCache::activation(const ActivationSite& site) const {
  return sites_.at(site_index(config_, site));
}

std::span<const double> ActivationCache::activation(const ActivationSite& site, std::size_t position) const {
  const ad::Tensor& t = activation(site);
  if (position >= t.rows) throw ContractError("activation position out of range");
  return {t.row(position), t.cols};
}

const ad::Tensor& ActivationCache::attention(std::size_t layer, std::size_t head) const {
  if (layer >= config_.n_layers || head >= config_.n_heads) throw ContractError("attention head out of range");
  return attention_[layer * config_.n_heads + head];
}

ad::Tensor& ActivationCache::mutable_activation(const ActivationSite& site) {
  return sites_.at(site_index(config_, site));
}

ad::Tensor& ActivationCache::mutable_attention(std::size_t layer, std::size_t head) {
  return attention_.at(layer * config_.n_heads + head);
}

// --- taped forward -------------------------------------------------------------

BoundParameters bind(ad::Tape& tape, const Parameters& params, GradPolicy policy) {
  BoundParameters b;
  b.params = &params;
  const ParamLayout& layout = params.layout();
  b.slots.reserve(layout.slots().size());
  for (std::size_t i = 0; i < layout.slots().size(); ++i) {
    const bool grad = policy == GradPolicy::All ||
                      (policy == GradPolicy::ComponentsOnly && layout.slot(i).attributable());
    if (grad) {
      b.slots.push_back(tape.leaf(params.tensor(i), true));
    } else {
      b.slots.push_back(tape.constant(params.tensor(i)));
    }
  }
  return b;
}

void validate_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw InputError("empty token sequence");
  if (tokens.size() > config.max_seq_len) {
    throw InputError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size)
      throw InputError("token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(config.vocab_size));
  }
}

TapedForward forward_taped(const BoundParameters& bound, std::span<const int> tokens,
                           const ForwardOptions& options) {
  const Parameters& params = *bound.params;
  const ModelConfig& cfg = params.config();
  const ParamLayout& layout = params.layout();
  validate_tokens(cfg, tokens);
  const std::size_t n = tokens.size();
  auto P = [&](std::size_t slot) { return bound.slots[slot]; };

  TapedForward out;
  out.n_positions = n;
  out.site_nodes.assign(cfg.n_layers * sites_per_layer(cfg), 0);
  out.attention_nodes.assign(cfg.n_layers * cfg.n_heads, 0);

  auto site = [&](ad::Var v, ActivationSite s) {
    if (options.patch && options.patch->site == s) {
      if (options.patch->position >= n) throw ContractError("patch position beyond sequence");
      v = ad::replace_row(v, options.patch->position, options.patch->values);
    }
    out.site_nodes[site_index(cfg, s)] = v.id;
    return v;
  };

  std::vector<int> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);
  ad::Var x = ad::add(ad::embedding(P(layout.token_embed), tokens),
                      ad::embedding(P(layout.pos_embed), positions));
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& ls = layout.layer(l);
    ad::Var h1 = ad::layer_norm(x, P(ls.ln1_gain), P(ls.ln1_offset));
    std::optional<ad::Var> attn;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      ad::Var q = site(ad::add_rowwise(ad::matmul(h1, P(ls.query[h])), P(ls.query_bias[h])), {l, SiteKind::Query, h});
      ad::Var k = site(ad::add_rowwise(ad::matmul(h1, P(ls.key[h])), P(ls.key_bias[h])), {l, SiteKind::Key, h});
      ad::Var v = site(ad::add_rowwise(ad::matmul(h1, P(ls.value[h])), P(ls.value_bias[h])), {l, SiteKind::Value, h});
      ad::Var pattern = ad::causal_softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_dh));
      out.attention_nodes[l * cfg.n_heads + h] = pattern.id;
      ad::Var z = ad::matmul(pattern, v);
      ad::Var o = site(ad::matmul(z, P(ls.output[h])), {l, SiteKind::HeadOutput, h});
      attn = attn ? ad::add(*attn, o) : o;
    }
    x = ad::add(x, ad::add_rowwise(*attn, P(ls.output_bias)));
    ad::Var h2 = ad::layer_norm(x, P(ls.ln2_gain), P(ls.ln2_offset));
    ad::Var pre = site(ad::add_rowwise(ad::matmul(h2, P(ls.mlp_in)), P(ls.mlp_in_bias)), {l, SiteKind::MlpIn, 0});
    ad::Var mlp = site(ad::add_rowwise(ad::matmul(ad::gelu(pre), P(ls.mlp_out)), P(ls.mlp_out_bias)),
                       {l, SiteKind::MlpOut, 0});
    x = site(ad::add(x, mlp), {l, SiteKind::Residual, 0});
  }

  ad::Var final_rows = x;
  if (options.logit_rows) final_rows = ad::select_rows(x, *options.logit_rows);
  ad::Var hf = ad::layer_norm(final_rows, P(layout.final_ln_gain), P(layout.final_ln_offset));
  out.logits = ad::add_rowwise(ad::matmul(hf, P(layout.unembed)), P(layout.unembed_bias));
  return out;
}

ad::Var sequence_nll(const BoundParameters& bound, std::span<const int> tokens, std::size_t first_target,
                     const Patch* patch) {
  if (first_target < 1 || first_target >= tokens.size())
    throw ContractError("sequence_nll needs 1 <= first_target < sequence length");
  ForwardOptions options;
  options.patch = patch;
  std::vector<std::size_t> rows;
  for (std::size_t i = first_target - 1; i + 1 < tokens.size(); ++i) rows.push_back(i);
  options.logit_rows = rows;
  const TapedForward fwd = forward_taped(bound, tokens, options);
  return ad::mean(ad::cross_entropy(fwd.logits, tokens.subspan(first_target)));
}

std::vector<double> gather_gradients(const BoundParameters& bound, const ad::Gradients& grads) {
  const ParamLayout& layout = bound.params->layout();
  std::vector<double> flat(layout.total_size(), 0.0);
  for (std::size_t i = 0; i < bound.slots.size(); ++i) {
    if (!grads.contains(bound.slots[i].id)) continue;
    const ad::Tensor& g = grads.at(bound.slots[i].id);
    std::copy(g.values.begin(), g.values.end(), flat.begin() + static_cast<std::ptrdiff_t>(layout.slot(i).offset));
  }
  return flat;
}

ActivationCache collect_cache(const ad::Tape& tape, const TapedForward& fwd, const ModelConfig& config) {
  ActivationCache cache(config, fwd.n_positions);
  for (const ActivationSite& s : all_sites(config))
    cache.mutable_activation(s) = tape.value(fwd.site_nodes[site_index(config, s)]);
  for (std::size_t l = 0; l < config.n_layers; ++l)
    for (std::size_t h = 0; h < config.n_heads; ++h)
      cache.mutable_attention(l, h) = tape.value(fwd.attention_nodes[l * config.n_heads + h]);
  return cache;
}

ForwardResult forward(const Parameters& params, std::span<const int> tokens, const Patch* patch) {
  ad::Tape tape;
  const BoundParameters bound = bind(tape, params, GradPolicy::None);
  ForwardOptions options;
  options.patch = patch;
  const TapedForward fwd = forward_taped(bound, tokens, options);
  return {fwd.logits.value(), collect_cache(tape, fwd, params.config())};
}

ad::Tensor forward_logits(const Parameters& params, std::span<const int> tokens, const Patch* patch) {
  ad::Tape tape;
  const BoundParameters bound = bind(tape, params, GradPolicy::None);
  ForwardOptions options;
  options.patch = patch;
  return forward_taped(bound, tokens, options).logits.value();
}

}  // namespace memlab
