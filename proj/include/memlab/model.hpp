#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "memlab/autodiff.hpp"

namespace memlab {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_head = 32;
  std::size_t d_mlp = 512;
  std::size_t vocab_size = 2048;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 0;

  /// Throws ConfigError when dimensions are inconsistent.
  void validate() const;
  std::size_t components_per_layer() const { return 4 * n_heads + 2; }

  bool operator==(const ModelConfig&) const = default;
};

/// The attributable weight matrices of one layer.
enum class ComponentKind : std::uint8_t { Key, Query, Value, Output, MlpIn, MlpOut };

struct ComponentId {
  std::size_t layer = 0;
  ComponentKind kind = ComponentKind::Key;
  std::size_t head = 0;  // ignored for MlpIn/MlpOut

  /// Short label, e.g. "W_K H0" or "W_in".
  std::string label() const;
  auto operator<=>(const ComponentId&) const = default;
};

/// Position of a component within its layer in canonical order:
/// W_K H0..H(H-1), W_Q .., W_V .., W_O .., W_in, W_out.
std::size_t component_index(const ModelConfig& config, const ComponentId& id);
ComponentId component_at(const ModelConfig& config, std::size_t layer, std::size_t index);
/// Every ComponentId, layer-major in canonical order (L * C entries).
std::vector<ComponentId> all_components(const ModelConfig& config);

enum class SlotRole : std::uint8_t {
  TokenEmbed,
  PosEmbed,
  Component,
  Bias,
  LayerNormGain,
  LayerNormOffset,
  Unembed,
  UnembedBias,
};

struct ParamSlot {
  std::string name;
  SlotRole role = SlotRole::Component;
  std::optional<ComponentId> component;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  /// Only the L x C component matrices take part in attribution and masks.
  bool attributable() const { return role == SlotRole::Component; }
};

/// Fixed flattening of every parameter tensor into one coordinate space.
/// Slot order is the checkpoint order: token/position embeddings, then per
/// layer ln1, the C component matrices in canonical order, their biases,
/// ln2; then the final layer norm and the unembedding.
class ParamLayout {
 public:
  struct LayerSlots {
    std::size_t ln1_gain = 0, ln1_offset = 0, ln2_gain = 0, ln2_offset = 0;
    std::vector<std::size_t> key, query, value, output;
    std::vector<std::size_t> key_bias, query_bias, value_bias;
    std::size_t output_bias = 0, mlp_in = 0, mlp_in_bias = 0, mlp_out = 0, mlp_out_bias = 0;
  };

  explicit ParamLayout(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const std::vector<ParamSlot>& slots() const { return slots_; }
  const ParamSlot& slot(std::size_t i) const { return slots_.at(i); }
  std::size_t total_size() const { return total_; }
  std::size_t component_slot(const ComponentId& id) const;
  const LayerSlots& layer(std::size_t l) const { return layers_.at(l); }

  std::size_t token_embed = 0, pos_embed = 0, final_ln_gain = 0, final_ln_offset = 0,
              unembed = 0, unembed_bias = 0;

 private:
  std::size_t add(std::string name, SlotRole role, std::size_t rows, std::size_t cols,
                  std::optional<ComponentId> component = std::nullopt);

  ModelConfig config_;
  std::vector<ParamSlot> slots_;
  std::vector<LayerSlots> layers_;
  std::vector<std::size_t> component_slots_;
  std::size_t total_ = 0;
};

class Parameters {
 public:
  /// Zero-filled parameters for a validated config.
  explicit Parameters(const ModelConfig& config);

  const ModelConfig& config() const { return layout_->config(); }
  const ParamLayout& layout() const { return *layout_; }
  std::span<double> flat() { return values_; }
  std::span<const double> flat() const { return values_; }
  std::span<double> slot(std::size_t i);
  std::span<const double> slot(std::size_t i) const;
  ad::Tensor tensor(std::size_t i) const;

  bool operator==(const Parameters& other) const { return values_ == other.values_ && config() == other.config(); }

 private:
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<double> values_;
};

/// Deterministic init: N(0, 0.02) weights/embeddings, zero biases,
/// layer-norm gain 1 and offset 0.
Parameters init_parameters(const ModelConfig& config);

// --- activations -------------------------------------------------------------

enum class SiteKind : std::uint8_t { Key, Query, Value, HeadOutput, MlpIn, MlpOut, Residual };

/// A patchable / cached activation: per-head k, q, v and projected head
/// output; MLP pre-activation and output; residual stream after the block.
struct ActivationSite {
  std::size_t layer = 0;
  SiteKind kind = SiteKind::Residual;
  std::size_t head = 0;

  std::string label() const;
  auto operator<=>(const ActivationSite&) const = default;
};

ActivationSite site_for(const ComponentId& id);
std::size_t sites_per_layer(const ModelConfig& config);
std::size_t site_index(const ModelConfig& config, const ActivationSite& site);
std::vector<ActivationSite> all_sites(const ModelConfig& config);
std::size_t site_width(const ModelConfig& config, SiteKind kind);

class ActivationCache {
 public:
  ActivationCache() = default;
  ActivationCache(const ModelConfig& config, std::size_t n_positions);

  std::size_t n_positions() const { return n_positions_; }
  const ad::Tensor& activation(const ActivationSite& site) const;
  std::span<const double> activation(const ActivationSite& site, std::size_t position) const;
  /// Causal attention pattern of one head, [positions x positions].
  const ad::Tensor& attention(std::size_t layer, std::size_t head) const;

  ad::Tensor& mutable_activation(const ActivationSite& site);
  ad::Tensor& mutable_attention(std::size_t layer, std::size_t head);

 private:
  ModelConfig config_;
  std::size_t n_positions_ = 0;
  std::vector<ad::Tensor> sites_;
  std::vector<ad::Tensor> attention_;
};

// --- taped forward -----------------------------------------------------------

enum class GradPolicy : std::uint8_t { None, All, ComponentsOnly };

/// Parameters placed on a tape, one node per slot.
struct BoundParameters {
  const Parameters* params = nullptr;
  std::vector<ad::Var> slots;
};

BoundParameters bind(ad::Tape& tape, const Parameters& params, GradPolicy policy);

/// Substitutes one position of one activation site with donor values.
struct Patch {
  ActivationSite site;
  std::size_t position = 0;
  std::vector<double> values;
};

struct ForwardOptions {
  /// Positions for which logits are produced; all positions when unset.
  std::optional<std::vector<std::size_t>> logit_rows;
  const Patch* patch = nullptr;
};

struct TapedForward {
  ad::Var logits;
  std::size_t n_positions = 0;
  std::vector<ad::NodeId> site_nodes;       // indexed by site_index
  std::vector<ad::NodeId> attention_nodes;  // layer * n_heads + head
};

TapedForward forward_taped(const BoundParameters& bound, std::span<const int> tokens,
                           const ForwardOptions& options = {});

/// Mean next-token NLL of tokens[first_target..] given everything before.
/// first_target = 1 scores every position; prefix length scores the continuation.
ad::Var sequence_nll(const BoundParameters& bound, std::span<const int> tokens, std::size_t first_target,
                     const Patch* patch = nullptr);

/// Flat gradient in layout order; slots bound as constants contribute zeros.
std::vector<double> gather_gradients(const BoundParameters& bound, const ad::Gradients& grads);

ActivationCache collect_cache(const ad::Tape& tape, const TapedForward& fwd, const ModelConfig& config);

struct ForwardResult {
  ad::Tensor logits;  // [tokens x vocab]
  ActivationCache cache;
};

/// Plain forward pass with a fully populated activation cache.
ForwardResult forward(const Parameters& params, std::span<const int> tokens, const Patch* patch = nullptr);

/// Forward pass returning logits only.
ad::Tensor forward_logits(const Parameters& params, std::span<const int> tokens, const Patch* patch = nullptr);

void validate_tokens(const ModelConfig& config, std::span<const int> tokens);

// --- decoding ----------------------------------------------------------------

/// Position-by-position evaluation with cached keys and values. Produces
/// logits bit-identical to the corresponding rows of forward_logits().
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const Parameters& params);

  std::size_t length() const { return length_; }
  void reset() { length_ = 0; }
  /// Drops positions >= n so a shared prefix can be reused.
  void truncate(std::size_t n);
  /// Appends a token. Returns next-token logits when want_logits is set,
  /// otherwise an empty span.
  std::span<const double> push(int token, bool want_logits = true);

 private:
  const Parameters& params_;
  std::size_t length_ = 0;
  std::vector<std::vector<double>> keys_;    // layer * H + head -> [max_seq x d_head]
  std::vector<std::vector<double>> values_;  // same layout
  std::vector<double> x_, ln_, q_, scores_, probs_, z_, head_out_, attn_, hidden_, mlp_, logits_;
};

/// Index of the largest value; the lowest index wins ties.
int argmax(std::span<const double> logits);

/// Greedy continuation of n tokens after prefix.
std::vector<int> greedy_decode(const Parameters& params, std::span<const int> prefix, std::size_t n);

// --- checkpoint --------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "MLAB", u32 version, config block (7 x u32 dims, u64 seed), u64 value
/// count, then every slot as little-endian f64 in layout order.
std::vector<std::uint8_t> serialize_checkpoint(const Parameters& params);
Parameters deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Parameters& params);
Parameters load_checkpoint(const std::filesystem::path& path);

}  // namespace memlab
