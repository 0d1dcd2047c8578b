#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "memlab/corpus.hpp"
#include "memlab/model.hpp"

namespace memlab {

/// Gradient over the flat parameter space. Only component matrices carry
/// values; embeddings, unembedding, biases and layer norms are marked
/// excluded and reading them throws.
class GradientStore {
 public:
  explicit GradientStore(const ModelConfig& config);
  /// Takes a full flat gradient and drops the excluded slots.
  GradientStore(const ModelConfig& config, std::span<const double> flat);

  const ParamLayout& layout() const { return layout_; }
  bool excluded(std::size_t slot) const { return !layout_.slot(slot).attributable(); }
  std::span<const double> slot(std::size_t i) const;
  std::span<double> mutable_slot(std::size_t i);
  std::span<const double> component(const ComponentId& id) const;
  /// Layout-ordered values; excluded slots read as zero here.
  const std::vector<double>& flat() const { return values_; }
  /// Flat indices of every non-excluded coordinate, ascending.
  std::vector<std::size_t> eligible_coordinates() const;

  GradientStore& operator+=(const GradientStore& other);
  GradientStore& operator*=(double c);

 private:
  ParamLayout layout_;
  std::vector<double> values_;
};

/// Max-abs pooled score per (layer, component), canonical component order.
struct AttributionMap {
  std::size_t n_layers = 0;
  std::size_t n_components = 0;
  std::vector<double> scores;  // layer-major
  std::string objective;
  std::string batch;

  double at(std::size_t layer, std::size_t component) const { return scores.at(layer * n_components + component); }
  /// Per-layer sums divided by the total.
  std::vector<double> layer_fractions() const;
};

AttributionMap pool_attribution(const GradientStore& store);

/// Gradient of the mean continuation NLL of a batch.
GradientStore nll_param_gradients(const Parameters& params, const std::vector<std::span<const int>>& batch,
                                  std::size_t prefix_len, std::size_t threads = 1);

enum class KlDirection { CurrentFirst, OriginalFirst };
const char* kl_direction_name(KlDirection d);

/// An NMP control sequence: prefix + the original model's greedy
/// continuation, with the original model's logits at continuation positions.
struct ControlSequence {
  std::size_t paragraph_id = 0;
  std::vector<int> tokens;
  ad::Tensor original_logits;  // [continuation x vocab], treated as constants
};

ControlSequence make_control(const Parameters& original, const Corpus& corpus, std::size_t id);
std::vector<ControlSequence> make_controls(const Parameters& original, const Corpus& corpus,
                                           const std::vector<std::size_t>& ids, std::size_t threads = 1);

struct ContrastSpec {
  /// -1 raises the target NLL (unlearning), +1 lowers it (editing).
  double nll_sign = -1.0;
  KlDirection direction = KlDirection::CurrentFirst;
  std::size_t prefix_len = 32;
};

struct ContrastResult {
  GradientStore grads;
  double value = 0.0;
  double nll = 0.0;   // target NLL (unsigned)
  double kl = 0.0;    // mean KL over control sequences and positions
};

/// sign * NLL(target) + mean KL between current and original distributions
/// over the control continuations. When several targets are given the NLL
/// term is their mean.
ContrastResult contrastive_gradient(const Parameters& params, const std::vector<std::span<const int>>& targets,
                                    const std::vector<const ControlSequence*>& controls, const ContrastSpec& spec);

/// Objective value only (no backward pass).
double contrastive_value(const Parameters& params, const std::vector<std::span<const int>>& targets,
                         const std::vector<const ControlSequence*>& controls, const ContrastSpec& spec);

/// Control batch for one target, seeded by (seed, key) so the draw does not
/// depend on processing order.
std::vector<std::size_t> sample_controls(const std::vector<std::size_t>& pool, std::size_t n, std::uint64_t seed,
                                         std::uint64_t key);

struct AggregateResult {
  GradientStore total;
  AttributionMap map;
  double objective_sum = 0.0;
};

/// One contrastive gradient per target (with its own control batch), summed
/// in target order and pooled.
AggregateResult aggregate_contrastive(const Parameters& params, const std::vector<std::vector<int>>& targets,
                                      const std::vector<std::size_t>& target_keys,
                                      const std::vector<ControlSequence>& control_pool, std::size_t batch_size,
                                      std::uint64_t seed, const ContrastSpec& spec, std::size_t threads = 1);

/// |dNLL/dh| max-pooled over the hidden dimension, per (layer, component, position).
struct ActivationAttribution {
  std::size_t n_layers = 0;
  std::size_t n_components = 0;
  std::size_t n_positions = 0;
  std::vector<double> scores;  // [layer][component][position]

  double at(std::size_t layer, std::size_t component, std::size_t position) const {
    return scores.at((layer * n_components + component) * n_positions + position);
  }
};

/// Scores are averaged over the batch.
ActivationAttribution activation_gradients(const Parameters& params, const std::vector<std::span<const int>>& batch,
                                           std::size_t prefix_len, std::size_t threads = 1);

}  // namespace memlab
