#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "memlab/corpus.hpp"
#include "memlab/model.hpp"

namespace memlab {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const AdamConfig&) const = default;
};

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t step = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// Bias-corrected Adam update. When coords is given only those coordinates
/// are touched (moments included); everything else stays bit-identical.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& config,
               const std::vector<std::size_t>* coords = nullptr);

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 16;
  std::size_t max_steps = 3000;
  /// Planted-EM check cadence in steps; 0 means once per epoch.
  std::size_t eval_every = 0;
  /// Stop as soon as every planted paragraph decodes verbatim.
  bool early_stop = true;
  std::size_t checkpoint_every = 0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double mean_nll = 0.0;
  std::size_t planted_full_em = 0;
  bool operator==(const EpochRecord&) const = default;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
  std::size_t n_planted = 0;
  bool stopped_early = false;
  // Kept out of operator== and the serialized artifact: it never reproduces.
  double wall_clock_seconds = 0.0;

  bool operator==(const TrainReport& o) const {
    return epochs == o.epochs && steps == o.steps && n_planted == o.n_planted && stopped_early == o.stopped_early;
  }
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(std::size_t step, const Parameters&)> on_checkpoint;
};

/// Mean all-position NLL gradient of a batch of sequences, summed in index order.
std::vector<double> batch_gradient(const Parameters& params, const std::vector<std::span<const int>>& batch,
                                   std::size_t first_target, double* mean_loss, std::size_t threads = 1,
                                   GradPolicy policy = GradPolicy::All);

/// Number of planted paragraphs whose greedy continuation matches exactly.
std::size_t planted_full_em(const Parameters& params, const Corpus& corpus, std::size_t threads = 1);

TrainReport train(Parameters& params, const Corpus& corpus, const TrainConfig& config, const TrainHooks& hooks = {});

}  // namespace memlab
