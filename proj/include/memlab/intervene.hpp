#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memlab/attribution.hpp"
#include "memlab/train.hpp"

namespace memlab {

enum class MaskKind { TopGradient, Random, All };
const char* mask_kind_name(MaskKind kind);

struct GradientMask {
  MaskKind kind = MaskKind::All;
  double rho = 1.0;
  std::size_t n_eligible = 0;
  std::vector<std::size_t> coords;  // flat parameter indices, ascending
};

/// ceil(rho * n), validated.
std::size_t mask_size(std::size_t n_eligible, double rho);

/// The ceil(rho * N) eligible coordinates with largest |gradient|; ties go to
/// the lower flat index.
GradientMask top_gradient_mask(const GradientStore& store, double rho);
/// Uniform sample without replacement over eligible coordinates.
GradientMask random_mask(const ModelConfig& config, double rho, std::uint64_t seed);
GradientMask all_mask(const ModelConfig& config);

enum class Objective { Unlearn, Edit };
const char* objective_name(Objective o);

struct FinetuneItem {
  std::size_t id = 0;
  std::vector<int> original;  // the memorized paragraph
  std::vector<int> target;    // edit target (original prefix + alternative continuation); unused when unlearning
};

struct FinetuneConfig {
  std::size_t steps = 10;
  AdamConfig adam{1e-4};
  std::size_t nmp_batch = 10;
  KlDirection direction = KlDirection::CurrentFirst;
  std::size_t prefix_len = 32;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct StepRecord {
  std::size_t step = 0;
  double objective = 0.0;      // value before the update of this step (0 for the initial record)
  double em_mp = 0.0;          // mean EM vs the original memorized continuation
  double em_nmp = 0.0;         // mean EM vs the original model's NMP continuations
  double em_target = 0.0;      // mean EM vs the edit target continuation (editing only)
};

struct InterventionReport {
  Objective objective = Objective::Unlearn;
  MaskKind mask = MaskKind::All;
  std::size_t mask_size = 0;
  std::size_t continuation_len = 0;
  StepRecord initial;
  std::vector<StepRecord> trajectory;  // one record per step
};

struct FinetuneResult {
  Parameters params;
  InterventionReport report;
};

/// Masked Adam fine-tuning on the contrastive objective. Fresh optimizer
/// state; a new control batch is drawn from control_pool every step; EM is
/// evaluated after every step on the items and on eval_controls.
FinetuneResult sparse_finetune(const Parameters& params, const GradientMask& mask, Objective objective,
                               const std::vector<FinetuneItem>& items,
                               const std::vector<ControlSequence>& control_pool,
                               const std::vector<ControlSequence>& eval_controls, const FinetuneConfig& config);

/// Mean EMs for the current parameters (step field left 0).
StepRecord evaluate_intervention(const Parameters& params, Objective objective, const std::vector<FinetuneItem>& items,
                                 const std::vector<ControlSequence>& eval_controls, std::size_t prefix_len,
                                 std::size_t threads = 1);

}  // namespace memlab
