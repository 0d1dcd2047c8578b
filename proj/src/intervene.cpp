#include "memlab/intervene.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "memlab/error.hpp"
#include "memlab/metrics.hpp"
#include "memlab/parallel.hpp"
#include "memlab/rng.hpp"

namespace memlab {

const char* mask_kind_name(MaskKind kind) {
  switch (kind) {
    case MaskKind::TopGradient: return "top_gradient";
    case MaskKind::Random: return "random";
    case MaskKind::All: return "all";
  }
  return "?";
}

const char* objective_name(Objective o) { return o == Objective::Unlearn ? "unlearn" : "edit"; }

std::size_t mask_size(std::size_t n_eligible, double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("mask fraction rho must be in (0, 1]");
  const auto k = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n_eligible)));
  return std::min(k, n_eligible);
}

GradientMask top_gradient_mask(const GradientStore& store, double rho) {
  std::vector<std::size_t> eligible = store.eligible_coordinates();
  if (eligible.empty()) throw ContractError("gradient store has no eligible coordinates");
  const std::size_t k = mask_size(eligible.size(), rho);
  const auto& g = store.flat();
  auto before = [&](std::size_t a, std::size_t b) {
    const double ga = std::abs(g[a]), gb = std::abs(g[b]);
    return ga != gb ? ga > gb : a < b;
  };
  std::nth_element(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(k - 1), eligible.end(), before);
  GradientMask m;
  m.kind = MaskKind::TopGradient;
  m.rho = rho;
  m.n_eligible = eligible.size();
  m.coords.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(m.coords.begin(), m.coords.end());
  return m;
}

GradientMask random_mask(const ModelConfig& config, double rho, std::uint64_t seed) {
  std::vector<std::size_t> eligible = GradientStore(config).eligible_coordinates();
  const std::size_t k = mask_size(eligible.size(), rho);
  Rng rng = Rng::derive(seed, 0x6d61736b);
  for (std::size_t i = 0; i < k; ++i) std::swap(eligible[i], eligible[i + rng.below(eligible.size() - i)]);
  GradientMask m;
  m.kind = MaskKind::Random;
  m.rho = rho;
  m.n_eligible = eligible.size();
  m.coords.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(m.coords.begin(), m.coords.end());
  return m;
}

GradientMask all_mask(const ModelConfig& config) {
  GradientMask m;
  m.kind = MaskKind::All;
  m.rho = 1.0;
  m.coords = GradientStore(config).eligible_coordinates();
  m.n_eligible = m.coords.size();
  return m;
}

StepRecord evaluate_intervention(const Parameters& params, Objective objective, const std::vector<FinetuneItem>& items,
                                 const std::vector<ControlSequence>& eval_controls, std::size_t prefix_len,
                                 std::size_t threads) {
  std::vector<double> em_mp(items.size()), em_target(items.size()), em_nmp(eval_controls.size());
  parallel_for(items.size() + eval_controls.size(), threads, [&](std::size_t k) {
    if (k < items.size()) {
      const auto& item = items[k];
      const std::span<const int> seq(item.original);
      const auto decoded = greedy_decode(params, seq.first(prefix_len), seq.size() - prefix_len);
      em_mp[k] = static_cast<double>(exact_match(decoded, seq.subspan(prefix_len)));
      if (objective == Objective::Edit)
        em_target[k] = static_cast<double>(exact_match(decoded, std::span<const int>(item.target).subspan(prefix_len)));
    } else {
      const auto& c = eval_controls[k - items.size()];
      const std::span<const int> seq(c.tokens);
      const auto decoded = greedy_decode(params, seq.first(prefix_len), seq.size() - prefix_len);
      em_nmp[k - items.size()] = static_cast<double>(exact_match(decoded, seq.subspan(prefix_len)));
    }
  });
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  StepRecord r;
  r.em_mp = mean(em_mp);
  r.em_nmp = mean(em_nmp);
  r.em_target = objective == Objective::Edit ? mean(em_target) : 0.0;
  return r;
}

FinetuneResult sparse_finetune(const Parameters& params, const GradientMask& mask, Objective objective,
                               const std::vector<FinetuneItem>& items,
                               const std::vector<ControlSequence>& control_pool,
                               const std::vector<ControlSequence>& eval_controls, const FinetuneConfig& config) {
  if (items.empty()) throw ContractError("sparse_finetune needs at least one paragraph");
  const std::size_t n_params = params.flat().size();
  for (std::size_t c : mask.coords)
    if (c >= n_params) throw ShapeError("mask coordinate " + std::to_string(c) + " outside parameter vector of size " +
                                        std::to_string(n_params));
  FinetuneResult out{params, {}};
  InterventionReport& report = out.report;
  report.objective = objective;
  report.mask = mask.kind;
  report.mask_size = mask.coords.size();
  report.continuation_len = items.front().original.size() - config.prefix_len;
  report.initial = evaluate_intervention(params, objective, items, eval_controls, config.prefix_len, config.threads);

  ContrastSpec spec;
  spec.nll_sign = objective == Objective::Unlearn ? -1.0 : 1.0;
  spec.direction = config.direction;
  spec.prefix_len = config.prefix_len;
  std::vector<std::span<const int>> targets;
  for (const auto& item : items) targets.emplace_back(objective == Objective::Unlearn ? item.original : item.target);
  std::vector<std::size_t> pool(control_pool.size());
  std::iota(pool.begin(), pool.end(), 0);

  AdamState state(n_params);
  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<const ControlSequence*> controls;
    for (std::size_t i : sample_controls(pool, config.nmp_batch, config.seed, step)) controls.push_back(&control_pool[i]);
    const ContrastResult r = contrastive_gradient(out.params, targets, controls, spec);
    adam_step(out.params.flat(), r.grads.flat(), state, config.adam, &mask.coords);
    StepRecord rec = evaluate_intervention(out.params, objective, items, eval_controls, config.prefix_len, config.threads);
    rec.step = step;
    rec.objective = r.value;
    report.trajectory.push_back(rec);
  }
  return out;
}

}  // namespace memlab
