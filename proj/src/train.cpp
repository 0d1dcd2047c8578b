#include "memlab/train.hpp"

#include <chrono>
#include <cmath>

#include "memlab/error.hpp"
#include "memlab/parallel.hpp"
#include "memlab/rng.hpp"

namespace memlab {

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& config,
               const std::vector<std::size_t>* coords) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: parameter size " + std::to_string(params.size()) + " vs gradient size " +
                     std::to_string(grads.size()) + " vs state size " + std::to_string(state.m.size()));
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  auto update = [&](std::size_t i) {
    const double g = grads[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
  };
  if (coords) {
    for (std::size_t i : *coords) {
      if (i >= params.size()) throw ShapeError("adam_step: mask coordinate outside parameter vector");
      update(i);
    }
  } else {
    for (std::size_t i = 0; i < params.size(); ++i) update(i);
  }
}

std::vector<double> batch_gradient(const Parameters& params, const std::vector<std::span<const int>>& batch,
                                   std::size_t first_target, double* mean_loss, std::size_t threads,
                                   GradPolicy policy) {
  if (batch.empty()) throw ContractError("batch_gradient needs a non-empty batch");
  std::vector<std::vector<double>> per(batch.size());
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    ad::Tape tape;
    const BoundParameters bound = bind(tape, params, policy);
    ad::Var loss = sequence_nll(bound, batch[i], first_target);
    losses[i] = loss.value().item();
    per[i] = gather_gradients(bound, tape.backward(loss));
  });
  std::vector<double> total(params.flat().size(), 0.0);
  const double inv = 1.0 / static_cast<double>(batch.size());
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += per[b][i];
    loss_sum += losses[b];
  }
  for (double& g : total) g *= inv;
  if (mean_loss) *mean_loss = loss_sum * inv;
  return total;
}

std::size_t planted_full_em(const Parameters& params, const Corpus& corpus, std::size_t threads) {
  const auto ids = corpus.planted_ids();
  std::vector<char> full(ids.size(), 0);
  parallel_for(ids.size(), threads, [&](std::size_t k) {
    const auto cont = corpus.continuation(ids[k]);
    const auto decoded = greedy_decode(params, corpus.prefix(ids[k]), cont.size());
    full[k] = std::equal(decoded.begin(), decoded.end(), cont.begin()) ? 1 : 0;
  });
  std::size_t n = 0;
  for (char f : full) n += static_cast<std::size_t>(f);
  return n;
}

TrainReport train(Parameters& params, const Corpus& corpus, const TrainConfig& config, const TrainHooks& hooks) {
  if (corpus.size() == 0) throw ContractError("cannot train on an empty corpus");
  if (config.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (corpus.config().paragraph_len() > params.config().max_seq_len)
    throw ConfigError("paragraph length exceeds model max_seq_len");
  if (corpus.config().vocab_size > params.config().vocab_size)
    throw ConfigError("corpus vocabulary exceeds model vocabulary");
  const auto start = std::chrono::steady_clock::now();

  // Duplication as sampling weight.
  std::vector<double> cumulative;
  double total_weight = 0.0;
  for (const auto& p : corpus.paragraphs()) cumulative.push_back(total_weight += static_cast<double>(p.dup_count));
  const std::size_t steps_per_epoch =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(total_weight / static_cast<double>(config.batch_size))));
  const std::size_t eval_every = config.eval_every ? config.eval_every : steps_per_epoch;

  TrainReport report;
  report.n_planted = corpus.planted_ids().size();
  AdamState state(params.flat().size());
  Rng rng = Rng::derive(config.seed, 10);
  double loss_sum = 0.0;
  std::size_t loss_count = 0;

  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    std::vector<std::span<const int>> batch;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const double u = rng.uniform() * total_weight;
      const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
      const auto id = static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - cumulative.begin(),
                                                                        static_cast<std::ptrdiff_t>(corpus.size()) - 1));
      batch.emplace_back(corpus.paragraph(id).tokens);
    }
    double loss = 0.0;
    const auto grads = batch_gradient(params, batch, 1, &loss, config.threads);
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss at step " + std::to_string(step));
    adam_step(params.flat(), grads, state, config.adam);
    loss_sum += loss;
    ++loss_count;
    report.steps = step;

    if (config.checkpoint_every && step % config.checkpoint_every == 0 && hooks.on_checkpoint)
      hooks.on_checkpoint(step, params);
    if (step % eval_every == 0 || step == config.max_steps) {
      EpochRecord rec;
      rec.epoch = report.epochs.size() + 1;
      rec.step = step;
      rec.mean_nll = loss_sum / static_cast<double>(loss_count);
      rec.planted_full_em = planted_full_em(params, corpus, config.threads);
      report.epochs.push_back(rec);
      if (hooks.on_epoch) hooks.on_epoch(rec);
      loss_sum = 0.0;
      loss_count = 0;
      if (config.early_stop && report.n_planted > 0 && rec.planted_full_em == report.n_planted) {
        report.stopped_early = true;
        break;
      }
    }
  }
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace memlab
