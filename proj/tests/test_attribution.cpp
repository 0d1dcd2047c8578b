#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "memlab/attribution.hpp"
#include "memlab/error.hpp"
#include "memlab/metrics.hpp"

using namespace memlab;
using namespace memlab::testing;

namespace {

struct Setup {
  ModelConfig config = small_config();
  Parameters params = noisy_parameters(config);
  std::size_t prefix_len = 6;
  std::vector<std::vector<int>> seqs;

  Setup() {
    Rng rng(21);
    for (int k = 0; k < 14; ++k) seqs.push_back(random_tokens(rng, 12, config.vocab_size));
  }
  std::vector<std::span<const int>> batch(std::size_t from, std::size_t n) const {
    std::vector<std::span<const int>> out;
    for (std::size_t i = from; i < from + n; ++i) out.emplace_back(seqs[i]);
    return out;
  }
  ControlSequence control(std::size_t i) const {
    ControlSequence c;
    c.paragraph_id = i;
    c.tokens.assign(seqs[i].begin(), seqs[i].begin() + static_cast<std::ptrdiff_t>(prefix_len));
    const auto cont = greedy_decode(params, c.tokens, seqs[i].size() - prefix_len);
    c.tokens.insert(c.tokens.end(), cont.begin(), cont.end());
    const ad::Tensor all = forward_logits(params, c.tokens);
    c.original_logits = ad::Tensor(c.tokens.size() - prefix_len, all.cols);
    for (std::size_t r = 0; r < c.original_logits.rows; ++r)
      for (std::size_t v = 0; v < all.cols; ++v) c.original_logits(r, v) = all(prefix_len - 1 + r, v);
    return c;
  }
};

std::vector<double> log_softmax(const ad::Tensor& t, std::size_t row) {
  double z = 0.0;
  for (std::size_t v = 0; v < t.cols; ++v) z += std::exp(t(row, v));
  std::vector<double> out(t.cols);
  for (std::size_t v = 0; v < t.cols; ++v) out[v] = t(row, v) - std::log(z);
  return out;
}

// Straight-line objective: sign * mean NLL + mean over controls of mean_pos KL(current || original).
double oracle_objective(const Parameters& p, const std::vector<std::span<const int>>& targets,
                        const std::vector<ControlSequence>& controls, double sign, std::size_t prefix_len,
                        bool current_first) {
  double nll = 0.0;
  for (const auto& t : targets) nll += continuation_nll(p, t, prefix_len);
  nll /= static_cast<double>(targets.size());
  double kl = 0.0;
  for (const auto& c : controls) {
    const ad::Tensor logits = forward_logits(p, c.tokens);
    double sum = 0.0;
    for (std::size_t r = 0; r < c.original_logits.rows; ++r) {
      const auto cur = log_softmax(logits, prefix_len - 1 + r);
      const auto orig = log_softmax(c.original_logits, r);
      const auto& a = current_first ? cur : orig;
      const auto& b = current_first ? orig : cur;
      for (std::size_t v = 0; v < cur.size(); ++v) sum += std::exp(a[v]) * (a[v] - b[v]);
    }
    kl += sum / static_cast<double>(c.original_logits.rows);
  }
  if (!controls.empty()) kl /= static_cast<double>(controls.size());
  return sign * nll + kl;
}

}  // namespace

TEST_CASE("gradient store exclusion contract") {
  const Setup s;
  const GradientStore g(s.config);
  const ParamLayout& layout = g.layout();
  CHECK_THROWS_AS(g.slot(layout.token_embed), ContractError);
  CHECK_THROWS_AS(g.slot(layout.pos_embed), ContractError);
  CHECK_THROWS_AS(g.slot(layout.unembed), ContractError);
  CHECK_THROWS_AS(g.slot(layout.layer(0).query_bias[0]), ContractError);
  CHECK_THROWS_AS(g.slot(layout.layer(1).ln1_gain), ContractError);
  CHECK_NOTHROW(g.slot(layout.layer(1).mlp_out));
  std::size_t n_component = 0;
  for (const auto& slot : layout.slots())
    if (slot.attributable()) n_component += slot.size();
  CHECK(g.eligible_coordinates().size() == n_component);
  CHECK_THROWS_AS(GradientStore(s.config, std::vector<double>(3)), ShapeError);
}

TEST_CASE("pooling") {
  const Setup s;
  SUBCASE("all-zero store") {
    const AttributionMap m = pool_attribution(GradientStore(s.config));
    CHECK(m.scores.size() == s.config.n_layers * s.config.components_per_layer());
    for (double v : m.scores) CHECK(v == 0.0);
  }
  SUBCASE("absolute value") {
    GradientStore g(s.config);
    const ComponentId id{1, ComponentKind::Value, 1};
    g.mutable_slot(g.layout().component_slot(id))[3] = -3.0;
    const AttributionMap m = pool_attribution(g);
    CHECK(m.at(1, component_index(s.config, id)) == 3.0);
  }
  SUBCASE("brute-force flatten-and-max oracle and pooling dominance") {
    Rng rng(5);
    std::vector<double> flat(s.params.layout().total_size());
    for (double& v : flat) v = rng.normal();
    const GradientStore g(s.config, flat);
    const AttributionMap m = pool_attribution(g);
    for (const ComponentId& id : all_components(s.config)) {
      const ParamSlot& slot = s.params.layout().slot(s.params.layout().component_slot(id));
      double best = 0.0;
      bool attained = false;
      for (std::size_t k = 0; k < slot.size(); ++k) best = std::max(best, std::abs(flat[slot.offset + k]));
      const double score = m.at(id.layer, component_index(s.config, id));
      CHECK(score == best);
      for (std::size_t k = 0; k < slot.size(); ++k) {
        CHECK(score >= std::abs(flat[slot.offset + k]));
        attained |= score == std::abs(flat[slot.offset + k]);
      }
      CHECK(attained);
    }
    double total = 0.0;
    for (double f : m.layer_fractions()) total += f;
    CHECK(total == doctest::Approx(1.0));
  }
}

TEST_CASE("parameter gradients match finite differences") {
  const Setup s;
  const auto batch = s.batch(0, 3);
  const GradientStore g = nll_param_gradients(s.params, batch, s.prefix_len, 2);
  const auto eligible = g.eligible_coordinates();
  Rng rng(13);
  const double h = 1e-5;
  for (int k = 0; k < 10; ++k) {
    const std::size_t coord = eligible[rng.below(eligible.size())];
    Parameters plus = s.params, minus = s.params;
    plus.flat()[coord] += h;
    minus.flat()[coord] -= h;
    const double fd = (batch_nll(plus, batch, s.prefix_len) - batch_nll(minus, batch, s.prefix_len)) / (2 * h);
    const double an = g.flat()[coord];
    CHECK(std::abs(an - fd) <= 1e-4 * std::max(1e-3, std::abs(fd)));
  }
}

TEST_CASE("loss-independent fixture gives zero component gradients") {
  const Setup s;
  Parameters p = s.params;
  auto unembed = p.slot(p.layout().unembed);
  std::fill(unembed.begin(), unembed.end(), 0.0);
  const GradientStore g = nll_param_gradients(p, s.batch(0, 2), s.prefix_len);
  for (double v : pool_attribution(g).scores) CHECK(v == 0.0);
}

TEST_CASE("contrastive objective") {
  const Setup s;
  std::vector<ControlSequence> controls;
  for (std::size_t i = 4; i < 8; ++i) controls.push_back(s.control(i));
  std::vector<const ControlSequence*> ptrs;
  for (const auto& c : controls) ptrs.push_back(&c);
  const auto target = s.batch(0, 1);
  ContrastSpec spec;
  spec.prefix_len = s.prefix_len;

  SUBCASE("KL term is zero at the original parameters") {
    const ContrastResult r = contrastive_gradient(s.params, target, ptrs, spec);
    CHECK(std::abs(r.kl) <= 1e-12);
    spec.direction = KlDirection::OriginalFirst;
    CHECK(std::abs(contrastive_gradient(s.params, target, ptrs, spec).kl) <= 1e-12);
  }
  SUBCASE("NLL term gradient is minus the NLL gradient") {
    const ContrastResult r = contrastive_gradient(s.params, target, {}, spec);
    const GradientStore g = nll_param_gradients(s.params, target, s.prefix_len);
    for (std::size_t i = 0; i < g.flat().size(); ++i) CHECK(r.grads.flat()[i] == doctest::Approx(-g.flat()[i]).epsilon(1e-12));
    CHECK(r.value == doctest::Approx(-continuation_nll(s.params, target[0], s.prefix_len)).epsilon(1e-12));
  }
  SUBCASE("value matches a straight-line oracle away from the original parameters") {
    const Parameters moved = noisy_parameters(small_config(99));
    for (bool current_first : {true, false}) {
      for (double sign : {-1.0, 1.0}) {
        spec.direction = current_first ? KlDirection::CurrentFirst : KlDirection::OriginalFirst;
        spec.nll_sign = sign;
        const double oracle = oracle_objective(moved, s.batch(0, 2), controls, sign, s.prefix_len, current_first);
        CHECK(std::abs(contrastive_value(moved, s.batch(0, 2), ptrs, spec) - oracle) < 1e-10);
        CHECK(std::abs(contrastive_gradient(moved, s.batch(0, 2), ptrs, spec).value - oracle) < 1e-10);
      }
    }
  }
  SUBCASE("one descent step lowers the unlearning objective") {
    const Parameters moved = noisy_parameters(small_config(99));
    const ContrastResult r = contrastive_gradient(moved, target, ptrs, spec);
    Parameters stepped = moved;
    for (std::size_t i = 0; i < r.grads.flat().size(); ++i) stepped.flat()[i] -= 1e-4 * r.grads.flat()[i];
    CHECK(contrastive_value(stepped, target, ptrs, spec) < r.value);
  }
}

TEST_CASE("aggregation") {
  const Setup s;
  std::vector<ControlSequence> pool;
  for (std::size_t i = 4; i < 14; ++i) pool.push_back(s.control(i));
  ContrastSpec spec;
  spec.prefix_len = s.prefix_len;
  const std::vector<std::vector<int>> targets{s.seqs[0], s.seqs[1], s.seqs[2]};

  SUBCASE("single target equals pooled contrastive gradient") {
    const AggregateResult a = aggregate_contrastive(s.params, {targets[0]}, {7}, pool, 4, 11, spec);
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<const ControlSequence*> ptrs;
    for (std::size_t i : sample_controls(idx, 4, 11, 7)) ptrs.push_back(&pool[i]);
    CHECK(ptrs.size() == 4);
    const ContrastResult r = contrastive_gradient(s.params, {std::span<const int>(targets[0])}, ptrs, spec);
    CHECK(a.map.scores == pool_attribution(r.grads).scores);
  }
  SUBCASE("order permutation gives an identical map") {
    const AggregateResult a = aggregate_contrastive(s.params, targets, {0, 1, 2}, pool, 4, 11, spec, 3);
    const AggregateResult b =
        aggregate_contrastive(s.params, {targets[2], targets[0], targets[1]}, {2, 0, 1}, pool, 4, 11, spec, 1);
    CHECK(a.total.flat() == b.total.flat());
    CHECK(a.map.scores == b.map.scores);
  }
  CHECK_THROWS_AS(aggregate_contrastive(s.params, {}, {}, pool, 4, 11, spec), ContractError);
}

TEST_CASE("activation gradients") {
  const Setup s;
  const auto batch = s.batch(0, 1);
  const ActivationAttribution a = activation_gradients(s.params, batch, s.prefix_len);
  const std::size_t n = batch[0].size();
  CHECK(a.n_positions == n);
  for (std::size_t l = 0; l < a.n_layers; ++l)
    for (std::size_t c = 0; c < a.n_components; ++c) {
      CHECK(a.at(l, c, n - 1) == 0.0);
      for (std::size_t i = 0; i < n; ++i) CHECK(a.at(l, c, i) >= 0.0);
    }

  SUBCASE("finite differences on activations") {
    const ForwardResult base = forward(s.params, batch[0]);
    auto nll_with = [&](const Patch& patch) {
      ad::Tape tape;
      const BoundParameters bound = bind(tape, s.params, GradPolicy::None);
      return sequence_nll(bound, batch[0], s.prefix_len, &patch).value().item();
    };
    Rng rng(17);
    const auto components = all_components(s.config);
    for (int k = 0; k < 8; ++k) {
      const ComponentId id = components[rng.below(components.size())];
      const std::size_t pos = rng.below(n - 1);
      const ActivationSite site = site_for(id);
      const auto act = base.cache.activation(site, pos);
      double best = 0.0;
      for (std::size_t d = 0; d < act.size(); ++d) {
        Patch plus{site, pos, std::vector<double>(act.begin(), act.end())};
        Patch minus = plus;
        plus.values[d] += 1e-5;
        minus.values[d] -= 1e-5;
        best = std::max(best, std::abs((nll_with(plus) - nll_with(minus)) / 2e-5));
      }
      const double score = a.at(id.layer, component_index(s.config, id), pos);
      CHECK(std::abs(score - best) <= 1e-3 * std::max(1e-4, best));
    }
  }
  SUBCASE("batch mean") {
    const auto pair = s.batch(0, 2);
    const ActivationAttribution both = activation_gradients(s.params, pair, s.prefix_len, 2);
    const ActivationAttribution second = activation_gradients(s.params, s.batch(1, 1), s.prefix_len);
    for (std::size_t i = 0; i < both.scores.size(); ++i)
      CHECK(both.scores[i] == doctest::Approx(0.5 * (a.scores[i] + second.scores[i])).epsilon(1e-12));
  }
}
