#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "memlab/corpus.hpp"
#include "memlab/kernels.hpp"
#include "memlab/model.hpp"
#include "memlab/rng.hpp"

namespace memlab::testing {

inline ModelConfig small_config(std::uint64_t seed = 7) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_mlp = 16;
  c.vocab_size = 32;
  c.max_seq_len = 16;
  c.seed = seed;
  return c;
}

// Init scale is small; spread things out so comparisons are not trivial.
inline Parameters noisy_parameters(const ModelConfig& c, double scale = 0.3) {
  Parameters p = init_parameters(c);
  Rng rng(c.seed + 100);
  for (double& v : p.flat()) v += scale * rng.normal();
  return p;
}

inline std::vector<int> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> t(n);
  for (int& v : t) v = static_cast<int>(rng.below(vocab));
  return t;
}

inline CorpusConfig small_corpus_config(std::uint64_t seed = 3) {
  CorpusConfig c;
  c.n_paragraphs = 40;
  c.n_planted = 4;
  c.planted_dup = 8;
  c.prefix_len = 6;
  c.continuation_len = 6;
  c.vocab_size = 32;
  c.seed = seed;
  return c;
}

/// Rewrites layer 0, head `head` so that the attention from any query onto a
/// key token t is proportional to 1 / frequency(t). Token embeddings become
/// cos(a_t) w1 + sin(a_t) w2 for two orthogonal zero-mean +-1 patterns, so
/// layer norm passes them through up to the epsilon factor; the key reads
/// the w1 coordinate and the query is a constant bias.
inline Parameters plant_inverse_frequency_head(const ModelConfig& config, std::span<const std::uint64_t> frequency,
                                               std::size_t head) {
  Parameters p = init_parameters(config);
  const ParamLayout& layout = p.layout();
  const std::size_t d = config.d_model;
  std::vector<double> w1(d), w2(d);
  for (std::size_t i = 0; i < d; ++i) {
    w1[i] = i % 2 == 0 ? 1.0 : -1.0;
    w2[i] = (i / 2) % 2 == 0 ? 1.0 : -1.0;
  }
  double lo = INFINITY, hi = -INFINITY;
  for (std::uint64_t f : frequency)
    if (f > 0) {
      lo = std::min(lo, std::log(static_cast<double>(f)));
      hi = std::max(hi, std::log(static_cast<double>(f)));
    }
  const double mid = 0.5 * (lo + hi);
  const double amplitude = std::max(0.5 * (hi - lo) * 1.05, 1e-3);

  auto embed = p.slot(layout.token_embed);
  for (std::size_t t = 0; t < config.vocab_size; ++t) {
    const double c = frequency[t] > 0 ? (mid - std::log(static_cast<double>(frequency[t]))) / amplitude : 0.0;
    const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
    for (std::size_t i = 0; i < d; ++i) embed[t * d + i] = c * w1[i] + s * w2[i];
  }
  std::fill(p.slot(layout.pos_embed).begin(), p.slot(layout.pos_embed).end(), 0.0);

  const auto& ls = layout.layer(0);
  auto key = p.slot(ls.key[head]);
  std::fill(key.begin(), key.end(), 0.0);
  for (std::size_t i = 0; i < d; ++i) key[i * config.d_head] = w1[i] / static_cast<double>(d);
  std::fill(p.slot(ls.key_bias[head]).begin(), p.slot(ls.key_bias[head]).end(), 0.0);
  std::fill(p.slot(ls.query[head]).begin(), p.slot(ls.query[head]).end(), 0.0);
  auto qb = p.slot(ls.query_bias[head]);
  std::fill(qb.begin(), qb.end(), 0.0);
  qb[0] = amplitude * std::sqrt(static_cast<double>(config.d_head)) * std::sqrt(1.0 + kernels::kLayerNormEps);
  return p;
}

}  // namespace memlab::testing
