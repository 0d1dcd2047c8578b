#include "memlab/perturb.hpp"

#include "memlab/error.hpp"
#include "memlab/metrics.hpp"
#include "memlab/parallel.hpp"
#include "memlab/rng.hpp"

namespace memlab {

int random_replacement(std::size_t vocab_size, int original, Rng& rng) {
  if (vocab_size < 2) throw ConfigError("perturbation needs a vocabulary of at least two tokens");
  const int draw = static_cast<int>(rng.below(vocab_size - 1));
  return draw >= original ? draw + 1 : draw;
}

PerturbEntry perturb_once(const Parameters& params, std::span<const int> tokens, std::size_t prefix_len,
                          std::size_t position, int replacement, std::span<const int> reference, double base_nll) {
  if (position >= prefix_len) throw ContractError("perturbation position outside the prefix");
  std::vector<int> changed(tokens.begin(), tokens.end());
  changed[position] = replacement;
  PerturbEntry e;
  e.position = position;
  e.replacement = replacement;
  e.decoded = greedy_decode(params, std::span<const int>(changed).first(prefix_len), reference.size());
  e.em = exact_match(e.decoded, reference);
  e.nll = continuation_nll(params, changed, prefix_len);
  e.nll_delta = e.nll - base_nll;
  return e;
}

PerturbationMap perturb_scan(const Parameters& params, const Corpus& corpus, std::size_t id, std::uint64_t seed,
                             const ReplacementFn& replace) {
  const Paragraph& p = corpus.paragraph(id);
  const std::size_t prefix_len = corpus.config().prefix_len;
  const std::size_t cont_len = corpus.config().continuation_len;
  const auto prefix = corpus.prefix(id);

  PerturbationMap map;
  map.paragraph_id = id;
  map.reference = greedy_decode(params, prefix, cont_len);
  map.base_nll = continuation_nll(params, p.tokens, prefix_len);

  Rng rng = Rng::derive(seed, id);
  std::vector<int> changed(p.tokens);
  // The decoder keeps the untouched prefix[0..i) cached across positions.
  IncrementalDecoder dec(params);
  for (std::size_t i = 0; i < prefix_len; ++i) {
    const int original = prefix[i];
    const int token = replace ? replace(i, original, rng) : random_replacement(params.config().vocab_size, original, rng);
    PerturbEntry e;
    e.position = i;
    e.replacement = token;
    changed[i] = token;

    dec.truncate(i);
    for (std::size_t j = i; j + 1 < prefix_len; ++j) dec.push(changed[j], false);
    int next = argmax(dec.push(changed[prefix_len - 1]));
    e.decoded.push_back(next);
    while (e.decoded.size() < cont_len) {
      next = argmax(dec.push(next));
      e.decoded.push_back(next);
    }
    e.em = exact_match(e.decoded, map.reference);
    e.nll = continuation_nll(params, changed, prefix_len);
    e.nll_delta = e.nll - map.base_nll;
    map.entries.push_back(std::move(e));

    changed[i] = original;
    dec.truncate(i);
    dec.push(original, false);
  }
  return map;
}

std::vector<double> em_drop_profile(const std::vector<PerturbationMap>& maps) {
  if (maps.empty()) throw ContractError("em_drop_profile of an empty set");
  const std::size_t n = maps.front().entries.size();
  std::vector<double> profile(n, 0.0);
  for (const auto& m : maps) {
    if (m.entries.size() != n) throw ContractError("em_drop_profile needs equal prefix lengths");
    for (std::size_t i = 0; i < n; ++i)
      profile[i] += static_cast<double>(m.full_em() - m.entries[i].em);
  }
  for (double& v : profile) v /= static_cast<double>(maps.size());
  return profile;
}

std::vector<PerturbationMap> scan_set(const Parameters& params, const Corpus& corpus,
                                      const std::vector<std::size_t>& ids, std::uint64_t seed, std::size_t repeats,
                                      std::size_t threads) {
  if (repeats == 0) throw ConfigError("repeats must be >= 1");
  std::vector<PerturbationMap> maps(ids.size() * repeats);
  parallel_for(maps.size(), threads, [&](std::size_t k) {
    maps[k] = perturb_scan(params, corpus, ids[k / repeats], seed + k % repeats);
  });
  return maps;
}

std::optional<PerturbedParagraph> extract_pmp(const PerturbationMap& map, std::span<const int> prefix) {
  if (map.entries.size() != prefix.size()) throw ContractError("perturbation map does not cover the prefix");
  std::size_t best = 0;
  std::size_t best_drop = 0;
  for (std::size_t i = 0; i < map.entries.size(); ++i) {
    const std::size_t drop = map.full_em() - map.entries[i].em;
    if (drop > best_drop) {
      best_drop = drop;
      best = i;
    }
  }
  if (best_drop == 0) return std::nullopt;
  const PerturbEntry& e = map.entries[best];
  PerturbedParagraph pmp;
  pmp.original_id = map.paragraph_id;
  pmp.position = best;
  pmp.replacement = e.replacement;
  pmp.perturbed_prefix.assign(prefix.begin(), prefix.end());
  pmp.perturbed_prefix[best] = e.replacement;
  pmp.continuation = e.decoded;
  pmp.reference = map.reference;
  pmp.first_impact = e.em;
  pmp.em_drop = best_drop;
  return pmp;
}

}  // namespace memlab
