#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "memlab/corpus.hpp"
#include "memlab/model.hpp"
#include "memlab/rng.hpp"

namespace memlab {

struct PerturbEntry {
  std::size_t position = 0;
  int replacement = 0;
  std::size_t em = 0;       // vs the unperturbed greedy continuation
  double nll = 0.0;         // true continuation under the perturbed prefix
  double nll_delta = 0.0;   // nll - unperturbed nll
  std::vector<int> decoded;

  bool operator==(const PerturbEntry&) const = default;
};

struct PerturbationMap {
  std::size_t paragraph_id = 0;
  std::vector<int> reference;  // unperturbed greedy continuation
  double base_nll = 0.0;
  std::vector<PerturbEntry> entries;  // one per prefix position

  std::size_t full_em() const { return reference.size(); }
  bool operator==(const PerturbationMap&) const = default;
};

/// Picks the replacement token for a prefix position. The default draws
/// uniformly from the vocabulary excluding the original token.
using ReplacementFn = std::function<int(std::size_t position, int original, Rng& rng)>;
int random_replacement(std::size_t vocab_size, int original, Rng& rng);

/// One perturbation, decoded from scratch. Used by the scan and as its oracle.
PerturbEntry perturb_once(const Parameters& params, std::span<const int> tokens, std::size_t prefix_len,
                          std::size_t position, int replacement, std::span<const int> reference, double base_nll);

PerturbationMap perturb_scan(const Parameters& params, const Corpus& corpus, std::size_t id, std::uint64_t seed,
                             const ReplacementFn& replace = {});

/// Position-wise mean of (full EM - perturbed EM) over maps of equal prefix length.
std::vector<double> em_drop_profile(const std::vector<PerturbationMap>& maps);

/// Scans every paragraph `repeats` times (seeds seed, seed+1, ...) in parallel.
std::vector<PerturbationMap> scan_set(const Parameters& params, const Corpus& corpus,
                                      const std::vector<std::size_t>& ids, std::uint64_t seed,
                                      std::size_t repeats = 1, std::size_t threads = 1);

struct PerturbedParagraph {
  std::size_t original_id = 0;
  std::size_t position = 0;
  int replacement = 0;
  std::vector<int> perturbed_prefix;
  std::vector<int> continuation;    // decode under the perturbed prefix
  std::vector<int> reference;       // decode under the original prefix
  std::size_t first_impact = 0;     // first continuation index where they differ
  std::size_t em_drop = 0;
};

/// Position with the largest EM drop (lowest position on ties); nullopt
/// when no position changes the decode.
std::optional<PerturbedParagraph> extract_pmp(const PerturbationMap& map, std::span<const int> prefix);

}  // namespace memlab
