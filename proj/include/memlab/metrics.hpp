#pragma once

#include <span>
#include <string>
#include <vector>

#include "memlab/corpus.hpp"
#include "memlab/model.hpp"

namespace memlab {

/// Length of the longest common prefix. Lengths must match.
std::size_t exact_match(std::span<const int> decoded, std::span<const int> truth);

/// Mean NLL (nats/token) of tokens[prefix_len..] under teacher forcing.
double continuation_nll(const Parameters& params, std::span<const int> tokens, std::size_t prefix_len);
double batch_nll(const Parameters& params, const std::vector<std::span<const int>>& batch, std::size_t prefix_len);

enum class MemLabel { MP, NMP, Partial };
const char* label_name(MemLabel label);

struct SplitThresholds {
  std::size_t em_max = 32;     // MP iff EM == em_max
  std::size_t nmp_upper = 6;   // NMP iff EM <= nmp_upper

  /// Full EM for MPs, 20% of the continuation (rounded down) for NMPs.
  static SplitThresholds for_continuation(std::size_t continuation_len) {
    return {continuation_len, continuation_len / 5};
  }
  void validate(std::size_t continuation_len) const;
};

MemLabel classify(std::size_t em, const SplitThresholds& t);

struct MemorizationRecord {
  std::size_t id = 0;
  std::size_t dup_count = 1;
  double nll = 0.0;
  std::size_t em = 0;
  MemLabel label = MemLabel::NMP;
  std::vector<int> decoded;
};

struct SplitResult {
  SplitThresholds thresholds;
  std::vector<MemorizationRecord> records;  // by paragraph id
  std::vector<std::size_t> mp, nmp, partial;
};

MemorizationRecord measure(const Parameters& params, const Corpus& corpus, std::size_t id);
SplitResult split(const Corpus& corpus, const Parameters& params, const SplitThresholds& thresholds,
                  std::size_t threads = 1);
/// Re-labels existing records (e.g. an EM band sweep) without decoding again.
SplitResult relabel(const SplitResult& base, const SplitThresholds& thresholds);

}  // namespace memlab
