#pragma once

#include "json.hpp"
#include "memlab/corpus.hpp"
#include "memlab/model.hpp"

namespace memlab {

// Missing keys keep their defaults so config files may be partial.
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, n_layers, n_heads, d_model, d_head, d_mlp, vocab_size,
                                                max_seq_len, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CorpusConfig, n_paragraphs, n_planted, planted_dup, prefix_len,
                                                continuation_len, vocab_size, zipf_exponent, min_unique_ratio,
                                                excluded_tokens, successor_prob, successors_per_token, seed)

}  // namespace memlab
