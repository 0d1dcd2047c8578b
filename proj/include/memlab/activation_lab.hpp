#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "memlab/corpus.hpp"
#include "memlab/model.hpp"
#include "memlab/perturb.hpp"

namespace memlab {

// --- first decoded token attention ----------------------------------------

/// Attention from the first decoded position (index prefix_len) onto the
/// prefix columns. The self weight is dropped and rows are not renormalized.
struct AttentionProfile {
  std::size_t paragraph_id = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t prefix_len = 0;
  int first_token = 0;
  std::vector<double> weights;  // [layer][head][prefix position]

  double at(std::size_t layer, std::size_t head, std::size_t position) const {
    return weights.at((layer * n_heads + head) * prefix_len + position);
  }
  std::span<const double> row(std::size_t layer, std::size_t head) const {
    return std::span<const double>(weights).subspan((layer * n_heads + head) * prefix_len, prefix_len);
  }
};

/// Greedy-decodes one token after the prefix, runs the forward pass on
/// prefix + that token and extracts the last attention row of every head.
AttentionProfile first_token_attention(const Parameters& params, std::span<const int> prefix,
                                       std::size_t paragraph_id = 0);
/// Same, with the first decoded token given.
AttentionProfile attention_after_prefix(const Parameters& params, std::span<const int> prefix, int first_token,
                                        std::size_t paragraph_id = 0);

// --- rank / attention correlation ------------------------------------------

enum class RankEstimator { Spearman, PearsonRanks, PearsonTokens };
const char* rank_estimator_name(RankEstimator e);
RankEstimator parse_rank_estimator(const std::string& name);

/// Pearson correlation; nullopt with fewer than two points or zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);
/// Pearson over average ranks (ties share the mean rank).
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

struct RankAttentionProfile {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t n_ranks = 0;
  std::size_t n_paragraphs = 0;
  RankEstimator estimator = RankEstimator::Spearman;
  std::vector<double> mass;              // [layer][head][rank]
  std::vector<std::size_t> occupancy;    // tokens per rank over the set
  std::vector<std::optional<double>> correlation;  // [layer][head], chosen estimator
  std::vector<std::optional<double>> pearson_ranks;  // [layer][head], always reported

  double mass_at(std::size_t layer, std::size_t head, std::size_t rank) const {
    return mass.at((layer * n_heads + head) * n_ranks + rank);
  }
  std::optional<double> correlation_at(std::size_t layer, std::size_t head) const {
    return correlation.at(layer * n_heads + head);
  }
  /// Head with the lowest defined correlation, nullopt if none is defined.
  std::optional<std::size_t> min_head() const;
};

/// Sums each prefix token's attention into its frequency-rank bucket, per
/// head, then correlates rank index with bucket mass over occupied ranks.
/// PearsonTokens instead correlates (rank, weight) over every prefix token.
RankAttentionProfile rank_attention_profile(const std::vector<AttentionProfile>& profiles,
                                            const std::vector<std::vector<int>>& ranks,
                                            RankEstimator estimator = RankEstimator::Spearman);

RankAttentionProfile rank_attention_profile(const Parameters& params, const Corpus& corpus,
                                            const std::vector<std::size_t>& ids,
                                            RankEstimator estimator = RankEstimator::Spearman,
                                            std::size_t threads = 1);

// --- activation patching ----------------------------------------------------

/// A clean / corrupt pair differing in one prefix token. Both sequences are
/// prefix + the model's greedy continuation under that prefix.
struct PatchPair {
  std::size_t paragraph_id = 0;
  std::size_t prefix_len = 0;
  std::size_t position = 0;  // perturbed prefix position
  std::size_t impact = 0;    // first continuation index where the decodes differ
  std::vector<int> clean;
  std::vector<int> corrupt;
};

PatchPair make_patch_pair(const PerturbedParagraph& pmp, std::span<const int> clean_prefix);
/// Throws ContractError unless the pair differs in exactly one prefix
/// position, agrees before the impact index and differs at it.
void validate_patch_pair(const PatchPair& pair);

/// receiving <- donor.
enum class PatchDirection { CleanFromCorrupt, CorruptFromClean };
const char* patch_direction_name(PatchDirection d);

struct PatchResult {
  std::size_t paragraph_id = 0;
  PatchDirection direction = PatchDirection::CleanFromCorrupt;
  ActivationSite site;
  std::size_t position = 0;
  std::size_t impact = 0;
  int target = 0;  // receiving run's token at the impact index
  double base_nll = 0.0;
  double patched_nll = 0.0;
  double delta = 0.0;
};

/// NLL of tokens[row + 1] given tokens[..row], optionally with a patch.
double token_nll(const Parameters& params, std::span<const int> tokens, std::size_t row,
                 const Patch* patch = nullptr);

/// Copies the donor's activation at (site, position) into the receiving run
/// and reports the NLL change of the receiving sequence's token at row + 1.
PatchResult patch_activation(const Parameters& params, std::span<const int> receiving, std::span<const int> donor,
                             const ActivationSite& site, std::size_t position, std::size_t row);

PatchResult activation_patch(const Parameters& params, const PatchPair& pair, const ActivationSite& site,
                             PatchDirection direction);

/// Head outputs, MLP outputs and residuals of every layer.
std::vector<ActivationSite> default_patch_sites(const ModelConfig& config);
/// Parses "L1.head_out.H2", "L0.mlp_out" or "L3.resid".
ActivationSite parse_site(const ModelConfig& config, const std::string& text);
std::string site_name(const ActivationSite& site);

/// Both directions for every pair and site, ordered pair, site, direction.
std::vector<PatchResult> two_way_patch(const Parameters& params, const std::vector<PatchPair>& pairs,
                                       const std::vector<ActivationSite>& sites, std::size_t threads = 1);

}  // namespace memlab
