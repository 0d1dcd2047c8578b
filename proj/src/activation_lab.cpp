#include "memlab/activation_lab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "memlab/error.hpp"
#include "memlab/parallel.hpp"

namespace memlab {

AttentionProfile first_token_attention(const Parameters& params, std::span<const int> prefix,
                                       std::size_t paragraph_id) {
  if (prefix.empty()) throw ContractError("first_token_attention needs a non-empty prefix");
  const auto first = greedy_decode(params, prefix, 1);
  return attention_after_prefix(params, prefix, first.front(), paragraph_id);
}

AttentionProfile attention_after_prefix(const Parameters& params, std::span<const int> prefix, int first_token,
                                        std::size_t paragraph_id) {
  if (prefix.empty()) throw ContractError("attention_after_prefix needs a non-empty prefix");
  const ModelConfig& config = params.config();
  std::vector<int> tokens(prefix.begin(), prefix.end());
  tokens.push_back(first_token);
  const ForwardResult fwd = forward(params, tokens);

  AttentionProfile p;
  p.paragraph_id = paragraph_id;
  p.n_layers = config.n_layers;
  p.n_heads = config.n_heads;
  p.prefix_len = prefix.size();
  p.first_token = first_token;
  p.weights.reserve(config.n_layers * config.n_heads * prefix.size());
  const std::size_t query = prefix.size();
  for (std::size_t l = 0; l < config.n_layers; ++l)
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      const ad::Tensor& a = fwd.cache.attention(l, h);
      for (std::size_t j = 0; j < prefix.size(); ++j) p.weights.push_back(a(query, j));
    }
  return p;
}

const char* rank_estimator_name(RankEstimator e) {
  switch (e) {
    case RankEstimator::Spearman: return "spearman";
    case RankEstimator::PearsonRanks: return "pearson_ranks";
    case RankEstimator::PearsonTokens: return "pearson_tokens";
  }
  return "?";
}

RankEstimator parse_rank_estimator(const std::string& name) {
  for (RankEstimator e : {RankEstimator::Spearman, RankEstimator::PearsonRanks, RankEstimator::PearsonTokens})
    if (name == rank_estimator_name(e)) return e;
  throw ConfigError("unknown rank estimator '" + name + "' (spearman, pearson_ranks, pearson_tokens)");
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ContractError("pearson needs equal-length inputs");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ContractError("spearman needs equal-length inputs");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

std::optional<std::size_t> RankAttentionProfile::min_head() const {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < correlation.size(); ++i)
    if (correlation[i] && (!best || *correlation[i] < *correlation[*best])) best = i;
  return best;
}

RankAttentionProfile rank_attention_profile(const std::vector<AttentionProfile>& profiles,
                                            const std::vector<std::vector<int>>& ranks, RankEstimator estimator) {
  if (profiles.empty()) throw ContractError("rank_attention_profile needs a non-empty paragraph set");
  if (profiles.size() != ranks.size()) throw ContractError("one rank vector per attention profile required");
  const AttentionProfile& first = profiles.front();
  RankAttentionProfile out;
  out.n_layers = first.n_layers;
  out.n_heads = first.n_heads;
  out.n_ranks = first.prefix_len;
  out.n_paragraphs = profiles.size();
  out.estimator = estimator;
  const std::size_t n_cells = out.n_layers * out.n_heads;
  out.mass.assign(n_cells * out.n_ranks, 0.0);
  out.occupancy.assign(out.n_ranks, 0);

  std::vector<std::vector<double>> token_ranks(n_cells), token_weights(n_cells);
  for (std::size_t n = 0; n < profiles.size(); ++n) {
    const AttentionProfile& p = profiles[n];
    if (p.n_layers != out.n_layers || p.n_heads != out.n_heads || p.prefix_len != out.n_ranks)
      throw ContractError("attention profiles have different shapes");
    if (ranks[n].size() != p.prefix_len) throw ContractError("rank vector length differs from prefix length");
    for (int r : ranks[n]) {
      if (r < 0 || static_cast<std::size_t>(r) >= out.n_ranks) throw ContractError("rank outside [0, prefix length)");
      ++out.occupancy[r];
    }
    for (std::size_t c = 0; c < n_cells; ++c)
      for (std::size_t j = 0; j < p.prefix_len; ++j) {
        const double w = p.weights[c * p.prefix_len + j];
        out.mass[c * out.n_ranks + ranks[n][j]] += w;
        if (estimator == RankEstimator::PearsonTokens) {
          token_ranks[c].push_back(ranks[n][j]);
          token_weights[c].push_back(w);
        }
      }
  }

  std::vector<double> occupied;
  for (std::size_t r = 0; r < out.n_ranks; ++r)
    if (out.occupancy[r] > 0) occupied.push_back(static_cast<double>(r));
  for (std::size_t c = 0; c < n_cells; ++c) {
    std::vector<double> m;
    for (double r : occupied) m.push_back(out.mass[c * out.n_ranks + static_cast<std::size_t>(r)]);
    const auto pr = pearson(occupied, m);
    out.pearson_ranks.push_back(pr);
    switch (estimator) {
      case RankEstimator::Spearman: out.correlation.push_back(spearman(occupied, m)); break;
      case RankEstimator::PearsonRanks: out.correlation.push_back(pr); break;
      case RankEstimator::PearsonTokens: out.correlation.push_back(pearson(token_ranks[c], token_weights[c])); break;
    }
  }
  return out;
}

RankAttentionProfile rank_attention_profile(const Parameters& params, const Corpus& corpus,
                                            const std::vector<std::size_t>& ids, RankEstimator estimator,
                                            std::size_t threads) {
  if (ids.empty()) throw ContractError("rank_attention_profile needs a non-empty paragraph set");
  std::vector<AttentionProfile> profiles(ids.size());
  std::vector<std::vector<int>> ranks(ids.size());
  parallel_for(ids.size(), threads, [&](std::size_t i) {
    const auto prefix = corpus.prefix(ids[i]);
    profiles[i] = first_token_attention(params, prefix, ids[i]);
    ranks[i] = frequency_ranks(corpus.frequencies(), prefix);
  });
  return rank_attention_profile(profiles, ranks, estimator);
}

PatchPair make_patch_pair(const PerturbedParagraph& pmp, std::span<const int> clean_prefix) {
  PatchPair pair;
  pair.paragraph_id = pmp.original_id;
  pair.prefix_len = clean_prefix.size();
  pair.position = pmp.position;
  pair.impact = pmp.first_impact;
  pair.clean.assign(clean_prefix.begin(), clean_prefix.end());
  pair.clean.insert(pair.clean.end(), pmp.reference.begin(), pmp.reference.end());
  pair.corrupt = pmp.perturbed_prefix;
  pair.corrupt.insert(pair.corrupt.end(), pmp.continuation.begin(), pmp.continuation.end());
  validate_patch_pair(pair);
  return pair;
}

void validate_patch_pair(const PatchPair& pair) {
  if (pair.clean.size() != pair.corrupt.size()) throw ContractError("patch pair sequences differ in length");
  if (pair.prefix_len == 0 || pair.prefix_len >= pair.clean.size())
    throw ContractError("patch pair needs a prefix and a continuation");
  if (pair.position >= pair.prefix_len) throw ContractError("perturbed position outside the prefix");
  for (std::size_t i = 0; i < pair.prefix_len; ++i)
    if ((pair.clean[i] != pair.corrupt[i]) != (i == pair.position))
      throw ContractError("patch pair must differ exactly at the perturbed prefix position");
  const std::size_t cont = pair.clean.size() - pair.prefix_len;
  if (pair.impact >= cont) throw ContractError("impact index beyond the continuation");
  for (std::size_t k = 0; k < pair.impact; ++k)
    if (pair.clean[pair.prefix_len + k] != pair.corrupt[pair.prefix_len + k])
      throw ContractError("patch pair continuations differ before the impact index");
  if (pair.clean[pair.prefix_len + pair.impact] == pair.corrupt[pair.prefix_len + pair.impact])
    throw ContractError("patch pair continuations agree at the impact index");
}

const char* patch_direction_name(PatchDirection d) {
  return d == PatchDirection::CleanFromCorrupt ? "clean<-corrupt" : "corrupt<-clean";
}

double token_nll(const Parameters& params, std::span<const int> tokens, std::size_t row, const Patch* patch) {
  if (row + 1 >= tokens.size()) throw ContractError("token_nll row has no next token");
  ad::Tape tape;
  const BoundParameters bound = bind(tape, params, GradPolicy::None);
  ForwardOptions options;
  options.logit_rows = std::vector<std::size_t>{row};
  options.patch = patch;
  const ad::Tensor logits = forward_taped(bound, tokens, options).logits.value();
  const int target = tokens[row + 1];
  double max = logits(0, 0);
  for (std::size_t v = 1; v < logits.cols; ++v) max = std::max(max, logits(0, v));
  double sum = 0.0;
  for (std::size_t v = 0; v < logits.cols; ++v) sum += std::exp(logits(0, v) - max);
  return std::log(sum) + max - logits(0, static_cast<std::size_t>(target));
}

PatchResult patch_activation(const Parameters& params, std::span<const int> receiving, std::span<const int> donor,
                             const ActivationSite& site, std::size_t position, std::size_t row) {
  const ModelConfig& config = params.config();
  if (site.layer >= config.n_layers || site.head >= config.n_heads) throw ContractError("patch site outside the model");
  if (position >= donor.size() || position >= receiving.size()) throw ContractError("patch position beyond sequence");
  const ForwardResult donor_run = forward(params, donor.first(position + 1));
  Patch patch;
  patch.site = site;
  patch.position = position;
  const auto values = donor_run.cache.activation(site, position);
  patch.values.assign(values.begin(), values.end());

  PatchResult r;
  r.site = site;
  r.position = position;
  r.target = receiving[row + 1];
  r.base_nll = token_nll(params, receiving, row);
  r.patched_nll = token_nll(params, receiving, row, &patch);
  r.delta = r.patched_nll - r.base_nll;
  if (!std::isfinite(r.delta)) throw NumericError("non-finite patch delta at " + site.label());
  return r;
}

PatchResult activation_patch(const Parameters& params, const PatchPair& pair, const ActivationSite& site,
                             PatchDirection direction) {
  validate_patch_pair(pair);
  const bool clean_receives = direction == PatchDirection::CleanFromCorrupt;
  const std::vector<int>& receiving = clean_receives ? pair.clean : pair.corrupt;
  const std::vector<int>& donor = clean_receives ? pair.corrupt : pair.clean;
  PatchResult r = patch_activation(params, receiving, donor, site, pair.position, pair.prefix_len + pair.impact - 1);
  r.paragraph_id = pair.paragraph_id;
  r.direction = direction;
  r.impact = pair.impact;
  return r;
}

std::vector<ActivationSite> default_patch_sites(const ModelConfig& config) {
  std::vector<ActivationSite> sites;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (std::size_t h = 0; h < config.n_heads; ++h) sites.push_back({l, SiteKind::HeadOutput, h});
    sites.push_back({l, SiteKind::MlpOut, 0});
    sites.push_back({l, SiteKind::Residual, 0});
  }
  return sites;
}

namespace {

struct KindName {
  SiteKind kind;
  const char* name;
  bool per_head;
};

constexpr KindName kKindNames[] = {
    {SiteKind::Key, "k", true},           {SiteKind::Query, "q", true},       {SiteKind::Value, "v", true},
    {SiteKind::HeadOutput, "head_out", true}, {SiteKind::MlpIn, "mlp_in", false}, {SiteKind::MlpOut, "mlp_out", false},
    {SiteKind::Residual, "resid", false},
};

}  // namespace

std::string site_name(const ActivationSite& site) {
  for (const KindName& k : kKindNames)
    if (k.kind == site.kind)
      return "L" + std::to_string(site.layer) + "." + k.name + (k.per_head ? ".H" + std::to_string(site.head) : "");
  return "?";
}

ActivationSite parse_site(const ModelConfig& config, const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream in(text);
  for (std::string part; std::getline(in, part, '.');) parts.push_back(part);
  auto bad = [&]() { return ConfigError("bad site '" + text + "' (expected e.g. L1.head_out.H2, L0.mlp_out, L3.resid)"); };
  auto number = [&](const std::string& s, char tag) -> std::size_t {
    if (s.size() < 2 || s[0] != tag || !std::all_of(s.begin() + 1, s.end(), ::isdigit)) throw bad();
    return std::stoul(s.substr(1));
  };
  if (parts.size() < 2) throw bad();
  ActivationSite site;
  site.layer = number(parts[0], 'L');
  const KindName* kind = nullptr;
  for (const KindName& k : kKindNames)
    if (parts[1] == k.name) kind = &k;
  if (!kind || parts.size() != (kind->per_head ? 3u : 2u)) throw bad();
  site.kind = kind->kind;
  if (kind->per_head) site.head = number(parts[2], 'H');
  if (site.layer >= config.n_layers || site.head >= config.n_heads)
    throw ConfigError("site '" + text + "' is outside the model");
  return site;
}

std::vector<PatchResult> two_way_patch(const Parameters& params, const std::vector<PatchPair>& pairs,
                                       const std::vector<ActivationSite>& sites, std::size_t threads) {
  const std::size_t per_pair = 2 * sites.size();
  std::vector<PatchResult> out(pairs.size() * per_pair);
  parallel_for(out.size(), threads, [&](std::size_t i) {
    const PatchPair& pair = pairs[i / per_pair];
    const std::size_t k = i % per_pair;
    out[i] = activation_patch(params, pair, sites[k / 2],
                              k % 2 == 0 ? PatchDirection::CleanFromCorrupt : PatchDirection::CorruptFromClean);
  });
  return out;
}

}  // namespace memlab
