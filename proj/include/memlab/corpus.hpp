#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace memlab {

struct CorpusConfig {
  std::size_t n_paragraphs = 512;
  std::size_t n_planted = 32;
  std::size_t planted_dup = 64;
  std::size_t prefix_len = 32;
  std::size_t continuation_len = 32;
  std::size_t vocab_size = 2048;
  double zipf_exponent = 1.1;
  double min_unique_ratio = 0.5;
  std::vector<int> excluded_tokens;
  // Probability that a token is drawn from a small per-token successor
  // list instead of the unigram table. 0 gives iid Zipf paragraphs.
  double successor_prob = 0.5;
  std::size_t successors_per_token = 4;
  std::uint64_t seed = 0;

  std::size_t paragraph_len() const { return prefix_len + continuation_len; }
  void validate() const;
  bool operator==(const CorpusConfig&) const = default;
};

struct Paragraph {
  std::size_t id = 0;
  std::vector<int> tokens;
  std::size_t dup_count = 1;

  bool operator==(const Paragraph&) const = default;
};

class Corpus {
 public:
  Corpus() = default;
  Corpus(CorpusConfig config, std::vector<Paragraph> paragraphs);

  const CorpusConfig& config() const { return config_; }
  const std::vector<Paragraph>& paragraphs() const { return paragraphs_; }
  const Paragraph& paragraph(std::size_t id) const { return paragraphs_.at(id); }
  std::size_t size() const { return paragraphs_.size(); }
  /// Token counts over the training stream (each paragraph weighted by dup_count).
  const std::vector<std::uint64_t>& frequencies() const { return frequencies_; }

  std::span<const int> prefix(std::size_t id) const;
  std::span<const int> continuation(std::size_t id) const;
  /// Ids with dup_count > 1, ascending.
  std::vector<std::size_t> planted_ids() const;
  std::vector<std::size_t> singleton_ids() const;

  bool operator==(const Corpus& o) const { return config_ == o.config_ && paragraphs_ == o.paragraphs_; }

 private:
  CorpusConfig config_;
  std::vector<Paragraph> paragraphs_;
  std::vector<std::uint64_t> frequencies_;
};

/// Zipfian token sampler over ids 0..V-1; id 0 is the most probable.
class ZipfSampler {
 public:
  ZipfSampler(std::size_t vocab_size, double exponent);
  template <class R>
  int operator()(R& rng) const {
    return index_of(rng.uniform());
  }
  double probability(int token) const;

 private:
  int index_of(double u) const;
  std::vector<double> cdf_;
};

Corpus generate_corpus(const CorpusConfig& config);

double unique_ratio(std::span<const int> tokens);
bool passes_filter(std::span<const int> tokens, double min_unique_ratio, std::span<const int> excluded);
/// Drops paragraphs with too few distinct tokens or containing an excluded token.
std::vector<Paragraph> preprocess_filter(const std::vector<Paragraph>& paragraphs, double min_unique_ratio = 0.5,
                                         std::span<const int> excluded = {});

/// Dense rank of each position by corpus frequency, 0 = rarest; equal
/// frequencies share a rank.
std::vector<int> frequency_ranks(std::span<const std::uint64_t> frequencies, std::span<const int> tokens);

std::string corpus_to_jsonl(const Corpus& corpus);
Corpus corpus_from_jsonl(const std::string& text);
void save_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace memlab
