#include "memlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "memlab/error.hpp"
#include "memlab/json_io.hpp"
#include "memlab/rng.hpp"

namespace memlab {

void CorpusConfig::validate() const {
  if (n_paragraphs == 0) throw ConfigError("corpus needs at least one paragraph");
  if (n_planted > n_paragraphs)
    throw ConfigError("n_planted (" + std::to_string(n_planted) + ") exceeds n_paragraphs (" +
                      std::to_string(n_paragraphs) + ")");
  if (planted_dup < 1) throw ConfigError("planted_dup must be >= 1");
  if (prefix_len < 1 || continuation_len < 1) throw ConfigError("prefix and continuation must be non-empty");
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (!(zipf_exponent > 0.0)) throw ConfigError("zipf_exponent must be > 0");
  if (min_unique_ratio < 0.0 || min_unique_ratio > 1.0) throw ConfigError("min_unique_ratio must be in [0, 1]");
  if (successor_prob < 0.0 || successor_prob > 1.0) throw ConfigError("successor_prob must be in [0, 1]");
  if (successor_prob > 0.0 && successors_per_token < 1) throw ConfigError("successors_per_token must be >= 1");
  for (int t : excluded_tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw ConfigError("excluded token outside vocabulary");
}

Corpus::Corpus(CorpusConfig config, std::vector<Paragraph> paragraphs)
    : config_(std::move(config)), paragraphs_(std::move(paragraphs)), frequencies_(config_.vocab_size, 0) {
  for (std::size_t i = 0; i < paragraphs_.size(); ++i) {
    const Paragraph& p = paragraphs_[i];
    if (p.id != i) throw InputError("paragraph ids must be 0..n-1 in order");
    if (p.tokens.size() != config_.paragraph_len())
      throw InputError("paragraph " + std::to_string(i) + " has " + std::to_string(p.tokens.size()) +
                       " tokens, expected " + std::to_string(config_.paragraph_len()));
    for (int t : p.tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size)
        throw InputError("paragraph " + std::to_string(i) + " has token outside vocabulary");
      frequencies_[t] += p.dup_count;
    }
  }
}

std::span<const int> Corpus::prefix(std::size_t id) const {
  return std::span<const int>(paragraph(id).tokens).first(config_.prefix_len);
}

std::span<const int> Corpus::continuation(std::size_t id) const {
  return std::span<const int>(paragraph(id).tokens).subspan(config_.prefix_len);
}

std::vector<std::size_t> Corpus::planted_ids() const {
  std::vector<std::size_t> out;
  for (const auto& p : paragraphs_)
    if (p.dup_count > 1) out.push_back(p.id);
  return out;
}

std::vector<std::size_t> Corpus::singleton_ids() const {
  std::vector<std::size_t> out;
  for (const auto& p : paragraphs_)
    if (p.dup_count == 1) out.push_back(p.id);
  return out;
}

ZipfSampler::ZipfSampler(std::size_t vocab_size, double exponent) : cdf_(vocab_size) {
  double total = 0.0;
  for (std::size_t r = 0; r < vocab_size; ++r) {
    total += std::pow(static_cast<double>(r + 1), -exponent);
    cdf_[r] = total;
  }
  for (double& c : cdf_) c /= total;
  cdf_.back() = 1.0;
}

int ZipfSampler::index_of(double u) const {
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return static_cast<int>(std::min<std::ptrdiff_t>(it - cdf_.begin(), static_cast<std::ptrdiff_t>(cdf_.size()) - 1));
}

double ZipfSampler::probability(int token) const {
  return token == 0 ? cdf_[0] : cdf_[token] - cdf_[token - 1];
}

double unique_ratio(std::span<const int> tokens) {
  if (tokens.empty()) return 0.0;
  const std::set<int> distinct(tokens.begin(), tokens.end());
  return static_cast<double>(distinct.size()) / static_cast<double>(tokens.size());
}

bool passes_filter(std::span<const int> tokens, double min_unique_ratio, std::span<const int> excluded) {
  if (unique_ratio(tokens) < min_unique_ratio) return false;
  for (int t : tokens)
    if (std::find(excluded.begin(), excluded.end(), t) != excluded.end()) return false;
  return true;
}

std::vector<Paragraph> preprocess_filter(const std::vector<Paragraph>& paragraphs, double min_unique_ratio,
                                         std::span<const int> excluded) {
  std::vector<Paragraph> out;
  for (const auto& p : paragraphs)
    if (passes_filter(p.tokens, min_unique_ratio, excluded)) out.push_back(p);
  return out;
}

Corpus generate_corpus(const CorpusConfig& config) {
  config.validate();
  const ZipfSampler zipf(config.vocab_size, config.zipf_exponent);
  const std::size_t len = config.paragraph_len();

  std::vector<std::vector<int>> successors;
  if (config.successor_prob > 0.0) {
    Rng table_rng = Rng::derive(config.seed, 1);
    successors.resize(config.vocab_size);
    for (auto& s : successors)
      for (std::size_t k = 0; k < config.successors_per_token; ++k) s.push_back(zipf(table_rng));
  }

  Rng rng = Rng::derive(config.seed, 2);
  std::vector<Paragraph> paragraphs;
  const std::size_t max_attempts = 100 * config.n_paragraphs + 1000;
  for (std::size_t attempt = 0; paragraphs.size() < config.n_paragraphs; ++attempt) {
    if (attempt == max_attempts)
      throw ConfigError("could not generate enough paragraphs passing the filter; lower min_unique_ratio");
    std::vector<int> tokens(len);
    for (std::size_t i = 0; i < len; ++i) {
      if (i > 0 && !successors.empty() && rng.uniform() < config.successor_prob) {
        const auto& s = successors[tokens[i - 1]];
        tokens[i] = s[rng.below(s.size())];
      } else {
        tokens[i] = zipf(rng);
      }
    }
    if (!passes_filter(tokens, config.min_unique_ratio, config.excluded_tokens)) continue;
    paragraphs.push_back({paragraphs.size(), std::move(tokens), 1});
  }

  // Planted duplicates: a seeded sample without replacement.
  Rng pick = Rng::derive(config.seed, 3);
  std::vector<std::size_t> order(config.n_paragraphs);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i < config.n_planted; ++i) {
    std::swap(order[i], order[i + pick.below(order.size() - i)]);
    paragraphs[order[i]].dup_count = config.planted_dup;
  }
  return Corpus(config, std::move(paragraphs));
}

std::vector<int> frequency_ranks(std::span<const std::uint64_t> frequencies, std::span<const int> tokens) {
  std::vector<std::uint64_t> freq(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= frequencies.size())
      throw InputError("token " + std::to_string(tokens[i]) + " not in frequency table");
    freq[i] = frequencies[tokens[i]];
  }
  std::vector<std::uint64_t> levels = freq;
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  std::vector<int> ranks(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i)
    ranks[i] = static_cast<int>(std::lower_bound(levels.begin(), levels.end(), freq[i]) - levels.begin());
  return ranks;
}

std::string corpus_to_jsonl(const Corpus& corpus) {
  std::ostringstream out;
  out << nlohmann::json{{"config", corpus.config()}, {"seed", corpus.config().seed}}.dump() << '\n';
  for (const auto& p : corpus.paragraphs())
    out << nlohmann::json{{"id", p.id}, {"tokens", p.tokens}, {"dup_count", p.dup_count}}.dump() << '\n';
  return out.str();
}

Corpus corpus_from_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw InputError("corpus file is empty");
  CorpusConfig config;
  std::vector<Paragraph> paragraphs;
  try {
    config = nlohmann::json::parse(line).at("config").get<CorpusConfig>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      paragraphs.push_back({j.at("id").get<std::size_t>(), j.at("tokens").get<std::vector<int>>(),
                            j.at("dup_count").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed corpus file: ") + e.what());
  }
  return Corpus(config, std::move(paragraphs));
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write corpus " + path.string());
  f << corpus_to_jsonl(corpus);
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("missing corpus " + path.string());
  std::ostringstream buf;
  buf << f.rdbuf();
  return corpus_from_jsonl(buf.str());
}

}  // namespace memlab
