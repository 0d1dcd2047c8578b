#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "memlab/error.hpp"
#include "memlab/metrics.hpp"

using namespace memlab;
using namespace memlab::testing;

namespace {

double oracle_nll(const Parameters& p, std::span<const int> tokens, std::size_t prefix_len) {
  const ad::Tensor logits = forward_logits(p, tokens);
  double total = 0.0;
  for (std::size_t i = prefix_len; i < tokens.size(); ++i) {
    const std::size_t row = i - 1;
    double z = 0.0;
    for (std::size_t v = 0; v < logits.cols; ++v) z += std::exp(logits(row, v));
    total += std::log(z) - logits(row, tokens[i]);
  }
  return total / static_cast<double>(tokens.size() - prefix_len);
}

std::size_t oracle_em(std::span<const int> a, std::span<const int> b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) break;
    ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("exact match") {
  const std::vector<int> abc{1, 2, 3}, xbc{9, 2, 3}, abx{1, 2, 9};
  CHECK(exact_match(abc, abc) == 3);
  CHECK(exact_match(xbc, abc) == 0);
  CHECK(exact_match(abx, abc) == 2);
  CHECK_THROWS_AS(exact_match(abc, std::vector<int>{1, 2}), ContractError);

  SUBCASE("invariant to content after the first mismatch") {
    const std::vector<int> t1{1, 2, 5, 6}, t2{1, 2, 7, 8}, truth{1, 2, 3, 4};
    CHECK(exact_match(t1, truth) == exact_match(t2, truth));
  }
  SUBCASE("random pairs match a loop oracle") {
    Rng rng(4);
    for (int k = 0; k < 200; ++k) {
      const auto a = random_tokens(rng, 8, 3);
      const auto b = random_tokens(rng, 8, 3);
      CHECK(exact_match(a, b) == oracle_em(a, b));
    }
  }
}

TEST_CASE("nll of a uniform-logit model is ln V") {
  ModelConfig c = small_config();
  c.vocab_size = 2048;
  const Parameters zero(c);
  Rng rng(2);
  const auto tokens = random_tokens(rng, 12, c.vocab_size);
  CHECK(continuation_nll(zero, tokens, 6) == doctest::Approx(std::log(2048.0)).epsilon(1e-12));
}

TEST_CASE("nll matches a log-softmax oracle and batch mean is the mean") {
  const ModelConfig c = small_config();
  const Parameters p = noisy_parameters(c);
  Rng rng(8);
  std::vector<std::vector<int>> seqs;
  for (int k = 0; k < 4; ++k) seqs.push_back(random_tokens(rng, 12, c.vocab_size));
  double mean = 0.0;
  std::vector<std::span<const int>> batch;
  for (const auto& s : seqs) {
    const double nll = continuation_nll(p, s, 6);
    CHECK(std::abs(nll - oracle_nll(p, s, 6)) < 1e-10);
    CHECK(nll >= 0.0);
    mean += nll / 4.0;
    batch.emplace_back(s);
  }
  CHECK(std::abs(batch_nll(p, batch, 6) - mean) < 1e-12);
}

TEST_CASE("thresholds and classification") {
  const SplitThresholds t = SplitThresholds::for_continuation(32);
  CHECK(t.em_max == 32);
  CHECK(t.nmp_upper == 6);
  CHECK(classify(32, t) == MemLabel::MP);
  CHECK(classify(6, t) == MemLabel::NMP);
  CHECK(classify(0, t) == MemLabel::NMP);
  CHECK(classify(7, t) == MemLabel::Partial);
  CHECK_THROWS_AS((SplitThresholds{6, 6}.validate(32)), ConfigError);
  CHECK_THROWS_AS((SplitThresholds{40, 6}.validate(32)), ConfigError);
}

TEST_CASE("split of an untrained model") {
  const CorpusConfig cc = small_corpus_config();
  const Corpus corpus = generate_corpus(cc);
  const Parameters p = init_parameters(small_config());
  const SplitResult s = split(corpus, p, SplitThresholds::for_continuation(cc.continuation_len), 2);
  CHECK(s.mp.empty());
  CHECK(s.records.size() == corpus.size());
  CHECK(s.mp.size() + s.nmp.size() + s.partial.size() == corpus.size());
  for (const auto& r : s.records) {
    CHECK(r.em < cc.continuation_len);
    const auto& truth = corpus.paragraph(r.id).tokens;
    const auto decoded = greedy_decode(p, corpus.prefix(r.id), cc.continuation_len);
    CHECK(r.decoded == decoded);
    CHECK(r.em == oracle_em(decoded, corpus.continuation(r.id)));
    CHECK(std::abs(r.nll - oracle_nll(p, truth, cc.prefix_len)) < 1e-10);
  }
  const SplitResult serial = split(corpus, p, SplitThresholds::for_continuation(cc.continuation_len), 1);
  CHECK(serial.nmp == s.nmp);
  CHECK(serial.partial == s.partial);
}

TEST_CASE("a verbatim paragraph is labeled MP") {
  // Build a corpus whose first continuation is the model's own decode.
  const ModelConfig mc = small_config();
  const Parameters p = noisy_parameters(mc);
  CorpusConfig cc = small_corpus_config();
  Corpus base = generate_corpus(cc);
  std::vector<Paragraph> ps = base.paragraphs();
  const auto decoded = greedy_decode(p, base.prefix(0), cc.continuation_len);
  std::copy(decoded.begin(), decoded.end(), ps[0].tokens.begin() + static_cast<std::ptrdiff_t>(cc.prefix_len));
  const Corpus corpus(cc, ps);
  const auto thresholds = SplitThresholds::for_continuation(cc.continuation_len);
  const SplitResult s = split(corpus, p, thresholds);
  CHECK(s.records[0].label == MemLabel::MP);
  CHECK(s.records[0].nll < std::log(static_cast<double>(mc.vocab_size)));
  const SplitResult band = relabel(s, SplitThresholds{cc.continuation_len, 0});
  CHECK(band.mp == s.mp);
  CHECK(band.records[0].label == MemLabel::MP);
}
