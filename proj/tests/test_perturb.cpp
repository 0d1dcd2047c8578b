#include "doctest.h"
#include "fixtures.hpp"
#include "memlab/error.hpp"
#include "memlab/metrics.hpp"
#include "memlab/perturb.hpp"

using namespace memlab;
using namespace memlab::testing;

namespace {

struct Setup {
  Corpus corpus = generate_corpus(small_corpus_config());
  Parameters params = noisy_parameters(small_config(), 0.5);
};

PerturbationMap synthetic_map(const std::vector<std::size_t>& ems, std::size_t full) {
  PerturbationMap m;
  m.reference.assign(full, 1);
  for (std::size_t i = 0; i < ems.size(); ++i) {
    PerturbEntry e;
    e.position = i;
    e.replacement = 100 + static_cast<int>(i);
    e.em = ems[i];
    e.decoded.assign(full, 1);
    if (ems[i] < full) e.decoded[ems[i]] = 2;
    m.entries.push_back(e);
  }
  return m;
}

}  // namespace

TEST_CASE("no-op replacement gives zero drop exactly") {
  const Setup s;
  const auto same = [](std::size_t, int original, Rng&) { return original; };
  const PerturbationMap m = perturb_scan(s.params, s.corpus, 0, 1, same);
  REQUIRE(m.entries.size() == s.corpus.config().prefix_len);
  for (const auto& e : m.entries) {
    CHECK(e.em == m.full_em());
    CHECK(e.nll_delta == 0.0);
  }
  for (double d : em_drop_profile({m})) CHECK(d == 0.0);
  CHECK_FALSE(extract_pmp(m, s.corpus.prefix(0)).has_value());
}

TEST_CASE("random replacement never returns the original") {
  Rng rng(3);
  for (int k = 0; k < 500; ++k) {
    const int original = static_cast<int>(rng.below(8));
    const int r = random_replacement(8, original, rng);
    CHECK(r != original);
    CHECK(r >= 0);
    CHECK(r < 8);
  }
}

TEST_CASE("every map entry matches an independent single perturbation") {
  const Setup s;
  const std::size_t prefix_len = s.corpus.config().prefix_len;
  for (std::size_t id : {0u, 5u, 17u}) {
    const PerturbationMap m = perturb_scan(s.params, s.corpus, id, 9);
    CHECK(m == perturb_scan(s.params, s.corpus, id, 9));
    CHECK(m.reference == greedy_decode(s.params, s.corpus.prefix(id), s.corpus.config().continuation_len));
    for (const auto& e : m.entries) {
      const PerturbEntry o = perturb_once(s.params, s.corpus.paragraph(id).tokens, prefix_len, e.position,
                                          e.replacement, m.reference, m.base_nll);
      CHECK(e.decoded == o.decoded);
      CHECK(e.em == o.em);
      CHECK(e.nll == o.nll);
      CHECK(e.replacement != s.corpus.paragraph(id).tokens[e.position]);
    }
  }
}

TEST_CASE("drop profile") {
  const Setup s;
  const auto maps = scan_set(s.params, s.corpus, {0, 1, 2, 3}, 4, 2, 3);
  REQUIRE(maps.size() == 8);
  CHECK(maps == scan_set(s.params, s.corpus, {0, 1, 2, 3}, 4, 2, 1));
  CHECK(maps[1] == perturb_scan(s.params, s.corpus, 0, 5));

  SUBCASE("single map") {
    const auto profile = em_drop_profile({maps[0]});
    for (std::size_t i = 0; i < profile.size(); ++i)
      CHECK(profile[i] == static_cast<double>(maps[0].full_em() - maps[0].entries[i].em));
  }
  SUBCASE("brute-force recomputation") {
    const auto profile = em_drop_profile(maps);
    for (std::size_t i = 0; i < profile.size(); ++i) {
      double sum = 0.0;
      for (const auto& m : maps) sum += static_cast<double>(m.full_em()) - static_cast<double>(m.entries[i].em);
      CHECK(std::abs(profile[i] - sum / 8.0) < 1e-12);
    }
  }
  CHECK_THROWS_AS(em_drop_profile({}), ContractError);
}

TEST_CASE("pmp extraction") {
  const std::vector<int> prefix{10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
  SUBCASE("unique maximum") {
    std::vector<std::size_t> ems(10, 6);
    ems[7] = 1;
    ems[2] = 4;
    const auto pmp = extract_pmp(synthetic_map(ems, 6), prefix);
    REQUIRE(pmp);
    CHECK(pmp->position == 7);
    CHECK(pmp->em_drop == 5);
    CHECK(pmp->perturbed_prefix[7] == 107);
    CHECK(pmp->perturbed_prefix[6] == 16);
  }
  SUBCASE("ties go to the lowest position") {
    std::vector<std::size_t> ems(10, 6);
    ems[3] = 2;
    ems[9] = 2;
    const auto pmp = extract_pmp(synthetic_map(ems, 6), prefix);
    REQUIRE(pmp);
    CHECK(pmp->position == 3);
  }
  SUBCASE("first impact is the first differing index") {
    const Setup s;
    const auto maps = scan_set(s.params, s.corpus, {0, 1, 2, 3, 4, 5}, 2);
    int found = 0;
    for (const auto& m : maps) {
      const auto pmp = extract_pmp(m, s.corpus.prefix(m.paragraph_id));
      if (!pmp) continue;
      ++found;
      std::size_t k = 0;
      while (k < pmp->continuation.size() && pmp->continuation[k] == pmp->reference[k]) ++k;
      CHECK(pmp->first_impact == k);
      CHECK(pmp->continuation != pmp->reference);
    }
    CHECK(found > 0);
  }
}
