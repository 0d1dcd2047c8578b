#include "memlab/metrics.hpp"

#include "memlab/error.hpp"
#include "memlab/parallel.hpp"

namespace memlab {

std::size_t exact_match(std::span<const int> decoded, std::span<const int> truth) {
  if (decoded.size() != truth.size())
    throw ContractError("exact_match length mismatch: " + std::to_string(decoded.size()) + " vs " +
                        std::to_string(truth.size()));
  std::size_t n = 0;
  while (n < decoded.size() && decoded[n] == truth[n]) ++n;
  return n;
}

double continuation_nll(const Parameters& params, std::span<const int> tokens, std::size_t prefix_len) {
  ad::Tape tape;
  const BoundParameters bound = bind(tape, params, GradPolicy::None);
  return sequence_nll(bound, tokens, prefix_len).value().item();
}

double batch_nll(const Parameters& params, const std::vector<std::span<const int>>& batch, std::size_t prefix_len) {
  if (batch.empty()) throw ContractError("batch_nll of an empty batch");
  double total = 0.0;
  for (const auto& tokens : batch) total += continuation_nll(params, tokens, prefix_len);
  return total / static_cast<double>(batch.size());
}

const char* label_name(MemLabel label) {
  switch (label) {
    case MemLabel::MP: return "MP";
    case MemLabel::NMP: return "NMP";
    case MemLabel::Partial: return "partial";
  }
  return "?";
}

void SplitThresholds::validate(std::size_t continuation_len) const {
  if (!(nmp_upper < em_max && em_max <= continuation_len))
    throw ConfigError("split thresholds need 0 <= nmp_upper < em_max <= continuation length (got nmp_upper " +
                      std::to_string(nmp_upper) + ", em_max " + std::to_string(em_max) + ")");
}

MemLabel classify(std::size_t em, const SplitThresholds& t) {
  if (em == t.em_max) return MemLabel::MP;
  if (em <= t.nmp_upper) return MemLabel::NMP;
  return MemLabel::Partial;
}

MemorizationRecord measure(const Parameters& params, const Corpus& corpus, std::size_t id) {
  const Paragraph& p = corpus.paragraph(id);
  const auto cont = corpus.continuation(id);
  MemorizationRecord r;
  r.id = id;
  r.dup_count = p.dup_count;
  r.decoded = greedy_decode(params, corpus.prefix(id), cont.size());
  r.em = exact_match(r.decoded, cont);
  r.nll = continuation_nll(params, p.tokens, corpus.config().prefix_len);
  return r;
}

namespace {

void assign_labels(SplitResult& out) {
  out.mp.clear();
  out.nmp.clear();
  out.partial.clear();
  for (auto& r : out.records) {
    r.label = classify(r.em, out.thresholds);
    (r.label == MemLabel::MP ? out.mp : r.label == MemLabel::NMP ? out.nmp : out.partial).push_back(r.id);
  }
}

}  // namespace

SplitResult split(const Corpus& corpus, const Parameters& params, const SplitThresholds& thresholds,
                  std::size_t threads) {
  if (corpus.size() == 0) throw ContractError("cannot split an empty corpus");
  thresholds.validate(corpus.config().continuation_len);
  SplitResult out;
  out.thresholds = thresholds;
  out.records.resize(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t i) { out.records[i] = measure(params, corpus, i); });
  assign_labels(out);
  return out;
}

SplitResult relabel(const SplitResult& base, const SplitThresholds& thresholds) {
  SplitResult out = base;
  out.thresholds = thresholds;
  assign_labels(out);
  return out;
}

}  // namespace memlab
