// Acceptance run on the reference configuration. Prints one PASS/FAIL line
// per criterion; exit status is the number of failed criteria.
//
//   acceptance [--run-dir DIR] [--reuse] [--threads N] [--config FILE]
//
// --reuse keeps an existing complete run in DIR instead of regenerating it.
// --config replaces the reference configuration (for quick dry runs).

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "fixtures.hpp"
#include "memlab/error.hpp"
#include "memlab/gradcheck.hpp"
#include "memlab/pipeline.hpp"

using namespace memlab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("FAILED ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  return json::parse(f);
}

// --- independent oracles --------------------------------------------------------

std::vector<int> naive_greedy(const Parameters& p, std::span<const int> prefix, std::size_t n) {
  std::vector<int> seq(prefix.begin(), prefix.end());
  for (std::size_t k = 0; k < n; ++k) {
    const ad::Tensor logits = forward_logits(p, seq);
    const double* row = logits.row(logits.rows - 1);
    std::size_t best = 0;
    for (std::size_t v = 1; v < logits.cols; ++v)
      if (row[v] > row[best]) best = v;
    seq.push_back(static_cast<int>(best));
  }
  return {seq.begin() + static_cast<std::ptrdiff_t>(prefix.size()), seq.end()};
}

std::size_t naive_em(std::span<const int> decoded, std::span<const int> truth) {
  std::size_t k = 0;
  while (k < truth.size() && decoded[k] == truth[k]) ++k;
  return k;
}

double naive_nll(const Parameters& p, std::span<const int> tokens, std::size_t prefix_len) {
  const ad::Tensor logits = forward_logits(p, tokens);
  long double total = 0.0L;
  for (std::size_t i = prefix_len; i < tokens.size(); ++i) {
    const double* row = logits.row(i - 1);
    long double mx = row[0];
    for (std::size_t v = 1; v < logits.cols; ++v) mx = std::max<long double>(mx, row[v]);
    long double z = 0.0L;
    for (std::size_t v = 0; v < logits.cols; ++v) z += std::exp(static_cast<long double>(row[v]) - mx);
    total += mx + std::log(z) - row[tokens[i]];
  }
  return static_cast<double>(total / static_cast<long double>(tokens.size() - prefix_len));
}

std::optional<double> naive_pearson(const std::vector<long double>& x, const std::vector<long double>& y) {
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::nullopt;
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

std::vector<long double> average_ranks(const std::vector<long double>& v) {
  std::vector<long double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t below = 0, equal = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      below += v[j] < v[i];
      equal += v[j] == v[i];
    }
    r[i] = below + (equal - 1) / 2.0L;
  }
  return r;
}

struct BruteProfile {
  std::size_t n_ranks = 0;
  std::vector<long double> mass;  // [cell][rank]
  std::vector<std::size_t> occupancy;
  std::vector<std::optional<double>> spearman;
};

/// Attention from the first decoded position read off the full attention
/// pattern, ranks recounted from the raw paragraphs, double-loop bucketing.
BruteProfile brute_rank_profile(const Parameters& p, const Corpus& corpus, const std::vector<std::size_t>& ids) {
  const ModelConfig& c = p.config();
  std::map<int, std::uint64_t> freq;
  for (const auto& para : corpus.paragraphs())
    for (int t : para.tokens) freq[t] += para.dup_count;

  const std::size_t L = corpus.config().prefix_len, cells = c.n_layers * c.n_heads;
  BruteProfile out;
  out.n_ranks = L;
  out.mass.assign(cells * L, 0.0L);
  out.occupancy.assign(L, 0);
  for (std::size_t id : ids) {
    const auto prefix = corpus.prefix(id);
    std::vector<int> seq(prefix.begin(), prefix.end());
    seq.push_back(naive_greedy(p, prefix, 1)[0]);
    const ForwardResult fr = forward(p, seq);
    std::set<std::uint64_t> distinct;
    for (int t : prefix) distinct.insert(freq[t]);
    const std::vector<std::uint64_t> sorted(distinct.begin(), distinct.end());
    for (std::size_t j = 0; j < L; ++j) {
      const auto rank = static_cast<std::size_t>(
          std::find(sorted.begin(), sorted.end(), freq[prefix[j]]) - sorted.begin());
      ++out.occupancy[rank];
      for (std::size_t l = 0; l < c.n_layers; ++l)
        for (std::size_t h = 0; h < c.n_heads; ++h)
          out.mass[(l * c.n_heads + h) * L + rank] += fr.cache.attention(l, h)(L, j);
    }
  }
  for (std::size_t cell = 0; cell < cells; ++cell) {
    std::vector<long double> x, y;
    for (std::size_t r = 0; r < L; ++r)
      if (out.occupancy[r]) {
        x.push_back(r);
        y.push_back(out.mass[cell * L + r]);
      }
    out.spearman.push_back(naive_pearson(average_ranks(x), average_ranks(y)));
  }
  return out;
}

// --- reference run ------------------------------------------------------------------

struct Run {
  fs::path dir;
  PipelineConfig config;
  std::map<std::string, double> seconds;
  json manifest;
};

Run reference_run(const fs::path& dir, const std::string& config_file, bool reuse, std::size_t threads) {
  Run run;
  run.dir = dir;
  if (!config_file.empty()) run.config = load_config(config_file);
  run.config.threads = threads;
  run.config.resolve();
  const RunDir rd(dir);
  json m = rd.manifest();
  std::set<std::string> done;
  for (const auto& r : m["runs"]) done.insert(r["command"].get<std::string>());
  const bool complete = std::all_of(stage_names().begin(), stage_names().end(),
                                    [&](const std::string& s) { return done.contains(s); });
  if (!(reuse && complete)) {
    fs::remove_all(dir);
    const RunDir fresh(dir);
    for (const auto& stage : stage_names()) {
      std::fprintf(stderr, "[acceptance] stage %s\n", stage.c_str());
      run_stage(stage, run.config, fresh);
    }
  }
  run.manifest = RunDir(dir).manifest();
  for (const auto& r : run.manifest["runs"]) run.seconds[r["command"]] = r["seconds"].get<double>();
  return run;
}

// --- criteria -----------------------------------------------------------------------

Outcome gradient_correctness() {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t checks = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ad::GradcheckReport r = ad::gradcheck_all(seed);
    for (const auto& e : r.entries) {
      worst = std::max(worst, e.max_relative_error);
      checks += e.n_checked;
      o.require(e.passed && e.max_relative_error < 1e-4, e.primitive + " seed " + std::to_string(seed));
    }
  }
  const double secs = seconds_since(start);
  o.require(secs < 60.0, "suite under 1 min");
  o.note(std::to_string(ad::differentiable_primitives().size()) + " primitives x 10 seeds, " + std::to_string(checks) +
         " coordinates, max rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f", secs) + " s");
  return o;
}

Outcome memorization_induction(const Run& run) {
  Outcome o;
  const json split = read_json(run.dir / "reports/split.json");
  const std::size_t cont = run.config.corpus.continuation_len;
  std::size_t planted = 0, planted_full = 0, single = 0, single_low = 0;
  for (const auto& r : split["records"]) {
    const std::size_t em = r["em"];
    if (r["dup_count"].get<std::size_t>() > 1) {
      ++planted;
      planted_full += em == cont;
    } else {
      ++single;
      single_low += static_cast<double>(em) <= 0.2 * static_cast<double>(cont);
    }
  }
  const double pf = static_cast<double>(planted_full) / planted, sl = static_cast<double>(single_low) / single;
  o.require(pf >= 0.75, "planted full EM >= 75%");
  o.require(sl >= 0.90, "singletons at low EM >= 90%");
  o.require(run.seconds.at("train") < 600.0, "training under 10 min");
  o.note("planted at full EM " + std::to_string(planted_full) + "/" + std::to_string(planted) +
         ", singletons with EM <= 20% " + std::to_string(single_low) + "/" + std::to_string(single) + ", training " +
         fmt("%.0f", run.seconds.at("train")) + " s");
  return o;
}

Outcome metric_oracles(const Run& run, const Corpus& corpus, const Parameters& params, const json& split) {
  Outcome o;
  const std::size_t prefix_len = corpus.config().prefix_len, cont = corpus.config().continuation_len;

  // EM and NLL against the split artifact.
  std::vector<std::size_t> ids;
  for (const char* set : {"mp", "nmp", "partial"}) {
    const auto v = split[set].get<std::vector<std::size_t>>();
    ids.insert(ids.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(8, v.size())));
  }
  std::size_t em_bad = 0;
  double nll_err = 0.0;
  for (std::size_t id : ids) {
    const json& rec = split["records"][id];
    const auto decoded = naive_greedy(params, corpus.prefix(id), cont);
    em_bad += naive_em(decoded, corpus.continuation(id)) != rec["em"].get<std::size_t>();
    em_bad += decoded != rec["decoded"].get<std::vector<int>>();
    nll_err = std::max(nll_err, std::abs(naive_nll(params, corpus.paragraph(id).tokens, prefix_len) -
                                         rec["nll"].get<double>()));
  }
  o.require(em_bad == 0, "EM oracle");
  o.require(nll_err <= 1e-9, "NLL oracle");

  // Max-abs pooling from raw layout offsets.
  const auto mps = split["mp"].get<std::vector<std::size_t>>();
  std::vector<std::span<const int>> batch;
  for (std::size_t k = 0; k < std::min<std::size_t>(run.config.attribute.n_mp, mps.size()); ++k)
    batch.push_back(corpus.paragraph(mps[k]).tokens);
  const GradientStore store = nll_param_gradients(params, batch, prefix_len, run.config.threads);
  const json heat = read_json(run.dir / "reports/attribution_nll_mp.json");
  const ParamLayout& layout = params.layout();
  double pool_err = 0.0;
  for (std::size_t l = 0; l < params.config().n_layers; ++l)
    for (std::size_t c = 0; c < params.config().components_per_layer(); ++c) {
      const ParamSlot& s = layout.slot(layout.component_slot(component_at(params.config(), l, c)));
      double mx = 0.0;
      for (std::size_t i = 0; i < s.size(); ++i) mx = std::max(mx, std::abs(store.flat()[s.offset + i]));
      pool_err = std::max(pool_err, std::abs(mx - heat["scores"][l][c].get<double>()));
    }
  o.require(pool_err <= 1e-9, "pooling oracle");

  // Top-rho mask against a full sort.
  const double rho = run.config.contrast.rho;
  std::vector<std::size_t> eligible;
  for (const auto& s : layout.slots())
    if (s.attributable())
      for (std::size_t i = 0; i < s.size(); ++i) eligible.push_back(s.offset + i);
  std::vector<std::size_t> sorted = eligible;
  std::sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
    const double ga = std::abs(store.flat()[a]), gb = std::abs(store.flat()[b]);
    return ga != gb ? ga > gb : a < b;
  });
  const auto k = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(eligible.size())));
  sorted.resize(k);
  std::sort(sorted.begin(), sorted.end());
  const bool mask_ok = top_gradient_mask(store, rho).coords == sorted;
  o.require(mask_ok, "top-rho mask oracle");

  // Rank-attention mass against the rank_profile artifact.
  const auto attn_ids =
      std::vector<std::size_t>(mps.begin(), mps.begin() + static_cast<std::ptrdiff_t>(
                                                              std::min<std::size_t>(run.config.attn.n_mp, mps.size())));
  const BruteProfile brute = brute_rank_profile(params, corpus, attn_ids);
  std::ifstream csv(run.dir / "reports/rank_profile.csv");
  std::string line;
  std::getline(csv, line);
  double mass_err = 0.0;
  std::size_t occ_bad = 0, rows = 0;
  while (std::getline(csv, line)) {
    if (line.rfind("mp,", 0) != 0) continue;
    std::stringstream ss(line.substr(3));
    std::string cell;
    std::vector<std::string> f;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    const std::size_t l = std::stoul(f[0]), h = std::stoul(f[1]), r = std::stoul(f[2]);
    const std::size_t idx = (l * params.config().n_heads + h) * brute.n_ranks + r;
    mass_err = std::max(mass_err, static_cast<double>(std::abs(brute.mass[idx] - std::stold(f[3]))));
    occ_bad += brute.occupancy[r] != std::stoul(f[4]);
    ++rows;
  }
  o.require(rows == brute.mass.size() && mass_err <= 1e-9 && occ_bad == 0, "rank-attention profile oracle");

  o.note(std::to_string(ids.size()) + " paragraphs: EM mismatches " + std::to_string(em_bad) + ", max NLL err " +
         fmt("%.1e", nll_err) + "; pooling max err " + fmt("%.1e", pool_err) + "; mask " + std::to_string(k) +
         " coords " + (mask_ok ? "identical" : "differ") + "; rank mass max err " + fmt("%.1e", mass_err));
  return o;
}

Outcome contrastive_sanity(const Run& run, const Corpus& corpus, const Parameters& params, const json& split) {
  Outcome o;
  const auto mps = split["mp"].get<std::vector<std::size_t>>();
  const auto nmps = split["nmp"].get<std::vector<std::size_t>>();
  if (mps.empty() || nmps.size() < 10) {
    o.require(false, "reference MP and 10 NMP controls available");
    return o;
  }
  const auto pool = make_controls(params, corpus, {nmps.begin(), nmps.begin() + 10}, run.config.threads);
  std::vector<const ControlSequence*> controls;
  for (const auto& c : pool) controls.push_back(&c);
  const std::span<const int> mp = corpus.paragraph(mps[0]).tokens;
  double worst_kl = 0.0;
  bool decreased = true;
  std::string values;
  for (KlDirection d : {KlDirection::CurrentFirst, KlDirection::OriginalFirst}) {
    ContrastSpec spec;
    spec.direction = d;
    spec.prefix_len = corpus.config().prefix_len;
    const ContrastResult r = contrastive_gradient(params, {mp}, controls, spec);
    worst_kl = std::max(worst_kl, std::abs(r.kl));
    Parameters stepped = params;
    for (std::size_t i = 0; i < stepped.flat().size(); ++i) stepped.flat()[i] -= 1e-4 * r.grads.flat()[i];
    const double after = contrastive_value(stepped, {mp}, controls, spec);
    decreased = decreased && after < r.value;
    values += std::string(values.empty() ? "" : ", ") + kl_direction_name(d) + " " + fmt("%.9f", r.value) + " -> " +
              fmt("%.9f", after);
  }
  o.require(worst_kl <= 1e-12, "KL = 0 at theta0");
  o.require(decreased, "CO decreases after a 1e-4 descent step");
  o.note("MP " + std::to_string(mps[0]) + ": |KL| at theta0 " + fmt("%.1e", worst_kl) + "; CO " + values);
  return o;
}

const json& mask_run(const json& report, const std::string& mask) {
  for (const auto& r : report["runs"])
    if (r["mask"] == mask) return r;
  throw ContractError("no " + mask + " run in report");
}

double final_field(const json& run, const char* field) {
  return run["trajectory"].empty() ? run["initial"][field].get<double>() : run["trajectory"].back()[field].get<double>();
}

Outcome sparse_unlearning(const Run& run) {
  Outcome o;
  const json rep = read_json(run.dir / "reports/unlearn_report.json");
  const json& top = mask_run(rep, "top_gradient");
  const json& rnd = mask_run(rep, "random");
  const double cont = rep["continuation_len"].get<double>();
  const double init = top["initial"]["em_mp"].get<double>();
  const double top_drop = init - final_field(top, "em_mp");
  const double rnd_drop = rnd["initial"]["em_mp"].get<double>() - final_field(rnd, "em_mp");
  const double nmp = final_field(top, "em_nmp");
  const double secs = run.seconds.at("contrast") + run.seconds.at("unlearn");
  o.require(rep["steps"] == 10, "10 steps");
  o.require(top_drop >= 0.5 * init, "MP EM drop >= 50%");
  o.require(nmp >= 0.7 * cont, "NMP EM >= 70% of max");
  o.require(rnd_drop < 0.5 * top_drop, "random mask drop < 50% of top-gradient drop");
  o.require(secs < 300.0, "runtime under 5 min");
  o.note("lr " + fmt("%g", rep["lr"].get<double>()) + ", mask " + std::to_string(top["mask_size"].get<std::size_t>()) +
         " coords; top-gradient MP EM " + fmt("%.2f", init) + " -> " + fmt("%.2f", init - top_drop) + " (" +
         fmt("%.0f", 100.0 * top_drop / init) + "% drop), NMP EM " + fmt("%.2f", nmp) + "/" + fmt("%.0f", cont) +
         "; random MP drop " + fmt("%.2f", rnd_drop) + "; contrast+unlearn " + fmt("%.0f", secs) + " s");
  return o;
}

Outcome edit_vs_unlearn(const Run& run, const Parameters& params) {
  Outcome o;
  const json un = read_json(run.dir / "reports/unlearn_report.json");
  const json ed = read_json(run.dir / "reports/edit_report.json");
  std::string summary;
  for (const auto& mask : run.config.intervene.masks) {
    const json& u = mask_run(un, mask);
    const json& e = mask_run(ed, mask);
    o.require(u["trajectory"].size() == e["trajectory"].size(), mask + ": equal step counts");
    o.require(final_field(e, "em_mp") >= final_field(u, "em_mp"), mask + ": final edit MP EM >= final unlearn MP EM");
    std::string crossings;
    for (std::size_t k = 0; k < u["trajectory"].size() && k < e["trajectory"].size(); ++k)
      if (e["trajectory"][k]["em_mp"].get<double>() < u["trajectory"][k]["em_mp"].get<double>())
        crossings += (crossings.empty() ? "" : ",") + std::to_string(k + 1);
    summary += (summary.empty() ? "" : ", ") + mask + " final edit/unlearn MP EM " + fmt("%.2f", final_field(e, "em_mp")) +
               "/" + fmt("%.2f", final_field(u, "em_mp")) +
               (crossings.empty() ? "" : " (edit below unlearn at intermediate step " + crossings + ")");
  }
  std::size_t changed_off_mask = 0, checked = 0;
  for (const char* obj : {"unlearn", "edit"})
    for (const auto& mask : run.config.intervene.masks) {
      GradientMask m;
      if (mask == "top_gradient") {
        m.coords = read_json(run.dir / ("reports/mask_" + std::string(obj) + ".json"))["coords"]
                       .get<std::vector<std::size_t>>();
      } else if (mask == "random") {
        m = random_mask(params.config(), run.config.contrast.rho, run.config.seed);
      } else {
        m = all_mask(params.config());
      }
      const std::set<std::size_t> on(m.coords.begin(), m.coords.end());
      const Parameters tuned = load_checkpoint(run.dir / ("ckpt/" + std::string(obj) + "_" + mask + ".mlab"));
      for (std::size_t i = 0; i < params.flat().size(); ++i)
        if (!on.contains(i)) {
          ++checked;
          changed_off_mask += std::bit_cast<std::uint64_t>(tuned.flat()[i]) != std::bit_cast<std::uint64_t>(params.flat()[i]);
        }
    }
  o.require(changed_off_mask == 0, "unmasked coordinates bit-identical");
  o.note(summary + "; off-mask coordinates changed " + std::to_string(changed_off_mask) + " of " +
         std::to_string(checked));
  return o;
}

Outcome perturbation_trends(const Run& run, const Corpus& corpus, const Parameters& params, const json& split) {
  Outcome o;
  const json s = read_json(run.dir / "reports/perturb_summary.json");
  for (const char* set : {"mp", "nmp"}) {
    const double first = s[set]["first_quartile"], last = s[set]["last_quartile"];
    o.require(last > first, std::string(set) + " last-quartile drop > first-quartile drop");
    o.note(std::string(set == std::string("mp") ? "MP" : "NMP") + " drop first/last quartile " + fmt("%.3f", first) +
           "/" + fmt("%.3f", last) + ", mean " + fmt("%.3f", s[set]["mean"].get<double>()));
  }
  o.require(s["mp"]["mean"].get<double>() < s["nmp"]["mean"].get<double>(), "MP mean drop < NMP mean drop");

  const ReplacementFn identity = [](std::size_t, int original, Rng&) { return original; };
  std::size_t nonzero = 0, entries = 0;
  for (const char* set : {"mp", "nmp"}) {
    const auto ids = split[set].get<std::vector<std::size_t>>();
    for (std::size_t k = 0; k < std::min<std::size_t>(3, ids.size()); ++k) {
      const PerturbationMap m = perturb_scan(params, corpus, ids[k], run.config.seed, identity);
      for (const auto& e : m.entries) {
        ++entries;
        nonzero += e.em != m.full_em() || e.nll_delta != 0.0;
      }
    }
  }
  o.require(nonzero == 0, "no-op replacement gives zero drop");
  o.note("no-op scans: " + std::to_string(nonzero) + " nonzero of " + std::to_string(entries));
  return o;
}

Outcome rank_correlation(const Run& run, const Corpus& corpus, const Parameters& params, const json& split) {
  Outcome o;
  const std::size_t planted_head = std::min<std::size_t>(2, params.config().n_heads - 1);
  const Parameters planted =
      testing::plant_inverse_frequency_head(params.config(), corpus.frequencies(), planted_head);
  const auto mps = split["mp"].get<std::vector<std::size_t>>();
  const std::vector<std::size_t> ids(
      mps.begin(), mps.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(run.config.attn.n_mp, mps.size())));
  const RankAttentionProfile r = rank_attention_profile(planted, corpus, ids, RankEstimator::Spearman, run.config.threads);
  const auto rho = r.correlation_at(0, planted_head);
  const auto min = r.min_head();
  o.require(rho && *rho <= -0.9, "planted head correlation <= -0.9");
  o.require(min && *min == planted_head, "planted head is the per-head minimum");

  const BruteProfile brute = brute_rank_profile(params, corpus, ids);
  const json corr = read_json(run.dir / "reports/rank_correlation.json")["mp"]["correlation"];
  double err = 0.0;
  bool defined_match = true;
  for (std::size_t l = 0; l < params.config().n_layers; ++l)
    for (std::size_t h = 0; h < params.config().n_heads; ++h) {
      const json& v = corr[l][h];
      const auto& b = brute.spearman[l * params.config().n_heads + h];
      if (v.is_number() != b.has_value()) {
        defined_match = false;
        continue;
      }
      if (b) err = std::max(err, std::abs(*b - v.get<double>()));
    }
  o.require(defined_match && err <= 1e-9, "pipeline correlation equals brute force");
  o.note("planted L0H" + std::to_string(planted_head) + " spearman " + (rho ? fmt("%.4f", *rho) : "undefined") +
         " over " + std::to_string(ids.size()) + " MPs, minimum at head " +
         (min ? std::to_string(*min) : "none") + "; pipeline vs brute force max err " + fmt("%.1e", err));
  return o;
}

Outcome patching(const Run& run, const Corpus& corpus, const Parameters& params) {
  Outcome o;
  std::vector<PatchPair> pairs;
  std::ifstream f(run.dir / "reports/pmps.jsonl");
  std::string line;
  while (std::getline(f, line) && pairs.size() < 5) {
    const json j = json::parse(line);
    PerturbedParagraph p;
    p.original_id = j["original_id"];
    p.position = j["position"];
    p.replacement = j["replacement"];
    p.perturbed_prefix = j["perturbed_prefix"].get<std::vector<int>>();
    p.continuation = j["continuation"].get<std::vector<int>>();
    p.reference = j["reference"].get<std::vector<int>>();
    p.first_impact = j["first_impact"];
    pairs.push_back(make_patch_pair(p, corpus.prefix(p.original_id)));
  }
  double self_max = 0.0, causal_max = 0.0;
  for (const auto& pair : pairs) {
    const std::size_t row = pair.prefix_len + pair.impact - 1;
    for (const auto& site : default_patch_sites(params.config()))
      self_max = std::max(self_max,
                          std::abs(patch_activation(params, pair.clean, pair.clean, site, pair.position, row).delta));
    const ForwardResult donor = forward(params, pair.corrupt);
    const ad::Tensor base = forward_logits(params, pair.clean);
    for (const auto& site : all_sites(params.config())) {
      const auto v = donor.cache.activation(site, pair.position);
      const Patch patch{site, pair.position, std::vector<double>(v.begin(), v.end())};
      const ad::Tensor patched = forward_logits(params, pair.clean, &patch);
      for (std::size_t i = 0; i < pair.position; ++i)
        for (std::size_t v2 = 0; v2 < base.cols; ++v2) causal_max = std::max(causal_max, std::abs(patched(i, v2) - base(i, v2)));
    }
  }
  const json s = read_json(run.dir / "reports/patch_summary.json");
  const std::size_t n_pairs = s["n_pairs"];
  const double secs = run.seconds.at("patch");
  o.require(!pairs.empty(), "PMP pairs available");
  o.require(self_max == 0.0, "self-patch delta = 0");
  o.require(causal_max <= 1e-12, "no change before the patched position");
  o.require(n_pairs >= 50, ">= 50 PMP pairs patched both ways");
  o.require(s["n_results"].get<std::size_t>() == 2 * n_pairs * s["n_sites"].get<std::size_t>(), "two-way results");
  o.require(secs < 300.0, "patching under 5 min");
  o.note("self-patch max |delta| " + fmt("%.1e", self_max) + ", pre-position max |dlogit| " + fmt("%.1e", causal_max) +
         " over " + std::to_string(pairs.size()) + " pairs x all sites; " + std::to_string(n_pairs) + " pairs x " +
         std::to_string(s["n_sites"].get<std::size_t>()) + " sites x 2 directions in " + fmt("%.0f", secs) + " s");
  return o;
}

Outcome reproducibility(const Run& run, const fs::path& replay_dir) {
  Outcome o;
  fs::remove_all(replay_dir);
  const auto start = std::chrono::steady_clock::now();
  const auto mismatches = replay_manifest(run.manifest, RunDir(replay_dir));
  std::size_t artifacts = 0;
  for (const auto& r : run.manifest["runs"]) artifacts += r["outputs"].size();
  for (const auto& m : mismatches) o.require(false, m.command + " " + m.path);
  o.note("replayed " + std::to_string(run.manifest["runs"].size()) + " stages, " + std::to_string(artifacts) +
         " artifacts, " + std::to_string(mismatches.size()) + " hash mismatches, " + fmt("%.0f", seconds_since(start)) +
         " s");
  return o;
}

/// Reference-seed module properties reported alongside the criteria.
void reference_properties(const Run& run) {
  std::ifstream csv(run.dir / "reports/layer_profile.csv");
  std::string line;
  std::getline(csv, line);
  double mp_low = 0.0, nmp_low = 0.0;
  const std::size_t half = run.config.model.n_layers / 2;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string l, mp, nmp;
    std::getline(ss, l, ',');
    std::getline(ss, mp, ',');
    std::getline(ss, nmp, ',');
    if (std::stoul(l) < half) mp_low += std::stod(mp), nmp_low += std::stod(nmp);
  }
  std::printf("PROPERTY %s  lower-half attribution mass MP %.4f vs NMP %.4f\n", mp_low > nmp_low ? "PASS" : "FAIL",
              mp_low, nmp_low);

  const json rep = read_json(run.dir / "reports/unlearn_report.json");
  const auto& masks = run.config.intervene.masks;
  if (std::find(masks.begin(), masks.end(), "all") != masks.end()) {
    const json& top = mask_run(rep, "top_gradient");
    const json& all = mask_run(rep, "all");
    const double top_loss = top["initial"]["em_nmp"].get<double>() - final_field(top, "em_nmp");
    const double all_loss = all["initial"]["em_nmp"].get<double>() - final_field(all, "em_nmp");
    std::printf("PROPERTY %s  NMP EM loss top-gradient %.2f <= all-weights %.2f\n", top_loss <= all_loss ? "PASS" : "FAIL",
                top_loss, all_loss);
  }
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run on the reference configuration"};
  std::string run_dir = (fs::temp_directory_path() / "memlab_acceptance").string();
  std::string config_file;
  bool reuse = false;
  std::size_t threads = 1;
  app.add_option("--run-dir", run_dir, "Reference run directory");
  app.add_flag("--reuse", reuse, "Keep a complete existing run");
  app.add_option("--threads", threads, "Worker threads");
  app.add_option("--config", config_file, "Config file instead of the reference configuration");
  CLI11_PARSE(app, argc, argv);

  std::vector<std::pair<std::string, Outcome>> results;
  auto record = [&](int n, const std::string& title, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::printf("ACCEPTANCE %2d %s  %s: %s\n", n, o.pass ? "PASS" : "FAIL", title.c_str(), o.detail.c_str());
    std::fflush(stdout);
    results.emplace_back(title, o);
  };

  record(1, "gradient correctness", gradient_correctness);

  Run run;
  try {
    run = reference_run(run_dir, config_file, reuse, threads);
  } catch (const std::exception& e) {
    std::printf("reference run failed: %s\n", e.what());
    return 10;
  }
  const Corpus corpus = load_corpus(run.dir / "corpus.jsonl");
  const Parameters params = load_checkpoint(run.dir / "ckpt/model.mlab");
  const json split = read_json(run.dir / "reports/split.json");

  record(2, "memorization induction", [&] { return memorization_induction(run); });
  record(3, "metric oracles", [&] { return metric_oracles(run, corpus, params, split); });
  record(4, "contrastive objective sanity", [&] { return contrastive_sanity(run, corpus, params, split); });
  record(5, "sparse unlearning", [&] { return sparse_unlearning(run); });
  record(6, "editing vs unlearning", [&] { return edit_vs_unlearn(run, params); });
  record(7, "perturbation trends", [&] { return perturbation_trends(run, corpus, params, split); });
  record(8, "rank-correlation recovery", [&] { return rank_correlation(run, corpus, params, split); });
  record(9, "patching identity and causality", [&] { return patching(run, corpus, params); });
  record(10, "reproducibility", [&] { return reproducibility(run, fs::path(run_dir + "_replay")); });

  try {
    reference_properties(run);
  } catch (const std::exception& e) {
    std::printf("PROPERTY FAIL  %s\n", e.what());
  }

  const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.second.pass; });
  std::printf("ACCEPTANCE SUMMARY %zu/%zu passed\n", results.size() - failed, results.size());
  return static_cast<int>(failed);
}
