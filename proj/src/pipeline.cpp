#include "memlab/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "memlab/error.hpp"
#include "memlab/json_io.hpp"
#include "memlab/parallel.hpp"
#include "memlab/perturb.hpp"

namespace memlab {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainSection, lr, beta1, beta2, eps, batch_size, max_steps, eval_every,
                                                early_stop, checkpoint_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SplitSection, em_max, nmp_upper)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PerturbSection, n_mp, n_nmp, repeats)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AttributeSection, n_mp, n_nmp)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ContrastSection, n_mp, nmp_batch, control_pool, eval_nmp, direction,
                                                rho)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(InterveneSection, steps, lr, masks)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AttnSection, estimator, n_mp, n_nmp, layers)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PatchSection, n_pairs, sites)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PipelineConfig, seed, threads, corpus, model, train, split, perturb,
                                                attribute, contrast, intervene, attn, patch)

using nlohmann::json;
namespace fs = std::filesystem;

// --- config ------------------------------------------------------------------

void PipelineConfig::resolve() {
  corpus.seed = seed;
  model.seed = seed;
  if (threads == 0) throw ConfigError("threads must be >= 1");
  corpus.validate();
  model.validate();
  if (corpus.vocab_size > model.vocab_size) throw ConfigError("corpus vocabulary exceeds model vocabulary");
  if (corpus.paragraph_len() > model.max_seq_len) throw ConfigError("paragraph length exceeds model max_seq_len");
  thresholds().validate(corpus.continuation_len);
  if (perturb.repeats == 0) throw ConfigError("perturb.repeats must be >= 1");
  if (!(contrast.rho > 0.0 && contrast.rho <= 1.0)) throw ConfigError("contrast.rho must be in (0, 1]");
  if (contrast.nmp_batch == 0) throw ConfigError("contrast.nmp_batch must be >= 1");
  direction();
  parse_rank_estimator(attn.estimator);
  for (const auto& m : intervene.masks)
    if (m != "top_gradient" && m != "random" && m != "all")
      throw ConfigError("unknown mask kind '" + m + "' (top_gradient, random, all)");
  for (std::size_t l : attn.layers)
    if (l >= model.n_layers) throw ConfigError("attn.layers entry outside the model");
  for (const auto& s : patch.sites) parse_site(model, s);
}

SplitThresholds PipelineConfig::thresholds() const {
  SplitThresholds t = SplitThresholds::for_continuation(corpus.continuation_len);
  if (split.em_max) t.em_max = split.em_max;
  if (split.nmp_upper) t.nmp_upper = split.nmp_upper;
  return t;
}

TrainConfig PipelineConfig::train_config() const {
  TrainConfig t;
  t.adam = {train.lr, train.beta1, train.beta2, train.eps};
  t.batch_size = train.batch_size;
  t.max_steps = train.max_steps;
  t.eval_every = train.eval_every;
  t.early_stop = train.early_stop;
  t.checkpoint_every = train.checkpoint_every;
  t.seed = seed;
  t.threads = threads;
  return t;
}

KlDirection PipelineConfig::direction() const {
  for (KlDirection d : {KlDirection::CurrentFirst, KlDirection::OriginalFirst})
    if (contrast.direction == kl_direction_name(d)) return d;
  throw ConfigError("unknown KL direction '" + contrast.direction + "' (current_first, original_first)");
}

json to_json_value(const PipelineConfig& config) { return json(config); }

namespace {

void check_known_keys(const json& given, const json& known, const std::string& where) {
  if (!given.is_object() || !known.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
    check_known_keys(it.value(), known.at(it.key()), where + it.key() + ".");
  }
}

}  // namespace

PipelineConfig config_from_json(const json& j) {
  check_known_keys(j, json(PipelineConfig{}), "");
  try {
    return j.get<PipelineConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  std::string pointer = "/" + assignment.substr(0, eq);
  for (char& c : pointer)
    if (c == '.') c = '/';
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  j[json::json_pointer(pointer)] = value;
}

// --- run directory -----------------------------------------------------------

std::string sha256_hex(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot hash missing file " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (f) {
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(f.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", digest[i]);
    hex += byte;
  }
  return hex;
}

RunDir::RunDir(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

fs::path RunDir::require(const std::string& rel) const {
  const fs::path p = path(rel);
  if (!fs::exists(p)) throw InputError("missing input artifact " + p.string());
  return p;
}

bool RunDir::exists(const std::string& rel) const { return fs::exists(path(rel)); }

json RunDir::manifest() const {
  const fs::path p = path("manifest.json");
  if (!fs::exists(p)) return json{{"runs", json::array()}};
  std::ifstream f(p);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw InputError("malformed manifest " + p.string() + ": " + e.what());
  }
}

void RunDir::append(const StageRun& run) const {
  json m = manifest();
  auto records = [](const std::vector<ArtifactRecord>& v) {
    json a = json::array();
    for (const auto& r : v) a.push_back({{"path", r.path}, {"sha256", r.sha256}});
    return a;
  };
  m["runs"].push_back({{"command", run.command},
                       {"config", run.config},
                       {"seed", run.config.value("seed", 0)},
                       {"inputs", records(run.inputs)},
                       {"outputs", records(run.outputs)},
                       {"seconds", run.seconds}});
  std::ofstream f(path("manifest.json"), std::ios::trunc);
  f << m.dump(2) << '\n';
}

fs::path default_run_root() {
  const char* env = std::getenv("MEMLAB_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

// --- artifact writers ----------------------------------------------------------

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string brief(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) { row(header); }
  template <class... T>
  void add(const T&... cells) {
    std::vector<std::string> r;
    (r.push_back(cell(cells)), ...);
    row(r);
  }
  void write(const fs::path& path) const {
    fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << text_;
  }

 private:
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) { return num(v); }
  template <class I>
    requires std::is_integral_v<I>
  static std::string cell(I v) {
    return std::to_string(v);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) text_ += (i ? "," : "") + cells[i];
    text_ += '\n';
  }
  std::string text_;
};

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw InputError("malformed artifact " + path.string() + ": " + e.what());
  }
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream f(path);
  std::vector<json> out;
  std::string line;
  try {
    while (std::getline(f, line))
      if (!line.empty()) out.push_back(json::parse(line));
  } catch (const json::exception& e) {
    throw InputError("malformed artifact " + path.string() + ": " + e.what());
  }
  return out;
}

json record_json(const StepRecord& r) {
  return {{"step", r.step}, {"objective", r.objective}, {"em_mp", r.em_mp}, {"em_nmp", r.em_nmp},
          {"em_target", r.em_target}};
}

json map_json(const AttributionMap& m, const ModelConfig& config) {
  std::vector<std::string> labels;
  for (std::size_t c = 0; c < config.components_per_layer(); ++c) labels.push_back(component_at(config, 0, c).label());
  std::vector<std::vector<double>> rows(m.n_layers);
  for (std::size_t l = 0; l < m.n_layers; ++l)
    for (std::size_t c = 0; c < m.n_components; ++c) rows[l].push_back(m.at(l, c));
  return {{"objective", m.objective}, {"batch", m.batch}, {"components", labels},
          {"scores", rows},           {"layer_fractions", m.layer_fractions()}};
}

void write_heatmap(const fs::path& path, const AttributionMap& m, const ModelConfig& config) {
  std::string text = "layer";
  for (std::size_t c = 0; c < config.components_per_layer(); ++c) text += "," + component_at(config, 0, c).label();
  text += '\n';
  for (std::size_t l = 0; l < m.n_layers; ++l) {
    text += std::to_string(l);
    for (std::size_t c = 0; c < m.n_components; ++c) text += "," + num(m.at(l, c));
    text += '\n';
  }
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
}

json mask_json(const GradientMask& m) {
  return {{"kind", mask_kind_name(m.kind)}, {"rho", m.rho}, {"n_eligible", m.n_eligible}, {"coords", m.coords}};
}

GradientMask mask_from_json(const json& j) {
  GradientMask m;
  const std::string kind = j.at("kind").get<std::string>();
  m.kind = kind == "top_gradient" ? MaskKind::TopGradient : kind == "random" ? MaskKind::Random : MaskKind::All;
  m.rho = j.at("rho").get<double>();
  m.n_eligible = j.at("n_eligible").get<std::size_t>();
  m.coords = j.at("coords").get<std::vector<std::size_t>>();
  return m;
}

json pmp_json(const PerturbedParagraph& p, std::size_t repeat) {
  return {{"original_id", p.original_id},
          {"repeat", repeat},
          {"position", p.position},
          {"replacement", p.replacement},
          {"perturbed_prefix", p.perturbed_prefix},
          {"continuation", p.continuation},
          {"reference", p.reference},
          {"first_impact", p.first_impact},
          {"em_drop", p.em_drop}};
}

PerturbedParagraph pmp_from_json(const json& j) {
  PerturbedParagraph p;
  p.original_id = j.at("original_id").get<std::size_t>();
  p.position = j.at("position").get<std::size_t>();
  p.replacement = j.at("replacement").get<int>();
  p.perturbed_prefix = j.at("perturbed_prefix").get<std::vector<int>>();
  p.continuation = j.at("continuation").get<std::vector<int>>();
  p.reference = j.at("reference").get<std::vector<int>>();
  p.first_impact = j.at("first_impact").get<std::size_t>();
  p.em_drop = j.at("em_drop").get<std::size_t>();
  return p;
}

std::vector<std::size_t> first_n(const std::vector<std::size_t>& v, std::size_t n) {
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

// --- stage context ---------------------------------------------------------------

class Stage {
 public:
  Stage(std::string command, const PipelineConfig& config, const RunDir& dir)
      : config_(config), dir_(dir), start_(std::chrono::steady_clock::now()) {
    run_.command = std::move(command);
    run_.config = to_json_value(config);
  }

  const PipelineConfig& config() const { return config_; }
  const RunDir& dir() const { return dir_; }

  fs::path input(const std::string& rel) {
    const fs::path p = dir_.require(rel);
    run_.inputs.push_back({rel, sha256_hex(p)});
    return p;
  }
  fs::path output(const std::string& rel) {
    outputs_.push_back(rel);
    const fs::path p = dir_.path(rel);
    fs::create_directories(p.parent_path());
    return p;
  }

  Corpus corpus() { return load_corpus(input("corpus.jsonl")); }
  Parameters model() { return load_checkpoint(input("ckpt/model.mlab")); }
  json split() { return read_json(input("reports/split.json")); }
  std::vector<std::size_t> ids(const json& split, const char* set, std::size_t n) {
    return first_n(split.at(set).get<std::vector<std::size_t>>(), n);
  }

  StageRun finish() {
    for (const auto& rel : outputs_) run_.outputs.push_back({rel, sha256_hex(dir_.path(rel))});
    run_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    dir_.append(run_);
    return run_;
  }

 private:
  const PipelineConfig& config_;
  const RunDir& dir_;
  StageRun run_;
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point start_;
};

void log(const std::string& line) { std::cerr << "[memlab] " << line << '\n'; }

// --- stages ----------------------------------------------------------------------

void gen_corpus_stage(Stage& s) {
  const Corpus corpus = generate_corpus(s.config().corpus);
  save_corpus(s.output("corpus.jsonl"), corpus);
  write_json(s.output("config.json"), to_json_value(s.config()));
  log("corpus: " + std::to_string(corpus.size()) + " paragraphs, " + std::to_string(corpus.planted_ids().size()) +
      " planted");
}

void train_stage(Stage& s) {
  const Corpus corpus = s.corpus();
  Parameters params = init_parameters(s.config().model);
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochRecord& e) {
    log("train: step " + std::to_string(e.step) + " nll " + brief(e.mean_nll) + " planted at full EM " +
        std::to_string(e.planted_full_em));
  };
  hooks.on_checkpoint = [&](std::size_t step, const Parameters& p) {
    save_checkpoint(s.output("ckpt/step_" + std::to_string(step) + ".mlab"), p);
  };
  const TrainReport report = train(params, corpus, s.config().train_config(), hooks);
  save_checkpoint(s.output("ckpt/model.mlab"), params);
  json epochs = json::array();
  Csv csv({"epoch", "step", "mean_nll", "planted_full_em"});
  for (const auto& e : report.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"step", e.step}, {"mean_nll", e.mean_nll},
                      {"planted_full_em", e.planted_full_em}});
    csv.add(e.epoch, e.step, e.mean_nll, e.planted_full_em);
  }
  write_json(s.output("reports/train_report.json"), {{"steps", report.steps},
                                                      {"n_planted", report.n_planted},
                                                      {"stopped_early", report.stopped_early},
                                                      {"epochs", epochs}});
  csv.write(s.output("reports/train_epochs.csv"));
}

void split_stage(Stage& s) {
  const Corpus corpus = s.corpus();
  const Parameters params = s.model();
  const SplitResult r = split(corpus, params, s.config().thresholds(), s.config().threads);
  json records = json::array();
  Csv csv({"id", "dup_count", "nll", "em", "label"});
  for (const auto& m : r.records) {
    records.push_back({{"id", m.id}, {"dup_count", m.dup_count}, {"nll", m.nll}, {"em", m.em},
                       {"label", label_name(m.label)}, {"decoded", m.decoded}});
    csv.add(m.id, m.dup_count, m.nll, m.em, label_name(m.label));
  }
  write_json(s.output("reports/split.json"),
             {{"thresholds", {{"em_max", r.thresholds.em_max}, {"nmp_upper", r.thresholds.nmp_upper}}},
              {"mp", r.mp},
              {"nmp", r.nmp},
              {"partial", r.partial},
              {"records", records}});
  csv.write(s.output("reports/split_scatter.csv"));
  log("split: " + std::to_string(r.mp.size()) + " MP, " + std::to_string(r.nmp.size()) + " NMP, " +
      std::to_string(r.partial.size()) + " partial");
}

double quartile_mean(const std::vector<double>& v, std::size_t q) {
  const std::size_t n = v.size(), lo = q * n / 4, hi = (q + 1) * n / 4;
  double t = 0.0;
  for (std::size_t i = lo; i < hi; ++i) t += v[i];
  return hi > lo ? t / static_cast<double>(hi - lo) : 0.0;
}

void perturb_stage(Stage& s) {
  const PipelineConfig& c = s.config();
  const Corpus corpus = s.corpus();
  const Parameters params = s.model();
  const json sp = s.split();
  const auto mps = s.ids(sp, "mp", c.perturb.n_mp);
  const auto nmps = s.ids(sp, "nmp", c.perturb.n_nmp);
  if (mps.empty() || nmps.empty()) throw ContractError("perturb needs at least one MP and one NMP");
  const auto mp_maps = scan_set(params, corpus, mps, c.seed, c.perturb.repeats, c.threads);
  const auto nmp_maps = scan_set(params, corpus, nmps, c.seed, c.perturb.repeats, c.threads);
  const auto mp_profile = em_drop_profile(mp_maps), nmp_profile = em_drop_profile(nmp_maps);

  Csv maps({"set", "paragraph", "repeat", "position", "replacement", "em", "nll", "nll_delta"});
  auto add_maps = [&](const char* set, const std::vector<PerturbationMap>& v) {
    for (std::size_t k = 0; k < v.size(); ++k)
      for (const auto& e : v[k].entries)
        maps.add(set, v[k].paragraph_id, k % c.perturb.repeats, e.position, e.replacement, e.em, e.nll, e.nll_delta);
  };
  add_maps("MP", mp_maps);
  add_maps("NMP", nmp_maps);
  maps.write(s.output("reports/perturb_maps.csv"));

  Csv profile({"position", "mp_mean_drop", "nmp_mean_drop"});
  for (std::size_t i = 0; i < mp_profile.size(); ++i) profile.add(i, mp_profile[i], nmp_profile[i]);
  profile.write(s.output("reports/em_drop_profile.csv"));

  std::ofstream pmps(s.output("reports/pmps.jsonl"), std::ios::binary | std::ios::trunc);
  std::size_t n_pmps = 0;
  for (std::size_t k = 0; k < mp_maps.size(); ++k) {
    const auto pmp = extract_pmp(mp_maps[k], corpus.prefix(mp_maps[k].paragraph_id));
    if (!pmp) continue;
    pmps << pmp_json(*pmp, k % c.perturb.repeats).dump() << '\n';
    ++n_pmps;
  }
  pmps.close();

  auto summary = [&](const std::vector<double>& p) {
    return json{{"first_quartile", quartile_mean(p, 0)},
                {"last_quartile", quartile_mean(p, 3)},
                {"mean", std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size())}};
  };
  write_json(s.output("reports/perturb_summary.json"), {{"n_mp", mps.size()},
                                                        {"n_nmp", nmps.size()},
                                                        {"repeats", c.perturb.repeats},
                                                        {"n_pmps", n_pmps},
                                                        {"mp", summary(mp_profile)},
                                                        {"nmp", summary(nmp_profile)}});
  log("perturb: " + std::to_string(n_pmps) + " PMPs");
}

void attribute_stage(Stage& s) {
  const PipelineConfig& c = s.config();
  const Corpus corpus = s.corpus();
  const Parameters params = s.model();
  const json sp = s.split();
  const std::size_t prefix_len = corpus.config().prefix_len;
  Csv layers({"layer", "mp_fraction", "nmp_fraction"});
  std::vector<std::vector<double>> fractions;
  for (const char* set : {"mp", "nmp"}) {
    const auto ids = s.ids(sp, set, std::string(set) == "mp" ? c.attribute.n_mp : c.attribute.n_nmp);
    if (ids.empty()) throw ContractError(std::string("attribute needs a non-empty ") + set + " set");
    std::vector<std::span<const int>> batch;
    for (std::size_t id : ids) batch.push_back(corpus.paragraph(id).tokens);
    AttributionMap map = pool_attribution(nll_param_gradients(params, batch, prefix_len, c.threads));
    map.objective = "nll";
    map.batch = std::string(set) + " x" + std::to_string(ids.size());
    write_heatmap(s.output("reports/attribution_nll_" + std::string(set) + ".csv"), map, c.model);
    write_json(s.output("reports/attribution_nll_" + std::string(set) + ".json"), map_json(map, c.model));
    fractions.push_back(map.layer_fractions());

    const ActivationAttribution act = activation_gradients(params, batch, prefix_len, c.threads);
    Csv csv({"layer", "component", "position", "score"});
    for (std::size_t l = 0; l < act.n_layers; ++l)
      for (std::size_t k = 0; k < act.n_components; ++k)
        for (std::size_t i = 0; i < act.n_positions; ++i)
          csv.add(l, component_at(c.model, l, k).label(), i, act.at(l, k, i));
    csv.write(s.output("reports/activation_grad_" + std::string(set) + ".csv"));
  }
  for (std::size_t l = 0; l < c.model.n_layers; ++l) layers.add(l, fractions[0][l], fractions[1][l]);
  layers.write(s.output("reports/layer_profile.csv"));
}

struct Controls {
  std::vector<ControlSequence> pool, eval;
};

Controls controls(Stage& s, const Corpus& corpus, const Parameters& params, const json& sp) {
  const auto& c = s.config().contrast;
  const auto nmp = sp.at("nmp").get<std::vector<std::size_t>>();
  if (nmp.size() < c.control_pool + c.eval_nmp)
    throw ContractError("need " + std::to_string(c.control_pool + c.eval_nmp) + " NMPs for control and evaluation, have " +
                        std::to_string(nmp.size()));
  const std::vector<std::size_t> pool(nmp.begin(), nmp.begin() + static_cast<std::ptrdiff_t>(c.control_pool));
  const std::vector<std::size_t> eval(nmp.begin() + static_cast<std::ptrdiff_t>(c.control_pool),
                                      nmp.begin() + static_cast<std::ptrdiff_t>(c.control_pool + c.eval_nmp));
  return {make_controls(params, corpus, pool, s.config().threads), make_controls(params, corpus, eval, s.config().threads)};
}

std::vector<FinetuneItem> unlearn_items(Stage& s, const Corpus& corpus, const json& sp) {
  std::vector<FinetuneItem> items;
  for (std::size_t id : s.ids(sp, "mp", s.config().contrast.n_mp)) {
    FinetuneItem it;
    it.id = id;
    it.original = corpus.paragraph(id).tokens;
    it.target = it.original;
    items.push_back(it);
  }
  if (items.empty()) throw ContractError("no memorized paragraphs to work on");
  return items;
}

/// One edit item per MP: the first PMP recorded for it. The target keeps the
/// original prefix and takes the perturbed continuation.
std::vector<FinetuneItem> edit_items(Stage& s, const Corpus& corpus, const json& sp) {
  std::map<std::size_t, PerturbedParagraph> first;
  for (const json& j : read_jsonl(s.input("reports/pmps.jsonl"))) {
    PerturbedParagraph p = pmp_from_json(j);
    first.try_emplace(p.original_id, std::move(p));
  }
  std::vector<FinetuneItem> items;
  for (std::size_t id : s.ids(sp, "mp", s.config().contrast.n_mp)) {
    const auto it = first.find(id);
    if (it == first.end()) continue;
    FinetuneItem item;
    item.id = id;
    item.original = corpus.paragraph(id).tokens;
    const auto prefix = corpus.prefix(id);
    item.target.assign(prefix.begin(), prefix.end());
    item.target.insert(item.target.end(), it->second.continuation.begin(), it->second.continuation.end());
    items.push_back(item);
  }
  if (items.empty()) throw ContractError("no perturbed memorized paragraphs to edit towards");
  return items;
}

ContrastSpec spec_for(const PipelineConfig& c, Objective o, std::size_t prefix_len) {
  ContrastSpec spec;
  spec.nll_sign = o == Objective::Unlearn ? -1.0 : 1.0;
  spec.direction = c.direction();
  spec.prefix_len = prefix_len;
  return spec;
}

void contrast_stage(Stage& s) {
  const PipelineConfig& c = s.config();
  const Corpus corpus = s.corpus();
  const Parameters params = s.model();
  const json sp = s.split();
  const Controls ctl = controls(s, corpus, params, sp);
  for (Objective o : {Objective::Unlearn, Objective::Edit}) {
    const auto items = o == Objective::Unlearn ? unlearn_items(s, corpus, sp) : edit_items(s, corpus, sp);
    std::vector<std::vector<int>> targets;
    std::vector<std::size_t> keys;
    for (const auto& it : items) {
      targets.push_back(o == Objective::Unlearn ? it.original : it.target);
      keys.push_back(it.id);
    }
    AggregateResult agg = aggregate_contrastive(params, targets, keys, ctl.pool, c.contrast.nmp_batch, c.seed,
                                                spec_for(c, o, corpus.config().prefix_len), c.threads);
    agg.map.objective = o == Objective::Unlearn ? "contrast_unlearn" : "contrast_edit";
    agg.map.batch = std::to_string(items.size()) + " targets, " + std::to_string(c.contrast.nmp_batch) + " controls each";
    const std::string name = objective_name(o);
    write_heatmap(s.output("reports/attribution_" + name + ".csv"), agg.map, c.model);
    json mj = map_json(agg.map, c.model);
    mj["objective_sum"] = agg.objective_sum;
    write_json(s.output("reports/attribution_" + name + ".json"), mj);
    write_json(s.output("reports/mask_" + name + ".json"), mask_json(top_gradient_mask(agg.total, c.contrast.rho)));
  }
}

void finetune_stage(Stage& s, Objective o) {
  const PipelineConfig& c = s.config();
  const Corpus corpus = s.corpus();
  const Parameters params = s.model();
  const json sp = s.split();
  const std::string name = objective_name(o);
  const GradientMask top = mask_from_json(read_json(s.input("reports/mask_" + name + ".json")));
  const auto items = o == Objective::Unlearn ? unlearn_items(s, corpus, sp) : edit_items(s, corpus, sp);
  const Controls ctl = controls(s, corpus, params, sp);

  FinetuneConfig fc;
  fc.steps = c.intervene.steps;
  fc.adam = {c.intervene.lr, c.train.beta1, c.train.beta2, c.train.eps};
  fc.nmp_batch = c.contrast.nmp_batch;
  fc.direction = c.direction();
  fc.prefix_len = corpus.config().prefix_len;
  fc.seed = c.seed;
  fc.threads = c.threads;

  json runs = json::array();
  Csv csv({"mask", "step", "objective", "em_mp", "em_nmp", "em_target"});
  for (const auto& kind : c.intervene.masks) {
    const GradientMask mask = kind == "top_gradient" ? top
                              : kind == "random"     ? random_mask(c.model, top.rho, c.seed)
                                                     : all_mask(c.model);
    const auto start = std::chrono::steady_clock::now();
    const FinetuneResult r = sparse_finetune(params, mask, o, items, ctl.pool, ctl.eval, fc);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const std::string ckpt = "ckpt/" + name + "_" + kind + ".mlab";
    save_checkpoint(s.output(ckpt), r.params);
    json traj = json::array();
    csv.add(kind, std::size_t{0}, r.report.initial.objective, r.report.initial.em_mp, r.report.initial.em_nmp,
            r.report.initial.em_target);
    for (const auto& st : r.report.trajectory) {
      traj.push_back(record_json(st));
      csv.add(kind, st.step, st.objective, st.em_mp, st.em_nmp, st.em_target);
    }
    runs.push_back({{"mask", kind},
                    {"mask_size", r.report.mask_size},
                    {"initial", record_json(r.report.initial)},
                    {"trajectory", traj},
                    {"checkpoint", ckpt}});
    const StepRecord& last = r.report.trajectory.empty() ? r.report.initial : r.report.trajectory.back();
    log(name + " " + kind + ": EM MP " + brief(r.report.initial.em_mp) + " -> " + brief(last.em_mp) + ", EM NMP " +
        brief(r.report.initial.em_nmp) + " -> " + brief(last.em_nmp) + " (" + brief(secs) + " s)");
  }
  write_json(s.output("reports/" + name + "_report.json"), {{"objective", name},
                                                            {"steps", c.intervene.steps},
                                                            {"lr", c.intervene.lr},
                                                            {"rho", top.rho},
                                                            {"n_items", items.size()},
                                                            {"n_eval_nmp", ctl.eval.size()},
                                                            {"continuation_len", corpus.config().continuation_len},
                                                            {"runs", runs}});
  csv.write(s.output("reports/" + name + "_trajectory.csv"));
}

json correlation_json(const RankAttentionProfile& r) {
  auto cell = [](const std::optional<double>& v) { return v ? json(*v) : json("undefined"); };
  json corr = json::array(), pear = json::array();
  for (std::size_t l = 0; l < r.n_layers; ++l) {
    json a = json::array(), b = json::array();
    for (std::size_t h = 0; h < r.n_heads; ++h) {
      a.push_back(cell(r.correlation[l * r.n_heads + h]));
      b.push_back(cell(r.pearson_ranks[l * r.n_heads + h]));
    }
    corr.push_back(a);
    pear.push_back(b);
  }
  json min = "undefined";
  if (const auto m = r.min_head())
    min = {{"layer", *m / r.n_heads}, {"head", *m % r.n_heads}, {"correlation", *r.correlation[*m]}};
  return {{"estimator", rank_estimator_name(r.estimator)},
          {"n_paragraphs", r.n_paragraphs},
          {"correlation", corr},
          {"pearson_ranks", pear},
          {"min_head", min}};
}

void attn_rank_stage(Stage& s) {
  const PipelineConfig& c = s.config();
  const Corpus corpus = s.corpus();
  const Parameters params = s.model();
  const json sp = s.split();
  const RankEstimator estimator = parse_rank_estimator(c.attn.estimator);
  std::vector<std::size_t> layers = c.attn.layers;
  if (layers.empty()) {
    layers.resize(c.model.n_layers);
    std::iota(layers.begin(), layers.end(), 0);
  }
  Csv attention({"set", "paragraph", "layer", "head", "position", "token", "rank", "weight"});
  Csv profile({"set", "layer", "head", "rank", "mass", "occupancy"});
  json corr;
  for (const char* set : {"mp", "nmp"}) {
    const auto ids = s.ids(sp, set, std::string(set) == "mp" ? c.attn.n_mp : c.attn.n_nmp);
    if (ids.empty()) throw ContractError(std::string("attn-rank needs a non-empty ") + set + " set");
    std::vector<AttentionProfile> profiles(ids.size());
    std::vector<std::vector<int>> ranks(ids.size());
    parallel_for(ids.size(), c.threads, [&](std::size_t i) {
      profiles[i] = first_token_attention(params, corpus.prefix(ids[i]), ids[i]);
      ranks[i] = frequency_ranks(corpus.frequencies(), corpus.prefix(ids[i]));
    });
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t l : layers)
        for (std::size_t h = 0; h < c.model.n_heads; ++h)
          for (std::size_t j = 0; j < profiles[i].prefix_len; ++j)
            attention.add(set, ids[i], l, h, j, corpus.prefix(ids[i])[j], ranks[i][j], profiles[i].at(l, h, j));
    const RankAttentionProfile r = rank_attention_profile(profiles, ranks, estimator);
    for (std::size_t l = 0; l < r.n_layers; ++l)
      for (std::size_t h = 0; h < r.n_heads; ++h)
        for (std::size_t k = 0; k < r.n_ranks; ++k) profile.add(set, l, h, k, r.mass_at(l, h, k), r.occupancy[k]);
    corr[set] = correlation_json(r);
  }
  attention.write(s.output("reports/attention_first_token.csv"));
  profile.write(s.output("reports/rank_profile.csv"));
  write_json(s.output("reports/rank_correlation.json"), corr);
}

void patch_stage(Stage& s) {
  const PipelineConfig& c = s.config();
  const Corpus corpus = s.corpus();
  const Parameters params = s.model();
  std::vector<PatchPair> pairs;
  for (const json& j : read_jsonl(s.input("reports/pmps.jsonl"))) {
    if (pairs.size() == c.patch.n_pairs) break;
    const PerturbedParagraph p = pmp_from_json(j);
    pairs.push_back(make_patch_pair(p, corpus.prefix(p.original_id)));
  }
  if (pairs.empty()) throw ContractError("no perturbed memorized paragraphs to patch");
  if (pairs.size() < c.patch.n_pairs)
    log("patch: only " + std::to_string(pairs.size()) + " PMP pairs available of " + std::to_string(c.patch.n_pairs));
  std::vector<ActivationSite> sites;
  for (const auto& name : c.patch.sites) sites.push_back(parse_site(c.model, name));
  if (sites.empty()) sites = default_patch_sites(c.model);

  const auto results = two_way_patch(params, pairs, sites, c.threads);
  Csv csv({"paragraph", "position", "impact", "direction", "site", "target", "base_nll", "patched_nll", "delta"});
  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> means;
  for (const auto& r : results) {
    csv.add(r.paragraph_id, r.position, r.impact, patch_direction_name(r.direction), site_name(r.site), r.target,
            r.base_nll, r.patched_nll, r.delta);
    auto& m = means[{site_name(r.site), patch_direction_name(r.direction)}];
    m.first += r.delta;
    ++m.second;
  }
  csv.write(s.output("reports/patch_results.csv"));
  json summary = json::array();
  for (const auto& site : sites)
    for (PatchDirection d : {PatchDirection::CleanFromCorrupt, PatchDirection::CorruptFromClean}) {
      const auto& m = means[{site_name(site), patch_direction_name(d)}];
      summary.push_back({{"site", site_name(site)},
                         {"direction", patch_direction_name(d)},
                         {"mean_delta", m.first / static_cast<double>(m.second)}});
    }
  write_json(s.output("reports/patch_summary.json"),
             {{"n_pairs", pairs.size()}, {"n_sites", sites.size()}, {"n_results", results.size()}, {"sites", summary}});
  log("patch: " + std::to_string(pairs.size()) + " pairs, " + std::to_string(results.size()) + " results");
}

void report_stage(Stage& s) {
  const std::vector<std::pair<std::string, std::string>> figures{
      {"fig1_nll_em.csv", "reports/split_scatter.csv"},
      {"fig2_em_drop.csv", "reports/em_drop_profile.csv"},
      {"fig3_attribution_nll_mp.csv", "reports/attribution_nll_mp.csv"},
      {"fig3_attribution_nll_nmp.csv", "reports/attribution_nll_nmp.csv"},
      {"fig3_attribution_unlearn.csv", "reports/attribution_unlearn.csv"},
      {"fig3_attribution_edit.csv", "reports/attribution_edit.csv"},
      {"fig3_layer_profile.csv", "reports/layer_profile.csv"},
      {"fig4_unlearn.csv", "reports/unlearn_trajectory.csv"},
      {"fig4_edit.csv", "reports/edit_trajectory.csv"},
      {"fig5_activation_grad_mp.csv", "reports/activation_grad_mp.csv"},
      {"fig5_activation_grad_nmp.csv", "reports/activation_grad_nmp.csv"},
      {"fig5_attention_first_token.csv", "reports/attention_first_token.csv"},
      {"fig6_rank_attention.csv", "reports/rank_profile.csv"},
      {"fig6_rank_correlation.json", "reports/rank_correlation.json"},
      {"patching.csv", "reports/patch_results.csv"},
  };
  json bundle = json::object();
  for (const auto& [name, source] : figures) {
    const fs::path src = s.input(source);
    const std::string rel = "reports/figures/" + name;
    fs::copy_file(src, s.output(rel), fs::copy_options::overwrite_existing);
    bundle[name] = {{"source", source}, {"sha256", sha256_hex(src)}};
  }
  write_json(s.output("reports/figures/bundle.json"), bundle);
}

}  // namespace

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen-corpus", "train",  "split",    "perturb", "attribute", "contrast",
                                              "unlearn",    "edit",   "attn-rank", "patch",  "report"};
  return names;
}

StageRun run_stage(const std::string& stage, const PipelineConfig& config, const RunDir& dir) {
  Stage s(stage, config, dir);
  if (stage == "gen-corpus") gen_corpus_stage(s);
  else if (stage == "train") train_stage(s);
  else if (stage == "split") split_stage(s);
  else if (stage == "perturb") perturb_stage(s);
  else if (stage == "attribute") attribute_stage(s);
  else if (stage == "contrast") contrast_stage(s);
  else if (stage == "unlearn") finetune_stage(s, Objective::Unlearn);
  else if (stage == "edit") finetune_stage(s, Objective::Edit);
  else if (stage == "attn-rank") attn_rank_stage(s);
  else if (stage == "patch") patch_stage(s);
  else if (stage == "report") report_stage(s);
  else throw ConfigError("unknown stage '" + stage + "'");
  return s.finish();
}

std::vector<StageRun> run_pipeline(const PipelineConfig& config, const RunDir& dir) {
  std::vector<StageRun> runs;
  for (const auto& stage : stage_names()) runs.push_back(run_stage(stage, config, dir));
  return runs;
}

std::vector<ReplayMismatch> replay_manifest(const json& manifest, const RunDir& target) {
  std::map<std::string, json> latest;
  std::vector<std::string> order;
  for (const json& run : manifest.at("runs")) {
    const std::string cmd = run.at("command").get<std::string>();
    if (!latest.contains(cmd)) order.push_back(cmd);
    latest[cmd] = run;
  }
  std::sort(order.begin(), order.end(), [](const std::string& a, const std::string& b) {
    const auto& n = stage_names();
    return std::find(n.begin(), n.end(), a) < std::find(n.begin(), n.end(), b);
  });
  std::vector<ReplayMismatch> mismatches;
  for (const auto& cmd : order) {
    const json& run = latest.at(cmd);
    PipelineConfig config = config_from_json(run.at("config"));
    config.resolve();
    const StageRun replayed = run_stage(cmd, config, target);
    std::map<std::string, std::string> got;
    for (const auto& o : replayed.outputs) got[o.path] = o.sha256;
    for (const json& o : run.at("outputs")) {
      const std::string path = o.at("path").get<std::string>();
      const std::string expected = o.at("sha256").get<std::string>();
      const auto it = got.find(path);
      const std::string actual = it == got.end() ? "missing" : it->second;
      if (actual != expected) mismatches.push_back({cmd, path, expected, actual});
    }
  }
  return mismatches;
}

}  // namespace memlab
