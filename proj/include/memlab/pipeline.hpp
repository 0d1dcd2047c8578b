#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "memlab/activation_lab.hpp"
#include "memlab/attribution.hpp"
#include "memlab/corpus.hpp"
#include "memlab/intervene.hpp"
#include "memlab/metrics.hpp"
#include "memlab/model.hpp"
#include "memlab/train.hpp"

namespace memlab {

struct TrainSection {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t max_steps = 3000;
  std::size_t eval_every = 0;
  bool early_stop = true;
  std::size_t checkpoint_every = 0;
};

struct SplitSection {
  /// 0 means derive from the continuation length (full EM, 20%).
  std::size_t em_max = 0;
  std::size_t nmp_upper = 0;
};

struct PerturbSection {
  std::size_t n_mp = 50;
  std::size_t n_nmp = 50;
  std::size_t repeats = 2;
};

struct AttributeSection {
  std::size_t n_mp = 50;
  std::size_t n_nmp = 50;
};

struct ContrastSection {
  std::size_t n_mp = 50;
  std::size_t nmp_batch = 10;
  std::size_t control_pool = 50;
  std::size_t eval_nmp = 50;
  std::string direction = "current_first";
  double rho = 0.001;
};

struct InterveneSection {
  std::size_t steps = 10;
  /// 1e-4 leaves every MP intact after 10 steps on the desk model.
  double lr = 1e-2;
  std::vector<std::string> masks{"top_gradient", "random", "all"};
};

struct AttnSection {
  std::string estimator = "spearman";
  std::size_t n_mp = 50;
  std::size_t n_nmp = 50;
  /// Layers written to the first-token attention table; empty means all.
  std::vector<std::size_t> layers;
};

struct PatchSection {
  std::size_t n_pairs = 50;
  /// Site names such as "L1.head_out.H2"; empty means every head output,
  /// MLP output and residual.
  std::vector<std::string> sites;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  CorpusConfig corpus;
  ModelConfig model;
  TrainSection train;
  SplitSection split;
  PerturbSection perturb;
  AttributeSection attribute;
  ContrastSection contrast;
  InterveneSection intervene;
  AttnSection attn;
  PatchSection patch;

  /// Copies the global seed into the corpus and model sections and checks
  /// every section. Throws ConfigError.
  void resolve();
  SplitThresholds thresholds() const;
  TrainConfig train_config() const;
  KlDirection direction() const;
};

nlohmann::json to_json_value(const PipelineConfig& config);
PipelineConfig config_from_json(const nlohmann::json& j);
/// Reads a config file. Throws ConfigError when missing or malformed.
PipelineConfig load_config(const std::filesystem::path& path);
/// Applies "section.key=value" overrides; value is parsed as JSON, falling
/// back to a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// --- run directory -----------------------------------------------------------

std::string sha256_hex(const std::filesystem::path& path);

struct ArtifactRecord {
  std::string path;  // relative to the run directory
  std::string sha256;
};

struct StageRun {
  std::string command;
  nlohmann::json config;
  std::vector<ArtifactRecord> inputs;
  std::vector<ArtifactRecord> outputs;
  double seconds = 0.0;
};

/// Every subcommand appends one StageRun to manifest.json in the run directory.
class RunDir {
 public:
  explicit RunDir(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& rel) const { return root_ / rel; }
  /// Throws InputError naming the artifact when it does not exist.
  std::filesystem::path require(const std::string& rel) const;
  bool exists(const std::string& rel) const;

  nlohmann::json manifest() const;
  void append(const StageRun& run) const;

 private:
  std::filesystem::path root_;
};

/// Root for run directories: $MEMLAB_RUN_ROOT or ./runs.
std::filesystem::path default_run_root();

// --- stages ------------------------------------------------------------------

/// gen-corpus, train, split, perturb, attribute, contrast, unlearn, edit,
/// attn-rank, patch, report.
const std::vector<std::string>& stage_names();

/// Runs one stage, writes its artifacts and records it in the manifest.
StageRun run_stage(const std::string& stage, const PipelineConfig& config, const RunDir& dir);

/// Every stage in order.
std::vector<StageRun> run_pipeline(const PipelineConfig& config, const RunDir& dir);

struct ReplayMismatch {
  std::string command;
  std::string path;
  std::string expected;
  std::string actual;
};

/// Re-runs the latest run of each stage recorded in a manifest, in order,
/// with its recorded config, into another run directory and compares the
/// output hashes.
std::vector<ReplayMismatch> replay_manifest(const nlohmann::json& manifest, const RunDir& target);

}  // namespace memlab
