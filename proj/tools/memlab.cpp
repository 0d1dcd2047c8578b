#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "memlab/error.hpp"
#include "memlab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace memlab;

namespace {

struct GlobalOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string config;
  std::string run = "default";
  std::string run_dir;
  std::vector<std::string> overrides;
};

fs::path run_path(const GlobalOptions& g) { return g.run_dir.empty() ? default_run_root() / g.run : fs::path(g.run_dir); }

/// Defaults, then the config file (explicit, or the one gen-corpus left in the
/// run directory), then --set overrides, then --seed / --threads.
PipelineConfig build_config(const GlobalOptions& g, const fs::path& dir) {
  nlohmann::json j = to_json_value(PipelineConfig{});
  fs::path file = g.config;
  if (file.empty() && fs::exists(dir / "config.json")) file = dir / "config.json";
  if (!file.empty()) j = to_json_value(load_config(file));
  for (const auto& o : g.overrides) apply_override(j, o);
  if (g.seed) j["seed"] = *g.seed;
  if (g.threads) j["threads"] = *g.threads;
  PipelineConfig config = config_from_json(j);
  config.resolve();
  return config;
}

int run(int argc, char** argv) {
  CLI::App app{"Memorization localization lab"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--seed", g.seed, "Global seed (corpus, init, sampling)");
  app.add_option("--config", g.config, "JSON config file; defaults to <run dir>/config.json when present");
  app.add_option("--threads", g.threads, "Worker threads");
  app.add_option("--run", g.run, "Run name under $MEMLAB_RUN_ROOT (default ./runs)");
  app.add_option("--run-dir", g.run_dir, "Explicit run directory (overrides --run)");
  app.add_option("--set", g.overrides, "Config override section.key=value (repeatable)");

  std::string stage_name;
  for (const auto& stage : stage_names())
    app.add_subcommand(stage, "Run the " + stage + " stage")->callback([&stage_name, stage] { stage_name = stage; });
  app.add_subcommand("run-all", "Run every stage in order")->callback([&stage_name] { stage_name = "run-all"; });
  std::string manifest_path, replay_into;
  auto* replay = app.add_subcommand("replay", "Re-run a manifest into another run directory and compare hashes");
  replay->add_option("manifest", manifest_path, "manifest.json to replay")->required();
  replay->add_option("--into", replay_into, "Target run directory")->required();
  replay->callback([&stage_name] { stage_name = "replay"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (stage_name == "replay") {
    std::ifstream f(manifest_path);
    if (!f) throw InputError("missing manifest " + manifest_path);
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw InputError("malformed manifest " + manifest_path + ": " + e.what());
    }
    const auto mismatches = replay_manifest(manifest, RunDir(replay_into));
    for (const auto& m : mismatches)
      std::cerr << "mismatch " << m.command << " " << m.path << " expected " << m.expected << " got " << m.actual
                << '\n';
    std::cout << (mismatches.empty() ? "replay: all artifact hashes match\n" : "replay: hashes differ\n");
    return mismatches.empty() ? 0 : 4;
  }

  const fs::path dir = run_path(g);
  const PipelineConfig config = build_config(g, dir);
  RunDir run_dir(dir);
  std::vector<StageRun> runs;
  if (stage_name == "run-all") runs = run_pipeline(config, run_dir);
  else runs.push_back(run_stage(stage_name, config, run_dir));
  for (const auto& r : runs) {
    std::cout << r.command << ": " << r.outputs.size() << " artifacts in " << dir.string() << '\n';
    for (const auto& o : r.outputs) std::cout << "  " << o.sha256 << "  " << o.path << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return 1;
  }
}
