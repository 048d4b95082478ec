#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>

#include "drasrl/config.hpp"
#include "drasrl/pipeline.hpp"

namespace {

constexpr const char* kOutEnv = "DRASRL_OUT";

int fail(const std::string& stage, const std::string& msg, int code) {
  std::cerr << "drasrl: [" << stage << "] " << msg << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distance-rank aware sequential reward learning: desk-scale experiment driver"};
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string stage = "full";
  std::string positional_stage;
  bool resume = false;
  bool quiet = false;
  bool print_config = false;

  app.add_option("stage_name", positional_stage, "Stage to run (same as --stage)")
      ->check(CLI::IsMember(drasrl::stage_names()));
  app.add_option("--config", config_path, "Experiment JSON (a run manifest also works)");
  app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out", out_dir, std::string("Output directory (fallback: $") + kOutEnv + ", then config output_dir)");
  app.add_option("--stage", stage, "Stage to run")->check(CLI::IsMember(drasrl::stage_names()));
  app.add_flag("--resume", resume, "Resume train-reward from <out>/trainer_state when present");
  app.add_flag("--quiet", quiet, "No progress output");
  app.add_flag("--print-config", print_config, "Print the resolved config with defaults and exit");
  CLI11_PARSE(app, argc, argv);
  if (!positional_stage.empty()) stage = positional_stage;

  nlohmann::json doc = nlohmann::json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) return fail("config", "cannot open " + config_path, 2);
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      return fail("config", config_path + ": " + e.what(), 2);
    }
  }
  if (seed && doc.is_object()) doc["seed"] = *seed;

  const drasrl::ConfigResult res = drasrl::validate_config(doc);
  if (!res.ok()) {
    for (const auto& v : res.violations) std::cerr << "drasrl: [config] " << v << '\n';
    return 2;
  }
  drasrl::ExperimentConfig cfg = *res.config;
  if (print_config) {
    std::cout << drasrl::config_to_json(cfg).dump(2) << '\n';
    return 0;
  }

  std::string out = out_dir;
  if (out.empty()) {
    if (const char* env = std::getenv(kOutEnv); env != nullptr && *env != '\0') out = env;
  }
  if (out.empty()) out = cfg.output_dir;
  cfg.output_dir = out;

  drasrl::PipelineOptions opts;
  opts.resume = resume;
  if (!quiet) opts.log = [](const std::string& msg) { std::cerr << msg << '\n'; };
  try {
    const auto dir = drasrl::run_pipeline(cfg, stage, out, opts);
    if (!quiet) std::cerr << "artifacts in " << dir.string() << '\n';
  } catch (const drasrl::StageError& e) {
    return fail(e.stage(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail(stage, e.what(), 1);
  }
  return 0;
}
