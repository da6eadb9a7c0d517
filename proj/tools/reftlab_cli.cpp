// Command line front end. Subcommands map one-to-one onto experiment kinds;
// every run writes a re-runnable manifest plus its CSV outputs into --out.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "reftlab/reftlab.hpp"

namespace {

std::optional<std::uint64_t> parse_seed_env() {
  const char* raw = std::getenv("REFT_LAB_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(raw, &used);
    if (used != std::string(raw).size()) throw std::invalid_argument("");
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw reftlab::ConfigError(std::string("REFT_LAB_SEED is not an integer: '") + raw + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reftlab: grouped-rollout policy optimization on exactly solvable token tasks"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t cli_seed = 0;
  std::string out_dir;
  auto* config_opt = app.add_option("--config", config_path, "experiment config file");
  auto* seed_opt = app.add_option("--seed", cli_seed, "master seed (overrides the config file)");
  auto* out_opt = app.add_option("--out", out_dir, "output directory (overrides the config file)");

  struct Sub {
    const char* name;
    const char* help;
    reftlab::ExperimentKind kind;
  };
  const Sub subs[] = {
      {"diagnose-first-token", "first-token probability by rank", reftlab::ExperimentKind::kDiagnoseFirstToken},
      {"correctness-by-rank", "conditional correctness by opener rank", reftlab::ExperimentKind::kCorrectnessByRank},
      {"train", "grouped-rollout policy optimization", reftlab::ExperimentKind::kTrain},
      {"eval-passk", "pass@k evaluation of a policy", reftlab::ExperimentKind::kEvalPassK},
      {"ablate-nk", "sweep the opener pool and subset sizes", reftlab::ExperimentKind::kAblateNK},
      {"oracle-check", "cross-validate estimators against exact oracles", reftlab::ExperimentKind::kOracleCheck},
  };
  for (const auto& sub : subs) {
    auto* cmd = app.add_subcommand(sub.name, sub.help);
    cmd->fallthrough();
  }

  CLI11_PARSE(app, argc, argv);

  try {
    const std::string chosen = app.get_subcommands().front()->get_name();
    reftlab::ExperimentKind kind = reftlab::ExperimentKind::kTrain;
    for (const auto& sub : subs) {
      if (chosen == sub.name) kind = sub.kind;
    }

    reftlab::ConfigFile file;
    if (config_opt->count() > 0) file = reftlab::parse_config_file(config_path);
    reftlab::ExperimentConfig cfg = reftlab::load_experiment_config(file, kind);

    if (seed_opt->count() > 0) {
      cfg.master_seed = cli_seed;
    } else if (!file.has("experiment", "seed")) {
      if (const auto env_seed = parse_seed_env()) cfg.master_seed = *env_seed;
    }
    if (out_opt->count() > 0) cfg.out_dir = out_dir;

    return reftlab::run_experiment(cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
