#pragma once

/**
 * Experiment configuration.
 *
 * Config files are flat sectioned key = value text:
 *
 *     # comment
 *     [task]
 *     family = flat-correctness
 *     profile = sharp
 *
 * Keys are typed by their consumers; every diagnostic carries file and line.
 * Unknown keys are errors, not warnings, so typos cannot silently fall back
 * to defaults. The resolved configuration can be serialized back into the
 * same grammar, which is how run manifests stay re-runnable.
 */

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "reftlab/enumerate.hpp"
#include "reftlab/metrics.hpp"
#include "reftlab/sampler.hpp"
#include "reftlab/task.hpp"
#include "reftlab/train.hpp"

namespace reftlab {

// =============================================================================
// Parsing
// =============================================================================

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigFile {
  struct Entry {
    std::string value;
    int line = 0;
    mutable bool consumed = false;
  };
  std::string path;
  std::map<std::string, std::map<std::string, Entry>> sections;

  bool has(const std::string& section, const std::string& key) const {
    auto s = sections.find(section);
    return s != sections.end() && s->second.count(key) != 0;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline ConfigFile parse_config(std::istream& is, const std::string& path) {
  ConfigFile file;
  file.path = path;
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string line = raw;
    if (auto pos = line.find('#'); pos != std::string::npos) line.resize(pos);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(path + ":" + std::to_string(line_no) + ": unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError(path + ":" + std::to_string(line_no) + ": empty section name");
      file.sections[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
    if (section.empty())
      throw ConfigError(path + ":" + std::to_string(line_no) + ": key outside any section");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(path + ":" + std::to_string(line_no) + ": empty key");
    auto [it, inserted] = file.sections[section].insert({key, ConfigFile::Entry{value, line_no, false}});
    if (!inserted)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": duplicate key '" + key + "' in [" +
                        section + "]");
  }
  return file;
}

inline ConfigFile parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path + ": cannot open config file");
  return parse_config(is, path);
}

// =============================================================================
// Typed access
// =============================================================================

class ConfigReader {
 public:
  explicit ConfigReader(const ConfigFile& file) : file_(file) {}

  bool has(const std::string& section, const std::string& key) const {
    return file_.has(section, key);
  }

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const {
    const auto* e = find(section, key);
    return e ? e->value : fallback;
  }

  std::int64_t get_int(const std::string& section, const std::string& key,
                       std::int64_t fallback) const {
    const auto* e = find(section, key);
    if (!e) return fallback;
    try {
      std::size_t used = 0;
      const std::int64_t v = std::stoll(e->value, &used);
      if (used != e->value.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(where(*e) + ": expected integer for '" + key + "', got '" + e->value + "'");
    }
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    const auto* e = find(section, key);
    if (!e) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(e->value, &used);
      if (used != e->value.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(where(*e) + ": expected number for '" + key + "', got '" + e->value + "'");
    }
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    const auto* e = find(section, key);
    if (!e) return fallback;
    if (e->value == "true" || e->value == "1" || e->value == "on") return true;
    if (e->value == "false" || e->value == "0" || e->value == "off") return false;
    throw ConfigError(where(*e) + ": expected boolean for '" + key + "', got '" + e->value + "'");
  }

  std::vector<double> get_double_list(const std::string& section, const std::string& key,
                                      const std::vector<double>& fallback) const {
    const auto* e = find(section, key);
    if (!e) return fallback;
    std::vector<double> out;
    std::stringstream ss(e->value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = detail::trim(item);
      if (item.empty()) continue;
      try {
        std::size_t used = 0;
        out.push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw ConfigError(where(*e) + ": expected number list for '" + key + "', got '" + e->value + "'");
      }
    }
    if (out.empty())
      throw ConfigError(where(*e) + ": expected non-empty list for '" + key + "'");
    return out;
  }

  std::vector<int> get_int_list(const std::string& section, const std::string& key,
                                const std::vector<int>& fallback) const {
    const auto doubles = get_double_list(section, key, {});
    if (doubles.empty()) return fallback;
    std::vector<int> out;
    for (double d : doubles) {
      const int v = static_cast<int>(d);
      if (static_cast<double>(v) != d) {
        const auto* e = find(section, key);
        throw ConfigError(where(*e) + ": expected integer list for '" + key + "'");
      }
      out.push_back(v);
    }
    return out;
  }

  /// Raises on the first key that was parsed but never consumed.
  void check_unknown() const {
    for (const auto& [section, entries] : file_.sections) {
      for (const auto& [key, entry] : entries) {
        if (!entry.consumed)
          throw ConfigError(where(entry) + ": unknown key '" + key + "' in [" + section + "]");
      }
    }
  }

  const std::string& path() const { return file_.path; }

  std::string where_key(const std::string& section, const std::string& key) const {
    const auto* e = find(section, key);
    return e ? where(*e) : file_.path;
  }

 private:
  const ConfigFile::Entry* find(const std::string& section, const std::string& key) const {
    auto s = file_.sections.find(section);
    if (s == file_.sections.end()) return nullptr;
    auto k = s->second.find(key);
    if (k == s->second.end()) return nullptr;
    k->second.consumed = true;
    return &k->second;
  }

  std::string where(const ConfigFile::Entry& e) const {
    return file_.path + ":" + std::to_string(e.line);
  }

  const ConfigFile& file_;
};

// =============================================================================
// Experiment configuration
// =============================================================================

enum class ExperimentKind {
  kDiagnoseFirstToken,
  kCorrectnessByRank,
  kTrain,
  kEvalPassK,
  kAblateNK,
  kOracleCheck,
};

inline std::string kind_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::kDiagnoseFirstToken: return "diagnose-first-token";
    case ExperimentKind::kCorrectnessByRank: return "correctness-by-rank";
    case ExperimentKind::kTrain: return "train";
    case ExperimentKind::kEvalPassK: return "eval-passk";
    case ExperimentKind::kAblateNK: return "ablate-nk";
    case ExperimentKind::kOracleCheck: return "oracle-check";
  }
  return "unknown";
}

inline std::optional<ExperimentKind> kind_from_name(const std::string& name) {
  for (ExperimentKind k :
       {ExperimentKind::kDiagnoseFirstToken, ExperimentKind::kCorrectnessByRank, ExperimentKind::kTrain,
        ExperimentKind::kEvalPassK, ExperimentKind::kAblateNK, ExperimentKind::kOracleCheck}) {
    if (kind_name(k) == name) return k;
  }
  return std::nullopt;
}

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kTrain;
  std::string out_dir = "runs/out";
  std::uint64_t master_seed = 0;

  // [task]
  TaskFamily family = TaskFamily::kFlatCorrectness;
  int candidates = 20;
  int prompts = 4;
  std::uint64_t instance_seed = 1;
  int max_len = 6;
  double accuracy_weight = 2.0;
  double format_weight = 0.2;
  std::string profile = "sharp";  // sharp | uniform | explicit
  double profile_top_prob = 0.57;
  double profile_bottom_prob = 2.68e-5;
  std::vector<double> profile_logits;  // explicit profile
  // flat family
  int fillers = 4;
  int wrong_answers = 2;
  bool include_ws_step = true;
  std::string correctness = "endpoints";  // endpoints | constant | explicit
  double correctness_rank1 = 0.7529;
  double correctness_rank_m = 0.7040;
  double correctness_constant = 0.7;
  std::vector<double> correctness_values;
  // routing family
  int mode_fillers = 8;
  double concentration_start = 0.02;
  double concentration_end = 1.0;
  int gold_mode = 0;
  std::vector<int> mode_answer_map;

  // [train]
  std::string objective = "grpo";  // grpo | dapo | custom
  TrainConfig train = grpo_preset();
  std::string sampler = "standard";  // standard | forced | temperature | reft
  int forced_rank = 1;
  double temperature = 2.0;  // temperature strategy only
  int reft_n = 20;
  int reft_k = 4;
  std::uint64_t steps = 100;
  int checkpoint_every = 0;
  bool log_rollouts = false;
  std::string resume_checkpoint;
  std::vector<std::string> figures;  // subset of fig1 fig2 fig4 fig5 fig7 fig8

  // [eval]
  int eval_samples = 64;
  std::vector<int> eval_ks{1, 8, 64};
  double eval_temperature = 0.6;
  double eval_top_p = 1.0;

  // [diagnose]
  int max_rank = 20;
  std::string diagnose_mode = "exact";  // exact | mc
  int diagnose_samples = 10000;

  // [ablate]
  std::vector<int> ablate_n{10, 20, 50};
  std::vector<int> ablate_k{1, 2, 4, 8};

  // [oracle]
  std::uint64_t path_cap = kDefaultPathCap;
  int oracle_samples = 100000;
};

// =============================================================================
// Loading
// =============================================================================

namespace detail {

inline void load_task_section(const ConfigReader& r, ExperimentConfig& cfg) {
  const std::string family = r.get_string("task", "family", "flat-correctness");
  if (family == "flat-correctness") {
    cfg.family = TaskFamily::kFlatCorrectness;
  } else if (family == "routing") {
    cfg.family = TaskFamily::kRouting;
  } else {
    throw ConfigError(r.where_key("task", "family") + ": unknown task family '" + family + "'");
  }
  cfg.candidates = static_cast<int>(r.get_int("task", "valid_first_tokens", cfg.candidates));
  cfg.prompts = static_cast<int>(r.get_int("task", "prompts", cfg.prompts));
  cfg.instance_seed = static_cast<std::uint64_t>(r.get_int("task", "instance_seed",
                                                           static_cast<std::int64_t>(cfg.instance_seed)));
  cfg.max_len = static_cast<int>(r.get_int("task", "max_len", cfg.max_len));
  cfg.accuracy_weight = r.get_double("task", "accuracy_weight", cfg.accuracy_weight);
  cfg.format_weight = r.get_double("task", "format_weight", cfg.format_weight);

  cfg.profile = r.get_string("task", "profile", cfg.profile);
  cfg.profile_top_prob = r.get_double("task", "profile_top_prob", cfg.profile_top_prob);
  cfg.profile_bottom_prob = r.get_double("task", "profile_bottom_prob", cfg.profile_bottom_prob);
  cfg.profile_logits = r.get_double_list("task", "profile_logits", cfg.profile_logits);
  if (cfg.profile != "sharp" && cfg.profile != "uniform" && cfg.profile != "explicit")
    throw ConfigError(r.where_key("task", "profile") + ": unknown profile kind '" + cfg.profile + "'");
  if (cfg.profile == "explicit" && cfg.profile_logits.empty())
    throw ConfigError(r.path() + ": explicit profile requires profile_logits");

  cfg.fillers = static_cast<int>(r.get_int("task", "fillers", cfg.fillers));
  cfg.wrong_answers = static_cast<int>(r.get_int("task", "wrong_answers", cfg.wrong_answers));
  cfg.include_ws_step = r.get_bool("task", "include_ws_step", cfg.include_ws_step);
  cfg.correctness = r.get_string("task", "correctness", cfg.correctness);
  cfg.correctness_rank1 = r.get_double("task", "correctness_rank1", cfg.correctness_rank1);
  cfg.correctness_rank_m = r.get_double("task", "correctness_rank_m", cfg.correctness_rank_m);
  cfg.correctness_constant = r.get_double("task", "correctness_constant", cfg.correctness_constant);
  cfg.correctness_values = r.get_double_list("task", "correctness_values", cfg.correctness_values);
  if (cfg.correctness != "endpoints" && cfg.correctness != "constant" && cfg.correctness != "explicit")
    throw ConfigError(r.where_key("task", "correctness") + ": unknown correctness kind '" +
                      cfg.correctness + "'");
  if (cfg.correctness == "explicit" && cfg.correctness_values.empty())
    throw ConfigError(r.path() + ": explicit correctness requires correctness_values");

  cfg.mode_fillers = static_cast<int>(r.get_int("task", "mode_fillers", cfg.mode_fillers));
  cfg.concentration_start = r.get_double("task", "concentration_start", cfg.concentration_start);
  cfg.concentration_end = r.get_double("task", "concentration_end", cfg.concentration_end);
  cfg.gold_mode = static_cast<int>(r.get_int("task", "gold_mode", cfg.gold_mode));
  cfg.mode_answer_map = r.get_int_list("task", "mode_answer_map", cfg.mode_answer_map);
}

inline void load_train_section(const ConfigReader& r, ExperimentConfig& cfg) {
  cfg.objective = r.get_string("train", "objective", cfg.objective);
  if (cfg.objective == "grpo") {
    cfg.train = grpo_preset();
  } else if (cfg.objective == "dapo") {
    cfg.train = dapo_preset();
  } else if (cfg.objective == "custom") {
    cfg.train = TrainConfig{};
  } else {
    throw ConfigError(r.where_key("train", "objective") + ": unknown objective '" + cfg.objective + "'");
  }

  cfg.train.group_size = static_cast<int>(r.get_int("train", "group_size", cfg.train.group_size));
  cfg.train.learning_rate = r.get_double("train", "learning_rate", cfg.train.learning_rate);
  cfg.train.eps_low = r.get_double("train", "eps_low", cfg.train.eps_low);
  cfg.train.eps_high = r.get_double("train", "eps_high", cfg.train.eps_high);
  cfg.train.updates_per_rollout =
      static_cast<int>(r.get_int("train", "updates_per_rollout", cfg.train.updates_per_rollout));
  const std::string agg = r.get_string("train", "loss_aggregation",
                                       cfg.train.aggregation == LossAggregation::kSequenceMean
                                           ? "sequence-mean"
                                           : "token-level");
  if (agg == "sequence-mean") {
    cfg.train.aggregation = LossAggregation::kSequenceMean;
  } else if (agg == "token-level") {
    cfg.train.aggregation = LossAggregation::kTokenLevel;
  } else {
    throw ConfigError(r.where_key("train", "loss_aggregation") + ": unknown aggregation '" + agg + "'");
  }
  cfg.train.dynamic_sampling = r.get_bool("train", "dynamic_sampling", cfg.train.dynamic_sampling);
  cfg.train.max_resample_rounds =
      static_cast<int>(r.get_int("train", "max_resample_rounds", cfg.train.max_resample_rounds));
  cfg.train.advantage_epsilon = r.get_double("train", "advantage_epsilon", cfg.train.advantage_epsilon);

  cfg.sampler = r.get_string("train", "sampler", cfg.sampler);
  if (cfg.sampler != "standard" && cfg.sampler != "forced" && cfg.sampler != "temperature" &&
      cfg.sampler != "reft")
    throw ConfigError(r.where_key("train", "sampler") + ": unknown sampler '" + cfg.sampler + "'");
  cfg.forced_rank = static_cast<int>(r.get_int("train", "forced_rank", cfg.forced_rank));
  cfg.temperature = r.get_double("train", "temperature", cfg.temperature);
  cfg.reft_n = static_cast<int>(r.get_int("train", "reft_n", cfg.reft_n));
  cfg.reft_k = static_cast<int>(r.get_int("train", "reft_k", cfg.reft_k));
  cfg.steps = static_cast<std::uint64_t>(r.get_int("train", "steps", static_cast<std::int64_t>(cfg.steps)));
  cfg.checkpoint_every = static_cast<int>(r.get_int("train", "checkpoint_every", cfg.checkpoint_every));
  cfg.log_rollouts = r.get_bool("train", "log_rollouts", cfg.log_rollouts);
  cfg.resume_checkpoint = r.get_string("train", "resume_checkpoint", cfg.resume_checkpoint);

  const std::string figures = r.get_string("train", "figures", "");
  cfg.figures.clear();
  std::stringstream ss(figures);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (!item.empty()) cfg.figures.push_back(item);
  }
}

inline void load_other_sections(const ConfigReader& r, ExperimentConfig& cfg) {
  cfg.eval_samples = static_cast<int>(r.get_int("eval", "samples", cfg.eval_samples));
  cfg.eval_ks = r.get_int_list("eval", "k_list", cfg.eval_ks);
  cfg.eval_temperature = r.get_double("eval", "temperature", cfg.eval_temperature);
  cfg.eval_top_p = r.get_double("eval", "top_p", cfg.eval_top_p);

  cfg.max_rank = static_cast<int>(r.get_int("diagnose", "max_rank", cfg.max_rank));
  cfg.diagnose_mode = r.get_string("diagnose", "mode", cfg.diagnose_mode);
  if (cfg.diagnose_mode != "exact" && cfg.diagnose_mode != "mc")
    throw ConfigError(r.where_key("diagnose", "mode") + ": unknown mode '" + cfg.diagnose_mode + "'");
  cfg.diagnose_samples = static_cast<int>(r.get_int("diagnose", "samples", cfg.diagnose_samples));

  cfg.ablate_n = r.get_int_list("ablate", "n_list", cfg.ablate_n);
  cfg.ablate_k = r.get_int_list("ablate", "k_list", cfg.ablate_k);

  cfg.path_cap = static_cast<std::uint64_t>(r.get_int("oracle", "path_cap",
                                                      static_cast<std::int64_t>(cfg.path_cap)));
  cfg.oracle_samples = static_cast<int>(r.get_int("oracle", "mc_samples", cfg.oracle_samples));
}

}  // namespace detail

/**
 * Parses and resolves an experiment config. `expected_kind` comes from the
 * CLI subcommand; a kind key in the file must agree with it.
 */
inline ExperimentConfig load_experiment_config(const ConfigFile& file,
                                               std::optional<ExperimentKind> expected_kind) {
  ConfigReader r(file);
  ExperimentConfig cfg;

  const std::string kind_str = r.get_string("experiment", "kind", "");
  if (!kind_str.empty()) {
    const auto parsed = kind_from_name(kind_str);
    if (!parsed)
      throw ConfigError(r.where_key("experiment", "kind") + ": unknown experiment kind '" + kind_str + "'");
    if (expected_kind && *parsed != *expected_kind)
      throw ConfigError(r.where_key("experiment", "kind") + ": config kind '" + kind_str +
                        "' does not match the requested subcommand '" + kind_name(*expected_kind) + "'");
    cfg.kind = *parsed;
  } else if (expected_kind) {
    cfg.kind = *expected_kind;
  }
  cfg.out_dir = r.get_string("experiment", "out_dir", cfg.out_dir);
  cfg.master_seed =
      static_cast<std::uint64_t>(r.get_int("experiment", "seed", static_cast<std::int64_t>(cfg.master_seed)));

  detail::load_task_section(r, cfg);
  detail::load_train_section(r, cfg);
  detail::load_other_sections(r, cfg);
  r.check_unknown();
  return cfg;
}

inline ExperimentConfig load_experiment_config_file(const std::string& path,
                                                    std::optional<ExperimentKind> expected_kind) {
  const ConfigFile file = parse_config_file(path);
  return load_experiment_config(file, expected_kind);
}

// =============================================================================
// Resolution to library objects
// =============================================================================

inline std::vector<double> resolve_profile_logits(const ExperimentConfig& cfg) {
  if (cfg.profile == "uniform") return uniform_profile_logits(cfg.candidates);
  if (cfg.profile == "explicit") {
    if (static_cast<int>(cfg.profile_logits.size()) != cfg.candidates)
      throw ConfigError("profile_logits length must equal valid_first_tokens");
    return cfg.profile_logits;
  }
  return sharp_profile_logits(cfg.candidates, cfg.profile_top_prob, cfg.profile_bottom_prob);
}

inline std::vector<double> resolve_correctness(const ExperimentConfig& cfg) {
  if (cfg.correctness == "constant")
    return std::vector<double>(static_cast<std::size_t>(cfg.candidates), cfg.correctness_constant);
  if (cfg.correctness == "explicit") {
    if (static_cast<int>(cfg.correctness_values.size()) != cfg.candidates)
      throw ConfigError("correctness_values length must equal valid_first_tokens");
    return cfg.correctness_values;
  }
  return correctness_endpoints(cfg.candidates, cfg.correctness_rank1, cfg.correctness_rank_m);
}

inline TaskSpec resolve_task_spec(const ExperimentConfig& cfg) {
  if (cfg.family == TaskFamily::kFlatCorrectness) {
    FlatSpecParams p;
    p.candidates = cfg.candidates;
    p.fillers = cfg.fillers;
    p.wrong_answers = cfg.wrong_answers;
    p.include_ws_step = cfg.include_ws_step;
    p.max_len = cfg.max_len;
    p.profile_logits = resolve_profile_logits(cfg);
    p.correctness_by_rank = resolve_correctness(cfg);
    p.accuracy_weight = cfg.accuracy_weight;
    p.format_weight = cfg.format_weight;
    return make_flat_spec(p);
  }
  RoutingSpecParams p;
  p.candidates = cfg.candidates;
  p.mode_fillers = cfg.mode_fillers;
  p.max_len = cfg.max_len;
  p.profile_logits = resolve_profile_logits(cfg);
  p.concentration_start = cfg.concentration_start;
  p.concentration_end = cfg.concentration_end;
  p.gold_mode = cfg.gold_mode;
  p.mode_answer_map = cfg.mode_answer_map;
  p.accuracy_weight = cfg.accuracy_weight;
  p.format_weight = cfg.format_weight;
  return make_routing_spec(p);
}

/// Builds the task set: prompt ids prompt_0..prompt_{n-1}, instance seeds
/// offset from the configured base.
inline std::vector<TaskInstance> resolve_tasks(const ExperimentConfig& cfg) {
  if (cfg.prompts < 1) throw ConfigError("prompts must be positive");
  const TaskSpec spec = resolve_task_spec(cfg);
  std::vector<TaskInstance> tasks;
  tasks.reserve(static_cast<std::size_t>(cfg.prompts));
  for (int i = 0; i < cfg.prompts; ++i)
    tasks.push_back(build_task(spec, "prompt_" + std::to_string(i),
                               cfg.instance_seed + static_cast<std::uint64_t>(i)));
  return tasks;
}

inline Strategy resolve_strategy(const ExperimentConfig& cfg) {
  Strategy s;
  if (cfg.sampler == "standard") {
    s.kind = StrategyKind::kStandard;
    s.temperature = 1.0;
  } else if (cfg.sampler == "temperature") {
    s.kind = StrategyKind::kTemperature;
    s.temperature = cfg.temperature;
  } else if (cfg.sampler == "forced") {
    s.kind = StrategyKind::kForced;
    s.forced_rank = cfg.forced_rank;
    s.temperature = 1.0;
  } else if (cfg.sampler == "reft") {
    s.kind = StrategyKind::kReft;
    s.n = cfg.reft_n;
    s.k = cfg.reft_k;
  } else {
    throw ConfigError("unknown sampler '" + cfg.sampler + "'");
  }
  return s;
}

// =============================================================================
// Manifest
// =============================================================================

/// Serializes the resolved configuration back into config grammar. The
/// output is a complete, re-runnable config equivalent to the run.
inline std::string experiment_config_text(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "# reftlab resolved configuration\n";
  os << "[experiment]\n";
  os << "kind = " << kind_name(cfg.kind) << "\n";
  os << "out_dir = " << cfg.out_dir << "\n";
  os << "seed = " << cfg.master_seed << "\n";
  os << "\n[task]\n";
  os << "family = " << (cfg.family == TaskFamily::kFlatCorrectness ? "flat-correctness" : "routing") << "\n";
  os << "valid_first_tokens = " << cfg.candidates << "\n";
  os << "prompts = " << cfg.prompts << "\n";
  os << "instance_seed = " << cfg.instance_seed << "\n";
  os << "max_len = " << cfg.max_len << "\n";
  os << "accuracy_weight = " << format_double(cfg.accuracy_weight) << "\n";
  os << "format_weight = " << format_double(cfg.format_weight) << "\n";
  os << "profile = " << cfg.profile << "\n";
  if (cfg.profile == "sharp") {
    os << "profile_top_prob = " << format_double(cfg.profile_top_prob) << "\n";
    os << "profile_bottom_prob = " << format_double(cfg.profile_bottom_prob) << "\n";
  } else if (cfg.profile == "explicit") {
    os << "profile_logits = ";
    for (std::size_t i = 0; i < cfg.profile_logits.size(); ++i)
      os << (i ? "," : "") << format_double(cfg.profile_logits[i]);
    os << "\n";
  }
  if (cfg.family == TaskFamily::kFlatCorrectness) {
    os << "fillers = " << cfg.fillers << "\n";
    os << "wrong_answers = " << cfg.wrong_answers << "\n";
    os << "include_ws_step = " << (cfg.include_ws_step ? "true" : "false") << "\n";
    os << "correctness = " << cfg.correctness << "\n";
    if (cfg.correctness == "endpoints") {
      os << "correctness_rank1 = " << format_double(cfg.correctness_rank1) << "\n";
      os << "correctness_rank_m = " << format_double(cfg.correctness_rank_m) << "\n";
    } else if (cfg.correctness == "constant") {
      os << "correctness_constant = " << format_double(cfg.correctness_constant) << "\n";
    } else {
      os << "correctness_values = ";
      for (std::size_t i = 0; i < cfg.correctness_values.size(); ++i)
        os << (i ? "," : "") << format_double(cfg.correctness_values[i]);
      os << "\n";
    }
  } else {
    os << "mode_fillers = " << cfg.mode_fillers << "\n";
    os << "concentration_start = " << format_double(cfg.concentration_start) << "\n";
    os << "concentration_end = " << format_double(cfg.concentration_end) << "\n";
    os << "gold_mode = " << cfg.gold_mode << "\n";
    if (!cfg.mode_answer_map.empty()) {
      os << "mode_answer_map = ";
      for (std::size_t i = 0; i < cfg.mode_answer_map.size(); ++i)
        os << (i ? "," : "") << cfg.mode_answer_map[i];
      os << "\n";
    }
  }
  os << "\n[train]\n";
  os << "objective = " << cfg.objective << "\n";
  os << "sampler = " << cfg.sampler << "\n";
  if (cfg.sampler == "forced") os << "forced_rank = " << cfg.forced_rank << "\n";
  if (cfg.sampler == "temperature") os << "temperature = " << format_double(cfg.temperature) << "\n";
  if (cfg.sampler == "reft") {
    os << "reft_n = " << cfg.reft_n << "\n";
    os << "reft_k = " << cfg.reft_k << "\n";
  }
  os << "group_size = " << cfg.train.group_size << "\n";
  os << "steps = " << cfg.steps << "\n";
  os << "learning_rate = " << format_double(cfg.train.learning_rate) << "\n";
  os << "eps_low = " << format_double(cfg.train.eps_low) << "\n";
  os << "eps_high = " << format_double(cfg.train.eps_high) << "\n";
  os << "updates_per_rollout = " << cfg.train.updates_per_rollout << "\n";
  os << "loss_aggregation = "
     << (cfg.train.aggregation == LossAggregation::kSequenceMean ? "sequence-mean" : "token-level")
     << "\n";
  os << "dynamic_sampling = " << (cfg.train.dynamic_sampling ? "true" : "false") << "\n";
  os << "max_resample_rounds = " << cfg.train.max_resample_rounds << "\n";
  os << "advantage_epsilon = " << format_double(cfg.train.advantage_epsilon) << "\n";
  os << "checkpoint_every = " << cfg.checkpoint_every << "\n";
  os << "log_rollouts = " << (cfg.log_rollouts ? "true" : "false") << "\n";
  if (!cfg.resume_checkpoint.empty()) os << "resume_checkpoint = " << cfg.resume_checkpoint << "\n";
  if (!cfg.figures.empty()) {
    os << "figures = ";
    for (std::size_t i = 0; i < cfg.figures.size(); ++i) os << (i ? "," : "") << cfg.figures[i];
    os << "\n";
  }
  os << "\n[eval]\n";
  os << "samples = " << cfg.eval_samples << "\n";
  os << "k_list = ";
  for (std::size_t i = 0; i < cfg.eval_ks.size(); ++i) os << (i ? "," : "") << cfg.eval_ks[i];
  os << "\n";
  os << "temperature = " << format_double(cfg.eval_temperature) << "\n";
  os << "top_p = " << format_double(cfg.eval_top_p) << "\n";
  os << "\n[diagnose]\n";
  os << "max_rank = " << cfg.max_rank << "\n";
  os << "mode = " << cfg.diagnose_mode << "\n";
  os << "samples = " << cfg.diagnose_samples << "\n";
  os << "\n[ablate]\n";
  os << "n_list = ";
  for (std::size_t i = 0; i < cfg.ablate_n.size(); ++i) os << (i ? "," : "") << cfg.ablate_n[i];
  os << "\n";
  os << "k_list = ";
  for (std::size_t i = 0; i < cfg.ablate_k.size(); ++i) os << (i ? "," : "") << cfg.ablate_k[i];
  os << "\n";
  os << "\n[oracle]\n";
  os << "path_cap = " << cfg.path_cap << "\n";
  os << "mc_samples = " << cfg.oracle_samples << "\n";
  return os.str();
}

}  // namespace reftlab
