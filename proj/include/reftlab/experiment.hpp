#pragma once

/**
 * Experiment runners.
 *
 * Every run resolves its configuration, writes a manifest that can be fed
 * back through the config parser unchanged, and emits CSV outputs with
 * fixed schemas:
 *
 *   metrics.csv      step,strategy,... (see metrics_csv_header)
 *   first_token.csv  rank,token,mean_prob
 *   correctness.csv  rank,correctness,stderr,mode
 *   diversity.csv    strategy,groups,semantic_diversity,stderr
 *   passk.csv        prompt,samples,correct,k,pass_at_k
 *   ablate.csv       n,k,skipped,reason,steps,final_mean_reward,...
 *   oracle.csv       check,exact,estimate,abs_err,rel_err,tolerance,pass
 *   plot_data.csv    figure,series,x,y,extra
 *
 * Doubles are printed with format_double so reruns are byte-identical.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "reftlab/advantage.hpp"
#include "reftlab/config.hpp"
#include "reftlab/enumerate.hpp"
#include "reftlab/metrics.hpp"
#include "reftlab/policy.hpp"
#include "reftlab/rng.hpp"
#include "reftlab/sampler.hpp"
#include "reftlab/task.hpp"
#include "reftlab/train.hpp"

namespace reftlab {

// =============================================================================
// Run directory
// =============================================================================

struct RunPaths {
  std::filesystem::path dir;

  explicit RunPaths(const std::string& out_dir) : dir(out_dir) {
    std::filesystem::create_directories(dir);
  }

  std::string join(const std::string& name) const { return (dir / name).string(); }
};

inline std::ofstream open_output(const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open output file: " + path);
  return os;
}

inline void write_manifest(const RunPaths& paths, const ExperimentConfig& cfg) {
  auto os = open_output(paths.join("manifest.ini"));
  os << "# reftlab-manifest-v1\n" << experiment_config_text(cfg);
}

// =============================================================================
// Plot data
// =============================================================================

/// Long-format plot rows. `extra` carries an auxiliary value (stderr for
/// error bars) and is empty otherwise.
class PlotWriter {
 public:
  explicit PlotWriter(const std::string& path) : os_(open_output(path)) {
    os_ << "figure,series,x,y,extra\n";
  }

  void row(const std::string& figure, const std::string& series, double x, double y,
           const std::string& extra = "") {
    os_ << figure << ',' << series << ',' << format_double(x) << ',' << format_double(y) << ','
        << extra << '\n';
  }

  void flush() { os_.flush(); }

 private:
  std::ofstream os_;
};

inline bool wants_figure(const ExperimentConfig& cfg, const std::string& tag) {
  return std::find(cfg.figures.begin(), cfg.figures.end(), tag) != cfg.figures.end();
}

// =============================================================================
// Shared pieces
// =============================================================================

namespace detail {

inline PolicyParams initial_policy(const ExperimentConfig& cfg) {
  PolicyParams params;
  if (!cfg.resume_checkpoint.empty()) params = load_policy_file(cfg.resume_checkpoint);
  return params;
}

inline RolloutGroup sample_strategy_group(const PolicyParams& params, const TaskInstance& inst,
                                          const Strategy& strategy, int group_size, Stream& stream) {
  switch (strategy.kind) {
    case StrategyKind::kStandard:
      return sample_standard_group(params, inst, group_size, 1.0, stream);
    case StrategyKind::kTemperature:
      return sample_standard_group(params, inst, group_size, strategy.temperature, stream);
    case StrategyKind::kForced: {
      const auto ranked = top_n_first_tokens(params, inst, strategy.forced_rank);
      return sample_forced_group(params, inst, group_size, ranked.back(), stream, 1.0,
                                 strategy.forced_rank);
    }
    case StrategyKind::kReft:
      return sample_reft_group(params, inst, group_size, strategy.n, strategy.k, stream);
  }
  throw std::logic_error("unhandled strategy kind");
}

struct RecordSummary {
  double final_mean_reward = 0.0;
  double final_top1 = 0.0;
  double tail_mean_reward = 0.0;
  double tail_top1 = 0.0;
  double tail_zero_variance = 0.0;
  double tail_all_wrong = 0.0;
  double tail_all_correct = 0.0;
  double tail_diversity = 0.0;
};

inline double top1_of(const MetricsRecord& rec) {
  auto it = rec.top_r.find(1);
  return it == rec.top_r.end() ? 0.0 : it->second;
}

inline RecordSummary summarize_records(const std::vector<MetricsRecord>& records) {
  RecordSummary s;
  if (records.empty()) return s;
  s.final_mean_reward = records.back().mean_reward;
  s.final_top1 = top1_of(records.back());
  const std::size_t window = std::max<std::size_t>(1, records.size() / 4);
  const std::size_t begin = records.size() - window;
  for (std::size_t i = begin; i < records.size(); ++i) {
    s.tail_mean_reward += records[i].mean_reward;
    s.tail_top1 += top1_of(records[i]);
    s.tail_zero_variance += records[i].zero_variance_fraction;
    s.tail_all_wrong += records[i].all_wrong_fraction;
    s.tail_all_correct += records[i].all_correct_fraction;
    s.tail_diversity += records[i].semantic_diversity_mean;
  }
  const double inv = 1.0 / static_cast<double>(window);
  s.tail_mean_reward *= inv;
  s.tail_top1 *= inv;
  s.tail_zero_variance *= inv;
  s.tail_all_wrong *= inv;
  s.tail_all_correct *= inv;
  s.tail_diversity *= inv;
  return s;
}

}  // namespace detail

// =============================================================================
// diagnose-first-token
// =============================================================================

/// Mean first-token probability by rank across prompts, written as
/// first_token.csv. The token column shows the rank-r token of the first
/// prompt for readability; probabilities are averaged over all prompts.
inline int run_diagnose_first_token(const ExperimentConfig& cfg, const RunPaths& paths,
                                    std::ostream& log) {
  const auto tasks = resolve_tasks(cfg);
  const PolicyParams params = detail::initial_policy(cfg);
  const int max_rank = std::min(cfg.max_rank, tasks.front().spec.vocab.valid_count());
  const auto profile = first_token_rank_profile(params, tasks, max_rank);
  const auto ranked = top_n_first_tokens(params, tasks.front(), max_rank);

  auto os = open_output(paths.join("first_token.csv"));
  os << "rank,token,mean_prob\n";
  for (int r = 1; r <= max_rank; ++r) {
    os << r << ',' << tasks.front().spec.vocab.name(ranked[static_cast<std::size_t>(r - 1)]) << ','
       << format_double(profile[static_cast<std::size_t>(r - 1)]) << '\n';
  }
  os.flush();
  log << "wrote " << paths.join("first_token.csv") << " (" << max_rank << " ranks, " << tasks.size()
      << " prompts)\n";

  std::optional<PlotWriter> plot;
  if (wants_figure(cfg, "fig1")) {
    plot.emplace(paths.join("plot_data.csv"));
    for (int r = 1; r <= max_rank; ++r)
      plot->row("fig1", "mean_prob", r, profile[static_cast<std::size_t>(r - 1)]);
  }

  if (wants_figure(cfg, "fig2")) {
    if (!plot) plot.emplace(paths.join("plot_data.csv"));
    const int g = cfg.train.group_size;
    std::vector<Strategy> strategies;
    {
      Strategy s;
      s.kind = StrategyKind::kReft;
      s.n = max_rank;
      s.k = g;
      strategies.push_back(s);  // uniform over the top-N openers
    }
    {
      Strategy s;
      s.kind = StrategyKind::kForced;
      s.forced_rank = max_rank;
      strategies.push_back(s);
    }
    {
      Strategy s;
      s.kind = StrategyKind::kStandard;
      strategies.push_back(s);
    }
    {
      Strategy s;
      s.kind = StrategyKind::kForced;
      s.forced_rank = 1;
      strategies.push_back(s);
    }
    auto div_os = open_output(paths.join("diversity.csv"));
    div_os << "strategy,groups,semantic_diversity,stderr\n";
    for (const auto& strategy : strategies) {
      double sum = 0.0;
      double sum_sq = 0.0;
      const int reps = cfg.diagnose_samples;
      for (int rep = 0; rep < reps; ++rep) {
        const auto& inst = tasks[static_cast<std::size_t>(rep) % tasks.size()];
        Stream stream = derive_stream(cfg.master_seed, 0, inst.prompt_id, strategy.id(),
                                      StreamPurpose::kEval, static_cast<std::uint64_t>(rep));
        const auto group = detail::sample_strategy_group(params, inst, strategy, g, stream);
        const double d = semantic_diversity(group, inst.spec.vocab);
        sum += d;
        sum_sq += d * d;
      }
      const double mean = sum / reps;
      const double var = std::max(0.0, sum_sq / reps - mean * mean);
      const double se = std::sqrt(var / reps);
      div_os << strategy.label() << ',' << reps << ',' << format_double(mean) << ','
             << format_double(se) << '\n';
      plot->row("fig2", strategy.label(), 0.0, mean, format_double(se));
    }
    div_os.flush();
    log << "wrote " << paths.join("diversity.csv") << "\n";
  }
  if (plot) plot->flush();
  return 0;
}

// =============================================================================
// correctness-by-rank
// =============================================================================

inline int run_correctness_by_rank(const ExperimentConfig& cfg, const RunPaths& paths,
                                   std::ostream& log) {
  const auto tasks = resolve_tasks(cfg);
  const PolicyParams params = detail::initial_policy(cfg);
  const int max_rank = std::min(cfg.max_rank, tasks.front().spec.vocab.valid_count());

  std::vector<double> mean(static_cast<std::size_t>(max_rank), 0.0);
  std::vector<double> se(static_cast<std::size_t>(max_rank), 0.0);
  if (cfg.diagnose_mode == "exact") {
    for (const auto& inst : tasks) {
      const auto per_rank = correctness_by_rank_exact(params, inst, max_rank, cfg.path_cap);
      for (int r = 0; r < max_rank; ++r) mean[static_cast<std::size_t>(r)] += per_rank[static_cast<std::size_t>(r)];
    }
    for (auto& v : mean) v /= static_cast<double>(tasks.size());
  } else {
    std::vector<double> var_sum(static_cast<std::size_t>(max_rank), 0.0);
    for (const auto& inst : tasks) {
      Stream stream = derive_stream(cfg.master_seed, 0, inst.prompt_id, 0, StreamPurpose::kEval);
      const auto est = correctness_by_rank_mc(params, inst, max_rank, cfg.diagnose_samples, stream);
      for (int r = 0; r < max_rank; ++r) {
        mean[static_cast<std::size_t>(r)] += est.mean[static_cast<std::size_t>(r)];
        var_sum[static_cast<std::size_t>(r)] +=
            est.stderr_[static_cast<std::size_t>(r)] * est.stderr_[static_cast<std::size_t>(r)];
      }
    }
    const double p = static_cast<double>(tasks.size());
    for (int r = 0; r < max_rank; ++r) {
      mean[static_cast<std::size_t>(r)] /= p;
      se[static_cast<std::size_t>(r)] = std::sqrt(var_sum[static_cast<std::size_t>(r)]) / p;
    }
  }

  auto os = open_output(paths.join("correctness.csv"));
  os << "rank,correctness,stderr,mode\n";
  for (int r = 1; r <= max_rank; ++r) {
    os << r << ',' << format_double(mean[static_cast<std::size_t>(r - 1)]) << ','
       << (cfg.diagnose_mode == "exact" ? "" : format_double(se[static_cast<std::size_t>(r - 1)]))
       << ',' << cfg.diagnose_mode << '\n';
  }
  os.flush();
  log << "wrote " << paths.join("correctness.csv") << " (" << max_rank << " ranks, mode "
      << cfg.diagnose_mode << ")\n";

  if (wants_figure(cfg, "fig1")) {
    PlotWriter plot(paths.join("plot_data.csv"));
    for (int r = 1; r <= max_rank; ++r)
      plot.row("fig1", "correctness", r, mean[static_cast<std::size_t>(r - 1)],
               cfg.diagnose_mode == "exact" ? "" : format_double(se[static_cast<std::size_t>(r - 1)]));
    plot.flush();
  }
  return 0;
}

// =============================================================================
// train
// =============================================================================

inline int run_train(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  auto tasks = resolve_tasks(cfg);
  std::map<std::string, TaskInstance> task_map;
  for (auto& t : tasks) task_map.emplace(t.prompt_id, t);

  PolicyParams params = detail::initial_policy(cfg);
  const Strategy strategy = resolve_strategy(cfg);
  validate_train_config(cfg.train);

  auto metrics_os = open_output(paths.join("metrics.csv"));
  metrics_os << metrics_csv_header() << '\n';
  metrics_os.flush();

  std::optional<std::ofstream> audit_os;
  if (cfg.log_rollouts) audit_os.emplace(open_output(paths.join("rollouts.log")));

  TrainHooks hooks;
  hooks.checkpoint_every = cfg.checkpoint_every;
  hooks.on_record = [&](const MetricsRecord& rec) {
    metrics_os << metrics_csv_row(rec) << '\n';
    metrics_os.flush();
  };
  hooks.on_checkpoint = [&](std::uint64_t step, const PolicyParams& p) {
    save_policy_file(p, paths.join("policy_step_" + std::to_string(step) + ".txt"));
  };
  if (audit_os) {
    hooks.audit = [&](const RolloutGroup& group) {
      for (const auto& rollout : group.rollouts) *audit_os << rollout_audit_line(group, rollout) << '\n';
    };
  }

  const std::vector<MetricsRecord> records =
      train_loop(params, tasks, cfg.train, strategy, cfg.master_seed, cfg.steps, {1, 8, 64}, hooks);
  save_policy_file(params, paths.join("policy_final.txt"));
  if (audit_os) audit_os->flush();
  log << "trained " << cfg.steps << " steps with " << strategy.label() << ", objective "
      << cfg.objective << "\n";
  log << "wrote " << paths.join("metrics.csv") << " and " << paths.join("policy_final.txt") << "\n";

  const bool any_fig = wants_figure(cfg, "fig4") || wants_figure(cfg, "fig5") ||
                       wants_figure(cfg, "fig7") || wants_figure(cfg, "fig8");
  if (any_fig) {
    PlotWriter plot(paths.join("plot_data.csv"));
    for (const auto& rec : records) {
      const double step = static_cast<double>(rec.step);
      if (wants_figure(cfg, "fig4"))
        plot.row("fig4", rec.strategy + ":top1_prob", step, detail::top1_of(rec));
      if (wants_figure(cfg, "fig5")) {
        plot.row("fig5", "zero_variance", step, rec.zero_variance_fraction);
        plot.row("fig5", "all_correct", step, rec.all_correct_fraction);
        plot.row("fig5", "all_wrong", step, rec.all_wrong_fraction);
      }
      if (wants_figure(cfg, "fig7"))
        plot.row("fig7", rec.strategy + ":unique_answers", step, rec.unique_answers_mean);
      if (wants_figure(cfg, "fig8")) {
        for (const auto& [r, v] : rec.top_r)
          plot.row("fig8", "top" + std::to_string(r) + "_prob", step, v);
      }
    }
    plot.flush();
  }
  return 0;
}

// =============================================================================
// eval-passk
// =============================================================================

inline int run_eval_passk(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const auto tasks = resolve_tasks(cfg);
  const PolicyParams params = detail::initial_policy(cfg);
  if (cfg.eval_samples < 1) throw ConfigError("eval samples must be positive");

  auto os = open_output(paths.join("passk.csv"));
  os << "prompt,samples,correct,k,pass_at_k\n";
  std::map<int, double> mean_by_k;
  for (const auto& inst : tasks) {
    Stream stream = derive_stream(cfg.master_seed, 0, inst.prompt_id, 0, StreamPurpose::kEval);
    const auto group = sample_standard_group(params, inst, cfg.eval_samples, cfg.eval_temperature,
                                             stream, cfg.eval_top_p);
    int correct = 0;
    for (const auto& r : group.rollouts) correct += r.answer_correct ? 1 : 0;
    for (int k : cfg.eval_ks) {
      if (k < 1 || k > cfg.eval_samples) continue;
      const double est = pass_at_k(cfg.eval_samples, correct, k);
      os << inst.prompt_id << ',' << cfg.eval_samples << ',' << correct << ',' << k << ','
         << format_double(est) << '\n';
      mean_by_k[k] += est;
    }
  }
  for (auto& [k, sum] : mean_by_k) {
    os << "mean," << cfg.eval_samples << ",," << k << ','
       << format_double(sum / static_cast<double>(tasks.size())) << '\n';
  }
  os.flush();
  log << "wrote " << paths.join("passk.csv") << " (" << tasks.size() << " prompts, "
      << cfg.eval_samples << " samples each at T=" << format_double(cfg.eval_temperature) << ")\n";
  return 0;
}

// =============================================================================
// ablate-nk
// =============================================================================

inline int run_ablate_nk(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const auto base_tasks = resolve_tasks(cfg);
  const int valid = base_tasks.front().spec.vocab.valid_count();
  const int g = cfg.train.group_size;

  auto os = open_output(paths.join("ablate.csv"));
  os << "n,k,skipped,reason,steps,final_mean_reward,final_top1_prob,tail_mean_reward,"
        "tail_top1_prob,tail_zero_variance,tail_all_wrong,tail_semantic_diversity\n";

  for (int n : cfg.ablate_n) {
    for (int k : cfg.ablate_k) {
      std::string reason;
      if (n < 1 || n > valid) {
        reason = "n outside [1; valid first tokens]";
      } else if (k < 1 || k > n) {
        reason = "k outside [1; n]";
      } else if (k > g) {
        reason = "k exceeds group size";
      } else if (g % k != 0) {
        reason = "k does not divide group size";
      }
      if (!reason.empty()) {
        os << n << ',' << k << ",1," << reason << ",,,,,,,,\n";
        log << "skip n=" << n << " k=" << k << ": " << reason << "\n";
        continue;
      }

      Strategy strategy;
      strategy.kind = StrategyKind::kReft;
      strategy.n = n;
      strategy.k = k;

      PolicyParams params = detail::initial_policy(cfg);
      const auto records =
          train_loop(params, base_tasks, cfg.train, strategy, cfg.master_seed, cfg.steps, {1, 8});
      const auto s = detail::summarize_records(records);
      os << n << ',' << k << ",0,," << cfg.steps << ',' << format_double(s.final_mean_reward) << ','
         << format_double(s.final_top1) << ',' << format_double(s.tail_mean_reward) << ','
         << format_double(s.tail_top1) << ',' << format_double(s.tail_zero_variance) << ','
         << format_double(s.tail_all_wrong) << ',' << format_double(s.tail_diversity) << '\n';
      os.flush();
      log << "ran n=" << n << " k=" << k << " for " << cfg.steps
          << " steps: tail top1=" << format_double(s.tail_top1) << "\n";
    }
  }
  os.flush();
  log << "wrote " << paths.join("ablate.csv") << "\n";
  return 0;
}

// =============================================================================
// oracle-check
// =============================================================================

struct OracleRow {
  std::string check;
  double exact = 0.0;
  double estimate = 0.0;
  double abs_err = 0.0;
  double rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

namespace detail {

inline OracleRow make_row(const std::string& check, double exact, double estimate, double tolerance) {
  OracleRow row;
  row.check = check;
  row.exact = exact;
  row.estimate = estimate;
  row.abs_err = std::abs(exact - estimate);
  const double denom = std::max(std::abs(exact), std::abs(estimate));
  row.rel_err = denom > 0.0 ? row.abs_err / denom : 0.0;
  row.tolerance = tolerance;
  row.pass = row.abs_err <= tolerance;
  return row;
}

/// Counts the subsets of size k (out of n rollouts, c of them correct) that
/// contain at least one correct rollout, by direct enumeration.
inline double passk_subset_oracle(int n, int c, int k) {
  std::vector<int> idx(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::uint64_t total = 0;
  std::uint64_t hit = 0;
  while (true) {
    ++total;
    bool any = false;
    for (int i = 0; i < k; ++i) {
      if (idx[static_cast<std::size_t>(i)] < c) {
        any = true;
        break;
      }
    }
    if (any) ++hit;
    int i = k - 1;
    while (i >= 0 && idx[static_cast<std::size_t>(i)] == n - k + i) --i;
    if (i < 0) break;
    ++idx[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < k; ++j)
      idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace detail

/**
 * Cross-validates the estimators against independent oracles. Monte Carlo
 * comparisons use a three-sigma tolerance; exact identities use fixed
 * absolute tolerances. Returns one row per check.
 */
inline std::vector<OracleRow> oracle_check_battery(const ExperimentConfig& cfg, std::ostream& log) {
  std::vector<OracleRow> rows;
  const auto tasks = resolve_tasks(cfg);
  const auto& inst = tasks.front();
  const PolicyParams params = detail::initial_policy(cfg);
  const int mc = std::max(1, cfg.oracle_samples);

  // --- pass@k closed form vs subset enumeration, exact to the bit ---------
  {
    double worst = 0.0;
    for (int n = 1; n <= 12; ++n) {
      for (int c = 0; c <= n; ++c) {
        for (int k = 1; k <= n; ++k) {
          const double lhs = pass_at_k(n, c, k);
          const double rhs = detail::passk_subset_oracle(n, c, k);
          worst = std::max(worst, std::abs(lhs - rhs));
        }
      }
    }
    rows.push_back(detail::make_row("passk_vs_subset_enumeration", 0.0, worst, 0.0));
  }

  // --- coverage formula vs first-token Monte Carlo -------------------------
  {
    const int g = cfg.train.group_size;
    const int rank = std::min(cfg.max_rank, inst.spec.vocab.valid_count());
    const auto ranked = top_n_first_tokens(params, inst, rank);
    const Token target = ranked.back();
    const auto dist = distribution(params, inst, start_context(inst.spec.vocab), 1.0);
    const double p = dist.probs[static_cast<std::size_t>(target)];
    const double exact = coverage_probability(p, g);
    Stream stream = derive_stream(cfg.master_seed, 0, inst.prompt_id, 0, StreamPurpose::kOracle, 1);
    int hits = 0;
    for (int rep = 0; rep < mc; ++rep) {
      bool seen = false;
      for (int j = 0; j < g; ++j) {
        if (sample_token(dist, stream) == target) seen = true;
      }
      if (seen) ++hits;
    }
    const double est = static_cast<double>(hits) / mc;
    const double sigma = std::sqrt(std::max(exact * (1.0 - exact), 1e-12) / mc);
    rows.push_back(detail::make_row("coverage_vs_mc", exact, est, 3.0 * sigma));
  }

  // --- uniform subset marginals: each opener drawn with probability k/n ----
  {
    const int n = std::min(cfg.reft_n, inst.spec.vocab.valid_count());
    const int k = std::min(cfg.reft_k, n);
    Stream stream = derive_stream(cfg.master_seed, 0, inst.prompt_id, 0, StreamPurpose::kOracle, 2);
    std::vector<int> counts(static_cast<std::size_t>(n), 0);
    const int reps = std::min(mc, 200000);
    for (int rep = 0; rep < reps; ++rep) {
      for (int idx : stream.sample_without_replacement(n, k)) ++counts[static_cast<std::size_t>(idx)];
    }
    const double p = static_cast<double>(k) / n;
    const double sigma = std::sqrt(p * (1.0 - p) / reps);
    double worst = 0.0;
    for (int i = 0; i < n; ++i)
      worst = std::max(worst, std::abs(static_cast<double>(counts[static_cast<std::size_t>(i)]) / reps - p));
    rows.push_back(detail::make_row("subset_marginals_vs_uniform", p, p + worst, 3.0 * sigma));
  }

  // --- score gradient vs central finite differences ------------------------
  {
    Stream stream = derive_stream(cfg.master_seed, 0, inst.prompt_id, 0, StreamPurpose::kOracle, 3);
    PolicyParams perturbed = params;
    const auto group = sample_standard_group(perturbed, inst, 4, 1.0, stream);
    const double h = 1e-5;
    double worst_rel = 0.0;
    for (const auto& rollout : group.rollouts) {
      const auto grad = grad_logprob(perturbed, inst, rollout.tokens, 1.0);
      for (const auto& [ctx, row] : grad) {
        for (std::size_t j = 0; j < row.size(); ++j) {
          PolicyParams plus = perturbed;
          PolicyParams minus = perturbed;
          GradMap bump;
          bump[ctx] = std::vector<double>(row.size(), 0.0);
          bump[ctx][j] = 1.0;
          apply_update(plus, inst, bump, h);
          apply_update(minus, inst, bump, -h);
          const double fd = (logprob_trajectory(plus, inst, rollout.tokens, 1.0) -
                             logprob_trajectory(minus, inst, rollout.tokens, 1.0)) /
                            (2.0 * h);
          const double denom = std::max({std::abs(row[j]), std::abs(fd), 1e-8});
          worst_rel = std::max(worst_rel, std::abs(row[j] - fd) / denom);
        }
      }
    }
    rows.push_back(detail::make_row("grad_vs_finite_difference", 0.0, worst_rel, 1e-6));
  }

  // --- opener/continuation additivity ---------------------------------------
  {
    Stream stream = derive_stream(cfg.master_seed, 0, inst.prompt_id, 0, StreamPurpose::kOracle, 4);
    const auto group = sample_standard_group(params, inst, 16, 1.0, stream);
    double worst = 0.0;
    for (const auto& rollout : group.rollouts) {
      const double total = logprob_trajectory(params, inst, rollout.tokens, 1.0);
      const double split = logprob_first_token(params, inst, rollout.tokens, 1.0) +
                           logprob_continuation(params, inst, rollout.tokens, 1.0);
      worst = std::max(worst, std::abs(total - split));
    }
    rows.push_back(detail::make_row("logprob_additivity", 0.0, worst, 1e-12));
  }

  // --- advantage invariances with a deliberate negative control -------------
  {
    const std::vector<double> rewards{2.2, 0.2, 0.2, 2.2, 0.2, 2.2, 0.2, 0.2};
    const auto base = group_advantages(rewards, 0.0);
    std::vector<double> shifted = rewards;
    for (auto& r : shifted) r += 17.25;
    std::vector<double> scaled = rewards;
    for (auto& r : scaled) r *= 4.0;
    const auto shift = group_advantages(shifted, 0.0);
    const auto scale = group_advantages(scaled, 0.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < rewards.size(); ++i) {
      worst = std::max(worst, std::abs(base.values[i] - shift.values[i]));
      worst = std::max(worst, std::abs(base.values[i] - scale.values[i]));
    }
    // The corrected-variance hook must measurably disagree, otherwise the
    // invariance check could not detect a wrong normalizer.
    const auto control = group_advantages(rewards, 0.0, true);
    double control_gap = 0.0;
    for (std::size_t i = 0; i < rewards.size(); ++i)
      control_gap = std::max(control_gap, std::abs(base.values[i] - control.values[i]));
    if (control_gap < 1e-3) worst = 1.0;
    rows.push_back(detail::make_row("advantage_invariance", 0.0, worst, 1e-12));
  }

  // --- enumeration total probability ----------------------------------------
  {
    const auto enumeration = enumerate_trajectories(params, inst, 1.0, cfg.path_cap);
    rows.push_back(detail::make_row("enumeration_total_prob", 1.0, enumeration.total_prob, 1e-12));
    log << "enumeration explored " << enumeration.paths.size() << " trajectories\n";
  }

  // --- forced-opener correctness vs the configured schedule -----------------
  if (cfg.family == TaskFamily::kFlatCorrectness) {
    const auto expected = resolve_correctness(cfg);
    // The schedule covers only the candidate ranks; ranks past it hold no
    // opener mass and have no expected value to compare against.
    const int max_rank = std::min(cfg.max_rank, static_cast<int>(expected.size()));
    const auto ranked = top_n_first_tokens(params, inst, max_rank);
    double worst = 0.0;
    for (int r = 0; r < max_rank; ++r) {
      const double exact =
          exact_correct_probability(params, inst, 1.0, cfg.path_cap, ranked[static_cast<std::size_t>(r)]);
      worst = std::max(worst, std::abs(exact - expected[static_cast<std::size_t>(r)]));
    }
    rows.push_back(detail::make_row("forced_rank_correctness", 0.0, worst, 1e-9));
  }

  // --- expected score-weighted gradient vs Monte Carlo ----------------------
  {
    const auto exact_grad = expected_reinforce_gradient(params, inst, 1.0, cfg.path_cap);
    Stream stream = derive_stream(cfg.master_seed, 0, inst.prompt_id, 0, StreamPurpose::kOracle, 5);
    std::map<ContextKey, std::vector<double>> sum;
    std::map<ContextKey, std::vector<double>> sum_sq;
    const int reps = std::min(mc, 50000);
    for (int rep = 0; rep < reps; ++rep) {
      const auto group = sample_standard_group(params, inst, 1, 1.0, stream);
      const auto& rollout = group.rollouts.front();
      const auto grad = grad_logprob(params, inst, rollout.tokens, 1.0);
      for (const auto& [ctx, row] : grad) {
        auto& acc = sum[ctx];
        auto& acc_sq = sum_sq[ctx];
        if (acc.empty()) {
          acc.assign(row.size(), 0.0);
          acc_sq.assign(row.size(), 0.0);
        }
        for (std::size_t j = 0; j < row.size(); ++j) {
          const double v = rollout.reward * row[j];
          acc[j] += v;
          acc_sq[j] += v * v;
        }
      }
    }
    double worst_excess = 0.0;  // violation beyond 3 sigma, 0 when all within
    for (const auto& [ctx, exact_row] : exact_grad) {
      const auto sit = sum.find(ctx);
      for (std::size_t j = 0; j < exact_row.size(); ++j) {
        const double mean = sit == sum.end() ? 0.0 : sit->second[j] / reps;
        const double mean_sq = sit == sum.end() ? 0.0 : sum_sq[ctx][j] / reps;
        const double var = std::max(0.0, mean_sq - mean * mean);
        const double sigma = std::sqrt(var / reps) + 1e-12;
        const double err = std::abs(mean - exact_row[j]);
        worst_excess = std::max(worst_excess, err - 3.0 * sigma);
      }
    }
    rows.push_back(detail::make_row("reinforce_gradient_vs_mc", 0.0, std::max(0.0, worst_excess), 1e-12));
  }

  return rows;
}

inline int run_oracle_check(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const auto rows = oracle_check_battery(cfg, log);
  auto os = open_output(paths.join("oracle.csv"));
  os << "check,exact,estimate,abs_err,rel_err,tolerance,pass\n";
  bool all_pass = true;
  for (const auto& row : rows) {
    os << row.check << ',' << format_double(row.exact) << ',' << format_double(row.estimate) << ','
       << format_double(row.abs_err) << ',' << format_double(row.rel_err) << ','
       << format_double(row.tolerance) << ',' << (row.pass ? 1 : 0) << '\n';
    log << (row.pass ? "[ ok ] " : "[FAIL] ") << row.check << " |err|=" << format_double(row.abs_err)
        << " tol=" << format_double(row.tolerance) << "\n";
    all_pass = all_pass && row.pass;
  }
  os.flush();
  log << "wrote " << paths.join("oracle.csv") << "\n";
  return all_pass ? 0 : 1;
}

// =============================================================================
// Dispatch
// =============================================================================

inline int run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  RunPaths paths(cfg.out_dir);
  write_manifest(paths, cfg);
  switch (cfg.kind) {
    case ExperimentKind::kDiagnoseFirstToken: return run_diagnose_first_token(cfg, paths, log);
    case ExperimentKind::kCorrectnessByRank: return run_correctness_by_rank(cfg, paths, log);
    case ExperimentKind::kTrain: return run_train(cfg, paths, log);
    case ExperimentKind::kEvalPassK: return run_eval_passk(cfg, paths, log);
    case ExperimentKind::kAblateNK: return run_ablate_nk(cfg, paths, log);
    case ExperimentKind::kOracleCheck: return run_oracle_check(cfg, paths, log);
  }
  throw std::logic_error("unhandled experiment kind");
}

}  // namespace reftlab
