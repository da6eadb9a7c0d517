#pragma once

/**
 * Grouped-rollout policy-gradient training.
 *
 * One training step samples a group per task from the frozen behavior
 * policy, optionally filters zero-reward-variance groups (dynamic
 * sampling), normalizes advantages once per batch, then runs one or more
 * clipped-surrogate ascent rounds against the evolving policy. Advantages
 * depend only on rewards, so they are not recomputed between rounds.
 *
 * The surrogate is the asymmetric-clip PPO form: per sampled token,
 * min(ratio * A, clip(ratio, 1-eps_low, 1+eps_high) * A), aggregated either
 * per-sequence-then-mean or pooled over all batch tokens. Gradients are
 * exact closed forms, not finite differences.
 */

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "reftlab/advantage.hpp"
#include "reftlab/metrics.hpp"
#include "reftlab/policy.hpp"
#include "reftlab/rng.hpp"
#include "reftlab/sampler.hpp"
#include "reftlab/task.hpp"

namespace reftlab {

// =============================================================================
// Configuration
// =============================================================================

enum class LossAggregation { kSequenceMean, kTokenLevel };

struct TrainConfig {
  int group_size = 8;
  double learning_rate = 0.05;
  double eps_low = 0.2;
  double eps_high = 0.2;
  int updates_per_rollout = 1;
  LossAggregation aggregation = LossAggregation::kSequenceMean;
  bool dynamic_sampling = false;
  int max_resample_rounds = 3;
  double advantage_epsilon = 1e-6;
};

/// Symmetric clip, several ascent rounds per batch, per-sequence averaging,
/// no filtering.
inline TrainConfig grpo_preset() {
  TrainConfig cfg;
  cfg.eps_low = 0.2;
  cfg.eps_high = 0.2;
  cfg.updates_per_rollout = 4;
  cfg.aggregation = LossAggregation::kSequenceMean;
  cfg.dynamic_sampling = false;
  return cfg;
}

/// Asymmetric clip (wider upside), single round, token pooling, dynamic
/// sampling on.
inline TrainConfig dapo_preset() {
  TrainConfig cfg;
  cfg.eps_low = 0.2;
  cfg.eps_high = 0.28;
  cfg.updates_per_rollout = 1;
  cfg.aggregation = LossAggregation::kTokenLevel;
  cfg.dynamic_sampling = true;
  return cfg;
}

inline void validate_train_config(const TrainConfig& cfg) {
  if (cfg.group_size < 1) throw std::invalid_argument("train config: group_size must be positive");
  if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate))
    throw std::invalid_argument("train config: learning_rate must be positive and finite");
  if (!(cfg.eps_low >= 0.0 && cfg.eps_low < 1.0))
    throw std::invalid_argument("train config: eps_low must lie in [0, 1)");
  if (!(cfg.eps_high >= 0.0)) throw std::invalid_argument("train config: eps_high must be nonnegative");
  if (cfg.updates_per_rollout < 1)
    throw std::invalid_argument("train config: updates_per_rollout must be positive");
  if (cfg.max_resample_rounds < 0)
    throw std::invalid_argument("train config: max_resample_rounds must be nonnegative");
  if (!(cfg.advantage_epsilon >= 0.0))
    throw std::invalid_argument("train config: advantage_epsilon must be nonnegative");
}

// =============================================================================
// Clipped surrogate
// =============================================================================

struct SurrogateResult {
  double objective = 0.0;
  std::map<std::string, GradMap> grad;  // by prompt id
};

/**
 * Objective and exact gradient of the clipped surrogate for a batch of
 * groups. `advantages` is aligned with `groups`; `tasks` maps prompt ids to
 * their instances. Ratios are exp(new logprob - behavior logprob) per
 * sampled position; a non-finite ratio (behavior mass zero) is an error
 * naming the offending rollout.
 */
inline SurrogateResult clipped_surrogate(const PolicyParams& params,
                                         const std::map<std::string, const TaskInstance*>& tasks,
                                         const std::vector<RolloutGroup>& groups,
                                         const std::vector<AdvantageVector>& advantages,
                                         const TrainConfig& cfg) {
  if (groups.size() != advantages.size())
    throw std::invalid_argument("clipped_surrogate: groups and advantages must align");
  if (groups.empty()) throw std::invalid_argument("clipped_surrogate: empty batch");

  double total_positions = 0.0;
  if (cfg.aggregation == LossAggregation::kTokenLevel) {
    for (const auto& g : groups)
      for (const auto& r : g.rollouts) total_positions += static_cast<double>(r.sampled_positions());
    if (total_positions == 0.0) throw std::invalid_argument("clipped_surrogate: batch has no sampled tokens");
  }

  SurrogateResult result;
  const double lo = 1.0 - cfg.eps_low;
  const double hi = 1.0 + cfg.eps_high;

  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const RolloutGroup& group = groups[gi];
    const AdvantageVector& adv = advantages[gi];
    if (adv.values.size() != group.rollouts.size())
      throw std::invalid_argument("clipped_surrogate: advantage length mismatch for prompt " +
                                  group.prompt_id);
    auto task_it = tasks.find(group.prompt_id);
    if (task_it == tasks.end())
      throw std::invalid_argument("clipped_surrogate: no task instance for prompt " + group.prompt_id);
    const TaskInstance& inst = *task_it->second;
    const double temperature = group.temperature;
    GradMap& grad = result.grad[group.prompt_id];
    const std::size_t vs = static_cast<std::size_t>(inst.vocab().size());

    for (std::size_t ri = 0; ri < group.rollouts.size(); ++ri) {
      const Rollout& rollout = group.rollouts[ri];
      const double a = adv.values[ri];
      if (a == 0.0) continue;  // zero advantage contributes nothing
      const double weight =
          cfg.aggregation == LossAggregation::kSequenceMean
              ? 1.0 / (static_cast<double>(groups.size()) * static_cast<double>(group.rollouts.size()) *
                       static_cast<double>(rollout.sampled_positions()))
              : 1.0 / total_positions;

      for (std::size_t pos = 1; pos < rollout.tokens.size(); ++pos) {
        const ContextKey ctx = context_at(rollout.tokens, pos);
        const TokenDistribution d = distribution(params, inst, ctx, temperature);
        const Token tok = rollout.tokens[pos];
        const double lp_new = d.logprobs[static_cast<std::size_t>(tok)];
        const double lp_old = rollout.behavior_logprobs[pos - 1];
        const double ratio = std::exp(lp_new - lp_old);
        if (!std::isfinite(ratio))
          throw std::runtime_error("clipped_surrogate: non-finite ratio at prompt " + group.prompt_id +
                                   ", rollout " + std::to_string(ri) + ", position " +
                                   std::to_string(pos));
        const double clipped_ratio = std::min(std::max(ratio, lo), hi);
        const double unclipped = ratio * a;
        const double clipped = clipped_ratio * a;
        if (unclipped <= clipped) {
          result.objective += weight * unclipped;
          const double coef = weight * a * ratio / temperature;
          auto& row = grad.try_emplace(ctx, vs, 0.0).first->second;
          for (std::size_t i = 0; i < vs; ++i) row[i] -= coef * d.probs[i];
          row[static_cast<std::size_t>(tok)] += coef;
        } else {
          result.objective += weight * clipped;  // clipped branch is flat
        }
      }
    }
  }
  return result;
}

// =============================================================================
// Dynamic sampling
// =============================================================================

struct DynamicFilterResult {
  std::vector<RolloutGroup> groups;
  bool exhausted = false;  // some slot still has zero variance after all rounds
  int rounds_used = 0;
  int replacements = 0;
};

/**
 * Replaces zero-reward-variance groups slot by slot, drawing substitutes
 * from the resampler until every slot has reward spread or the round budget
 * runs out. The batch always keeps its size; on exhaustion the last drawn
 * groups stay in place and the result is flagged.
 */
inline DynamicFilterResult dapo_dynamic_filter(
    std::vector<RolloutGroup> groups,
    const std::function<RolloutGroup(std::size_t slot, int round)>& resample, int max_rounds) {
  if (max_rounds < 0) throw std::invalid_argument("dapo_dynamic_filter: max_rounds must be nonnegative");
  DynamicFilterResult result;
  result.groups = std::move(groups);
  for (int round = 1; round <= max_rounds; ++round) {
    bool any = false;
    for (std::size_t slot = 0; slot < result.groups.size(); ++slot) {
      if (!group_has_zero_reward_variance(result.groups[slot])) continue;
      any = true;
      result.groups[slot] = resample(slot, round);
      ++result.replacements;
    }
    if (!any) break;
    result.rounds_used = round;
  }
  for (const auto& g : result.groups)
    if (group_has_zero_reward_variance(g)) result.exhausted = true;
  return result;
}

// =============================================================================
// Training steps
// =============================================================================

struct TrainStepOptions {
  std::uint64_t master_seed = 0;
  std::uint64_t step = 0;
  Strategy strategy;
  std::vector<int> pass_ks{1, 8, 64};
  std::function<void(const RolloutGroup&)> audit;  // optional rollout sink
};

namespace detail {

/// Resolves per-task strategy state (a forced rank becomes a concrete
/// token under the current policy) and samples one group.
inline RolloutGroup sample_group(const PolicyParams& params, const TaskInstance& inst, int g,
                                 const Strategy& strategy, Stream& stream) {
  switch (strategy.kind) {
    case StrategyKind::kStandard:
      return sample_standard_group(params, inst, g, 1.0, stream);
    case StrategyKind::kTemperature:
      return sample_standard_group(params, inst, g, strategy.temperature, stream);
    case StrategyKind::kForced: {
      Token token = strategy.forced_token;
      int rank = strategy.forced_rank;
      if (token == kNoToken) {
        if (rank < 1) throw std::invalid_argument("sample_group: forced strategy needs a token or rank");
        token = top_n_first_tokens(params, inst, rank).back();
      }
      return sample_forced_group(params, inst, g, token, stream, strategy.temperature, rank);
    }
    case StrategyKind::kReft:
      return sample_reft_group(params, inst, g, strategy.n, strategy.k, stream);
  }
  throw std::logic_error("sample_group: unknown strategy");
}

}  // namespace detail

/**
 * One full step: sample, filter, normalize, update. The returned metrics
 * snapshot is measured on the sampled groups against the behavior policy
 * (the state of `params` on entry). Updates mutate `params` in place and
 * bump its version once per round that changes any row.
 */
inline MetricsRecord train_step(PolicyParams& params, const std::vector<TaskInstance>& tasks,
                                const TrainConfig& cfg, const TrainStepOptions& opt) {
  validate_train_config(cfg);
  if (tasks.empty()) throw std::invalid_argument("train_step: no tasks");

  std::map<std::string, const TaskInstance*> task_index;
  for (const auto& inst : tasks) task_index[inst.prompt_id] = &inst;

  std::vector<RolloutGroup> groups;
  groups.reserve(tasks.size());
  for (const auto& inst : tasks) {
    Stream stream = derive_stream(opt.master_seed, opt.step, inst.prompt_id, opt.strategy.id(),
                                  StreamPurpose::kRollout);
    groups.push_back(detail::sample_group(params, inst, cfg.group_size, opt.strategy, stream));
  }

  bool exhausted = false;
  if (cfg.dynamic_sampling) {
    auto resample = [&](std::size_t slot, int round) {
      const TaskInstance& inst = tasks[slot];
      Stream stream = derive_stream(opt.master_seed, opt.step, inst.prompt_id, opt.strategy.id(),
                                    StreamPurpose::kResample, static_cast<std::uint64_t>(round));
      return detail::sample_group(params, inst, cfg.group_size, opt.strategy, stream);
    };
    DynamicFilterResult filtered =
        dapo_dynamic_filter(std::move(groups), resample, cfg.max_resample_rounds);
    groups = std::move(filtered.groups);
    exhausted = filtered.exhausted;
  }

  if (opt.audit) {
    for (const auto& g : groups) opt.audit(g);
  }

  std::vector<AdvantageVector> advantages;
  advantages.reserve(groups.size());
  for (const auto& g : groups) {
    std::vector<double> rewards;
    rewards.reserve(g.rollouts.size());
    for (const auto& r : g.rollouts) rewards.push_back(r.reward);
    advantages.push_back(group_advantages(rewards, cfg.advantage_epsilon));
  }

  MetricsRecord rec =
      compute_step_metrics(opt.step, opt.strategy.label(), groups, params, tasks, opt.pass_ks);
  rec.dynamic_exhausted = exhausted;

  for (int round = 0; round < cfg.updates_per_rollout; ++round) {
    const SurrogateResult res = clipped_surrogate(params, task_index, groups, advantages, cfg);
    bool modified = false;
    for (const auto& [prompt_id, grad] : res.grad) {
      if (apply_update(params, *task_index.at(prompt_id), grad, cfg.learning_rate)) modified = true;
    }
    if (modified) ++params.version;
  }
  return rec;
}

struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_record;
  std::function<void(std::uint64_t step, const PolicyParams&)> on_checkpoint;
  std::function<void(const RolloutGroup&)> audit;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
};

/// Runs `steps` training steps. steps = 0 is a no-op returning no records.
inline std::vector<MetricsRecord> train_loop(PolicyParams& params,
                                             const std::vector<TaskInstance>& tasks,
                                             const TrainConfig& cfg, const Strategy& strategy,
                                             std::uint64_t master_seed, std::uint64_t steps,
                                             const std::vector<int>& pass_ks = {1, 8, 64},
                                             const TrainHooks& hooks = {}) {
  std::vector<MetricsRecord> records;
  records.reserve(static_cast<std::size_t>(steps));
  for (std::uint64_t step = 0; step < steps; ++step) {
    TrainStepOptions opt;
    opt.master_seed = master_seed;
    opt.step = step;
    opt.strategy = strategy;
    opt.pass_ks = pass_ks;
    opt.audit = hooks.audit;
    records.push_back(train_step(params, tasks, cfg, opt));
    if (hooks.on_record) hooks.on_record(records.back());
    if (hooks.checkpoint_every > 0 && (step + 1) % static_cast<std::uint64_t>(hooks.checkpoint_every) == 0 &&
        hooks.on_checkpoint)
      hooks.on_checkpoint(step + 1, params);
  }
  return records;
}

}  // namespace reftlab
