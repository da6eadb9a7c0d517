#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "reftlab/train.hpp"
#include "test_env.hpp"

using namespace reftlab;
using Catch::Matchers::ContainsSubstring;

namespace {

std::string policy_text(const PolicyParams& params) {
  std::stringstream ss;
  save_policy(params, ss);
  return ss.str();
}

/// One group, one rollout, one sampled position, with the behavior logprob
/// fabricated so the new/old ratio lands exactly where the test wants it.
struct SinglePosition {
  TaskInstance inst;
  PolicyParams params;
  RolloutGroup group;
  std::map<std::string, const TaskInstance*> tasks;

  explicit SinglePosition(double ratio) : inst(testenv::tiny_flat()) {
    const Token f0 = inst.spec.candidates_by_rank[0];
    const double lp_new = distribution(params, inst, start_context(inst.vocab()), 1.0)
                              .logprobs[static_cast<std::size_t>(f0)];
    Rollout r;
    r.tokens = {inst.vocab().think_marker, f0};
    r.behavior_logprobs = {lp_new - std::log(ratio)};
    group.prompt_id = inst.prompt_id;
    group.rollouts.push_back(std::move(r));
    tasks[inst.prompt_id] = &inst;
  }

  SurrogateResult surrogate(double advantage, const TrainConfig& cfg) const {
    AdvantageVector adv;
    adv.values = {advantage};
    return clipped_surrogate(params, tasks, {group}, {adv}, cfg);
  }
};

TrainConfig asymmetric_config() {
  TrainConfig cfg;
  cfg.eps_low = 0.2;
  cfg.eps_high = 0.28;
  return cfg;
}

RolloutGroup reward_group(const TaskInstance& inst, std::vector<double> rewards) {
  RolloutGroup g;
  g.prompt_id = inst.prompt_id;
  for (double reward : rewards) {
    Rollout r;
    r.tokens = {inst.vocab().think_marker, inst.spec.candidates_by_rank[0]};
    r.behavior_logprobs = {0.0};
    r.reward = reward;
    g.rollouts.push_back(std::move(r));
  }
  return g;
}

}  // namespace

// =============================================================================
// Presets and validation
// =============================================================================

TEST_CASE("presets pin the published hyperparameters") {
  const TrainConfig grpo = grpo_preset();
  REQUIRE(grpo.eps_low == 0.2);
  REQUIRE(grpo.eps_high == 0.2);
  REQUIRE(grpo.updates_per_rollout == 4);
  REQUIRE(grpo.aggregation == LossAggregation::kSequenceMean);
  REQUIRE_FALSE(grpo.dynamic_sampling);
  REQUIRE(grpo.group_size == 8);
  REQUIRE(grpo.learning_rate == 0.05);
  REQUIRE(grpo.advantage_epsilon == 1e-6);

  const TrainConfig dapo = dapo_preset();
  REQUIRE(dapo.eps_low == 0.2);
  REQUIRE(dapo.eps_high == 0.28);
  REQUIRE(dapo.updates_per_rollout == 1);
  REQUIRE(dapo.aggregation == LossAggregation::kTokenLevel);
  REQUIRE(dapo.dynamic_sampling);
  REQUIRE(dapo.max_resample_rounds == 3);
}

TEST_CASE("train config validation names each violation") {
  TrainConfig cfg;
  cfg.group_size = 0;
  REQUIRE_THROWS_WITH(validate_train_config(cfg), ContainsSubstring("group_size"));
  cfg = TrainConfig();
  cfg.learning_rate = 0.0;
  REQUIRE_THROWS_WITH(validate_train_config(cfg), ContainsSubstring("learning_rate"));
  cfg = TrainConfig();
  cfg.eps_low = 1.0;
  REQUIRE_THROWS_WITH(validate_train_config(cfg), ContainsSubstring("eps_low"));
  cfg = TrainConfig();
  cfg.eps_high = -0.1;
  REQUIRE_THROWS_WITH(validate_train_config(cfg), ContainsSubstring("eps_high"));
  cfg = TrainConfig();
  cfg.updates_per_rollout = 0;
  REQUIRE_THROWS_WITH(validate_train_config(cfg), ContainsSubstring("updates_per_rollout"));
  cfg = TrainConfig();
  cfg.max_resample_rounds = -1;
  REQUIRE_THROWS_WITH(validate_train_config(cfg), ContainsSubstring("max_resample_rounds"));
  cfg = TrainConfig();
  cfg.advantage_epsilon = -1e-9;
  REQUIRE_THROWS_WITH(validate_train_config(cfg), ContainsSubstring("advantage_epsilon"));
}

// =============================================================================
// Clip branches
// =============================================================================

TEST_CASE("a large ratio with positive advantage hits the flat clipped branch") {
  const SinglePosition fix(1.5);
  const SurrogateResult res = fix.surrogate(1.0, asymmetric_config());
  REQUIRE(res.objective == 1.28);
  REQUIRE(res.grad.at(fix.inst.prompt_id).empty());
}

TEST_CASE("a small ratio with positive advantage keeps its gradient") {
  const SinglePosition fix(0.5);
  const SurrogateResult res = fix.surrogate(1.0, asymmetric_config());
  REQUIRE(std::abs(res.objective - 0.5) < 1e-12);
  const GradMap& grad = res.grad.at(fix.inst.prompt_id);
  REQUIRE(grad.size() == 1);
  const auto& row = grad.at(start_context(fix.inst.vocab()));
  const auto d = distribution(fix.params, fix.inst, start_context(fix.inst.vocab()), 1.0);
  const Token f0 = fix.inst.spec.candidates_by_rank[0];
  for (std::size_t i = 0; i < row.size(); ++i) {
    const double onehot = static_cast<Token>(i) == f0 ? 1.0 : 0.0;
    REQUIRE(std::abs(row[i] - 0.5 * (onehot - d.probs[i])) < 1e-12);
  }
}

TEST_CASE("a small ratio with negative advantage is clipped flat from below") {
  const SinglePosition fix(0.5);
  const SurrogateResult res = fix.surrogate(-1.0, asymmetric_config());
  REQUIRE(res.objective == -0.8);
  REQUIRE(res.grad.at(fix.inst.prompt_id).empty());
}

TEST_CASE("a large ratio with negative advantage keeps its gradient") {
  const SinglePosition fix(1.5);
  const SurrogateResult res = fix.surrogate(-1.0, asymmetric_config());
  REQUIRE(std::abs(res.objective + 1.5) < 1e-12);
  REQUIRE_FALSE(res.grad.at(fix.inst.prompt_id).empty());
}

TEST_CASE("zero advantages contribute neither objective nor gradient") {
  const SinglePosition fix(1.5);
  const SurrogateResult res = fix.surrogate(0.0, asymmetric_config());
  REQUIRE(res.objective == 0.0);
  REQUIRE(res.grad.at(fix.inst.prompt_id).empty());
}

TEST_CASE("a zero-mass behavior logprob is a named error") {
  SinglePosition fix(1.0);
  fix.group.rollouts[0].behavior_logprobs[0] = kNegInf;
  AdvantageVector adv;
  adv.values = {1.0};
  REQUIRE_THROWS_WITH(clipped_surrogate(fix.params, fix.tasks, {fix.group}, {adv}, TrainConfig()),
                      ContainsSubstring("non-finite ratio"));
}

TEST_CASE("surrogate validates batch alignment") {
  const SinglePosition fix(1.0);
  AdvantageVector adv;
  adv.values = {1.0};
  REQUIRE_THROWS_AS(clipped_surrogate(fix.params, fix.tasks, {fix.group}, {}, TrainConfig()),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(clipped_surrogate(fix.params, fix.tasks, {}, {}, TrainConfig()),
                    std::invalid_argument);
  AdvantageVector wrong_len;
  wrong_len.values = {1.0, 2.0};
  REQUIRE_THROWS_WITH(clipped_surrogate(fix.params, fix.tasks, {fix.group}, {wrong_len}, TrainConfig()),
                      ContainsSubstring("advantage length mismatch"));
  const std::map<std::string, const TaskInstance*> empty_tasks;
  REQUIRE_THROWS_WITH(clipped_surrogate(fix.params, empty_tasks, {fix.group}, {adv}, TrainConfig()),
                      ContainsSubstring("no task instance"));
}

// =============================================================================
// Fresh-sample identities
// =============================================================================

TEST_CASE("fresh samples have unit ratios and reduce to reinforce") {
  const TaskInstance inst = testenv::tiny_flat();
  const PolicyParams params;
  Stream stream(46923u);
  RolloutGroup group = sample_standard_group(params, inst, 8, 1.0, stream);

  std::vector<double> rewards;
  for (const auto& r : group.rollouts) rewards.push_back(r.reward);
  const AdvantageVector adv = group_advantages(rewards);

  std::map<std::string, const TaskInstance*> tasks{{inst.prompt_id, &inst}};
  TrainConfig cfg;  // symmetric clip, sequence mean
  const SurrogateResult res = clipped_surrogate(params, tasks, {group}, {adv}, cfg);

  // Manual reduction: sum_i w_i A_i grad log pi(traj_i), w_i = 1/(G T_i).
  GradMap manual;
  double objective = 0.0;
  const std::size_t vs = static_cast<std::size_t>(inst.vocab().size());
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const Rollout& r = group.rollouts[i];
    const double w = 1.0 / (8.0 * static_cast<double>(r.sampled_positions()));
    objective += w * adv.values[i] * static_cast<double>(r.sampled_positions());
    if (adv.values[i] == 0.0) continue;
    const GradMap g = grad_logprob(params, inst, r.tokens, 1.0);
    for (const auto& [ctx, row] : g) {
      auto& acc = manual.try_emplace(ctx, vs, 0.0).first->second;
      for (std::size_t j = 0; j < vs; ++j) acc[j] += w * adv.values[i] * row[j];
    }
  }
  REQUIRE(std::abs(res.objective - objective) < 1e-13);
  const GradMap& grad = res.grad.at(inst.prompt_id);
  REQUIRE(grad.size() == manual.size());
  for (const auto& [ctx, row] : manual) {
    const auto it = grad.find(ctx);
    REQUIRE(it != grad.end());
    for (std::size_t j = 0; j < vs; ++j) REQUIRE(std::abs(it->second[j] - row[j]) < 1e-13);
  }
}

TEST_CASE("sequence-mean and token pooling agree when lengths are equal") {
  const TaskInstance inst = testenv::tiny_flat();  // every trajectory has 3 sampled positions
  const PolicyParams params;
  Stream stream(5150u);
  RolloutGroup group = sample_standard_group(params, inst, 8, 1.0, stream);
  std::vector<double> rewards;
  for (const auto& r : group.rollouts) rewards.push_back(r.reward);
  const AdvantageVector adv = group_advantages(rewards);
  std::map<std::string, const TaskInstance*> tasks{{inst.prompt_id, &inst}};

  TrainConfig seq;
  seq.aggregation = LossAggregation::kSequenceMean;
  TrainConfig tok;
  tok.aggregation = LossAggregation::kTokenLevel;
  const SurrogateResult a = clipped_surrogate(params, tasks, {group}, {adv}, seq);
  const SurrogateResult b = clipped_surrogate(params, tasks, {group}, {adv}, tok);
  REQUIRE(a.objective == b.objective);
  REQUIRE(a.grad == b.grad);
}

TEST_CASE("the surrogate gradient matches finite differences on theta") {
  const TaskInstance inst = testenv::tiny_flat();
  PolicyParams params;
  Stream stream(777321u);
  RolloutGroup group = sample_standard_group(params, inst, 4, 1.0, stream);
  while (group_has_zero_reward_variance(group))
    group = sample_standard_group(params, inst, 4, 1.0, stream);

  // Materialize every visited context so theta owns the sampled rows.
  for (const auto& r : group.rollouts) {
    for (std::size_t pos = 1; pos < r.tokens.size(); ++pos) {
      const ContextKey ctx = context_at(r.tokens, pos);
      if (params.row(inst.prompt_id, ctx) != nullptr) continue;
      params.theta[inst.prompt_id][ctx] = detail::weights_as_logits(*inst.row(ctx));
    }
  }

  std::vector<double> rewards;
  for (const auto& r : group.rollouts) rewards.push_back(r.reward);
  const AdvantageVector adv = group_advantages(rewards);
  std::map<std::string, const TaskInstance*> tasks{{inst.prompt_id, &inst}};
  const TrainConfig cfg;
  const SurrogateResult res = clipped_surrogate(params, tasks, {group}, {adv}, cfg);

  const double h = 1e-5;
  for (const auto& [ctx, g] : res.grad.at(inst.prompt_id)) {
    auto& row = params.theta[inst.prompt_id][ctx];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (row[i] == kNegInf) {
        REQUIRE(g[i] == 0.0);
        continue;
      }
      const double saved = row[i];
      row[i] = saved + h;
      const double up = clipped_surrogate(params, tasks, {group}, {adv}, cfg).objective;
      row[i] = saved - h;
      const double down = clipped_surrogate(params, tasks, {group}, {adv}, cfg).objective;
      row[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      REQUIRE(std::abs(fd - g[i]) < 1e-6 * std::max(1.0, std::abs(g[i])));
    }
  }
}

// =============================================================================
// Dynamic sampling
// =============================================================================

TEST_CASE("the dynamic filter replaces zero-variance slots until spread appears") {
  const TaskInstance inst = testenv::tiny_flat();
  const RolloutGroup flat = reward_group(inst, {0.2, 0.2});
  const RolloutGroup mixed = reward_group(inst, {2.2, 0.2});

  std::vector<std::pair<std::size_t, int>> calls;
  auto resample = [&](std::size_t slot, int round) {
    calls.push_back({slot, round});
    return round >= 2 ? mixed : flat;
  };
  const DynamicFilterResult res = dapo_dynamic_filter({flat, mixed}, resample, 3);
  REQUIRE(res.groups.size() == 2);
  REQUIRE_FALSE(res.exhausted);
  REQUIRE(res.rounds_used == 2);
  REQUIRE(res.replacements == 2);
  REQUIRE(calls == std::vector<std::pair<std::size_t, int>>{{0, 1}, {0, 2}});
  REQUIRE(res.groups[0].rollouts[0].reward == 2.2);
  REQUIRE(res.groups[1].rollouts[0].reward == 2.2);  // untouched slot
}

TEST_CASE("the dynamic filter reports exhaustion honestly") {
  const TaskInstance inst = testenv::tiny_flat();
  const RolloutGroup flat = reward_group(inst, {0.2, 0.2});
  auto hopeless = [&](std::size_t, int) { return flat; };

  const DynamicFilterResult res = dapo_dynamic_filter({flat}, hopeless, 2);
  REQUIRE(res.exhausted);
  REQUIRE(res.rounds_used == 2);
  REQUIRE(res.replacements == 2);

  const DynamicFilterResult none = dapo_dynamic_filter({flat}, hopeless, 0);
  REQUIRE(none.exhausted);
  REQUIRE(none.rounds_used == 0);
  REQUIRE(none.replacements == 0);

  REQUIRE_THROWS_AS(dapo_dynamic_filter({flat}, hopeless, -1), std::invalid_argument);
}

// =============================================================================
// Training steps
// =============================================================================

TEST_CASE("zero-variance batches leave the policy bit-identical") {
  FlatSpecParams p;
  p.candidates = 4;
  p.fillers = 2;
  p.wrong_answers = 1;
  p.include_ws_step = false;
  p.max_len = 5;
  p.profile_logits = sharp_profile_logits(4, 0.5, 0.05);
  p.correctness_by_rank = {1.0, 1.0, 1.0, 1.0};  // every rollout rewarded identically
  const std::vector<TaskInstance> tasks{build_task(make_flat_spec(p), "sure_thing", 9)};

  PolicyParams params;
  const std::string before = policy_text(params);
  TrainStepOptions opt;
  opt.master_seed = 3;
  const MetricsRecord rec = train_step(params, tasks, grpo_preset(), opt);
  REQUIRE(policy_text(params) == before);
  REQUIRE(params.version == 0);
  REQUIRE(rec.zero_variance_fraction == 1.0);
  REQUIRE(rec.all_correct_fraction == 1.0);
  REQUIRE_FALSE(rec.dynamic_exhausted);

  // Dynamic sampling cannot conjure spread here; it flags exhaustion instead.
  TrainConfig dyn = dapo_preset();
  const MetricsRecord rec2 = train_step(params, tasks, dyn, opt);
  REQUIRE(rec2.dynamic_exhausted);
  REQUIRE(policy_text(params) == before);
}

TEST_CASE("training steps are reproducible from their seeds") {
  const std::vector<TaskInstance> tasks{testenv::tiny_flat()};
  TrainStepOptions opt;
  opt.master_seed = 11;
  opt.step = 0;

  PolicyParams a;
  const MetricsRecord ra = train_step(a, tasks, grpo_preset(), opt);
  PolicyParams b;
  const MetricsRecord rb = train_step(b, tasks, grpo_preset(), opt);
  REQUIRE(metrics_csv_row(ra) == metrics_csv_row(rb));
  REQUIRE(policy_text(a) == policy_text(b));
  REQUIRE(a.version >= 1);  // the mixed-reward batch moved at least one row
}

TEST_CASE("the metrics snapshot describes the behavior policy before updates") {
  const std::vector<TaskInstance> tasks{testenv::tiny_flat()};
  PolicyParams params;
  TrainStepOptions opt;
  opt.master_seed = 21;
  const MetricsRecord rec = train_step(params, tasks, grpo_preset(), opt);
  REQUIRE(rec.strategy == "standard");
  // Behavior policy was the realized table: its top-1 mass is the profile's.
  REQUIRE(std::abs(rec.top_r.at(1) - 0.5) < 1e-9);
}

TEST_CASE("the training loop honors step counts, hooks, and checkpoints") {
  const std::vector<TaskInstance> tasks{testenv::tiny_flat()};
  PolicyParams params;

  const auto none = train_loop(params, tasks, grpo_preset(), Strategy{}, 7, 0);
  REQUIRE(none.empty());
  REQUIRE(params.version == 0);

  std::vector<std::uint64_t> record_steps;
  std::vector<std::uint64_t> checkpoint_steps;
  TrainHooks hooks;
  hooks.on_record = [&](const MetricsRecord& r) { record_steps.push_back(r.step); };
  hooks.on_checkpoint = [&](std::uint64_t step, const PolicyParams&) {
    checkpoint_steps.push_back(step);
  };
  hooks.checkpoint_every = 2;
  const auto records = train_loop(params, tasks, grpo_preset(), Strategy{}, 7, 4, {1, 8, 64}, hooks);
  REQUIRE(records.size() == 4);
  REQUIRE(record_steps == std::vector<std::uint64_t>{0, 1, 2, 3});
  REQUIRE(checkpoint_steps == std::vector<std::uint64_t>{2, 4});
}

TEST_CASE("forced-rank strategies resolve their token against the live policy") {
  const std::vector<TaskInstance> tasks{testenv::tiny_flat()};
  PolicyParams params;
  Strategy strategy;
  strategy.kind = StrategyKind::kForced;
  strategy.forced_rank = 2;
  TrainStepOptions opt;
  opt.strategy = strategy;
  const MetricsRecord rec = train_step(params, tasks, grpo_preset(), opt);
  REQUIRE(rec.strategy == "forced-rank2");

  Strategy missing;
  missing.kind = StrategyKind::kForced;
  TrainStepOptions bad;
  bad.strategy = missing;
  PolicyParams fresh;
  REQUIRE_THROWS_WITH(train_step(fresh, tasks, grpo_preset(), bad),
                      ContainsSubstring("needs a token or rank"));
}
