#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "reftlab/sampler.hpp"
#include "test_env.hpp"

using namespace reftlab;
using Catch::Matchers::ContainsSubstring;

namespace {

void check_group_shape(const TaskInstance& inst, const RolloutGroup& group, int g) {
  REQUIRE(group.size() == static_cast<std::size_t>(g));
  REQUIRE(group.prompt_id == inst.prompt_id);
  for (const Rollout& r : group.rollouts) {
    REQUIRE(r.tokens.size() >= 2);
    REQUIRE(r.tokens.size() <= static_cast<std::size_t>(inst.max_len()));
    REQUIRE(r.tokens.front() == inst.vocab().think_marker);
    REQUIRE(r.behavior_logprobs.size() == r.sampled_positions());
    const bool ended = inst.vocab().is_answer(r.tokens.back());
    REQUIRE((ended || r.tokens.size() == static_cast<std::size_t>(inst.max_len())));
    const VerifierResult res = verify(inst, r.tokens);
    REQUIRE(r.reward == res.reward);
    REQUIRE(r.format_ok == res.format_ok);
    REQUIRE(r.answer_correct == res.answer_correct);
    REQUIRE(r.first_token == r.tokens[1]);  // openers here are always semantic
  }
}

}  // namespace

// =============================================================================
// Standard sampler
// =============================================================================

TEST_CASE("standard groups sample openers from the start distribution") {
  const TaskInstance inst = testenv::calibration_flat();
  const PolicyParams params;
  Stream stream(31337u);
  const Token top = inst.spec.candidates_by_rank[0];

  const int groups = 2000, g = 8;
  int hits = 0;
  for (int i = 0; i < groups; ++i) {
    const RolloutGroup group = sample_standard_group(params, inst, g, 1.0, stream);
    if (i == 0) check_group_shape(inst, group, g);
    REQUIRE(group.strategy.kind == StrategyKind::kStandard);
    REQUIRE(group.temperature == 1.0);
    for (const Rollout& r : group.rollouts)
      if (r.tokens[1] == top) ++hits;
  }
  const double freq = static_cast<double>(hits) / (groups * g);
  const double sigma = std::sqrt(0.57 * 0.43 / (groups * g));
  REQUIRE(std::abs(freq - 0.57) < 3.0 * sigma);

  REQUIRE_THROWS_AS(sample_standard_group(params, inst, 0, 1.0, stream), std::invalid_argument);
}

TEST_CASE("non-unit temperature tags the group as temperature-scaled") {
  const TaskInstance inst = testenv::tiny_flat();
  const PolicyParams params;
  Stream stream(5u);
  const RolloutGroup hot = sample_standard_group(params, inst, 4, 2.0, stream);
  REQUIRE(hot.strategy.kind == StrategyKind::kTemperature);
  REQUIRE(hot.temperature == 2.0);
  REQUIRE(hot.strategy.label() == "temperature-2");

  const RolloutGroup plain = sample_standard_group(params, inst, 4, 1.0, stream);
  REQUIRE(plain.strategy.kind == StrategyKind::kStandard);
  REQUIRE(plain.strategy.label() == "standard");
}

TEST_CASE("nucleus truncation narrows sampled openers") {
  const TaskInstance inst = testenv::calibration_flat();
  const PolicyParams params;
  Stream stream(99u);
  // The rank-1 opener holds 0.57 mass, so p = 0.5 keeps exactly that token.
  const RolloutGroup group = sample_standard_group(params, inst, 8, 1.0, stream, 0.5);
  for (const Rollout& r : group.rollouts) {
    REQUIRE(r.tokens[1] == inst.spec.candidates_by_rank[0]);
    REQUIRE(r.behavior_logprobs[0] == 0.0);  // renormalized to probability one
  }
}

// =============================================================================
// Forced sampler
// =============================================================================

TEST_CASE("forced groups pin the opener and record its true logprob") {
  const TaskInstance inst = testenv::calibration_flat();
  const PolicyParams params;
  Stream stream(412u);
  const Token f3 = inst.spec.candidates_by_rank[3];
  const double start_lp =
      distribution(params, inst, start_context(inst.vocab()), 1.0)
          .logprobs[static_cast<std::size_t>(f3)];

  const RolloutGroup group = sample_forced_group(params, inst, 8, f3, stream, 1.0, 4);
  check_group_shape(inst, group, 8);
  REQUIRE(group.strategy.kind == StrategyKind::kForced);
  REQUIRE(group.strategy.label() == "forced-rank4");
  for (const Rollout& r : group.rollouts) {
    REQUIRE(r.tokens[1] == f3);
    REQUIRE(r.behavior_logprobs[0] == start_lp);
  }

  Strategy anon;
  anon.kind = StrategyKind::kForced;
  anon.forced_token = f3;
  REQUIRE(anon.label() == "forced-token" + std::to_string(f3));

  REQUIRE_THROWS_WITH(sample_forced_group(params, inst, 8, inst.vocab().think_marker, stream),
                      ContainsSubstring("valid token"));
  REQUIRE_THROWS_AS(sample_forced_group(params, inst, 0, f3, stream), std::invalid_argument);
}

// =============================================================================
// First-token-diversified sampler
// =============================================================================

TEST_CASE("diversified groups allocate rollouts across distinct openers") {
  const TaskInstance inst = testenv::calibration_flat();
  const PolicyParams params;
  Stream stream(808u);
  const auto top20 = top_n_first_tokens(params, inst, 20);
  const std::set<Token> top_set(top20.begin(), top20.end());

  for (int rep = 0; rep < 50; ++rep) {
    const RolloutGroup group = sample_reft_group(params, inst, 8, 20, 4, stream);
    if (rep == 0) check_group_shape(inst, group, 8);
    REQUIRE(group.temperature == 1.0);
    REQUIRE(group.strategy.kind == StrategyKind::kReft);
    REQUIRE(group.strategy.label() == "reft-n20-k4");
    std::map<Token, int> counts;
    for (const Rollout& r : group.rollouts) {
      REQUIRE(top_set.count(r.tokens[1]) == 1);
      ++counts[r.tokens[1]];
    }
    REQUIRE(counts.size() == 4);
    for (const auto& [tok, cnt] : counts) REQUIRE(cnt == 2);
  }
}

TEST_CASE("diversified selection is uniform over the candidate set") {
  const TaskInstance inst = testenv::calibration_flat();
  const PolicyParams params;
  Stream stream(2024u);
  const auto top20 = top_n_first_tokens(params, inst, 20);

  const int groups = 3000;
  std::map<Token, int> appearances;
  for (int i = 0; i < groups; ++i) {
    const RolloutGroup group = sample_reft_group(params, inst, 8, 20, 4, stream);
    std::set<Token> openers;
    for (const Rollout& r : group.rollouts) openers.insert(r.tokens[1]);
    for (Token t : openers) ++appearances[t];
  }
  const double expected = 4.0 / 20.0;
  const double sigma = std::sqrt(expected * (1.0 - expected) / groups);
  for (int rank : {0, 10, 19}) {
    const double freq = static_cast<double>(appearances[top20[static_cast<std::size_t>(rank)]]) / groups;
    REQUIRE(std::abs(freq - expected) < 3.0 * sigma);
  }
}

TEST_CASE("diversified sampler validates its shape parameters") {
  const TaskInstance inst = testenv::calibration_flat();
  const PolicyParams params;
  Stream stream(1u);
  REQUIRE_THROWS_WITH(sample_reft_group(params, inst, 8, 20, 3, stream),
                      ContainsSubstring("k must divide the group size"));
  REQUIRE_THROWS_WITH(sample_reft_group(params, inst, 8, 4, 5, stream),
                      ContainsSubstring("need 1 <= k <= n"));
  REQUIRE_THROWS_AS(sample_reft_group(params, inst, 8, 20, 0, stream), std::invalid_argument);
  REQUIRE_THROWS_AS(sample_reft_group(params, inst, 0, 20, 4, stream), std::invalid_argument);
  REQUIRE_THROWS_AS(sample_reft_group(params, inst, 8, 200, 4, stream), std::invalid_argument);
}

TEST_CASE("forced and diversified groups share one continuation decoder") {
  const TaskInstance inst = testenv::calibration_flat();
  const PolicyParams params;
  const Token top = top_n_first_tokens(params, inst, 1)[0];

  Stream reft_stream(777u);
  const RolloutGroup via_reft = sample_reft_group(params, inst, 8, 1, 1, reft_stream);

  Stream forced_stream(777u);
  forced_stream.next_u64();  // the single-candidate selection consumes one draw
  const RolloutGroup via_forced = sample_forced_group(params, inst, 8, top, forced_stream);

  REQUIRE(via_reft.size() == via_forced.size());
  for (std::size_t i = 0; i < via_reft.size(); ++i) {
    REQUIRE(via_reft.rollouts[i].tokens == via_forced.rollouts[i].tokens);
    REQUIRE(via_reft.rollouts[i].behavior_logprobs == via_forced.rollouts[i].behavior_logprobs);
    REQUIRE(via_reft.rollouts[i].reward == via_forced.rollouts[i].reward);
  }
}

// =============================================================================
// Bookkeeping
// =============================================================================

TEST_CASE("groups record the behavior policy version") {
  const TaskInstance inst = testenv::tiny_flat();
  PolicyParams params;
  params.version = 7;
  Stream stream(3u);
  REQUIRE(sample_standard_group(params, inst, 2, 1.0, stream).behavior_version == 7);
  REQUIRE(sample_forced_group(params, inst, 2, inst.spec.candidates_by_rank[0], stream)
              .behavior_version == 7);
  REQUIRE(sample_reft_group(params, inst, 2, 2, 1, stream).behavior_version == 7);
}

TEST_CASE("strategy ids separate every configuration") {
  Strategy standard;
  REQUIRE(standard.id() == 1);
  Strategy forced;
  forced.kind = StrategyKind::kForced;
  forced.forced_token = 5;
  REQUIRE(forced.id() == 2 + 5 * 8);
  Strategy temp;
  temp.kind = StrategyKind::kTemperature;
  REQUIRE(temp.id() == 3);
  Strategy reft;
  reft.kind = StrategyKind::kReft;
  reft.n = 20;
  reft.k = 4;
  REQUIRE(reft.id() == 4 + (20ull << 16) + 4);
}

TEST_CASE("continuation extraction drops everything through the first semantic token") {
  const TaskInstance inst = testenv::calibration_flat();
  const Vocab& v = inst.vocab();
  const Token marker = v.think_marker;
  const Token ws = 1;
  const Token f = inst.spec.candidates_by_rank[2];
  const Token gold = inst.gold_answer();

  REQUIRE(strip_first_token(v, {marker, f, ws, gold}) == std::vector<Token>{ws, gold});
  REQUIRE(strip_first_token(v, {marker, ws, f, gold}) == std::vector<Token>{gold});
  REQUIRE(strip_first_token(v, {f, marker, f, gold}) == std::vector<Token>{gold});
  REQUIRE(strip_first_token(v, {marker, f}).empty());
  REQUIRE(strip_first_token(v, {marker, ws}).empty());
  REQUIRE(strip_first_token(v, {marker}).empty());
  REQUIRE(strip_first_token(v, {f, gold}).empty());
  REQUIRE(strip_first_token(v, {}).empty());
}

TEST_CASE("audit lines serialize prompt, strategy, tokens, and reward") {
  RolloutGroup group;
  group.prompt_id = "p";
  Rollout r;
  r.tokens = {0, 4, 6, 8};
  r.reward = 2.2;
  REQUIRE(rollout_audit_line(group, r) == "p\tstandard\t0 4 6 8\t2.2000000000000002");
  r.reward = 0.0;
  REQUIRE(rollout_audit_line(group, r) == "p\tstandard\t0 4 6 8\t0");
}
