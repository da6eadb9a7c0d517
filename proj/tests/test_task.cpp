#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "reftlab/task.hpp"
#include "test_env.hpp"

using namespace reftlab;

namespace {

std::vector<double> start_probs(const TaskInstance& inst) {
  return *inst.row(start_context(inst.vocab()));
}

}  // namespace

// =============================================================================
// Spec validation
// =============================================================================

TEST_CASE("spec builders produce valid specs") {
  FlatSpecParams p;
  p.profile_logits = sharp_profile_logits(20, 0.57, 2.68e-5);
  p.correctness_by_rank = correctness_endpoints(20, 0.7529, 0.7040);
  REQUIRE(validate_spec(make_flat_spec(p)).empty());

  RoutingSpecParams rp;
  rp.profile_logits = sharp_profile_logits(20, 0.97, 1e-4);
  REQUIRE(validate_spec(make_routing_spec(rp)).empty());
}

TEST_CASE("spec validation names each violation") {
  FlatSpecParams p;
  p.candidates = 4;
  p.profile_logits = {1.0, 0.5, 0.2, 0.1};
  p.correctness_by_rank = {0.9, 0.8, 0.7, 0.6};
  const TaskSpec good = make_flat_spec(p);
  REQUIRE(validate_spec(good).empty());

  TaskSpec s = good;
  s.first_token_logit_profile = {0.1, 0.5, 0.2, 0.1};
  REQUIRE(validate_spec(s) == "spec: first_token_logit_profile must be non-increasing");

  s = good;
  s.max_len = 2;
  REQUIRE(validate_spec(s) == "spec: max_len must be at least 3");

  s = good;
  s.correctness_by_rank = {0.9, 0.8};
  REQUIRE(validate_spec(s) == "spec: correctness_by_rank length must equal candidate count");

  s = good;
  s.correctness_by_rank[1] = 1.5;
  REQUIRE(validate_spec(s) == "spec: correctness values must lie in [0,1]");

  s = good;
  s.gold_answer = 0;
  REQUIRE(validate_spec(s) == "spec: gold answer must be an answer token");

  s = good;
  s.candidates_by_rank.clear();
  s.first_token_logit_profile.clear();
  s.correctness_by_rank.clear();
  REQUIRE(validate_spec(s) == "spec: no opener candidates");

  s = good;
  s.first_token_logit_profile[0] = std::numeric_limits<double>::infinity();
  REQUIRE(validate_spec(s) == "spec: logit profile entries must be finite");

  REQUIRE_THROWS_AS(build_task(s, "x", 1), std::invalid_argument);
}

TEST_CASE("routing spec validation checks mode structure") {
  RoutingSpecParams rp;
  rp.candidates = 4;
  rp.mode_fillers = 2;
  rp.profile_logits = {1.0, 0.5, 0.2, 0.1};
  const TaskSpec good = make_routing_spec(rp);
  REQUIRE(validate_spec(good).empty());

  TaskSpec s = good;
  s.mode_concentration[2] = 0.0;
  REQUIRE(validate_spec(s) == "spec: mode concentration ratios must be positive");

  s = good;
  s.answer_mode_map[1].clear();
  REQUIRE(validate_spec(s) == "spec: every mode needs at least one answer");

  s = good;
  s.answer_mode_map[1] = {{99, 1.0}};
  REQUIRE(validate_spec(s) == "spec: answer ordinal out of range");

  s = good;
  s.mode_filler_count = 50;
  REQUIRE(validate_spec(s) == "spec: routing family needs mode_filler_count fillers per candidate");
}

// =============================================================================
// Profile construction
// =============================================================================

TEST_CASE("sharp profile hits both anchor probabilities") {
  const auto logits = sharp_profile_logits(20, 0.57, 2.68e-5);
  REQUIRE(logits.size() == 20);
  for (std::size_t i = 0; i + 1 < logits.size(); ++i) REQUIRE(logits[i] >= logits[i + 1]);

  // softmax by hand
  double z = 0.0;
  for (double l : logits) z += std::exp(l);
  REQUIRE(std::abs(std::exp(logits.front()) / z - 0.57) < 1e-9);
  REQUIRE(std::abs(std::exp(logits.back()) / z - 2.68e-5) < 1e-12);

  REQUIRE_THROWS_AS(sharp_profile_logits(1, 0.5, 0.1), std::invalid_argument);
  REQUIRE_THROWS_AS(sharp_profile_logits(20, 0.5, 0.5), std::invalid_argument);
  REQUIRE_THROWS_AS(sharp_profile_logits(20, 0.05, 0.0499), std::invalid_argument);  // infeasible tail
}

TEST_CASE("correctness endpoints interpolate linearly") {
  const auto c = correctness_endpoints(20, 0.7529, 0.7040);
  REQUIRE(c.front() == 0.7529);
  REQUIRE(std::abs(c.back() - 0.7040) < 1e-12);
  for (std::size_t i = 0; i + 1 < c.size(); ++i) REQUIRE(c[i] > c[i + 1]);
  const auto flat = correctness_endpoints(5, 0.4, 0.4);
  for (double v : flat) REQUIRE(v == 0.4);
}

// =============================================================================
// Table construction
// =============================================================================

TEST_CASE("task construction is pure in its inputs") {
  const TaskInstance a = testenv::calibration_flat();
  const TaskInstance b = testenv::calibration_flat();
  REQUIRE(a.table == b.table);

  const TaskInstance c = build_task(a.spec, a.prompt_id, a.instance_seed + 1);
  REQUIRE(a.table != c.table);

  const TaskInstance d = build_task(a.spec, "another_prompt", a.instance_seed);
  REQUIRE(a.table != d.table);  // prompt id feeds the build stream
}

TEST_CASE("answer rows carry the configured correctness exactly") {
  const TaskInstance inst = testenv::calibration_flat();
  const auto& spec = inst.spec;
  for (std::size_t r = 0; r < spec.candidates_by_rank.size(); ++r) {
    const Token f = spec.candidates_by_rank[r];
    const double c = spec.correctness_by_rank[r];
    int answer_rows = 0;
    for (const auto& [ctx, row] : inst.table) {
      if (ctx.opener != f || row[static_cast<std::size_t>(spec.gold_answer)] == 0.0) continue;
      ++answer_rows;
      REQUIRE(row[static_cast<std::size_t>(spec.gold_answer)] == c);
      double sum = 0.0;
      for (double x : row) sum += x;
      REQUIRE(sum == 1.0);  // exact by construction
    }
    REQUIRE(answer_rows == spec.filler_count);
  }
}

TEST_CASE("start row is the softmax of the logit profile") {
  const TaskInstance inst = testenv::calibration_flat();
  const auto row = start_probs(inst);
  double sum = 0.0;
  for (double x : row) sum += x;
  REQUIRE(std::abs(sum - 1.0) < 1e-12);
  // Mass sits only on opener candidates.
  for (Token t = 0; t < inst.vocab().size(); ++t) {
    const bool candidate = std::find(inst.spec.candidates_by_rank.begin(),
                                     inst.spec.candidates_by_rank.end(),
                                     t) != inst.spec.candidates_by_rank.end();
    if (!candidate) REQUIRE(row[static_cast<std::size_t>(t)] == 0.0);
  }
  REQUIRE(std::abs(row[static_cast<std::size_t>(inst.spec.candidates_by_rank[0])] - 0.57) < 1e-9);
}

TEST_CASE("whitespace detour carries a quarter of the filler-step mass") {
  const TaskInstance inst = testenv::calibration_flat();
  for (Token f : inst.spec.candidates_by_rank) {
    const auto* row = inst.row(ContextKey{f, f});
    REQUIRE(row != nullptr);
    REQUIRE((*row)[1] == 0.25);  // token 1 is the whitespace filler
    const auto* ws_row = inst.row(ContextKey{f, 1});
    REQUIRE(ws_row != nullptr);
    REQUIRE((*ws_row)[1] == 0.0);  // no second detour
  }
}

TEST_CASE("routing modes are disjoint in fillers and answers") {
  const TaskInstance inst = testenv::routing_env();
  const auto& spec = inst.spec;
  std::set<Token> seen_fillers;
  std::set<Token> seen_answers;
  for (std::size_t r = 0; r < spec.candidates_by_rank.size(); ++r) {
    const Token f = spec.candidates_by_rank[r];
    const auto* mode_row = inst.row(ContextKey{f, f});
    REQUIRE(mode_row != nullptr);
    std::set<Token> mode_fillers;
    for (Token t = 0; t < inst.vocab().size(); ++t) {
      if ((*mode_row)[static_cast<std::size_t>(t)] > 0.0) {
        mode_fillers.insert(t);
        REQUIRE(seen_fillers.count(t) == 0);
      }
    }
    REQUIRE(mode_fillers.size() == static_cast<std::size_t>(spec.mode_filler_count));
    seen_fillers.insert(mode_fillers.begin(), mode_fillers.end());

    for (Token s : mode_fillers) {
      const auto* answer_row = inst.row(ContextKey{f, s});
      REQUIRE(answer_row != nullptr);
      for (Token t = 0; t < inst.vocab().size(); ++t) {
        if ((*answer_row)[static_cast<std::size_t>(t)] > 0.0) {
          REQUIRE(inst.vocab().is_answer(t));
          REQUIRE(seen_answers.count(t) == 0);  // unique to this mode
          if (static_cast<int>(r) != 0) REQUIRE(t != inst.gold_answer());
        }
      }
    }
    const auto* first_answer_row = inst.row(ContextKey{f, *mode_fillers.begin()});
    for (Token t = 0; t < inst.vocab().size(); ++t)
      if ((*first_answer_row)[static_cast<std::size_t>(t)] > 0.0) seen_answers.insert(t);
  }
}

TEST_CASE("routing filler spread widens with rank") {
  const TaskInstance inst = testenv::routing_env();
  auto max_weight = [&](int rank) {
    const Token f = inst.spec.candidates_by_rank[static_cast<std::size_t>(rank)];
    const auto* row = inst.row(ContextKey{f, f});
    double mx = 0.0;
    for (double x : *row) mx = std::max(mx, x);
    return mx;
  };
  REQUIRE(max_weight(0) > 0.9);                  // concentrated mode
  REQUIRE(std::abs(max_weight(19) - 0.125) < 1e-12);  // uniform over 8 fillers
}

// =============================================================================
// Verifier
// =============================================================================

TEST_CASE("verifier scores format and correctness as written") {
  const TaskInstance inst = testenv::tiny_flat();
  const Token marker = inst.vocab().think_marker;
  const Token f = inst.spec.candidates_by_rank[0];
  const Token gold = inst.gold_answer();
  Token filler = kNoToken, wrong = kNoToken;
  for (Token t = 0; t < inst.vocab().size(); ++t) {
    if (inst.vocab().is_answer(t) && t != gold) wrong = t;
    if (!inst.vocab().is_answer(t) && !inst.vocab().is_invalid(t) &&
        std::find(inst.spec.candidates_by_rank.begin(), inst.spec.candidates_by_rank.end(), t) ==
            inst.spec.candidates_by_rank.end())
      filler = t;
  }

  const VerifierResult correct = verify(inst, {marker, f, filler, gold});
  REQUIRE(correct.format_ok);
  REQUIRE(correct.answer_correct);
  REQUIRE(correct.reward == 2.2);

  const VerifierResult formatted = verify(inst, {marker, f, filler, wrong});
  REQUIRE(formatted.format_ok);
  REQUIRE_FALSE(formatted.answer_correct);
  REQUIRE(formatted.reward == 0.2);

  REQUIRE(verify(inst, {marker, f, filler}).reward == 0.0);          // no answer
  REQUIRE(verify(inst, {marker, gold, filler}).reward == 0.0);       // answer not last
  REQUIRE(verify(inst, {marker, gold, gold}).reward == 0.0);         // two answers
  REQUIRE(verify(inst, {f, filler, gold}).reward == 0.0);            // missing marker
  REQUIRE(verify(inst, {}).reward == 0.0);
}

TEST_CASE("first semantic token anchors at the marker") {
  const TaskInstance inst = testenv::calibration_flat();
  const Vocab& v = inst.vocab();
  const Token marker = v.think_marker;
  const Token ws = 1;
  const Token f3 = inst.spec.candidates_by_rank[3];
  const Token f7 = inst.spec.candidates_by_rank[7];

  REQUIRE(first_semantic_token(v, {marker, f3}) == f3);
  REQUIRE(first_semantic_token(v, {marker, ws, f7}) == f7);
  REQUIRE(first_semantic_token(v, {f3, marker, f7}) == f7);  // tokens before the marker are ignored
  REQUIRE_FALSE(first_semantic_token(v, {marker}).has_value());
  REQUIRE_FALSE(first_semantic_token(v, {marker, ws}).has_value());
  REQUIRE_FALSE(first_semantic_token(v, {f3, f7}).has_value());
  REQUIRE_FALSE(first_semantic_token(v, {}).has_value());
}
