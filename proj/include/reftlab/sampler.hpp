#pragma once

/**
 * Grouped rollout samplers.
 *
 * Four strategies produce groups of exactly G rollouts:
 *
 *  - standard: every token sampled from the policy at the given temperature
 *    (temperature != 1 is the temperature-scaled strategy, same code path);
 *  - forced: the opener is pinned to a caller-chosen valid token;
 *  - reft: K distinct openers drawn uniformly from the policy's top-N valid
 *    candidates, G/K rollouts each, continuations at temperature 1.
 *
 * All strategies share one continuation decoder, so a forced opener and a
 * reft-selected opener produce identical continuations from identical
 * stream states. Forced openers record their true behavior log-probability,
 * which may be very negative but is never replaced by zero.
 */

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "reftlab/policy.hpp"
#include "reftlab/rng.hpp"
#include "reftlab/task.hpp"
#include "reftlab/vocab.hpp"

namespace reftlab {

// =============================================================================
// Strategy tags
// =============================================================================

enum class StrategyKind { kStandard, kForced, kTemperature, kReft };

struct Strategy {
  StrategyKind kind = StrategyKind::kStandard;
  Token forced_token = kNoToken;  // forced
  int forced_rank = 0;            // forced, display only (1-based; 0 = unknown)
  double temperature = 1.0;       // standard / temperature
  int n = 0;                      // reft
  int k = 0;                      // reft

  /// Stable id for stream derivation.
  std::uint64_t id() const {
    switch (kind) {
      case StrategyKind::kStandard: return 1;
      case StrategyKind::kForced: return 2 + static_cast<std::uint64_t>(forced_token) * 8;
      case StrategyKind::kTemperature: return 3;
      case StrategyKind::kReft: return 4 + (static_cast<std::uint64_t>(n) << 16) + static_cast<std::uint64_t>(k);
    }
    return 0;
  }

  std::string label() const {
    char buf[64];
    switch (kind) {
      case StrategyKind::kStandard: return "standard";
      case StrategyKind::kForced:
        if (forced_rank > 0) {
          std::snprintf(buf, sizeof buf, "forced-rank%d", forced_rank);
        } else {
          std::snprintf(buf, sizeof buf, "forced-token%d", forced_token);
        }
        return buf;
      case StrategyKind::kTemperature:
        std::snprintf(buf, sizeof buf, "temperature-%g", temperature);
        return buf;
      case StrategyKind::kReft:
        std::snprintf(buf, sizeof buf, "reft-n%d-k%d", n, k);
        return buf;
    }
    return "unknown";
  }
};

// =============================================================================
// Rollouts
// =============================================================================

struct Rollout {
  std::vector<Token> tokens;             // begins with the think marker
  std::vector<double> behavior_logprobs; // one per sampled position
  double reward = 0.0;
  bool format_ok = false;
  bool answer_correct = false;
  Token first_token = kNoToken;          // first semantic token; kNoToken if absent

  std::size_t sampled_positions() const { return tokens.size() - 1; }
};

struct RolloutGroup {
  std::string prompt_id;
  std::vector<Rollout> rollouts;
  Strategy strategy;
  std::uint64_t behavior_version = 0;
  double temperature = 1.0;  // temperature the group was sampled at

  std::size_t size() const { return rollouts.size(); }
};

// =============================================================================
// Shared decoding
// =============================================================================

namespace detail {

/// Extends a partial trajectory until an answer token or max_len.
inline void sample_continuation(const PolicyParams& params, const TaskInstance& inst,
                                Rollout& rollout, Stream& stream, double temperature,
                                double top_p) {
  const Vocab& v = inst.vocab();
  while (static_cast<int>(rollout.tokens.size()) < inst.max_len() &&
         !v.is_answer(rollout.tokens.back())) {
    const ContextKey ctx = context_at(rollout.tokens, rollout.tokens.size());
    TokenDistribution d = distribution(params, inst, ctx, temperature);
    if (top_p < 1.0) d = top_p_transform(std::move(d), top_p);
    const Token tok = sample_token(d, stream);
    rollout.tokens.push_back(tok);
    rollout.behavior_logprobs.push_back(d.logprobs[static_cast<std::size_t>(tok)]);
  }
}

inline void finalize_rollout(const TaskInstance& inst, Rollout& rollout) {
  const VerifierResult res = verify(inst, rollout.tokens);
  rollout.reward = res.reward;
  rollout.format_ok = res.format_ok;
  rollout.answer_correct = res.answer_correct;
  const auto first = first_semantic_token(inst.vocab(), rollout.tokens);
  rollout.first_token = first.value_or(kNoToken);
}

}  // namespace detail

// =============================================================================
// Group samplers
// =============================================================================

/**
 * Fully on-policy group at the given temperature. An optional nucleus
 * truncation applies to every step (evaluation use; defaults to off).
 */
inline RolloutGroup sample_standard_group(const PolicyParams& params, const TaskInstance& inst,
                                          int g, double temperature, Stream& stream,
                                          double top_p = 1.0) {
  if (g < 1) throw std::invalid_argument("sample_standard_group: group size must be positive");
  RolloutGroup group;
  group.prompt_id = inst.prompt_id;
  group.behavior_version = params.version;
  group.temperature = temperature;
  group.strategy.kind = temperature == 1.0 ? StrategyKind::kStandard : StrategyKind::kTemperature;
  group.strategy.temperature = temperature;
  const ContextKey start = start_context(inst.vocab());
  for (int i = 0; i < g; ++i) {
    Rollout r;
    r.tokens.push_back(inst.vocab().think_marker);
    TokenDistribution d = distribution(params, inst, start, temperature);
    if (top_p < 1.0) d = top_p_transform(std::move(d), top_p);
    const Token opener = sample_token(d, stream);
    r.tokens.push_back(opener);
    r.behavior_logprobs.push_back(d.logprobs[static_cast<std::size_t>(opener)]);
    detail::sample_continuation(params, inst, r, stream, temperature, top_p);
    detail::finalize_rollout(inst, r);
    group.rollouts.push_back(std::move(r));
  }
  return group;
}

/**
 * Group with the opener pinned to forced_token (which must be a valid
 * token). The opener's recorded log-probability is its true mass under the
 * behavior policy at the group temperature.
 */
inline RolloutGroup sample_forced_group(const PolicyParams& params, const TaskInstance& inst,
                                        int g, Token forced_token, Stream& stream,
                                        double temperature = 1.0, int forced_rank = 0) {
  if (g < 1) throw std::invalid_argument("sample_forced_group: group size must be positive");
  const Vocab& v = inst.vocab();
  if (forced_token < 0 || forced_token >= v.size() || v.is_invalid(forced_token))
    throw std::invalid_argument("sample_forced_group: forced token must be a valid token");
  RolloutGroup group;
  group.prompt_id = inst.prompt_id;
  group.behavior_version = params.version;
  group.temperature = temperature;
  group.strategy.kind = StrategyKind::kForced;
  group.strategy.forced_token = forced_token;
  group.strategy.forced_rank = forced_rank;
  group.strategy.temperature = temperature;
  const TokenDistribution start_dist = distribution(params, inst, start_context(v), temperature);
  for (int i = 0; i < g; ++i) {
    Rollout r;
    r.tokens.push_back(v.think_marker);
    r.tokens.push_back(forced_token);
    r.behavior_logprobs.push_back(start_dist.logprobs[static_cast<std::size_t>(forced_token)]);
    detail::sample_continuation(params, inst, r, stream, temperature, 1.0);
    detail::finalize_rollout(inst, r);
    group.rollouts.push_back(std::move(r));
  }
  return group;
}

/**
 * First-token-diversified group: K distinct openers drawn uniformly without
 * replacement from the top-N valid candidates (each candidate selected with
 * probability K/N), G/K rollouts per selected opener. K must divide G
 * exactly. Continuations always run at temperature 1.
 */
inline RolloutGroup sample_reft_group(const PolicyParams& params, const TaskInstance& inst,
                                      int g, int n, int k, Stream& stream) {
  if (g < 1) throw std::invalid_argument("sample_reft_group: group size must be positive");
  if (k < 1 || k > n) throw std::invalid_argument("sample_reft_group: need 1 <= k <= n");
  if (g % k != 0) throw std::invalid_argument("sample_reft_group: k must divide the group size");
  const std::vector<Token> candidates = top_n_first_tokens(params, inst, n);
  const auto selected = stream.sample_without_replacement(candidates.size(), static_cast<std::size_t>(k));

  RolloutGroup group;
  group.prompt_id = inst.prompt_id;
  group.behavior_version = params.version;
  group.temperature = 1.0;
  group.strategy.kind = StrategyKind::kReft;
  group.strategy.n = n;
  group.strategy.k = k;
  const TokenDistribution start_dist = distribution(params, inst, start_context(inst.vocab()), 1.0);
  const int per_token = g / k;
  for (std::size_t s = 0; s < selected.size(); ++s) {
    const Token opener = candidates[selected[s]];
    for (int i = 0; i < per_token; ++i) {
      Rollout r;
      r.tokens.push_back(inst.vocab().think_marker);
      r.tokens.push_back(opener);
      r.behavior_logprobs.push_back(start_dist.logprobs[static_cast<std::size_t>(opener)]);
      detail::sample_continuation(params, inst, r, stream, 1.0, 1.0);
      detail::finalize_rollout(inst, r);
      group.rollouts.push_back(std::move(r));
    }
  }
  return group;
}

// =============================================================================
// Continuation extraction
// =============================================================================

/// Tokens strictly after the first semantic token; empty if the trajectory
/// has no semantic token. Leading invalid tokens are dropped with the opener.
inline std::vector<Token> strip_first_token(const Vocab& v, const std::vector<Token>& tokens) {
  std::size_t i = 0;
  while (i < tokens.size() && tokens[i] != v.think_marker) ++i;
  if (i == tokens.size()) return {};
  for (++i; i < tokens.size(); ++i) {
    if (!v.is_invalid(tokens[i]))
      return std::vector<Token>(tokens.begin() + static_cast<std::ptrdiff_t>(i) + 1, tokens.end());
  }
  return {};
}

/// Serialized audit line: prompt, strategy, token ids, reward.
inline std::string rollout_audit_line(const RolloutGroup& group, const Rollout& r) {
  std::string line = group.prompt_id + "\t" + group.strategy.label() + "\t";
  for (std::size_t i = 0; i < r.tokens.size(); ++i) {
    if (i) line += " ";
    line += std::to_string(r.tokens[i]);
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", r.reward);
  line += "\t";
  line += buf;
  return line;
}

}  // namespace reftlab
