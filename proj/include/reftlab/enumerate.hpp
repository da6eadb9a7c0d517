#pragma once

/**
 * Brute-force trajectory enumeration.
 *
 * Walks every positive-probability path of a task instance under the
 * current policy and returns each path with its exact probability and
 * verifier outcome. This is the independent oracle behind the statistical
 * diagnostics: expectations that samplers estimate stochastically are
 * computed here in closed form.
 *
 * The explored-path count is capped; instances whose reachable tree
 * exceeds the cap are refused rather than silently truncated.
 */

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "reftlab/policy.hpp"
#include "reftlab/task.hpp"
#include "reftlab/vocab.hpp"

namespace reftlab {

inline constexpr std::uint64_t kDefaultPathCap = 10'000'000;

struct PathInfo {
  std::vector<Token> tokens;
  double prob = 0.0;
  double reward = 0.0;
  bool format_ok = false;
  bool answer_correct = false;
};

struct EnumerationResult {
  std::vector<PathInfo> paths;
  double total_prob = 0.0;  // 1 within rounding when the start context exists
};

namespace detail {

struct EnumerationState {
  const PolicyParams* params;
  const TaskInstance* inst;
  double temperature;
  std::uint64_t path_cap;
  EnumerationResult* out;
};

inline void close_path(EnumerationState& st, std::vector<Token>& tokens, double prob) {
  if (st.out->paths.size() >= st.path_cap)
    throw std::runtime_error("enumerate_trajectories: path cap of " + std::to_string(st.path_cap) +
                             " exceeded; raise the cap to enumerate this instance");
  PathInfo info;
  info.tokens = tokens;
  info.prob = prob;
  const VerifierResult res = verify(*st.inst, tokens);
  info.reward = res.reward;
  info.format_ok = res.format_ok;
  info.answer_correct = res.answer_correct;
  st.out->total_prob += prob;
  st.out->paths.push_back(std::move(info));
}

inline void enumerate_from(EnumerationState& st, std::vector<Token>& tokens, double prob) {
  const Vocab& v = st.inst->vocab();
  if (static_cast<int>(tokens.size()) >= st.inst->max_len() || v.is_answer(tokens.back())) {
    close_path(st, tokens, prob);
    return;
  }
  const ContextKey ctx = context_at(tokens, tokens.size());
  if (!has_row(*st.params, *st.inst, ctx)) {
    close_path(st, tokens, prob);  // dead end: no continuation mass defined
    return;
  }
  const TokenDistribution d = distribution(*st.params, *st.inst, ctx, st.temperature);
  for (Token t = 0; t < v.size(); ++t) {
    const double p = d.probs[static_cast<std::size_t>(t)];
    if (p == 0.0) continue;
    tokens.push_back(t);
    enumerate_from(st, tokens, prob * p);
    tokens.pop_back();
  }
}

}  // namespace detail

/**
 * Enumerates all trajectories (optionally with the opener pinned, matching
 * forced-group semantics: the forced opener contributes probability 1).
 */
inline EnumerationResult enumerate_trajectories(const PolicyParams& params, const TaskInstance& inst,
                                                double temperature = 1.0,
                                                std::uint64_t path_cap = kDefaultPathCap,
                                                Token forced_opener = kNoToken) {
  EnumerationResult out;
  detail::EnumerationState st{&params, &inst, temperature, path_cap, &out};
  std::vector<Token> tokens{inst.vocab().think_marker};
  if (forced_opener != kNoToken) {
    const Vocab& v = inst.vocab();
    if (forced_opener < 0 || forced_opener >= v.size() || v.is_invalid(forced_opener))
      throw std::invalid_argument("enumerate_trajectories: forced opener must be a valid token");
    tokens.push_back(forced_opener);
  }
  detail::enumerate_from(st, tokens, 1.0);
  return out;
}

// =============================================================================
// Exact expectations
// =============================================================================

/// P(answer_correct) for one rollout under the given sampling process.
inline double exact_correct_probability(const PolicyParams& params, const TaskInstance& inst,
                                        double temperature = 1.0,
                                        std::uint64_t path_cap = kDefaultPathCap,
                                        Token forced_opener = kNoToken) {
  const auto res = enumerate_trajectories(params, inst, temperature, path_cap, forced_opener);
  double p = 0.0;
  for (const auto& path : res.paths)
    if (path.answer_correct) p += path.prob;
  return p;
}

/// Probability that a standard group of size g contains no correct rollout.
/// Rollouts are independent, so this is (1 - p_correct)^g.
inline double standard_all_wrong_probability(const PolicyParams& params, const TaskInstance& inst,
                                             int g, double temperature = 1.0,
                                             std::uint64_t path_cap = kDefaultPathCap) {
  if (g < 1) throw std::invalid_argument("standard_all_wrong_probability: g must be positive");
  return std::pow(1.0 - exact_correct_probability(params, inst, temperature, path_cap), g);
}

/**
 * Probability that a diversified group (top-n candidates, k distinct
 * openers, g/k rollouts each) contains no correct rollout: the average over
 * all k-subsets of the product of per-opener wrong probabilities.
 */
inline double reft_all_wrong_probability(const PolicyParams& params, const TaskInstance& inst,
                                         int g, int n, int k,
                                         std::uint64_t path_cap = kDefaultPathCap) {
  if (k < 1 || k > n) throw std::invalid_argument("reft_all_wrong_probability: need 1 <= k <= n");
  if (g % k != 0) throw std::invalid_argument("reft_all_wrong_probability: k must divide g");
  const auto candidates = top_n_first_tokens(params, inst, n);
  const int per_token = g / k;
  std::vector<double> wrong_pow(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double pc = exact_correct_probability(params, inst, 1.0, path_cap, candidates[i]);
    wrong_pow[i] = std::pow(1.0 - pc, per_token);
  }
  // Average the subset products recursively: mean over C(n, k) subsets.
  double total = 0.0;
  std::uint64_t count = 0;
  struct Rec {
    const std::vector<double>& w;
    int k;
    double& total;
    std::uint64_t& count;
    void walk(std::size_t start, int depth, double prod) {
      if (depth == k) {
        total += prod;
        ++count;
        return;
      }
      for (std::size_t i = start; i + static_cast<std::size_t>(k - depth) <= w.size(); ++i)
        walk(i + 1, depth + 1, prod * w[i]);
    }
  } rec{wrong_pow, k, total, count};
  rec.walk(0, 0, 1.0);
  return total / static_cast<double>(count);
}

/// Exact E[R * grad log pi] over the trajectory distribution.
inline GradMap expected_reinforce_gradient(const PolicyParams& params, const TaskInstance& inst,
                                           double temperature = 1.0,
                                           std::uint64_t path_cap = kDefaultPathCap) {
  const auto res = enumerate_trajectories(params, inst, temperature, path_cap);
  GradMap expected;
  for (const auto& path : res.paths) {
    if (path.reward == 0.0) continue;
    const GradMap g = grad_logprob(params, inst, path.tokens, temperature);
    for (const auto& [ctx, row] : g) {
      auto& acc = expected.try_emplace(ctx, row.size(), 0.0).first->second;
      for (std::size_t i = 0; i < row.size(); ++i) acc[i] += path.prob * path.reward * row[i];
    }
  }
  return expected;
}

}  // namespace reftlab
