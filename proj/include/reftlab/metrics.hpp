#pragma once

/**
 * Evaluation metrics and diagnostics.
 *
 * Everything here is either closed-form (pass@k, coverage probability,
 * zero-variance decomposition) or an exact function of a rollout group
 * (uniqueness, semantic diversity). Statistical estimators used in tests
 * live next to their closed forms so oracle comparisons share one header.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "reftlab/enumerate.hpp"
#include "reftlab/policy.hpp"
#include "reftlab/sampler.hpp"
#include "reftlab/task.hpp"
#include "reftlab/vocab.hpp"

namespace reftlab {

// =============================================================================
// pass@k
// =============================================================================

/// C(n, k) when it fits in 64 bits; nullopt on overflow.
inline std::optional<std::uint64_t> binomial_u64(int n, int k) {
  if (k < 0 || n < 0 || k > n) return 0;
  if (k > n - k) k = n - k;
  unsigned __int128 res = 1;
  for (int i = 1; i <= k; ++i) {
    res = res * static_cast<unsigned>(n - k + i) / static_cast<unsigned>(i);
    if (res > static_cast<unsigned __int128>(UINT64_MAX)) return std::nullopt;
  }
  return static_cast<std::uint64_t>(res);
}

/**
 * Unbiased estimator 1 - C(n-c, k) / C(n, k): the chance that a uniformly
 * chosen k-subset of n samples (c of them correct) contains at least one
 * correct sample. Uses exact 64-bit binomials when they fit (so small cases
 * agree bit-for-bit with subset enumeration) and the stable running product
 * otherwise.
 */
inline double pass_at_k(int n, int c, int k) {
  if (n < 1) throw std::invalid_argument("pass_at_k: n must be positive");
  if (c < 0 || c > n) throw std::invalid_argument("pass_at_k: need 0 <= c <= n");
  if (k < 1 || k > n) throw std::invalid_argument("pass_at_k: need 1 <= k <= n");
  if (c == 0) return 0.0;
  if (n - c < k) return 1.0;
  const auto total = binomial_u64(n, k);
  const auto miss = binomial_u64(n - c, k);
  if (total && miss)
    return static_cast<double>(*total - *miss) / static_cast<double>(*total);
  double prod = 1.0;
  for (int i = 0; i < k; ++i)
    prod *= static_cast<double>(n - c - i) / static_cast<double>(n - i);
  return 1.0 - prod;
}

// =============================================================================
// Coverage
// =============================================================================

/// Probability that at least one of g independent draws hits an event of
/// probability p: 1 - (1-p)^g.
inline double coverage_probability(double p, int g) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("coverage_probability: p must be in [0,1]");
  if (g < 1) throw std::invalid_argument("coverage_probability: g must be positive");
  return 1.0 - std::pow(1.0 - p, g);
}

// =============================================================================
// Group decomposition
// =============================================================================

struct ZeroVarianceStats {
  double zero_variance_fraction = 0.0;
  double all_correct_fraction = 0.0;
  double all_wrong_fraction = 0.0;
};

inline bool group_has_zero_reward_variance(const RolloutGroup& group) {
  if (group.rollouts.empty()) throw std::invalid_argument("zero variance check: empty group");
  for (const auto& r : group.rollouts)
    if (r.reward != group.rollouts.front().reward) return false;
  return true;
}

/// Fractions of groups with no reward spread, with every rollout correct,
/// and with every rollout incorrect. In a binary-reward regime the first is
/// the sum of the other two.
inline ZeroVarianceStats zero_variance_decomposition(const std::vector<RolloutGroup>& groups) {
  if (groups.empty()) throw std::invalid_argument("zero_variance_decomposition: no groups");
  ZeroVarianceStats stats;
  for (const auto& g : groups) {
    if (group_has_zero_reward_variance(g)) stats.zero_variance_fraction += 1.0;
    bool all_correct = true, all_wrong = true;
    for (const auto& r : g.rollouts) {
      if (r.answer_correct) all_wrong = false; else all_correct = false;
    }
    if (all_correct) stats.all_correct_fraction += 1.0;
    if (all_wrong) stats.all_wrong_fraction += 1.0;
  }
  const double n = static_cast<double>(groups.size());
  stats.zero_variance_fraction /= n;
  stats.all_correct_fraction /= n;
  stats.all_wrong_fraction /= n;
  return stats;
}

// =============================================================================
// First-token profiles
// =============================================================================

/// Valid-token opener probabilities of one instance, sorted descending.
inline std::vector<double> sorted_opener_probs(const PolicyParams& params, const TaskInstance& inst) {
  const TokenDistribution d = distribution(params, inst, start_context(inst.vocab()), 1.0);
  std::vector<double> probs;
  for (Token t = 0; t < inst.vocab().size(); ++t)
    if (!inst.vocab().is_invalid(t)) probs.push_back(d.probs[static_cast<std::size_t>(t)]);
  std::sort(probs.begin(), probs.end(), std::greater<double>());
  return probs;
}

/// Mean opener probability by rank across a task set.
inline std::vector<double> first_token_rank_profile(const PolicyParams& params,
                                                    const std::vector<TaskInstance>& instances,
                                                    int max_rank) {
  if (instances.empty()) throw std::invalid_argument("first_token_rank_profile: no instances");
  if (max_rank < 1) throw std::invalid_argument("first_token_rank_profile: max_rank must be positive");
  std::vector<double> mean(static_cast<std::size_t>(max_rank), 0.0);
  for (const auto& inst : instances) {
    const auto probs = sorted_opener_probs(params, inst);
    if (static_cast<int>(probs.size()) < max_rank)
      throw std::invalid_argument("first_token_rank_profile: max_rank exceeds valid-token count");
    for (int r = 0; r < max_rank; ++r) mean[static_cast<std::size_t>(r)] += probs[static_cast<std::size_t>(r)];
  }
  for (double& x : mean) x /= static_cast<double>(instances.size());
  return mean;
}

/// Total opener mass of the top r valid tokens (r clamped to the valid count).
inline double top_r_first_token_prob(const PolicyParams& params, const TaskInstance& inst, int r) {
  if (r < 1) throw std::invalid_argument("top_r_first_token_prob: r must be positive");
  const auto probs = sorted_opener_probs(params, inst);
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(r), probs.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < take; ++i) sum += probs[i];
  return sum;
}

// =============================================================================
// Correctness by forced opener rank
// =============================================================================

/// Exact conditional correctness per opener rank, by trajectory enumeration
/// with the opener pinned.
inline std::vector<double> correctness_by_rank_exact(const PolicyParams& params,
                                                     const TaskInstance& inst, int max_rank,
                                                     std::uint64_t path_cap = kDefaultPathCap) {
  const auto candidates = top_n_first_tokens(params, inst, max_rank);
  std::vector<double> out;
  out.reserve(candidates.size());
  for (Token f : candidates)
    out.push_back(exact_correct_probability(params, inst, 1.0, path_cap, f));
  return out;
}

struct RankCorrectnessEstimate {
  std::vector<double> mean;
  std::vector<double> stderr_;
};

/// Monte Carlo counterpart of correctness_by_rank_exact with binomial
/// standard errors.
inline RankCorrectnessEstimate correctness_by_rank_mc(const PolicyParams& params,
                                                      const TaskInstance& inst, int max_rank,
                                                      int samples_per_rank, Stream& stream) {
  if (samples_per_rank < 1)
    throw std::invalid_argument("correctness_by_rank_mc: samples_per_rank must be positive");
  const auto candidates = top_n_first_tokens(params, inst, max_rank);
  RankCorrectnessEstimate est;
  for (Token f : candidates) {
    const RolloutGroup group = sample_forced_group(params, inst, samples_per_rank, f, stream);
    int correct = 0;
    for (const auto& r : group.rollouts)
      if (r.answer_correct) ++correct;
    const double p = static_cast<double>(correct) / samples_per_rank;
    est.mean.push_back(p);
    est.stderr_.push_back(std::sqrt(p * (1.0 - p) / samples_per_rank));
  }
  return est;
}

// =============================================================================
// Answer uniqueness and semantic diversity
// =============================================================================

/// Distinct terminal answer tokens in a group; rollouts that never reach an
/// answer share one extra bucket.
inline int unique_answers(const RolloutGroup& group, const Vocab& v) {
  std::set<Token> answers;
  bool any_unanswered = false;
  for (const auto& r : group.rollouts) {
    if (!r.tokens.empty() && v.is_answer(r.tokens.back())) {
      answers.insert(r.tokens.back());
    } else {
      any_unanswered = true;
    }
  }
  return static_cast<int>(answers.size()) + (any_unanswered ? 1 : 0);
}

using Embedder = std::function<std::vector<double>(const std::vector<Token>&, const Vocab&)>;

/// Token-count frequency vector over the vocabulary, normalized to unit
/// mass. The empty sequence embeds to the zero vector.
inline std::vector<double> token_frequency_embedder(const std::vector<Token>& tokens, const Vocab& v) {
  std::vector<double> e(static_cast<std::size_t>(v.size()), 0.0);
  if (tokens.empty()) return e;
  for (Token t : tokens) e.at(static_cast<std::size_t>(t)) += 1.0;
  for (double& x : e) x /= static_cast<double>(tokens.size());
  return e;
}

namespace detail {

/// Cosine with the zero-vector convention: a zero vector has similarity 0
/// to anything non-zero and similarity 1 to another zero vector.
inline double cosine_with_convention(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

/**
 * Mean pairwise cosine distance of the stripped continuations:
 * 2/(G(G-1)) * sum over pairs of (1 - cos). Lies in [0, 2] for any
 * embedder; 0 iff all embeddings are pairwise parallel with equal sign.
 */
inline double semantic_diversity(const RolloutGroup& group, const Vocab& v,
                                 const Embedder& embed = token_frequency_embedder) {
  const std::size_t g = group.rollouts.size();
  if (g < 2) throw std::invalid_argument("semantic_diversity: needs at least two rollouts");
  std::vector<std::vector<double>> embeddings;
  embeddings.reserve(g);
  for (const auto& r : group.rollouts) embeddings.push_back(embed(strip_first_token(v, r.tokens), v));
  double sum = 0.0;
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = i + 1; j < g; ++j)
      sum += 1.0 - detail::cosine_with_convention(embeddings[i], embeddings[j]);
  return 2.0 * sum / (static_cast<double>(g) * static_cast<double>(g - 1));
}

// =============================================================================
// Per-step metrics record
// =============================================================================

struct MetricsRecord {
  std::uint64_t step = 0;
  std::string strategy;
  double mean_reward = 0.0;
  double mean_length = 0.0;
  std::map<int, double> pass_at;  // only ks not exceeding the group size
  double zero_variance_fraction = 0.0;
  double all_correct_fraction = 0.0;
  double all_wrong_fraction = 0.0;
  std::map<int, double> top_r;  // r in {1, 2, 4, 8}
  double unique_answers_mean = 0.0;
  double semantic_diversity_mean = 0.0;
  bool dynamic_exhausted = false;
};

inline const std::vector<int>& metrics_top_ranks() {
  static const std::vector<int> ranks{1, 2, 4, 8};
  return ranks;
}

/// Snapshot over the groups of one step, measured against the policy that
/// generated them.
inline MetricsRecord compute_step_metrics(std::uint64_t step, const std::string& strategy_label,
                                          const std::vector<RolloutGroup>& groups,
                                          const PolicyParams& params,
                                          const std::vector<TaskInstance>& tasks,
                                          const std::vector<int>& pass_ks) {
  if (groups.empty()) throw std::invalid_argument("compute_step_metrics: no groups");
  if (tasks.empty()) throw std::invalid_argument("compute_step_metrics: no tasks");
  MetricsRecord rec;
  rec.step = step;
  rec.strategy = strategy_label;

  double reward_sum = 0.0, length_sum = 0.0;
  std::size_t rollouts = 0;
  for (const auto& g : groups) {
    for (const auto& r : g.rollouts) {
      reward_sum += r.reward;
      length_sum += static_cast<double>(r.tokens.size());
      ++rollouts;
    }
  }
  rec.mean_reward = reward_sum / static_cast<double>(rollouts);
  rec.mean_length = length_sum / static_cast<double>(rollouts);

  for (int k : pass_ks) {
    bool computable = true;
    double sum = 0.0;
    for (const auto& g : groups) {
      const int n = static_cast<int>(g.rollouts.size());
      if (k > n) {
        computable = false;
        break;
      }
      int c = 0;
      for (const auto& r : g.rollouts)
        if (r.answer_correct) ++c;
      sum += pass_at_k(n, c, k);
    }
    if (computable) rec.pass_at[k] = sum / static_cast<double>(groups.size());
  }

  const ZeroVarianceStats zv = zero_variance_decomposition(groups);
  rec.zero_variance_fraction = zv.zero_variance_fraction;
  rec.all_correct_fraction = zv.all_correct_fraction;
  rec.all_wrong_fraction = zv.all_wrong_fraction;

  for (int r : metrics_top_ranks()) {
    double sum = 0.0;
    for (const auto& inst : tasks) sum += top_r_first_token_prob(params, inst, r);
    rec.top_r[r] = sum / static_cast<double>(tasks.size());
  }

  double unique_sum = 0.0, diversity_sum = 0.0;
  for (const auto& g : groups) {
    const Vocab& v = tasks.front().vocab();
    unique_sum += static_cast<double>(unique_answers(g, v));
    diversity_sum += g.rollouts.size() >= 2 ? semantic_diversity(g, v) : 0.0;
  }
  rec.unique_answers_mean = unique_sum / static_cast<double>(groups.size());
  rec.semantic_diversity_mean = diversity_sum / static_cast<double>(groups.size());
  return rec;
}

// =============================================================================
// CSV schema
// =============================================================================

inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string metrics_csv_header() {
  return "step,strategy,mean_reward,mean_length,pass_at_1,pass_at_8,pass_at_64,"
         "zero_variance_fraction,all_correct_fraction,all_wrong_fraction,"
         "top1_prob,top2_prob,top4_prob,top8_prob,unique_answers_mean,"
         "semantic_diversity_mean,dynamic_exhausted";
}

/// One CSV row. pass@k columns for ks that were not computable stay empty.
inline std::string metrics_csv_row(const MetricsRecord& rec) {
  auto pass_cell = [&](int k) {
    auto it = rec.pass_at.find(k);
    return it == rec.pass_at.end() ? std::string() : format_double(it->second);
  };
  auto top_cell = [&](int r) {
    auto it = rec.top_r.find(r);
    return it == rec.top_r.end() ? std::string() : format_double(it->second);
  };
  std::string row;
  row += std::to_string(rec.step);
  row += ",";
  row += rec.strategy;
  row += ",";
  row += format_double(rec.mean_reward);
  row += ",";
  row += format_double(rec.mean_length);
  row += ",";
  row += pass_cell(1);
  row += ",";
  row += pass_cell(8);
  row += ",";
  row += pass_cell(64);
  row += ",";
  row += format_double(rec.zero_variance_fraction);
  row += ",";
  row += format_double(rec.all_correct_fraction);
  row += ",";
  row += format_double(rec.all_wrong_fraction);
  row += ",";
  row += top_cell(1);
  row += ",";
  row += top_cell(2);
  row += ",";
  row += top_cell(4);
  row += ",";
  row += top_cell(8);
  row += ",";
  row += format_double(rec.unique_answers_mean);
  row += ",";
  row += format_double(rec.semantic_diversity_mean);
  row += ",";
  row += rec.dynamic_exhausted ? "1" : "0";
  return row;
}

}  // namespace reftlab
