#pragma once

/**
 * Synthetic verifiable environments.
 *
 * A task is a tiny token MDP: every rollout opens with a think marker, walks
 * a realized transition table conditioned on (opener, previous token), and
 * terminates at the first answer token or at max_len. The verifier scores
 * format and answer exactly, so reward assignment has no noise of its own.
 *
 * Two families are provided.
 *
 *  - flat_correctness: every opener leads to a filler step and then an
 *    answer step whose gold probability is written directly into the table.
 *    Conditional correctness per opener rank is therefore exact by
 *    construction, which is what makes brute-force diagnostics meaningful.
 *
 *  - routing: each opener owns a disjoint continuation mode (its own filler
 *    pool and its own answer mixture). Forcing one opener can never produce
 *    another mode's answer. Mode-internal filler spread widens with rank,
 *    so rare openers carry more continuation diversity than common ones.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "reftlab/rng.hpp"
#include "reftlab/vocab.hpp"

namespace reftlab {

// =============================================================================
// Context keys and transition tables
// =============================================================================

/**
 * Conditioning window for one sampling step: the rollout's opener (the first
 * token sampled after the think marker) and the immediately previous token.
 * At the opener position itself there is no opener yet, so the key is
 * {kNoToken, think_marker}.
 */
struct ContextKey {
  Token opener = kNoToken;
  Token prev = kNoToken;

  friend bool operator<(const ContextKey& a, const ContextKey& b) {
    if (a.opener != b.opener) return a.opener < b.opener;
    return a.prev < b.prev;
  }
  friend bool operator==(const ContextKey& a, const ContextKey& b) {
    return a.opener == b.opener && a.prev == b.prev;
  }
};

inline ContextKey start_context(const Vocab& v) { return ContextKey{kNoToken, v.think_marker}; }

/// Rows are dense probability vectors over the vocabulary, normalized at
/// build time. Absent rows mean "no continuation" (terminal by exhaustion).
using TransitionTable = std::map<ContextKey, std::vector<double>>;

// =============================================================================
// Task specification
// =============================================================================

enum class TaskFamily { kFlatCorrectness, kRouting };

/// One answer mixture: (answer ordinal within the vocab answer block, weight).
using AnswerMixture = std::vector<std::pair<int, double>>;

struct TaskSpec {
  TaskFamily family = TaskFamily::kFlatCorrectness;
  Vocab vocab;
  int max_len = 6;

  /// Opener logits by rank, non-increasing. softmax of this vector is the
  /// opener distribution of the initial policy.
  std::vector<double> first_token_logit_profile;

  /// flat_correctness: gold probability at the answer step, by opener rank.
  std::vector<double> correctness_by_rank;

  /// routing: answer mixture per opener rank.
  std::vector<AnswerMixture> answer_mode_map;

  /// routing: filler-weight geometric ratio per opener rank (1 = uniform,
  /// small = concentrated on one filler).
  std::vector<double> mode_concentration;

  Token gold_answer = kNoToken;
  double accuracy_weight = 2.0;
  double format_weight = 0.2;

  /// flat_correctness construction knobs.
  int filler_count = 4;
  bool include_ws_step = true;

  /// routing construction knob.
  int mode_filler_count = 8;

  /// Opener candidate token ids in rank order (filled by the family builders).
  std::vector<Token> candidates_by_rank;
};

// =============================================================================
// Spec validation
// =============================================================================

inline std::string validate_spec(const TaskSpec& spec) {
  if (auto err = validate_vocab(spec.vocab); !err.empty()) return err;
  if (spec.max_len < 3) return "spec: max_len must be at least 3";
  const std::size_t m = spec.candidates_by_rank.size();
  if (m == 0) return "spec: no opener candidates";
  if (spec.first_token_logit_profile.size() != m)
    return "spec: logit profile length must equal candidate count";
  for (std::size_t i = 0; i + 1 < m; ++i) {
    if (spec.first_token_logit_profile[i] < spec.first_token_logit_profile[i + 1])
      return "spec: first_token_logit_profile must be non-increasing";
  }
  for (double l : spec.first_token_logit_profile) {
    if (!std::isfinite(l)) return "spec: logit profile entries must be finite";
  }
  for (Token t : spec.candidates_by_rank) {
    if (t < 0 || t >= spec.vocab.size()) return "spec: candidate token out of range";
    if (spec.vocab.is_invalid(t)) return "spec: opener candidates must be valid tokens";
  }
  if (static_cast<Token>(m) > spec.vocab.valid_count())
    return "spec: more candidates than valid tokens";
  if (!spec.vocab.is_answer(spec.gold_answer)) return "spec: gold answer must be an answer token";
  if (spec.accuracy_weight < 0 || spec.format_weight < 0)
    return "spec: reward weights must be nonnegative";

  std::size_t pool = 0;  // valid, non-answer, non-candidate tokens
  for (Token t = 0; t < spec.vocab.size(); ++t) {
    if (spec.vocab.is_invalid(t) || spec.vocab.is_answer(t)) continue;
    if (std::find(spec.candidates_by_rank.begin(), spec.candidates_by_rank.end(), t) !=
        spec.candidates_by_rank.end())
      continue;
    ++pool;
  }

  if (spec.family == TaskFamily::kFlatCorrectness) {
    if (spec.correctness_by_rank.size() != m)
      return "spec: correctness_by_rank length must equal candidate count";
    for (double c : spec.correctness_by_rank) {
      if (!(c >= 0.0 && c <= 1.0)) return "spec: correctness values must lie in [0,1]";
    }
    if (spec.filler_count < 1) return "spec: filler_count must be positive";
    if (pool == 0) return "spec: flat family needs at least one filler token";
    const int needed = spec.include_ws_step ? 5 : 4;
    if (spec.max_len < needed) return "spec: max_len too small for the flat family layout";
    if (spec.vocab.answers.size() < 2) return "spec: flat family needs a wrong answer token";
  } else {
    if (spec.answer_mode_map.size() != m)
      return "spec: answer_mode_map length must equal candidate count";
    if (spec.mode_concentration.size() != m)
      return "spec: mode_concentration length must equal candidate count";
    for (double b : spec.mode_concentration) {
      if (!(b > 0.0)) return "spec: mode concentration ratios must be positive";
    }
    for (const auto& mix : spec.answer_mode_map) {
      if (mix.empty()) return "spec: every mode needs at least one answer";
      double total = 0.0;
      for (const auto& [ordinal, w] : mix) {
        if (ordinal < 0 || ordinal >= static_cast<int>(spec.vocab.answers.size()))
          return "spec: answer ordinal out of range";
        if (!(w > 0.0)) return "spec: answer mixture weights must be positive";
        total += w;
      }
      if (total <= 0.0) return "spec: answer mixture has no mass";
    }
    if (spec.mode_filler_count < 1) return "spec: mode_filler_count must be positive";
    if (pool < m * static_cast<std::size_t>(spec.mode_filler_count))
      return "spec: routing family needs mode_filler_count fillers per candidate";
    if (spec.max_len < 4) return "spec: max_len too small for the routing family layout";
  }
  return {};
}

// =============================================================================
// Task instance
// =============================================================================

struct TaskInstance {
  TaskSpec spec;
  std::string prompt_id;
  std::uint64_t instance_seed = 0;
  TransitionTable table;

  const Vocab& vocab() const { return spec.vocab; }
  Token gold_answer() const { return spec.gold_answer; }
  int max_len() const { return spec.max_len; }

  const std::vector<double>* row(const ContextKey& key) const {
    auto it = table.find(key);
    return it == table.end() ? nullptr : &it->second;
  }
};

// =============================================================================
// Profile construction helpers
// =============================================================================

/**
 * Logits whose softmax puts p_top on rank 1 and decays geometrically to
 * p_bottom on rank m. The decay ratio is solved by bisection; the result is
 * deterministic for fixed inputs. Requires p_top + (m-1) p_bottom < 1 and a
 * monotone outcome (the rank-2 mass may not exceed p_top).
 */
inline std::vector<double> sharp_profile_logits(int m, double p_top, double p_bottom) {
  if (m < 2) throw std::invalid_argument("sharp_profile_logits: m must be at least 2");
  if (!(p_bottom > 0.0 && p_bottom < p_top && p_top < 1.0))
    throw std::invalid_argument("sharp_profile_logits: need 0 < p_bottom < p_top < 1");
  const double tail_target = 1.0 - p_top;
  if (!(tail_target > (m - 1) * p_bottom))
    throw std::invalid_argument("sharp_profile_logits: tail mass infeasible");

  // Tail ranks j=2..m carry A*gamma^(j-2) with A*gamma^(m-2) = p_bottom.
  auto tail_sum = [&](double gamma) {
    const double a = p_bottom * std::pow(gamma, -(m - 2));
    return a * (1.0 - std::pow(gamma, m - 1)) / (1.0 - gamma);
  };
  double lo = 1e-9, hi = 1.0 - 1e-12;
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (tail_sum(mid) > tail_target) lo = mid; else hi = mid;
  }
  const double gamma = 0.5 * (lo + hi);
  const double a = p_bottom * std::pow(gamma, -(m - 2));
  if (a > p_top) throw std::invalid_argument("sharp_profile_logits: profile would be non-monotone");

  std::vector<double> logits(static_cast<std::size_t>(m));
  logits[0] = std::log(p_top);
  for (int j = 1; j < m; ++j) logits[static_cast<std::size_t>(j)] = std::log(a) + (j - 1) * std::log(gamma);
  return logits;
}

inline std::vector<double> uniform_profile_logits(int m) {
  if (m < 1) throw std::invalid_argument("uniform_profile_logits: m must be positive");
  return std::vector<double>(static_cast<std::size_t>(m), 0.0);
}

/// Linear interpolation between two endpoint correctness values.
inline std::vector<double> correctness_endpoints(int m, double c_first, double c_last) {
  if (m < 1) throw std::invalid_argument("correctness_endpoints: m must be positive");
  std::vector<double> c(static_cast<std::size_t>(m));
  for (int r = 0; r < m; ++r) {
    const double t = (m == 1) ? 0.0 : static_cast<double>(r) / (m - 1);
    c[static_cast<std::size_t>(r)] = c_first + t * (c_last - c_first);
  }
  return c;
}

// =============================================================================
// Spec builders
// =============================================================================

struct FlatSpecParams {
  int candidates = 20;
  int fillers = 4;
  int wrong_answers = 2;
  bool include_ws_step = true;
  int max_len = 6;
  std::vector<double> profile_logits;      // length == candidates
  std::vector<double> correctness_by_rank; // length == candidates
  double accuracy_weight = 2.0;
  double format_weight = 0.2;
};

inline TaskSpec make_flat_spec(const FlatSpecParams& p) {
  TaskSpec spec;
  spec.family = TaskFamily::kFlatCorrectness;
  spec.max_len = p.max_len;
  spec.filler_count = p.fillers;
  spec.include_ws_step = p.include_ws_step;
  spec.first_token_logit_profile = p.profile_logits;
  spec.correctness_by_rank = p.correctness_by_rank;
  spec.accuracy_weight = p.accuracy_weight;
  spec.format_weight = p.format_weight;

  Vocab& v = spec.vocab;
  v.names.push_back("<think>");
  v.names.push_back("_ws");
  v.think_marker = 0;
  v.invalid = {0, 1};
  for (int i = 0; i < p.candidates; ++i) v.names.push_back("f" + std::to_string(i));
  const Token filler_base = v.size();
  for (int i = 0; i < p.fillers; ++i) v.names.push_back("s" + std::to_string(i));
  const Token answer_base = v.size();
  v.names.push_back("gold");
  for (int i = 0; i < p.wrong_answers; ++i) v.names.push_back("wrong" + std::to_string(i));
  for (Token t = answer_base; t < v.size(); ++t) v.answers.insert(t);
  spec.gold_answer = answer_base;
  (void)filler_base;

  for (int i = 0; i < p.candidates; ++i) spec.candidates_by_rank.push_back(2 + i);
  return spec;
}

struct RoutingSpecParams {
  int candidates = 20;
  int mode_fillers = 8;
  int max_len = 6;
  std::vector<double> profile_logits;  // length == candidates
  double concentration_start = 0.02;   // rank-1 filler ratio
  double concentration_end = 1.0;      // rank-m filler ratio
  int gold_mode = 0;                   // rank index whose answer is gold
  std::vector<int> mode_answer_map;    // optional; answer ordinal per rank
  double accuracy_weight = 2.0;
  double format_weight = 0.2;
};

inline TaskSpec make_routing_spec(const RoutingSpecParams& p) {
  TaskSpec spec;
  spec.family = TaskFamily::kRouting;
  spec.max_len = p.max_len;
  spec.mode_filler_count = p.mode_fillers;
  spec.first_token_logit_profile = p.profile_logits;
  spec.accuracy_weight = p.accuracy_weight;
  spec.format_weight = p.format_weight;

  Vocab& v = spec.vocab;
  v.names.push_back("<think>");
  v.names.push_back("_ws");
  v.think_marker = 0;
  v.invalid = {0, 1};
  for (int i = 0; i < p.candidates; ++i) v.names.push_back("f" + std::to_string(i));
  for (int j = 0; j < p.candidates; ++j)
    for (int i = 0; i < p.mode_fillers; ++i)
      v.names.push_back("v" + std::to_string(j) + "_" + std::to_string(i));
  const Token answer_base = v.size();
  for (int j = 0; j < p.candidates; ++j) v.names.push_back("ans" + std::to_string(j));
  for (Token t = answer_base; t < v.size(); ++t) v.answers.insert(t);

  for (int i = 0; i < p.candidates; ++i) spec.candidates_by_rank.push_back(2 + i);

  for (int r = 0; r < p.candidates; ++r) {
    AnswerMixture mix;
    const int ordinal = p.mode_answer_map.empty() ? r : p.mode_answer_map.at(static_cast<std::size_t>(r));
    mix.push_back({ordinal, 1.0});
    spec.answer_mode_map.push_back(std::move(mix));
    const double t = (p.candidates == 1) ? 0.0 : static_cast<double>(r) / (p.candidates - 1);
    spec.mode_concentration.push_back(p.concentration_start *
                                      std::pow(p.concentration_end / p.concentration_start, t));
  }
  const int gold_ordinal = p.mode_answer_map.empty()
                               ? p.gold_mode
                               : p.mode_answer_map.at(static_cast<std::size_t>(p.gold_mode));
  spec.gold_answer = answer_base + gold_ordinal;
  return spec;
}

// =============================================================================
// Instance construction
// =============================================================================

namespace detail {

/// Tokens usable as continuation fillers: valid, non-answer, non-candidate.
inline std::vector<Token> filler_pool(const TaskSpec& spec) {
  std::vector<Token> pool;
  for (Token t = 0; t < spec.vocab.size(); ++t) {
    if (spec.vocab.is_invalid(t) || spec.vocab.is_answer(t)) continue;
    if (std::find(spec.candidates_by_rank.begin(), spec.candidates_by_rank.end(), t) !=
        spec.candidates_by_rank.end())
      continue;
    pool.push_back(t);
  }
  return pool;
}

inline std::vector<Token> sorted_answers(const Vocab& v) {
  return std::vector<Token>(v.answers.begin(), v.answers.end());
}

inline std::vector<double> softmax_of(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& x : p) x /= z;
  return p;
}

/// Halving weights (1/2, 1/4, ..., last repeated); sums to exactly 1.
inline std::vector<double> dyadic_weights(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  double unit = 0.5;
  for (int i = 0; i < n - 1; ++i, unit *= 0.5) w[static_cast<std::size_t>(i)] = unit;
  w[static_cast<std::size_t>(n - 1)] = (n == 1) ? 1.0 : w[static_cast<std::size_t>(n - 2)];
  return w;
}

/// Assigns `weights` to `slots` under a seeded permutation.
inline void scatter_row(std::vector<double>& row, const std::vector<Token>& slots,
                        std::vector<double> weights, Stream& stream) {
  const auto order = stream.sample_without_replacement(slots.size(), slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i)
    row[static_cast<std::size_t>(slots[order[i]])] = weights[i];
}

/**
 * Answer row with gold mass exactly c. The wrong mass 1-c is split across
 * wrong answers by repeated Sterbenz-exact subtraction so the row sums to
 * exactly 1.0 and normalization cannot perturb c.
 */
inline void fill_answer_row(std::vector<double>& row, Token gold, const std::vector<Token>& wrongs,
                            double c, Stream& stream) {
  row[static_cast<std::size_t>(gold)] = c;
  double remaining = 1.0 - c;
  for (std::size_t i = 0; i + 1 < wrongs.size(); ++i) {
    const double u = 0.5 + 0.5 * stream.uniform();  // in [0.5, 1): keeps the split Sterbenz-exact
    const double part = remaining * u;
    row[static_cast<std::size_t>(wrongs[i])] = part;
    remaining -= part;
  }
  row[static_cast<std::size_t>(wrongs.back())] = remaining;
}

inline void build_flat_table(TaskInstance& inst, Stream& stream) {
  const TaskSpec& spec = inst.spec;
  const Vocab& v = spec.vocab;
  const std::size_t vs = static_cast<std::size_t>(v.size());
  const int m = static_cast<int>(spec.candidates_by_rank.size());

  const std::vector<Token> fillers = filler_pool(spec);
  std::vector<Token> wrongs;
  for (Token t : v.answers)
    if (t != spec.gold_answer) wrongs.push_back(t);

  {
    std::vector<double> row(vs, 0.0);
    const auto probs = softmax_of(spec.first_token_logit_profile);
    for (int r = 0; r < m; ++r)
      row[static_cast<std::size_t>(spec.candidates_by_rank[static_cast<std::size_t>(r)])] =
          probs[static_cast<std::size_t>(r)];
    inst.table[start_context(v)] = std::move(row);
  }

  const Token ws = 1;
  for (int r = 0; r < m; ++r) {
    const Token f = spec.candidates_by_rank[static_cast<std::size_t>(r)];
    const double c = spec.correctness_by_rank[static_cast<std::size_t>(r)];

    {
      std::vector<double> row(vs, 0.0);
      auto weights = dyadic_weights(static_cast<int>(fillers.size()));
      if (spec.include_ws_step) {
        // 1/4 of the mass detours through the whitespace filler first.
        for (double& w : weights) w *= 0.75;
        row[static_cast<std::size_t>(ws)] = 0.25;
      }
      scatter_row(row, fillers, std::move(weights), stream);
      inst.table[ContextKey{f, f}] = std::move(row);
    }
    if (spec.include_ws_step) {
      std::vector<double> row(vs, 0.0);
      scatter_row(row, fillers, dyadic_weights(static_cast<int>(fillers.size())), stream);
      inst.table[ContextKey{f, ws}] = std::move(row);
    }
    for (Token s : fillers) {
      std::vector<double> row(vs, 0.0);
      fill_answer_row(row, spec.gold_answer, wrongs, c, stream);
      inst.table[ContextKey{f, s}] = std::move(row);
    }
  }
}

inline void build_routing_table(TaskInstance& inst, Stream& stream) {
  const TaskSpec& spec = inst.spec;
  const Vocab& v = spec.vocab;
  const std::size_t vs = static_cast<std::size_t>(v.size());
  const int m = static_cast<int>(spec.candidates_by_rank.size());
  const int mf = spec.mode_filler_count;
  const std::vector<Token> pool = filler_pool(spec);
  const std::vector<Token> answers = sorted_answers(v);

  {
    std::vector<double> row(vs, 0.0);
    const auto probs = softmax_of(spec.first_token_logit_profile);
    for (int r = 0; r < m; ++r)
      row[static_cast<std::size_t>(spec.candidates_by_rank[static_cast<std::size_t>(r)])] =
          probs[static_cast<std::size_t>(r)];
    inst.table[start_context(v)] = std::move(row);
  }

  for (int r = 0; r < m; ++r) {
    const Token f = spec.candidates_by_rank[static_cast<std::size_t>(r)];
    std::vector<Token> mode_fillers;
    for (int i = 0; i < mf; ++i)
      mode_fillers.push_back(pool.at(static_cast<std::size_t>(r * mf + i)));

    {
      // Geometric filler weights; ratio 1 means uniform.
      const double beta = spec.mode_concentration[static_cast<std::size_t>(r)];
      std::vector<double> weights(static_cast<std::size_t>(mf));
      double z = 0.0, w = 1.0;
      for (int i = 0; i < mf; ++i, w *= beta) {
        weights[static_cast<std::size_t>(i)] = w;
        z += w;
      }
      for (double& x : weights) x /= z;
      std::vector<double> row(vs, 0.0);
      scatter_row(row, mode_fillers, std::move(weights), stream);
      inst.table[ContextKey{f, f}] = std::move(row);
    }

    std::vector<double> answer_row(vs, 0.0);
    double z = 0.0;
    for (const auto& [ordinal, weight] : spec.answer_mode_map[static_cast<std::size_t>(r)]) z += weight;
    for (const auto& [ordinal, weight] : spec.answer_mode_map[static_cast<std::size_t>(r)])
      answer_row[static_cast<std::size_t>(answers[static_cast<std::size_t>(ordinal)])] = weight / z;
    for (Token s : mode_fillers) inst.table[ContextKey{f, s}] = answer_row;
  }
}

}  // namespace detail

/// Materializes the realized transition table. Pure in (spec, prompt_id,
/// instance_seed): identical inputs give identical tables.
inline TaskInstance build_task(const TaskSpec& spec, const std::string& prompt_id,
                               std::uint64_t instance_seed) {
  if (auto err = validate_spec(spec); !err.empty()) throw std::invalid_argument(err);
  TaskInstance inst;
  inst.spec = spec;
  inst.prompt_id = prompt_id;
  inst.instance_seed = instance_seed;
  Stream stream = derive_stream(instance_seed, 0, prompt_id, 0, StreamPurpose::kTaskBuild);
  if (spec.family == TaskFamily::kFlatCorrectness) {
    detail::build_flat_table(inst, stream);
  } else {
    detail::build_routing_table(inst, stream);
  }
  return inst;
}

// =============================================================================
// Verifier
// =============================================================================

struct VerifierResult {
  bool format_ok = false;
  bool answer_correct = false;
  double reward = 0.0;
};

/**
 * Exact scoring. Format requires the think-marker opener and exactly one
 * answer token sitting at the end of the sequence; correctness additionally
 * requires that terminal answer to be the gold token. The reward is the
 * weighted indicator sum, computed as written.
 */
inline VerifierResult verify(const TaskInstance& inst, const std::vector<Token>& tokens) {
  const Vocab& v = inst.vocab();
  VerifierResult res;
  if (!tokens.empty() && tokens.front() == v.think_marker) {
    int answer_count = 0;
    for (Token t : tokens)
      if (v.is_answer(t)) ++answer_count;
    res.format_ok = answer_count == 1 && v.is_answer(tokens.back());
  }
  res.answer_correct = res.format_ok && tokens.back() == inst.gold_answer();
  res.reward = inst.spec.accuracy_weight * (res.answer_correct ? 1.0 : 0.0) +
               inst.spec.format_weight * (res.format_ok ? 1.0 : 0.0);
  return res;
}

/// First token after the think marker that is not in the invalid set.
/// Tokens before the marker are ignored; returns nullopt if the marker is
/// absent or nothing semantic follows it.
inline std::optional<Token> first_semantic_token(const Vocab& v, const std::vector<Token>& tokens) {
  std::size_t i = 0;
  while (i < tokens.size() && tokens[i] != v.think_marker) ++i;
  if (i == tokens.size()) return std::nullopt;
  for (++i; i < tokens.size(); ++i) {
    if (!v.is_invalid(tokens[i])) return tokens[i];
  }
  return std::nullopt;
}

}  // namespace reftlab
