#pragma once

/**
 * Tabular autoregressive policy.
 *
 * The policy is a map from (prompt, context window) to a logit row over the
 * vocabulary. Rows present in theta are the learned parameters; contexts
 * without a theta row fall back to the task instance's realized transition
 * table, which plays the role of the initial policy. Rows are materialized
 * into theta lazily, only when an update actually needs to move them, so an
 * untouched policy stays bit-identical to the initial one.
 *
 * Log-probabilities of impossible steps are -inf, never an error; gradients
 * of log softmax stay finite everywhere and are computed in closed form.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "reftlab/rng.hpp"
#include "reftlab/task.hpp"
#include "reftlab/vocab.hpp"

namespace reftlab {

/// Finite stand-in for log(0) when a realized row is materialized into
/// theta. exp(-1e4) underflows to exactly 0.0, so structural zeros survive
/// materialization, while every stored logit stays finite.
inline constexpr double kStructuralZeroLogit = -1.0e4;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// =============================================================================
// Parameters
// =============================================================================

struct PolicyParams {
  /// prompt id -> context -> logit row (dense over the vocabulary).
  std::map<std::string, std::map<ContextKey, std::vector<double>>> theta;

  /// Monotone update counter; bumped only when an update modifies theta.
  std::uint64_t version = 0;

  const std::vector<double>* row(const std::string& prompt_id, const ContextKey& ctx) const {
    auto p = theta.find(prompt_id);
    if (p == theta.end()) return nullptr;
    auto r = p->second.find(ctx);
    return r == p->second.end() ? nullptr : &r->second;
  }
};

// =============================================================================
// Distributions
// =============================================================================

struct TokenDistribution {
  std::vector<double> probs;     // sums to 1 within 1e-12
  std::vector<double> logprobs;  // -inf at zero-probability tokens
};

namespace detail {

/// Softmax of logits/temperature with matching log-probabilities.
/// Entries of -inf are legal and produce exact zeros.
inline TokenDistribution softmax_distribution(const std::vector<double>& logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("distribution: temperature must be positive");
  double mx = kNegInf;
  for (double l : logits) mx = std::max(mx, l);
  if (mx == kNegInf) throw std::domain_error("distribution: context has no continuation mass");
  TokenDistribution d;
  d.probs.resize(logits.size());
  d.logprobs.resize(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double shifted = (logits[i] - mx) / temperature;
    d.probs[i] = std::exp(shifted);
    d.logprobs[i] = shifted;
    z += d.probs[i];
  }
  const double log_z = std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    d.probs[i] /= z;
    d.logprobs[i] = d.probs[i] == 0.0 ? kNegInf : d.logprobs[i] - log_z;
  }
  return d;
}

/// Realized-table weights viewed as logits (log of weights, -inf at zeros).
inline std::vector<double> weights_as_logits(const std::vector<double>& weights) {
  std::vector<double> logits(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i)
    logits[i] = weights[i] > 0.0 ? std::log(weights[i]) : kNegInf;
  return logits;
}

}  // namespace detail

/**
 * Next-token distribution at a context. Theta rows take precedence; unknown
 * contexts fall back to the instance's realized table. Contexts absent from
 * both have no defined continuation and raise.
 */
inline TokenDistribution distribution(const PolicyParams& params, const TaskInstance& inst,
                                      const ContextKey& ctx, double temperature) {
  if (const auto* theta_row = params.row(inst.prompt_id, ctx))
    return detail::softmax_distribution(*theta_row, temperature);
  if (const auto* weights = inst.row(ctx))
    return detail::softmax_distribution(detail::weights_as_logits(*weights), temperature);
  throw std::domain_error("distribution: unknown context for prompt " + inst.prompt_id);
}

inline bool has_row(const PolicyParams& params, const TaskInstance& inst, const ContextKey& ctx) {
  return params.row(inst.prompt_id, ctx) != nullptr || inst.row(ctx) != nullptr;
}

/// Shannon entropy in nats; zero-probability tokens contribute nothing.
inline double entropy(const TokenDistribution& d) {
  double h = 0.0;
  for (std::size_t i = 0; i < d.probs.size(); ++i)
    if (d.probs[i] > 0.0) h -= d.probs[i] * d.logprobs[i];
  return h;
}

/**
 * Nucleus truncation: keeps the smallest prefix of tokens (by descending
 * probability, ties by index) whose mass reaches p, zeroes the rest, and
 * renormalizes. p = 1 is an exact no-op.
 */
inline TokenDistribution top_p_transform(TokenDistribution d, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("top_p_transform: p must be in (0, 1]");
  if (p == 1.0) return d;
  std::vector<std::size_t> order(d.probs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (d.probs[a] != d.probs[b]) return d.probs[a] > d.probs[b];
    return a < b;
  });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < order.size() && cum < p) cum += d.probs[order[keep++]];
  std::vector<bool> kept(d.probs.size(), false);
  for (std::size_t i = 0; i < keep; ++i) kept[order[i]] = true;
  double z = 0.0;
  for (std::size_t i = 0; i < d.probs.size(); ++i) {
    if (!kept[i]) d.probs[i] = 0.0;
    z += d.probs[i];
  }
  for (std::size_t i = 0; i < d.probs.size(); ++i) {
    d.probs[i] /= z;
    d.logprobs[i] = d.probs[i] == 0.0 ? kNegInf : std::log(d.probs[i]);
  }
  return d;
}

// =============================================================================
// Opener candidates
// =============================================================================

/**
 * Top-n valid tokens by probability at the opener position, evaluated at
 * temperature 1 on the untruncated distribution. Ties break by ascending
 * token index. n must not exceed the valid-token count.
 */
inline std::vector<Token> top_n_first_tokens(const PolicyParams& params, const TaskInstance& inst,
                                             int n) {
  const Vocab& v = inst.vocab();
  if (n < 1) throw std::invalid_argument("top_n_first_tokens: n must be positive");
  if (n > v.valid_count())
    throw std::invalid_argument("top_n_first_tokens: n exceeds the valid-token count");
  const TokenDistribution d = distribution(params, inst, start_context(v), 1.0);
  std::vector<Token> order;
  for (Token t = 0; t < v.size(); ++t)
    if (!v.is_invalid(t)) order.push_back(t);
  std::sort(order.begin(), order.end(), [&](Token a, Token b) {
    const double pa = d.probs[static_cast<std::size_t>(a)];
    const double pb = d.probs[static_cast<std::size_t>(b)];
    if (pa != pb) return pa > pb;
    return a < b;
  });
  order.resize(static_cast<std::size_t>(n));
  return order;
}

// =============================================================================
// Sampling and trajectory scores
// =============================================================================

inline Token sample_token(const TokenDistribution& d, Stream& stream) {
  return static_cast<Token>(stream.categorical(d.probs));
}

/// Context window at one sampled position: the opener is the first token
/// after the marker (none at the opener position itself), prev is the
/// immediately preceding token.
inline ContextKey context_at(const std::vector<Token>& tokens, std::size_t pos) {
  if (pos == 0 || pos > tokens.size())
    throw std::invalid_argument("context_at: position must address a sampled token");
  return ContextKey{pos == 1 ? kNoToken : tokens[1], tokens[pos - 1]};
}

/**
 * Per-position log-probabilities of a trajectory (positions 1..len-1; the
 * marker is given, not scored). Missing contexts and zero-probability steps
 * yield -inf entries.
 */
inline std::vector<double> per_token_logprobs(const PolicyParams& params, const TaskInstance& inst,
                                              const std::vector<Token>& tokens, double temperature) {
  if (tokens.empty() || tokens.front() != inst.vocab().think_marker)
    throw std::invalid_argument("per_token_logprobs: trajectory must begin with the think marker");
  std::vector<double> out;
  out.reserve(tokens.size() - 1);
  for (std::size_t pos = 1; pos < tokens.size(); ++pos) {
    const ContextKey ctx = context_at(tokens, pos);
    if (!has_row(params, inst, ctx)) {
      out.push_back(kNegInf);
      continue;
    }
    const TokenDistribution d = distribution(params, inst, ctx, temperature);
    out.push_back(d.logprobs[static_cast<std::size_t>(tokens[pos])]);
  }
  return out;
}

/// Total trajectory log-probability; additive over positions, -inf if any
/// step is impossible.
inline double logprob_trajectory(const PolicyParams& params, const TaskInstance& inst,
                                 const std::vector<Token>& tokens, double temperature) {
  double sum = 0.0;
  for (double lp : per_token_logprobs(params, inst, tokens, temperature)) sum += lp;
  return sum;
}

/// Log-probability of the opener alone (position 1).
inline double logprob_first_token(const PolicyParams& params, const TaskInstance& inst,
                                  const std::vector<Token>& tokens, double temperature) {
  if (tokens.size() < 2) throw std::invalid_argument("logprob_first_token: no opener present");
  const TokenDistribution d = distribution(params, inst, start_context(inst.vocab()), temperature);
  return d.logprobs[static_cast<std::size_t>(tokens[1])];
}

/// Log-probability of the continuation after the opener (positions 2..).
inline double logprob_continuation(const PolicyParams& params, const TaskInstance& inst,
                                   const std::vector<Token>& tokens, double temperature) {
  const auto steps = per_token_logprobs(params, inst, tokens, temperature);
  double sum = 0.0;
  for (std::size_t i = 1; i < steps.size(); ++i) sum += steps[i];
  return sum;
}

// =============================================================================
// Gradients
// =============================================================================

/// Sparse gradient with respect to theta logit rows of a single prompt.
using GradMap = std::map<ContextKey, std::vector<double>>;

/**
 * Exact score-function gradient of log pi(trajectory) with respect to the
 * logit rows it visits: (one-hot(token) - probs) / temperature per position,
 * accumulated by context. Rows sum to zero by construction. Well-defined
 * even where the taken token has zero probability.
 */
inline GradMap grad_logprob(const PolicyParams& params, const TaskInstance& inst,
                            const std::vector<Token>& tokens, double temperature) {
  if (tokens.empty() || tokens.front() != inst.vocab().think_marker)
    throw std::invalid_argument("grad_logprob: trajectory must begin with the think marker");
  GradMap grad;
  const std::size_t vs = static_cast<std::size_t>(inst.vocab().size());
  for (std::size_t pos = 1; pos < tokens.size(); ++pos) {
    const ContextKey ctx = context_at(tokens, pos);
    if (!has_row(params, inst, ctx)) continue;  // no parameters to move
    const TokenDistribution d = distribution(params, inst, ctx, temperature);
    auto& row = grad.try_emplace(ctx, vs, 0.0).first->second;
    for (std::size_t i = 0; i < vs; ++i) row[i] -= d.probs[i] / temperature;
    row[static_cast<std::size_t>(tokens[pos])] += 1.0 / temperature;
  }
  return grad;
}

/**
 * Gradient-ascent update on one prompt's rows. Rows are materialized from
 * the realized table on first touch (log of weights, structural zeros at
 * kStructuralZeroLogit). Rows whose gradient is identically zero are
 * skipped entirely, leaving theta bit-identical. Returns true if any
 * parameter changed.
 */
inline bool apply_update(PolicyParams& params, const TaskInstance& inst, const GradMap& grad,
                         double learning_rate) {
  if (!std::isfinite(learning_rate)) throw std::invalid_argument("apply_update: learning rate must be finite");
  bool modified = false;
  for (const auto& [ctx, g] : grad) {
    bool any = false;
    for (double x : g) {
      if (!std::isfinite(x)) throw std::invalid_argument("apply_update: non-finite gradient entry");
      if (x != 0.0) any = true;
    }
    if (!any) continue;
    auto& prompt_rows = params.theta[inst.prompt_id];
    auto it = prompt_rows.find(ctx);
    if (it == prompt_rows.end()) {
      const auto* weights = inst.row(ctx);
      if (weights == nullptr)
        throw std::domain_error("apply_update: gradient at unknown context for prompt " + inst.prompt_id);
      std::vector<double> logits(weights->size());
      for (std::size_t i = 0; i < weights->size(); ++i)
        logits[i] = (*weights)[i] > 0.0 ? std::log((*weights)[i]) : kStructuralZeroLogit;
      it = prompt_rows.emplace(ctx, std::move(logits)).first;
    }
    auto& row = it->second;
    for (std::size_t i = 0; i < row.size(); ++i) row[i] += learning_rate * g[i];
    modified = true;
  }
  return modified;
}

// =============================================================================
// Serialization
// =============================================================================

/// Flat text checkpoint. %.17g round-trips doubles exactly.
inline void save_policy(const PolicyParams& params, std::ostream& os) {
  os << "reftlab-policy-v1\n";
  os << "version " << params.version << "\n";
  char buf[64];
  for (const auto& [prompt_id, rows] : params.theta) {
    os << "prompt " << prompt_id << "\n";
    for (const auto& [ctx, logits] : rows) {
      os << "row " << ctx.opener << " " << ctx.prev;
      for (double l : logits) {
        std::snprintf(buf, sizeof buf, "%.17g", l);
        os << " " << buf;
      }
      os << "\n";
    }
  }
}

inline PolicyParams load_policy(std::istream& is) {
  PolicyParams params;
  std::string line;
  if (!std::getline(is, line) || line != "reftlab-policy-v1")
    throw std::runtime_error("load_policy: bad header");
  std::string current_prompt;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("version ", 0) == 0) {
      params.version = std::stoull(line.substr(8));
    } else if (line.rfind("prompt ", 0) == 0) {
      current_prompt = line.substr(7);
    } else if (line.rfind("row ", 0) == 0) {
      if (current_prompt.empty()) throw std::runtime_error("load_policy: row before prompt");
      const char* p = line.c_str() + 4;
      char* end = nullptr;
      const long opener = std::strtol(p, &end, 10);
      p = end;
      const long prev = std::strtol(p, &end, 10);
      p = end;
      std::vector<double> logits;
      for (;;) {
        double val = std::strtod(p, &end);
        if (end == p) break;
        logits.push_back(val);
        p = end;
      }
      if (logits.empty()) throw std::runtime_error("load_policy: empty logit row");
      params.theta[current_prompt][ContextKey{static_cast<Token>(opener), static_cast<Token>(prev)}] =
          std::move(logits);
    } else {
      throw std::runtime_error("load_policy: unrecognized line: " + line);
    }
  }
  return params;
}

inline void save_policy_file(const PolicyParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("save_policy_file: cannot open " + path);
  save_policy(params, os);
}

inline PolicyParams load_policy_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_policy_file: cannot open " + path);
  return load_policy(is);
}

}  // namespace reftlab
