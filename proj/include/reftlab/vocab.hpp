#pragma once

/**
 * Token vocabulary for the synthetic environments.
 *
 * Tokens are dense integer ids into an ordered name table. Three structural
 * roles exist: the think marker that opens every rollout, invalid tokens
 * (markers and whitespace-like glue that never count as a semantic opener),
 * and answer tokens that terminate a rollout.
 */

#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace reftlab {

using Token = std::int32_t;

/// Sentinel for "no token" (empty context slot, absent opener).
inline constexpr Token kNoToken = -1;

struct Vocab {
  std::vector<std::string> names;  // ordered token identifiers
  std::set<Token> invalid;         // never a semantic opener
  std::set<Token> answers;         // terminal answer tokens
  Token think_marker = kNoToken;

  Token size() const { return static_cast<Token>(names.size()); }

  bool is_invalid(Token t) const { return invalid.count(t) != 0; }
  bool is_answer(Token t) const { return answers.count(t) != 0; }

  /// Valid tokens are candidates for the semantic opener role.
  Token valid_count() const { return size() - static_cast<Token>(invalid.size()); }

  const std::string& name(Token t) const { return names.at(static_cast<std::size_t>(t)); }
};

/// Checks the structural rules shared by every environment.
/// Returns an empty string on success, else a diagnostic.
inline std::string validate_vocab(const Vocab& v) {
  if (v.names.size() < 4) return "vocab: needs at least 4 tokens";
  if (v.think_marker < 0 || v.think_marker >= v.size()) return "vocab: think_marker out of range";
  if (!v.is_invalid(v.think_marker)) return "vocab: think_marker must be in the invalid set";
  if (v.is_answer(v.think_marker)) return "vocab: think_marker cannot be an answer token";
  if (v.answers.empty()) return "vocab: needs at least one answer token";
  for (Token t : v.invalid) {
    if (t < 0 || t >= v.size()) return "vocab: invalid-set token out of range";
    if (v.is_answer(t)) return "vocab: answer tokens cannot be in the invalid set";
  }
  for (Token t : v.answers) {
    if (t < 0 || t >= v.size()) return "vocab: answer token out of range";
  }
  return {};
}

}  // namespace reftlab
