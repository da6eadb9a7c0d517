#pragma once

/**
 * Deterministic random streams.
 *
 * Every stochastic operation in the library draws from a Stream whose state
 * is derived, not shared: a stream key is folded from the master seed plus
 * the coordinates that identify the draw site (step, prompt, strategy,
 * replicate). Two runs with the same config and master seed therefore
 * consume identical randomness regardless of evaluation order, and distinct
 * sites never alias each other's streams.
 *
 * std::mt19937_64 is bit-specified but the standard distributions are not,
 * so uniform doubles and categorical draws are implemented explicitly.
 */

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace reftlab {

// =============================================================================
// Key mixing
// =============================================================================

/// splitmix64 step; the de-facto standard 64-bit finalizer/mixer.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Folds one field into a derivation key. Order-sensitive by design.
inline std::uint64_t mix_key(std::uint64_t key, std::uint64_t field) {
  std::uint64_t s = key ^ (field + 0x9E3779B97F4A7C15ULL);
  return splitmix64(s);
}

/// FNV-1a for string identifiers (prompt ids).
inline std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// =============================================================================
// Stream
// =============================================================================

/// xoshiro256** seeded via splitmix64 expansion of a 64-bit key.
class Stream {
 public:
  explicit Stream(std::uint64_t key) {
    std::uint64_t s = key;
    for (auto& word : state_) word = splitmix64(s);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
    // Rejection sampling to kill modulo bias; at most a few retries.
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  /**
   * Samples an index from an explicit probability vector by CDF inversion
   * in index order. Probabilities must be nonnegative; they are assumed to
   * sum to ~1 and the final positive-mass index absorbs any rounding slack.
   */
  std::size_t categorical(std::span<const double> probs) {
    if (probs.empty()) throw std::invalid_argument("categorical: empty probs");
    const double u = uniform();
    double cum = 0.0;
    std::size_t last_positive = probs.size();
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] > 0.0) last_positive = i;
      cum += probs[i];
      if (u < cum) return i;
    }
    if (last_positive == probs.size())
      throw std::invalid_argument("categorical: all probabilities zero");
    return last_positive;
  }

  /**
   * Uniform k-subset of {0,...,n-1} without replacement via partial
   * Fisher-Yates. Returned in draw order (itself uniform over ordered
   * k-permutations, so the set is uniform over k-subsets).
   */
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(uniform_int(n - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t state_[4] = {};
};

// =============================================================================
// Stream derivation
// =============================================================================

/// Purpose tags keep unrelated draw sites on disjoint streams.
enum class StreamPurpose : std::uint64_t {
  kTaskBuild = 1,
  kRollout = 2,
  kReftSelect = 3,
  kResample = 4,
  kEval = 5,
  kOracle = 6,
};

/// Derives the stream for one rollout group.
/// Keyed by (master seed, step, prompt id, strategy id, replicate).
inline Stream derive_stream(std::uint64_t master_seed, std::uint64_t step,
                            const std::string& prompt_id, std::uint64_t strategy_id,
                            StreamPurpose purpose, std::uint64_t replicate = 0) {
  std::uint64_t k = mix_key(0x5245465441423031ULL, master_seed);
  k = mix_key(k, step);
  k = mix_key(k, hash_string(prompt_id));
  k = mix_key(k, strategy_id);
  k = mix_key(k, static_cast<std::uint64_t>(purpose));
  k = mix_key(k, replicate);
  return Stream(k);
}

}  // namespace reftlab
