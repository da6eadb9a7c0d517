#pragma once

/**
 * Group-relative advantages.
 *
 * Rewards inside one rollout group are centered by the group mean and
 * scaled by the population standard deviation plus a small epsilon. A group
 * whose rewards are all equal carries no learning signal; that case is
 * detected exactly and produces advantages of exactly zero rather than
 * rounding residue.
 */

#include <cmath>
#include <stdexcept>
#include <vector>

namespace reftlab {

struct AdvantageVector {
  std::vector<double> values;
  double mean = 0.0;
  double stddev = 0.0;  // population unless the corrupted hook is engaged
};

/**
 * (r - mean) / (stddev + epsilon) per reward. bessel_corrected_std exists
 * only as a negative-control hook for the oracle battery; the contract is
 * population variance and every caller in the library leaves it false.
 */
inline AdvantageVector group_advantages(const std::vector<double>& rewards, double epsilon = 1e-6,
                                        bool bessel_corrected_std = false) {
  if (rewards.empty()) throw std::invalid_argument("group_advantages: empty reward list");
  if (!(epsilon >= 0.0)) throw std::invalid_argument("group_advantages: epsilon must be nonnegative");
  for (double r : rewards)
    if (!std::isfinite(r)) throw std::invalid_argument("group_advantages: non-finite reward");

  AdvantageVector out;
  out.values.resize(rewards.size());

  bool all_equal = true;
  for (double r : rewards)
    if (r != rewards.front()) all_equal = false;
  const double n = static_cast<double>(rewards.size());
  double sum = 0.0;
  for (double r : rewards) sum += r;
  out.mean = sum / n;
  if (all_equal) {
    out.mean = rewards.front();
    out.stddev = 0.0;
    return out;  // values already exactly zero
  }

  double sq = 0.0;
  for (double r : rewards) sq += (r - out.mean) * (r - out.mean);
  const double denom_n = bessel_corrected_std && rewards.size() > 1 ? n - 1.0 : n;
  out.stddev = std::sqrt(sq / denom_n);
  for (std::size_t i = 0; i < rewards.size(); ++i)
    out.values[i] = (rewards[i] - out.mean) / (out.stddev + epsilon);
  return out;
}

}  // namespace reftlab
