#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "reftlab/rng.hpp"

using namespace reftlab;

TEST_CASE("splitmix64 matches the reference vectors") {
  // First three outputs from state 0 of the reference implementation.
  std::uint64_t s = 0;
  REQUIRE(splitmix64(s) == 0xE220A8397B1DCDAFULL);
  REQUIRE(splitmix64(s) == 0x6E789E6AA1B965F4ULL);
  REQUIRE(splitmix64(s) == 0x06C45D188009454FULL);
}

TEST_CASE("mix_key is order sensitive") {
  const std::uint64_t a = mix_key(mix_key(1, 2), 3);
  const std::uint64_t b = mix_key(mix_key(1, 3), 2);
  REQUIRE(a != b);
}

TEST_CASE("hash_string is FNV-1a") {
  REQUIRE(hash_string("") == 0xCBF29CE484222325ULL);
  REQUIRE(hash_string("a") == 0xAF63DC4C8601EC8CULL);
  REQUIRE(hash_string("prompt_0") != hash_string("prompt_1"));
}

TEST_CASE("streams are reproducible and key-separated") {
  Stream a(42), b(42), c(43);
  bool any_diff = false;
  for (int i = 0; i < 64; ++i) {
    const std::uint64_t va = a.next_u64();
    REQUIRE(va == b.next_u64());
    if (va != c.next_u64()) any_diff = true;
  }
  REQUIRE(any_diff);
}

TEST_CASE("uniform doubles live in the half-open unit interval") {
  Stream s(7);
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  // Mean of U(0,1): 0.5, sigma = 1/sqrt(12 n).
  const double sigma = 1.0 / std::sqrt(12.0 * n);
  REQUIRE(std::abs(sum / n - 0.5) < 3.0 * sigma);
}

TEST_CASE("uniform_int is range-checked and unbiased") {
  Stream s(9);
  REQUIRE_THROWS_AS(s.uniform_int(0), std::invalid_argument);
  const std::uint64_t n = 7;
  const int draws = 70000;
  std::vector<int> counts(n, 0);
  for (int i = 0; i < draws; ++i) {
    const std::uint64_t v = s.uniform_int(n);
    REQUIRE(v < n);
    ++counts[static_cast<std::size_t>(v)];
  }
  const double p = 1.0 / static_cast<double>(n);
  const double sigma = std::sqrt(p * (1.0 - p) * draws);
  for (std::uint64_t i = 0; i < n; ++i)
    REQUIRE(std::abs(counts[static_cast<std::size_t>(i)] - draws * p) < 3.0 * sigma);
}

TEST_CASE("categorical follows the probability vector") {
  Stream s(13);
  const std::vector<double> probs{0.25, 0.5, 0.25};
  const int draws = 60000;
  std::vector<int> counts(probs.size(), 0);
  for (int i = 0; i < draws; ++i) ++counts[s.categorical(probs)];
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double sigma = std::sqrt(probs[i] * (1.0 - probs[i]) * draws);
    REQUIRE(std::abs(counts[i] - draws * probs[i]) < 3.0 * sigma);
  }
}

TEST_CASE("categorical never lands on zero-probability entries") {
  Stream s(17);
  const std::vector<double> probs{0.5, 0.0, 0.5, 0.0};
  for (int i = 0; i < 10000; ++i) {
    const std::size_t v = s.categorical(probs);
    REQUIRE((v == 0 || v == 2));
  }
  const std::vector<double> zeros{0.0, 0.0};
  REQUIRE_THROWS_AS(s.categorical(zeros), std::invalid_argument);
  REQUIRE_THROWS_AS(s.categorical(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("sample_without_replacement returns distinct in-range indices") {
  Stream s(21);
  for (int rep = 0; rep < 200; ++rep) {
    const auto subset = s.sample_without_replacement(10, 4);
    REQUIRE(subset.size() == 4);
    std::set<std::size_t> uniq(subset.begin(), subset.end());
    REQUIRE(uniq.size() == 4);
    for (std::size_t v : subset) REQUIRE(v < 10);
  }
  REQUIRE_THROWS_AS(s.sample_without_replacement(3, 4), std::invalid_argument);
  const auto full = s.sample_without_replacement(6, 6);
  REQUIRE(std::set<std::size_t>(full.begin(), full.end()).size() == 6);
}

TEST_CASE("subset membership is uniform at k over n") {
  Stream s(23);
  const std::size_t n = 5, k = 2;
  const int reps = 50000;
  std::vector<int> counts(n, 0);
  for (int r = 0; r < reps; ++r)
    for (std::size_t v : s.sample_without_replacement(n, k)) ++counts[v];
  const double p = static_cast<double>(k) / static_cast<double>(n);
  const double sigma = std::sqrt(p * (1.0 - p) * reps);
  for (std::size_t i = 0; i < n; ++i)
    REQUIRE(std::abs(counts[i] - reps * p) < 3.0 * sigma);
}

TEST_CASE("derived streams are stable and coordinate-separated") {
  Stream a = derive_stream(5, 10, "prompt_0", 1, StreamPurpose::kRollout, 0);
  Stream b = derive_stream(5, 10, "prompt_0", 1, StreamPurpose::kRollout, 0);
  REQUIRE(a.next_u64() == b.next_u64());
  REQUIRE(a.next_u64() == b.next_u64());

  const std::uint64_t base = derive_stream(5, 10, "prompt_0", 1, StreamPurpose::kRollout).next_u64();
  REQUIRE(base != derive_stream(6, 10, "prompt_0", 1, StreamPurpose::kRollout).next_u64());
  REQUIRE(base != derive_stream(5, 11, "prompt_0", 1, StreamPurpose::kRollout).next_u64());
  REQUIRE(base != derive_stream(5, 10, "prompt_1", 1, StreamPurpose::kRollout).next_u64());
  REQUIRE(base != derive_stream(5, 10, "prompt_0", 2, StreamPurpose::kRollout).next_u64());
  REQUIRE(base != derive_stream(5, 10, "prompt_0", 1, StreamPurpose::kResample).next_u64());
  REQUIRE(base != derive_stream(5, 10, "prompt_0", 1, StreamPurpose::kRollout, 1).next_u64());
}
