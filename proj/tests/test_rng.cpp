#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "vagmm/rng.hpp"

using vagmm::Draw;
using vagmm::KeyedStream;

TEST_CASE("keyed streams are deterministic and key-separated", "[rng]") {
  KeyedStream a{1, 2, 3};
  KeyedStream b{1, 2, 3};
  KeyedStream c{1, 2, 4};
  const std::uint64_t a1 = a.next_u64();
  REQUIRE(a1 == b.next_u64());
  REQUIRE(a.next_u64() == b.next_u64());
  REQUIRE(a1 != c.next_u64());
}

TEST_CASE("stream values are stable across runs", "[rng]") {
  // Frozen snapshot guarding against accidental changes to the hashing or
  // stepping logic; any change here silently breaks artifact reproducibility.
  KeyedStream s{1, 2, 3};
  REQUIRE(s.next_u64() == 1798427598722574580ULL);
  REQUIRE(s.next_u64() == 16343706548578570427ULL);
  REQUIRE(s.next_u64() == 10896376101870526188ULL);
  KeyedStream u{1, 2, 3};
  REQUIRE(u.uniform() == Catch::Approx(0.097492955479645205).epsilon(1e-15));
  KeyedStream mu{7, 0, 0, 4, static_cast<std::uint64_t>(Draw::mu)};
  REQUIRE(mu.next_u64() == 13405390480309037344ULL);
}

TEST_CASE("draws do not depend on other streams having been read", "[rng]") {
  // Counter-based construction: the value of a stream is a pure function of
  // its key, so creating/consuming unrelated streams cannot perturb it.
  KeyedStream probe1{42, 7, 9};
  const std::uint64_t expected = probe1.next_u64();
  for (std::uint64_t k = 0; k < 50; ++k) KeyedStream{k, k, k}.next_u64();
  KeyedStream probe2{42, 7, 9};
  REQUIRE(probe2.next_u64() == expected);
}

TEST_CASE("uniform lies in [0,1) and fills the range", "[rng]") {
  KeyedStream s{2024, 1};
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = s.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  REQUIRE(lo < 0.01);
  REQUIRE(hi > 0.99);
}

TEST_CASE("normal moments match N(0,1)", "[rng]") {
  KeyedStream s{99, 5};
  const int n = 200000;
  double sum = 0.0, sumsq = 0.0, sumcube = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = s.normal();
    sum += z;
    sumsq += z * z;
    sumcube += z * z * z;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  // 3 sigma bands: sd(mean) ~ 1/sqrt(n), sd(var) ~ sqrt(2/n), sd(m3) ~ sqrt(15/n).
  REQUIRE(std::abs(mean) < 3.0 / std::sqrt(static_cast<double>(n)));
  REQUIRE(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / n));
  REQUIRE(std::abs(sumcube / n) < 3.0 * std::sqrt(15.0 / n));
}

TEST_CASE("scaled normal has requested variance", "[rng]") {
  KeyedStream s{11, 3};
  const int n = 100000;
  double sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = s.normal(0.25);
    sumsq += z * z;
  }
  REQUIRE(sumsq / n == Catch::Approx(0.25).margin(3.0 * 0.25 * std::sqrt(2.0 / n)));
}
