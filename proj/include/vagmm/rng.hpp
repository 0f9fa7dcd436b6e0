#pragma once

/**
 * \file rng.hpp
 * \brief Counter-based random number streams for reproducible parallel
 *        simulation.
 *
 * Every random quantity in the Monte Carlo harness is drawn from a stream
 * keyed by the tuple that identifies it (seed, replication, teacher, year,
 * student, variable tag). Streams are derived by hashing the key with a
 * splitmix64-style finalizer, so the value of any draw is independent of the
 * order in which other draws happen. This makes simulated data bit-identical
 * under any parallelism degree and lets replication k be generated without
 * touching replications 0..k-1.
 */

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace vagmm {

/** Tags separating the variables drawn for one simulated entity. */
enum class Draw : std::uint64_t {
  mu = 1,         ///< teacher quality innovation
  x_noise = 2,    ///< student-level component of the covariate
  eps = 3,        ///< test-score shock
  eps_scale = 4,  ///< U[0,2] multiplier on eps
  eta = 5,        ///< outcome shock
  eta_scale = 6,  ///< U[0,2] multiplier on eta
  kappa_i = 7,    ///< heterogeneous per-student effect
  dvar = 8,       ///< teacher-year explanatory variable
  generic = 9     ///< scratch streams (tests, fixtures)
};

namespace detail {

/** Finalizer of the splitmix64 generator (Stafford mix13). */
inline constexpr std::uint64_t splitmix64_fin(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/** hash_combine-style absorption of one key field. */
inline constexpr std::uint64_t absorb(std::uint64_t h, std::uint64_t v) {
  return splitmix64_fin(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
}

}  // namespace detail

/**
 * A small deterministic stream addressed by an arbitrary key tuple.
 *
 * Internally a splitmix64 sequence whose starting state is the hash of the
 * key fields. Each stream is cheap to construct; the intended pattern is one
 * stream per (entity, replication) drawing that entity's handful of
 * variables in a fixed order.
 */
class KeyedStream {
 public:
  explicit KeyedStream(std::initializer_list<std::uint64_t> key) {
    std::uint64_t h = 0x5851f42d4c957f2dULL;  // arbitrary non-zero basis
    for (std::uint64_t v : key) h = detail::absorb(h, v);
    state_ = h;
  }

  /** Next raw 64-bit value (splitmix64 step). */
  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return detail::splitmix64_fin(state_);
  }

  /** Uniform on [0,1) with 53-bit resolution. */
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /** Uniform on [0,b). */
  double uniform(double b) { return b * uniform(); }

  /** Standard normal via the Marsaglia polar method (pairs cached). */
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    have_spare_ = true;
    return u * f;
  }

  /** N(0, variance) draw. */
  double normal(double variance) { return std::sqrt(variance) * normal(); }

 private:
  std::uint64_t state_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace vagmm
