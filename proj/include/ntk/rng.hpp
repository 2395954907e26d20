#pragma once

// Counter-based Gaussian draws keyed by (seed, stream, index): any entry can
// be generated independently of evaluation order.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace ntk {

// SplitMix64 finalizer.
inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t stream,
                                            std::uint64_t counter) {
  return mix64(mix64(mix64(seed) ^ stream) ^ counter);
}

inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  return mix64(seed ^ mix64(salt + 0x632be59bd9b4e019ULL));
}

// Uniform on (0, 1].
inline double to_unit_interval(std::uint64_t bits) {
  return static_cast<double>((bits >> 11) + 1) * 0x1.0p-53;
}

// Standard normal number `index` of a stream (Box-Muller over hashed pairs).
inline double counter_normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  const std::uint64_t pair = index >> 1;
  const double u1 = to_unit_interval(counter_hash(seed, stream, 2 * pair));
  const double u2 = to_unit_interval(counter_hash(seed, stream, 2 * pair + 1));
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  return (index & 1) ? r * std::sin(angle) : r * std::cos(angle);
}

// out[k] = stddev * counter_normal(seed, stream, k); identical values to
// per-index calls, but each Box-Muller pair is computed once.
inline void fill_normal(std::span<double> out, std::uint64_t seed, std::uint64_t stream,
                        double stddev) {
  const std::size_t n = out.size();
  for (std::size_t k = 0; k + 1 < n; k += 2) {
    const double u1 = to_unit_interval(counter_hash(seed, stream, k));
    const double u2 = to_unit_interval(counter_hash(seed, stream, k + 1));
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    out[k] = stddev * (r * std::cos(angle));
    out[k + 1] = stddev * (r * std::sin(angle));
  }
  if (n % 2 == 1) out[n - 1] = stddev * counter_normal(seed, stream, n - 1);
}

}  // namespace ntk
