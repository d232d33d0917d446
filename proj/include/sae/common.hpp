#pragma once
// Shared error types, scalar transforms and number formatting.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sae {

/// Malformed or inconsistent input (files, configs, cell tables).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A factorization or evaluation that could not be completed.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double inv_logit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double value);

/// Parses a full string as a double; throws InputError naming `what` otherwise.
double parse_double(std::string_view text, std::string_view what);
long long parse_int(std::string_view text, std::string_view what);

/// 64-bit FNV-1a; stable across platforms, used for config hashes.
std::uint64_t fnv1a64(std::string_view bytes);

/// Derives an independent child seed (splitmix64 finalizer over master and stream).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

std::string to_hex(std::uint64_t value);

}  // namespace sae
