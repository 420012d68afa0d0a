#pragma once

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bsdehedge {

// Base class for everything this library throws.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid user-supplied configuration (bad schema, contradictory or
// out-of-domain parameters).  The CLI maps these to exit code 2.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Numerical failure while executing an otherwise valid request
// (non-finite losses, singular systems, empty samples).  Exit code 3.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// A symmetric matrix handed in as a correlation/covariance factor target
// has a non-positive pivot and admits no real Cholesky factor.
struct NotPositiveDefinite : ConfigError {
  explicit NotPositiveDefinite(const std::string& msg) : ConfigError(msg) {}
};

// The diffusion matrix cannot be inverted at the requested state.
struct SingularDiffusion : NumericError {
  explicit SingularDiffusion(const std::string& msg) : NumericError(msg) {}
};

// Dimensions of the operands do not line up.
struct ShapeMismatch : Error {
  explicit ShapeMismatch(const std::string& msg) : Error(msg) {}
};

// Scalar argument outside the mathematical domain of the function.
struct DomainError : ConfigError {
  explicit DomainError(const std::string& msg) : ConfigError(msg) {}
};

// An exchange-option quote was requested with (numerically) zero relative
// volatility between the two legs, so the quote would be degenerate.
struct DegenerateSpread : ConfigError {
  explicit DegenerateSpread(const std::string& msg) : ConfigError(msg) {}
};

// An iterative solver hit its iteration cap before meeting its tolerance.
struct NoConvergence : NumericError {
  explicit NoConvergence(const std::string& msg) : NumericError(msg) {}
};

// A hedging instrument could not be priced at a requested date/state.
struct MissingQuote : NumericError {
  explicit MissingQuote(const std::string& msg) : NumericError(msg) {}
};

// Profit-and-loss normalisation was requested against a zero price.
struct ZeroNormalizer : NumericError {
  explicit ZeroNormalizer(const std::string& msg) : NumericError(msg) {}
};

// Too few samples to compute the requested statistic.
struct InsufficientSample : NumericError {
  explicit InsufficientSample(const std::string& msg) : NumericError(msg) {}
};

// Sample is constant (or otherwise degenerate) where spread is required.
struct DegenerateSample : NumericError {
  explicit DegenerateSample(const std::string& msg) : NumericError(msg) {}
};

// A consolidation step found no report files to consolidate.
struct NoReports : ConfigError {
  explicit NoReports(const std::string& msg) : ConfigError(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic, locale-independent number formatting for report files.
// Shortest round-trip representation via std::to_chars.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_int(long long v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// 64-bit mixing used to derive independent random-number streams from a
// user seed plus integer purpose tags.  The finaliser is the SplitMix64
// output function, which is a bijection on 64-bit words.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Fold an ordered list of tags into a seed; order-sensitive by design.
inline std::uint64_t derive_stream(std::uint64_t seed,
                                   std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = mix64(seed);
  for (std::uint64_t t : tags) h = mix64(h ^ t);
  return h;
}

// FNV-1a over bytes; used to fingerprint canonical configuration text.
inline std::uint64_t fnv1a(const std::string& data) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace bsdehedge
