#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace coloop {

// Error taxonomy shared by every module. Parse failures of designer output are
// not exceptions (see action.hpp); everything else that violates a contract
// throws one of these.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class UndefinedInputError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  LoadError(std::string file, std::size_t line, const std::string& what)
      : Error(file + ":" + std::to_string(line) + ": " + what),
        file_(std::move(file)),
        line_(line) {}

  const std::string& file() const { return file_; }
  std::size_t line() const { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

/// A client-side failure that survived every retry.
class ServiceError : public Error {
 public:
  using Error::Error;
};

/// ceil(fraction * n) with a guard against binary-fraction overshoot, so that
/// 0.3 * 10 keeps 3 rather than 4.
inline std::size_t ceil_count(double fraction, std::size_t n) {
  const double raw = fraction * static_cast<double>(n);
  const double guarded = std::ceil(raw - 1e-9);
  if (guarded <= 0.0) return 0;
  return static_cast<std::size_t>(guarded);
}

/// Lowercase hex SHA-256 of the given bytes.
std::string sha256_hex(std::string_view bytes);

/// 64-bit FNV-1a; stable across platforms, used for seeding and splits.
constexpr std::uint64_t fnv1a64(std::string_view s,
                                std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// SplitMix64 step; used to derive independent seeds from (seed, key) pairs.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view key) {
  return splitmix64(seed ^ fnv1a64(key));
}

/// Uniform double in [0,1) from 53 random bits; independent of the standard
/// library's distribution implementations so runs are reproducible everywhere.
template <class Engine>
double unit_uniform(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

template <class Engine>
double normal_sample(Engine& eng) {
  // Box-Muller; one draw per call keeps the stream position easy to reason about.
  double u1 = unit_uniform(eng);
  const double u2 = unit_uniform(eng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace coloop
