#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace vocap {

// Exit codes of the CLI. Library errors carry the code they map to.
enum class ErrorCode : int {
  ok = 0,
  config = 2,
  data = 3,
  numeric = 4,
  internal = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

#define VOCAP_DEFINE_ERROR(NAME, CODE)                                     \
  struct NAME : Error {                                                    \
    explicit NAME(const std::string& msg)                                  \
        : Error(ErrorCode::CODE, std::string(#NAME) + ": " + msg) {}       \
  }

VOCAP_DEFINE_ERROR(ShapeMismatch, data);
VOCAP_DEFINE_ERROR(DegenerateBox, data);
VOCAP_DEFINE_ERROR(EmptyText, data);
VOCAP_DEFINE_ERROR(TextTooLong, data);
VOCAP_DEFINE_ERROR(MalformedRLE, data);
VOCAP_DEFINE_ERROR(IndivisibleShape, data);
VOCAP_DEFINE_ERROR(RouteMismatch, data);
VOCAP_DEFINE_ERROR(EmptyDataset, data);
VOCAP_DEFINE_ERROR(UnsatisfiableUniqueness, data);
VOCAP_DEFINE_ERROR(MissingReference, data);
VOCAP_DEFINE_ERROR(LengthMismatch, data);
VOCAP_DEFINE_ERROR(DataError, data);
VOCAP_DEFINE_ERROR(ConfigError, config);
VOCAP_DEFINE_ERROR(NonFiniteLoss, numeric);
VOCAP_DEFINE_ERROR(InternalError, internal);

#undef VOCAP_DEFINE_ERROR

/// FNV-1a 64-bit hash; used for config hashes and per-parameter seeds.
inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  a ^= b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2);
  return a;
}

}  // namespace vocap
