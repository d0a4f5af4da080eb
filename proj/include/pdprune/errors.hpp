#pragma once

#include <stdexcept>
#include <string>

namespace pdprune {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
  using Error::Error;
};
struct ArgumentError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct DivergenceError : NumericError {
  using NumericError::NumericError;
};
struct DegenerateInputError : Error {
  using Error::Error;
};
struct EmptyModelError : Error {
  using Error::Error;
};
struct InfeasibilityError : Error {
  using Error::Error;
};
struct TooLargeError : Error {
  using Error::Error;
};
struct ConsistencyError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

// Wire-level decode failures carry a distinct code so callers can tell a bad
// magic from a checksum failure or a truncated stream.
enum class WireFault {
  BadMagic,
  UnsupportedVersion,
  CrcMismatch,
  Truncated,
  ShapeMismatch,
};

struct WireError : Error {
  WireFault fault;
  WireError(WireFault f, const std::string& msg) : Error(msg), fault(f) {}
};

}  // namespace pdprune
