#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>

namespace asea {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Sequence too short for a temporal operation.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// Violated precondition between cooperating components.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or option value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input text (carries file and line in the message).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Invalid data content, e.g. out-of-range labels.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Corrupt or inconsistent checkpoint.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or failed numeric verification.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Warnings go through a replaceable sink so tests can capture them.
using WarningSink = std::function<void(const std::string&)>;

inline WarningSink& warning_sink() {
  static WarningSink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

inline void warn(const std::string& msg) { warning_sink()(msg); }

}  // namespace asea
