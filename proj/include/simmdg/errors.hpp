#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace simmdg {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside the mathematical domain of an operation (e.g. log of 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint could not be read back (bad magic, version, fingerprint, truncation).
class LoadError : public Error {
 public:
  using Error::Error;
};

/// A requested discrete joint distribution cannot be built.
class ConstructionError : public Error {
 public:
  using Error::Error;
};

/// An exhaustive analysis was asked to run on an input that is too large.
class SizeError : public Error {
 public:
  using Error::Error;
};

/// Optimization hit a non-finite loss or gradient.
class TrainingError : public Error {
 public:
  using Error::Error;
};

namespace log {

using Sink = std::function<void(std::string_view)>;

namespace detail {
inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}
inline Sink& sink() {
  static Sink s;
  return s;
}
}  // namespace detail

/// Installs a warning sink and returns the previous one. An empty sink sends
/// warnings to stderr.
inline Sink set_warning_sink(Sink sink) {
  std::lock_guard lock(detail::sink_mutex());
  return std::exchange(detail::sink(), std::move(sink));
}

inline void warn(std::string_view message) {
  std::lock_guard lock(detail::sink_mutex());
  if (detail::sink()) {
    detail::sink()(message);
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

}  // namespace log
}  // namespace simmdg
