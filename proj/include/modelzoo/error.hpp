#pragma once

#include <stdexcept>
#include <string>

namespace modelzoo {

// Base class for every error raised by the library. The `context` string names
// the module and operation so the CLI can print a machine-readable line.
class Error : public std::runtime_error {
 public:
  Error(std::string context, const std::string& what)
      : std::runtime_error(context + ": " + what), context_(std::move(context)) {}
  const std::string& context() const { return context_; }

 private:
  std::string context_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Moment vector outside the achievable hull, separable classes, and similar
// problems where the optimum lies at infinity.
class InfeasibleError : public Error {
 public:
  InfeasibleError(std::string context, const std::string& what, std::size_t coordinate)
      : Error(std::move(context), what), coordinate_(coordinate) {}
  std::size_t coordinate() const { return coordinate_; }

 private:
  std::size_t coordinate_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class SizeError : public Error {
 public:
  using Error::Error;
};

}  // namespace modelzoo
