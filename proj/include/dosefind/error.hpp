#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dosefind {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Root-finding bracket does not straddle the target.
class BracketError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// A design was asked to act on a state it does not define (wrong cohort
// size, inconsistent carry, empty table, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

class HorizonError : public Error {
 public:
  using Error::Error;
};

// Configuration problems carry the offending dotted field names so that
// the CLI and the HTTP layer can report them.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& message, std::vector<std::string> fields = {})
      : Error(message), fields_(std::move(fields)) {}

  const std::vector<std::string>& fields() const noexcept { return fields_; }

 private:
  std::vector<std::string> fields_;
};

}  // namespace dosefind
