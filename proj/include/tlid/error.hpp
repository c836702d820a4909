#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tlid {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class DegenerateInputError : public Error { using Error::Error; };
class LabelError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class TooShortError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class ShapeMismatchError : public Error { using Error::Error; };

class DecodeError : public Error {
 public:
  DecodeError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ManifestError : public Error {
 public:
  ManifestError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Raised when a gradient or parameter becomes non-finite during training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& param)
      : Error("non-finite gradient in parameter '" + param + "'"), param_(param) {}
  const std::string& parameter() const noexcept { return param_; }

 private:
  std::string param_;
};

}  // namespace tlid
