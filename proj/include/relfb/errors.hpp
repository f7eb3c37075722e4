#pragma once

#include <stdexcept>
#include <string>

namespace relfb {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class UnsupportedFormat : public Error {
 public:
  using Error::Error;
};

class InsufficientSamples : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared in a forward or backward computation.
class NumericalError : public Error {
 public:
  NumericalError(std::string op, const std::string& what)
      : Error(op + ": " + what), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

class EmptySplit : public Error {
 public:
  using Error::Error;
};

class EmptyInput : public Error {
 public:
  using Error::Error;
};

class NotApplicable : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Class name of an error, for structured reports.
inline const char* error_kind(const Error& e) {
#define RELFB_KIND(T) \
  if (dynamic_cast<const T*>(&e)) return #T;
  RELFB_KIND(FormatError)
  RELFB_KIND(UnsupportedFormat)
  RELFB_KIND(InsufficientSamples)
  RELFB_KIND(ShapeError)
  RELFB_KIND(NumericalError)
  RELFB_KIND(ConfigError)
  RELFB_KIND(TrainingDiverged)
  RELFB_KIND(EmptySplit)
  RELFB_KIND(EmptyInput)
  RELFB_KIND(NotApplicable)
  RELFB_KIND(IoError)
#undef RELFB_KIND
  return "Error";
}

}  // namespace relfb
