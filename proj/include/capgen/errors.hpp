#pragma once

#include <stdexcept>
#include <string>

namespace capgen {

// Root of every error the library throws. Each subclass names the failing
// contract so callers can react without parsing messages.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Token index outside [0, v).
class VocabularyError : public Error {
 public:
  VocabularyError(const std::string& what, long long index)
      : Error(what), index_(index) {}
  long long index() const noexcept { return index_; }

 private:
  long long index_;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class FileError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, int epoch, long long batch)
      : NumericError(what), epoch_(epoch), batch_(batch) {}
  int epoch() const noexcept { return epoch_; }
  long long batch() const noexcept { return batch_; }

 private:
  int epoch_;
  long long batch_;
};

}  // namespace capgen
