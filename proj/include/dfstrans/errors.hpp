#pragma once

#include <stdexcept>
#include <string>

namespace dfstrans {

// Each category maps to a distinct process exit code in the CLI.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class IngestionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 5; }
};

class DimensionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 6; }
};

class ContractError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 7; }
};

class RangeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class LookupError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 8; }
};

class TrainingError : public NumericError {
 public:
  TrainingError(const std::string& what, int epoch)
      : NumericError(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace dfstrans
