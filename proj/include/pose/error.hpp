#pragma once

#include <stdexcept>
#include <string>

namespace pose {

// Base of every error raised by the library. Callers that only care about
// "something went wrong" catch this; tests match on the concrete kind.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  explicit InvalidInput(const std::string& what) : Error("invalid input: " + what) {}
};

class InvalidParameter : public Error {
 public:
  explicit InvalidParameter(const std::string& what) : Error("invalid parameter: " + what) {}
};

class InvalidLabel : public Error {
 public:
  explicit InvalidLabel(const std::string& what) : Error("invalid label: " + what) {}
};

class DegenerateSpectrum : public Error {
 public:
  explicit DegenerateSpectrum(const std::string& what) : Error("degenerate spectrum: " + what) {}
};

class DegenerateReference : public Error {
 public:
  explicit DegenerateReference(const std::string& what) : Error("degenerate reference: " + what) {}
};

class UndefinedMetric : public Error {
 public:
  explicit UndefinedMetric(const std::string& what) : Error("undefined metric: " + what) {}
};

class UndefinedCosine : public Error {
 public:
  explicit UndefinedCosine(const std::string& what) : Error("undefined cosine: " + what) {}
};

class DatasetError : public Error {
 public:
  explicit DatasetError(const std::string& what) : Error("dataset error: " + what) {}
};

class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, int step, const std::string& what)
      : Error("divergence at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
              ": " + what),
        epoch_(epoch),
        step_(step) {}
  int epoch() const noexcept { return epoch_; }
  int step() const noexcept { return step_; }

 private:
  int epoch_;
  int step_;
};

class InvalidSpec : public Error {
 public:
  explicit InvalidSpec(const std::string& what) : Error("invalid benchmark spec: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io error: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

}  // namespace pose
