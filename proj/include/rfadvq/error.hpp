#pragma once

#include <stdexcept>
#include <string>

namespace rfadvq {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class UnsupportedScheme : public Error {
 public:
  using Error::Error;
};

// Input for which a normalization or ratio is undefined (all-zero window,
// zero stochastic baseline).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class UnsupportedVersion : public FormatError {
 public:
  using FormatError::FormatError;
};

class TrainingFailed : public Error {
 public:
  TrainingFailed(const std::string& what, double final_accuracy)
      : Error(what), final_accuracy_(final_accuracy) {}
  double final_accuracy() const noexcept { return final_accuracy_; }

 private:
  double final_accuracy_;
};

class StageFailed : public Error {
 public:
  StageFailed(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace rfadvq
