#pragma once

#include <stdexcept>
#include <string>

namespace pluralfill {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Array shapes that do not satisfy an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN/Inf, or a value fell outside its domain.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Missing checkpoint, file or model.
class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// A training stage hit a non-finite loss. The last good checkpoint is
/// left on disk at checkpoint_path().
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::string checkpoint_path)
      : Error(what), checkpoint_path_(std::move(checkpoint_path)) {}
  const std::string& checkpoint_path() const noexcept { return checkpoint_path_; }

 private:
  std::string checkpoint_path_;
};

}  // namespace pluralfill
