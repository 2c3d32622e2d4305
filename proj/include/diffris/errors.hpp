#pragma once

#include <stdexcept>
#include <string>

namespace diffris {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor dimensions disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A hyperparameter or config value lies outside its valid range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Caller misuse: empty inputs, bad arguments, unknown config keys.
class UsageError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A frozen parameter was modified.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace diffris
