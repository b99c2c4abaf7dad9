#pragma once

#include <stdexcept>
#include <string>

namespace safnet {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes or metadata disagree with an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Exposure time was zero, negative or not finite.
class InvalidExposure : public Error {
 public:
  using Error::Error;
};

// Input values violate an operation's documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace safnet
