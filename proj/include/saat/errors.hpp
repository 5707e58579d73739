#pragma once

#include <stdexcept>
#include <string>

namespace saat {

class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents do not satisfy an operation's contract.
class InvalidShape : public Error {
   public:
    using Error::Error;
};

/// Hyperparameters or configuration values that cannot be realized.
class InvalidConfig : public Error {
   public:
    using Error::Error;
};

/// API misuse, e.g. backward() on a non-scalar.
class ContractViolation : public Error {
   public:
    using Error::Error;
};

class CorruptCheckpoint : public Error {
   public:
    using Error::Error;
};

/// A checkpoint parameter disagrees with the model it is loaded into.
class ShapeMismatch : public Error {
   public:
    using Error::Error;
};

class IoError : public Error {
   public:
    using Error::Error;
};

class NonFiniteLoss : public Error {
   public:
    using Error::Error;
};

}  // namespace saat
