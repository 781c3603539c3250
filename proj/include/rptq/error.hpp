#pragma once

#include <stdexcept>
#include <string>

namespace rptq {

// Bad input: malformed files, inconsistent shapes, violated preconditions.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical or environmental failure while executing a valid request.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rptq
