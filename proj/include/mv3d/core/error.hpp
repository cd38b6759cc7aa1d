#pragma once

#include <stdexcept>
#include <string>

namespace mv3d {

// Caller broke a documented precondition (shape mismatch, bad argument).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A NaN or Inf appeared in a computed value.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Geometry that admits no unique answer (collinear points, empty overlap).
class DegenerateConfiguration : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MV3D_REQUIRE(cond, msg)                                  \
  do {                                                           \
    if (!(cond)) throw ::mv3d::ContractViolation(std::string(msg)); \
  } while (0)

}  // namespace mv3d
