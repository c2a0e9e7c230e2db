#pragma once

#include <stdexcept>
#include <string>

namespace cais {

// Malformed CVT1/PFM payloads. Messages carry the byte offset of the fault.
class format_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class shape_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class config_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class range_error : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// NaN/Inf in a result, counter overflow, divergence.
class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cais
