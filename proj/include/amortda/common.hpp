#pragma once

#include <stdexcept>
#include <string>

namespace amortda {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when an integration leaves the attractor region (any |x_i| > guard).
class BlowupError : public Error {
 public:
  BlowupError(const std::string& msg, long step)
      : Error(msg + " (step " + std::to_string(step) + ")"), step(step) {}
  long step;
};

}  // namespace amortda
