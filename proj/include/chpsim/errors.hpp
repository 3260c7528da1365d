#pragma once

#include <stdexcept>
#include <string>

namespace chpsim {

/// Invalid model data: bad topology, nonpositive physical constants,
/// schema violations in scenario files.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure: singular systems, diverging integrations,
/// non-settling blocks, NaN/Inf states.
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem failure while reading scenarios or writing results.
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace chpsim
