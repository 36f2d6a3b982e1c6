#pragma once

#include <stdexcept>
#include <string>

namespace kqr {

// Base class for all library errors.
struct kqr_error : std::runtime_error {
  explicit kqr_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad arguments, dimension mismatches, parse failures, violated preconditions.
struct input_error : kqr_error {
  explicit input_error(const std::string& msg) : kqr_error(msg) {}
};

// Degenerate kernels, factorization/eigensolver failures, non-finite iterates.
struct numerical_error : kqr_error {
  explicit numerical_error(const std::string& msg) : kqr_error(msg) {}
};

// An MM step increased the smoothed objective beyond tolerance; indicates a
// formula bug, never expected on valid inputs.
struct majorization_error : numerical_error {
  explicit majorization_error(const std::string& msg) : numerical_error(msg) {}
};

}  // namespace kqr
