#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace negcut {

// Error taxonomy. Callers that reach the CLI boundary map these onto
// process exit codes (see cli.hpp).

/// Caller passed arguments violating a documented precondition.
struct invalid_input : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Input is structurally valid but numerically degenerate (e.g. a
/// near-zero vector fed to a normalizer). Surfaced, never clamped.
struct degenerate_input : std::domain_error {
  using std::domain_error::domain_error;
};

/// A numerical routine left its validity envelope (e.g. an eigenvalue
/// far below zero where a PSD matrix was required).
struct numerical_failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// An internal consistency check failed; indicates a bug, not bad input.
struct internal_invariant : std::logic_error {
  using std::logic_error::logic_error;
};

/// Filesystem / serialization problem, annotated with the offending path.
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw invalid_input(msg);
}

inline void check_invariant(bool cond, const std::string& msg) {
  if (!cond) throw internal_invariant(msg);
}

inline bool finite(double v) { return std::isfinite(v); }

}  // namespace negcut
