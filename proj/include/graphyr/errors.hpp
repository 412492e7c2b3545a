#pragma once

#include <stdexcept>
#include <string>

namespace graphyr {

/// Malformed input text (grid file, dataset CSV, checkpoint, config).
class ParseError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Well-formed input that violates a model invariant.
class ValidationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// No feasible point exists (radial topology, QP box constraints).
class InfeasibleError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss, or an iterative solver ran out of budget.
class DivergenceError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace graphyr
