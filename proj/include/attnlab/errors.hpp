#pragma once

#include <stdexcept>
#include <string>

namespace attnlab {

// Error taxonomy. Everything derives from Error so callers can catch the
// whole family; the subclasses exist so tests can assert on the category.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes (messages name the offending shapes).
struct ShapeError : Error {
  using Error::Error;
};

// Out-of-range index (token ids, target classes).
struct IndexError : Error {
  using Error::Error;
};

// Invalid parameter value (probabilities, extents).
struct ValueError : Error {
  using Error::Error;
};

// NaN/Inf produced by a forward op on finite inputs, or a non-finite loss.
struct NumericError : Error {
  using Error::Error;
};

// File/stream failures.
struct IoError : Error {
  using Error::Error;
};

}  // namespace attnlab
